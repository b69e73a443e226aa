"""Command-line surface: explain images, run evaluations, dump traces."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import container, evaluate, imageio
from . import tensor_ops as T
from .errors import InputError, VitexplainError
from .explain import ExplainerConfig, METHODS, explain_tokens, necc, transformation_weights
from .grads import attention_gradients
from .model import MHSA, forward, normalize_image, residual_error, tokenize

DTYPES = {"f32": T.REAL32, "f64": T.REAL64}


@dataclass
class RunManifest:
    command: str
    model: str
    config: str
    method: str
    use_af: bool
    use_length: bool
    use_necc: bool
    depth_limit: int | None
    inputs: list[str]
    out: str
    seed: int
    dtype: str
    class_spec: str = "predicted"
    target: str = "predicted"
    fill: str = "mean"
    fractions: list[float] | None = None
    order: str = "positive"
    threads: int = 1

    def write(self, out_dir: Path) -> None:
        with open(out_dir / "run.json", "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, sort_keys=True, indent=2)
            f.write("\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="weight container file")
    p.add_argument("--config", required=True, help="companion config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)


def _add_method(p: argparse.ArgumentParser, multi: bool = False) -> None:
    if multi:
        p.add_argument("--method", default="tokentm",
                       help="comma-separated subset of " + "|".join(METHODS))
    else:
        p.add_argument("--method", choices=METHODS, default="tokentm")
    p.add_argument("--no-af", action="store_true", help="disable cross-layer aggregation")
    p.add_argument("--no-length", action="store_true", help="disable length ratios")
    p.add_argument("--no-necc", action="store_true", help="disable NECC factors")
    p.add_argument("--depth-limit", type=int, default=None)


def _explainer_config(args, method: str) -> ExplainerConfig:
    return ExplainerConfig(
        method=method,
        use_af=not args.no_af,
        use_length=not args.no_length,
        use_necc=not args.no_necc,
        depth_limit=args.depth_limit,
    )


def _manifest(args, command: str, inputs: list[str]) -> RunManifest:
    return RunManifest(
        command=command,
        model=args.model,
        config=args.config,
        method=args.method,
        use_af=not args.no_af,
        use_length=not args.no_length,
        use_necc=not args.no_necc,
        depth_limit=args.depth_limit,
        inputs=inputs,
        out=args.out,
        seed=args.seed,
        dtype=args.dtype,
        class_spec=getattr(args, "class_spec", "predicted"),
        target=getattr(args, "target", "predicted"),
        fill=getattr(args, "fill", "mean"),
        fractions=list(getattr(args, "fractions_parsed", []) or []) or None,
        order=getattr(args, "order", "positive"),
        threads=args.threads,
    )


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(out: Path, report: evaluate.EvalReport) -> None:
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, sort_keys=True, indent=2)
        f.write("\n")


def _class_index(spec: str) -> int | None:
    if spec == "predicted":
        return None
    try:
        return int(spec)
    except ValueError:
        raise InputError(f"--class must be 'predicted' or an integer, got {spec!r}") from None


def cmd_explain(args) -> int:
    bundle = container.load_bundle(args.model, args.config)
    out = _prepare_out(args)
    image = imageio.read_image(args.image)
    cfg = _explainer_config(args, args.method)
    tokens = tokenize(
        bundle,
        normalize_image(image, bundle.norm_mean, bundle.norm_std),
        dtype=DTYPES[args.dtype],
    )
    outcome = explain_tokens(
        bundle, tokens, _class_index(args.class_spec), cfg, dtype=DTYPES[args.dtype]
    )
    heat = outcome.heatmap
    imageio.write_pgm16(out / "heatmap.pgm", heat)
    with open(out / "heatmap.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "grid": heat.shape[0],
                "class_index": outcome.class_index,
                "values": [[float(v) for v in row] for row in heat],
            },
            f,
            sort_keys=True,
            indent=2,
        )
        f.write("\n")
    up = evaluate.upsample(heat, image.shape[0], image.shape[1])
    imageio.write_ppm(out / "overlay.ppm", imageio.overlay(image, up))
    _manifest(args, "explain", [args.image]).write(out)
    return 0


def cmd_eval_perturb(args) -> int:
    bundle = container.load_bundle(args.model, args.config)
    out = _prepare_out(args)
    records = evaluate.load_manifest(args.manifest, imageio.read_image, imageio.read_mask)
    spec = evaluate.PerturbSpec(
        fractions=tuple(args.fractions_parsed),
        order=args.order,
        target="ground_truth" if args.target == "gt" else "predicted",
        fill="dataset_mean" if args.fill == "mean" else "zero",
    )
    methods = {m: _explainer_config(args, m) for m in args.methods_parsed}
    report = evaluate.run_perturbation_eval(
        bundle, records, methods, spec,
        dtype=DTYPES[args.dtype], threads=args.threads, seed=args.seed,
    )
    _write_report(out, report)
    _manifest(args, "eval-perturb", [args.manifest]).write(out)
    return 0


def cmd_eval_seg(args) -> int:
    bundle = container.load_bundle(args.model, args.config)
    out = _prepare_out(args)
    records = evaluate.load_manifest(args.manifest, imageio.read_image, imageio.read_mask)
    methods = {m: _explainer_config(args, m) for m in args.methods_parsed}
    report = evaluate.run_segmentation_eval(
        bundle, records, methods, dtype=DTYPES[args.dtype], threads=args.threads
    )
    _write_report(out, report)
    _manifest(args, "eval-seg", [args.manifest]).write(out)
    return 0


def cmd_trace_dump(args) -> int:
    bundle = container.load_bundle(args.model, args.config)
    out = _prepare_out(args)
    image = imageio.read_image(args.image)
    tokens = tokenize(
        bundle,
        normalize_image(image, bundle.norm_mean, bundle.norm_std),
        dtype=DTYPES[args.dtype],
    )
    fr = forward(bundle, tokens, dtype=DTYPES[args.dtype])
    class_c = int(np.argmax(fr.probs))
    grads = attention_gradients(bundle, fr.traces, class_c, tokens_in=tokens)

    tensors: dict[str, np.ndarray] = {}
    layers = []
    mhsa_idx = 0
    for i, tr in enumerate(fr.traces):
        entry: dict = {"index": i, "kind": tr.kind, "residual_error": residual_error(tr)}
        if tr.kind == MHSA:
            g = grads.for_mhsa_index(mhsa_idx)
            mhsa_idx += 1
            heads = []
            for h in range(tr.attn.shape[0]):
                tensors[f"layer.{i}.head.{h}.attn"] = tr.attn[h]
                tensors[f"layer.{i}.head.{h}.grad_attn"] = g[h]
                tw = transformation_weights(tr.e_ref, tr.e_tilde_heads[h])
                heads.append(
                    {
                        "necc": [float(v) for v in tw.necc],
                        "w_diag": [float(v) for v in tw.w],
                    }
                )
            entry["heads"] = heads
        else:
            tw = transformation_weights(tr.e_ref, tr.e_tilde)
            entry["necc"] = [float(v) for v in tw.necc]
            entry["w_diag"] = [float(v) for v in tw.w]
        layers.append(entry)
    container.write_container(out / "traces.bin", tensors)
    with open(out / "trace.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                "predicted_class": class_c,
                "target_prob": grads.target_prob,
                "logits": [float(v) for v in fr.logits],
                "probs": [float(v) for v in fr.probs],
                "tokens": [[float(v) for v in row] for row in tokens],
                "layers": layers,
            },
            f,
            sort_keys=True,
            indent=2,
        )
        f.write("\n")
    _manifest(args, "trace-dump", [args.image]).write(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitexplain",
        description="ViT inference and token-contribution explanation engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="explain a single image")
    _add_common(p)
    _add_method(p)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_spec", default="predicted",
                   help="'predicted' or a class index")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval-perturb", help="positive/negative perturbation tests")
    _add_common(p)
    _add_method(p, multi=True)
    p.add_argument("--manifest", required=True, help="JSON-lines dataset manifest")
    p.add_argument("--target", choices=("predicted", "gt"), default="predicted")
    p.add_argument("--fill", choices=("mean", "zero"), default="mean")
    p.add_argument("--fractions", default=None, help="CSV of fractions in [0,1]")
    p.add_argument("--order", choices=("positive", "negative"), default="positive")
    p.set_defaults(func=cmd_eval_perturb)

    p = sub.add_parser("eval-seg", help="segmentation scoring against masks")
    _add_common(p)
    _add_method(p, multi=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("trace-dump", help="dump per-layer attention/gradient/weights")
    _add_common(p)
    _add_method(p)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_trace_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "fractions"):
        if args.fractions:
            args.fractions_parsed = [float(x) for x in args.fractions.split(",")]
        else:
            args.fractions_parsed = list(evaluate.DEFAULT_FRACTIONS)
    if hasattr(args, "method") and args.command in ("eval-perturb", "eval-seg"):
        args.methods_parsed = [m.strip() for m in args.method.split(",") if m.strip()]
        unknown = [m for m in args.methods_parsed if m not in METHODS]
        if unknown:
            print(f"error: unknown method(s) {unknown}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except VitexplainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
