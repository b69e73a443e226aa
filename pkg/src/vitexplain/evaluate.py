"""Faithfulness evaluation: perturbation curves (AUC, AOPC, LOdds) and
segmentation scoring against ground-truth masks."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_ops as T
from .errors import InputError
from .explain import ExplainerConfig, explain_tokens
from .model import ModelBundle, forward, normalize_image, tokenize

DEFAULT_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class PerturbSpec:
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    order: str = "positive"
    target: str = "predicted"
    fill: str = "dataset_mean"

    def __post_init__(self):
        fr = self.fractions
        if len(fr) == 0 or any(f < 0 or f > 1 for f in fr):
            raise InputError("fractions must lie in [0, 1]")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise InputError("fractions must be strictly increasing")
        if self.order not in ("positive", "negative"):
            raise InputError(f"unknown order {self.order!r}")
        if self.target not in ("predicted", "ground_truth"):
            raise InputError(f"unknown target {self.target!r}")
        if self.fill not in ("dataset_mean", "zero"):
            raise InputError(f"unknown fill {self.fill!r}")


def upsample(heatmap: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear grid -> pixel interpolation.

    Pixel centers are mapped into patch-center coordinates ((y + 0.5) * g / H
    - 0.5) and clamped at the borders, so corner pixels take the corner patch
    values and a constant grid stays constant.
    """
    heatmap = np.asarray(heatmap, dtype=T.REAL64)
    gh, gw = heatmap.shape

    def axis_coords(size, grid):
        c = (np.arange(size) + 0.5) * grid / size - 0.5
        c = np.clip(c, 0.0, grid - 1.0)
        lo = np.floor(c).astype(int)
        lo = np.minimum(lo, grid - 1)
        hi = np.minimum(lo + 1, grid - 1)
        return lo, hi, c - lo

    y0, y1, wy = axis_coords(height, gh)
    x0, x1, wx = axis_coords(width, gw)
    top = heatmap[np.ix_(y0, x0)] * (1 - wx) + heatmap[np.ix_(y0, x1)] * wx
    bot = heatmap[np.ix_(y1, x0)] * (1 - wx) + heatmap[np.ix_(y1, x1)] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def relevance_ranking(relevance: np.ndarray) -> np.ndarray:
    """Pixel indices most-relevant first; ties broken by row-major position."""
    flat = np.asarray(relevance).reshape(-1)
    return np.argsort(-flat, kind="stable")


def perturb_image(
    image: np.ndarray,
    relevance: np.ndarray,
    fraction: float,
    order: str = "positive",
    fill=0.0,
) -> np.ndarray:
    """Replace round(fraction * H * W) pixel positions with the fill value.

    Positive order removes the most relevant pixels first; negative order the
    least relevant. Both orders consume the same ranking (from opposite
    ends), so positive at f and negative at 1 - f remove complementary sets
    up to the rounding pixel.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InputError(f"fraction {fraction} outside [0, 1]")
    image = np.asarray(image)
    h, w = image.shape[:2]
    if np.asarray(relevance).shape != (h, w):
        raise InputError(
            f"relevance shape {np.asarray(relevance).shape} != image plane ({h}, {w})"
        )
    k = int(np.floor(fraction * h * w + 0.5))
    ranking = relevance_ranking(relevance)
    chosen = ranking[:k] if order == "positive" else ranking[h * w - k :]
    out = np.array(image, copy=True)
    ys, xs = np.unravel_index(chosen, (h, w))
    out[ys, xs] = fill
    return out


def auc_accuracy(curve) -> float:
    """Trapezoidal area under (fraction, accuracy), normalized by the span."""
    pts = [(float(f), float(a)) for f, a in curve]
    if len(pts) < 2:
        raise InputError("need at least two curve points")
    fs = [f for f, _ in pts]
    if any(b <= a for a, b in zip(fs, fs[1:])):
        raise InputError("fractions must be strictly increasing")
    area = sum(
        0.5 * (pts[i + 1][1] + pts[i][1]) * (pts[i + 1][0] - pts[i][0])
        for i in range(len(pts) - 1)
    )
    return area / (fs[-1] - fs[0])


def aopc(prob_curves) -> float:
    """Mean over images of (1/(K+1)) sum_k [p(c|x) - p(c|x_k)].

    Each curve is [p at step 0 (unperturbed), p at step 1, ..., p at step K].
    """
    if len(prob_curves) == 0:
        raise InputError("no probability curves")
    totals = []
    for curve in prob_curves:
        curve = [float(p) for p in curve]
        if len(curve) == 0:
            raise InputError("empty probability curve")
        p0 = curve[0]
        totals.append(sum(p0 - pk for pk in curve) / len(curve))
    return float(np.mean(totals))


def lodds(prob_curves) -> float:
    """Mean over images of (1/(K+1)) sum_k log odds(p_k) - log odds(p_0),
    probabilities clamped to [1e-12, 1 - 1e-12]."""
    if len(prob_curves) == 0:
        raise InputError("no probability curves")

    def logit(p):
        p = min(max(float(p), 1e-12), 1.0 - 1e-12)
        return np.log(p / (1.0 - p))

    totals = []
    for curve in prob_curves:
        if len(curve) == 0:
            raise InputError("empty probability curve")
        base = logit(curve[0])
        totals.append(sum(logit(pk) - base for pk in curve) / len(curve))
    return float(np.mean(totals))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """All-point average precision of scores against binary labels."""
    scores = np.asarray(scores, dtype=T.REAL64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.float64)
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    # evaluate at distinct-score boundaries so tied scores form one operating point
    boundary = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([boundary, [len(s) - 1]])
    precision = tp[idx] / (tp[idx] + fp[idx])
    recall = tp[idx] / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def segmentation_scores(heatmaps, gt_masks) -> tuple[float, float, float]:
    """(pixel accuracy, mAP, mIoU) averaged over images.

    Binary prediction = heatmap > mean(heatmap). mIoU averages foreground and
    background IoU (empty union counts as 1). mAP treats heatmap values as
    scores against the binary mask.
    """
    if len(heatmaps) != len(gt_masks) or len(heatmaps) == 0:
        raise InputError("need equally many heatmaps and masks, at least one")
    accs, aps, ious = [], [], []
    for hm, mask in zip(heatmaps, gt_masks):
        hm = np.asarray(hm, dtype=T.REAL64)
        mask = np.asarray(mask).astype(bool)
        if hm.shape != mask.shape:
            raise InputError(f"heatmap {hm.shape} and mask {mask.shape} resolution mismatch")
        pred = hm > hm.mean()
        accs.append(float(np.mean(pred == mask)))

        def iou(a, b):
            union = np.logical_or(a, b).sum()
            if union == 0:
                return 1.0
            return float(np.logical_and(a, b).sum() / union)

        ious.append(0.5 * (iou(pred, mask) + iou(~pred, ~mask)))
        aps.append(average_precision(hm, mask))
    return float(np.mean(accs)), float(np.mean(aps)), float(np.mean(ious))


def random_relevance(shape: tuple[int, int], seed: int) -> np.ndarray:
    """Deterministic uniform-noise relevance map (random-order baseline)."""
    return np.random.default_rng(seed).random(shape)


@dataclass
class MethodReport:
    fractions: list[float] = field(default_factory=list)
    accuracy_curve: list[float] = field(default_factory=list)  # percent
    auc: float | None = None
    aopc: float | None = None
    lodds: float | None = None
    pixel_acc: float | None = None
    map_score: float | None = None
    miou: float | None = None
    n_images: int = 0

    def to_json(self) -> dict:
        doc: dict = {"n_images": self.n_images}
        if self.accuracy_curve:
            doc["fractions"] = self.fractions
            doc["accuracy_curve"] = self.accuracy_curve
            doc["auc"] = self.auc
            doc["aopc"] = self.aopc
            doc["lodds"] = self.lodds
        if self.pixel_acc is not None:
            doc["pixel_acc"] = self.pixel_acc
            doc["mAP"] = self.map_score
            doc["mIoU"] = self.miou
        return doc


@dataclass
class EvalReport:
    methods: dict[str, MethodReport] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"methods": {k: v.to_json() for k, v in sorted(self.methods.items())}}


@dataclass
class EvalRecord:
    image: np.ndarray  # raw [H, W, 3] floats in [0, 1]
    label: int | None = None
    mask: np.ndarray | None = None


def load_manifest(path: str | Path, read_image, read_mask) -> list[EvalRecord]:
    """JSON-lines manifest: {"image_path": ..., "label": ..., "mask_path"?}."""
    records = []
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{ln}: bad manifest record: {exc}") from exc
            img_path = Path(rec["image_path"])
            if not img_path.is_absolute():
                img_path = base / img_path
            mask = None
            if rec.get("mask_path"):
                mask_path = Path(rec["mask_path"])
                if not mask_path.is_absolute():
                    mask_path = base / mask_path
                mask = read_mask(mask_path)
            records.append(
                EvalRecord(
                    image=read_image(img_path),
                    label=rec.get("label"),
                    mask=mask,
                )
            )
    if not records:
        raise InputError(f"manifest {path} has no records")
    return records


def _relevance_for(bundle, record, cfg, dtype, seed):
    """Pixel-space relevance for one record under one method config."""
    img_n = normalize_image(record.image, bundle.norm_mean, bundle.norm_std)
    tokens = tokenize(bundle, img_n, dtype=dtype)
    h, w = record.image.shape[:2]
    if isinstance(cfg, int):  # random-order baseline, cfg is the seed offset
        fr = forward(bundle, tokens, dtype=dtype)
        return random_relevance((h, w), seed + cfg), int(np.argmax(fr.probs))
    outcome = explain_tokens(bundle, tokens, None, cfg, dtype=dtype)
    return upsample(outcome.heatmap, h, w), outcome.class_index


def perturbation_curves(
    bundle: ModelBundle,
    record: EvalRecord,
    relevance: np.ndarray,
    target_class: int,
    spec: PerturbSpec,
    dtype=T.REAL64,
) -> tuple[list[int], list[float]]:
    """Top-1 hits and p(target) at fraction 0 plus each spec fraction."""
    fill = np.asarray(bundle.norm_mean) if spec.fill == "dataset_mean" else 0.0
    hits, probs = [], []
    for fraction in (0.0,) + tuple(spec.fractions):
        pert = perturb_image(record.image, relevance, fraction, spec.order, fill)
        tokens = tokenize(
            bundle, normalize_image(pert, bundle.norm_mean, bundle.norm_std), dtype=dtype
        )
        fr = forward(bundle, tokens, dtype=dtype)
        hits.append(int(np.argmax(fr.probs) == target_class))
        probs.append(float(fr.probs[target_class]))
    return hits, probs


def run_perturbation_eval(
    bundle: ModelBundle,
    records: list[EvalRecord],
    methods: dict[str, ExplainerConfig | int],
    spec: PerturbSpec,
    dtype=T.REAL64,
    threads: int = 1,
    seed: int = 0,
) -> EvalReport:
    """Evaluate each method's perturbation curves over the records.

    methods maps a report name to an ExplainerConfig, or to an int seed
    offset for the random-order baseline.
    """
    report = EvalReport()
    for name, cfg in methods.items():
        def one(idx_record):
            idx, record = idx_record
            relevance, predicted = _relevance_for(bundle, record, cfg, dtype, seed)
            if spec.target == "ground_truth":
                if record.label is None:
                    raise InputError("ground_truth target needs labels in the manifest")
                target = int(record.label)
            else:
                target = predicted
            return perturbation_curves(bundle, record, relevance, target, spec, dtype)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, enumerate(records)))
        else:
            results = [one(ir) for ir in enumerate(records)]

        hit_rows = np.asarray([h for h, _ in results], dtype=np.float64)
        prob_rows = [p for _, p in results]
        acc_percent = hit_rows.mean(axis=0) * 100.0  # index 0 = unperturbed
        curve = list(zip(spec.fractions, acc_percent[1:]))
        mr = MethodReport(
            fractions=[float(f) for f in spec.fractions],
            accuracy_curve=[float(a) for a in acc_percent[1:]],
            auc=auc_accuracy(curve),
            aopc=aopc(prob_rows),
            lodds=lodds(prob_rows),
            n_images=len(records),
        )
        report.methods[name] = mr
    return report


def run_segmentation_eval(
    bundle: ModelBundle,
    records: list[EvalRecord],
    methods: dict[str, ExplainerConfig],
    dtype=T.REAL64,
    threads: int = 1,
) -> EvalReport:
    missing = [i for i, r in enumerate(records) if r.mask is None]
    if missing:
        raise InputError(f"records without masks: {missing}")
    report = EvalReport()
    for name, cfg in methods.items():
        def one(record):
            relevance, _ = _relevance_for(bundle, record, cfg, T.REAL64, 0)
            return relevance

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                heatmaps = list(pool.map(one, records))
        else:
            heatmaps = [one(r) for r in records]
        acc, ap, iou = segmentation_scores(heatmaps, [r.mask for r in records])
        report.methods[name] = MethodReport(
            pixel_acc=acc * 100.0, map_score=ap * 100.0, miou=iou * 100.0,
            n_images=len(records),
        )
    return report
