import json

import numpy as np
import pytest

from vitexplain.cli import main
from vitexplain.container import read_container, save_bundle
from vitexplain.imageio import read_image, write_ppm

from conftest import make_bundle, make_config


@pytest.fixture
def toy_dir(tmp_path, rng):
    """6-block toy model (12 sublayers), grid 2, with three fixture images."""
    config = make_config(image_size=2, patch_size=1, n_blocks=6, d_model=8,
                         n_heads=2, d_ff=7, n_classes=4)
    bundle = make_bundle(config, seed=31)
    bundle.norm_mean = np.array([0.5, 0.5, 0.5])
    bundle.norm_std = np.array([0.5, 0.5, 0.5])
    save_bundle(bundle, tmp_path / "model.bin", tmp_path / "model.json")
    for i in range(3):
        write_ppm(tmp_path / f"img{i}.ppm", np.random.default_rng(100 + i).random((2, 2, 3)))
    with open(tmp_path / "manifest.jsonl", "w") as f:
        for i in range(3):
            f.write(json.dumps({"image_path": f"img{i}.ppm", "label": i % 4}) + "\n")
    return tmp_path


def run(args):
    return main([str(a) for a in args])


def model_args(d):
    return ["--model", d / "model.bin", "--config", d / "model.json"]


class TestExplain:
    def test_writes_outputs(self, toy_dir):
        out = toy_dir / "out"
        code = run(["explain", *model_args(toy_dir), "--image", toy_dir / "img0.ppm",
                    "--method", "tokentm", "--out", out])
        assert code == 0
        for name in ("heatmap.pgm", "heatmap.json", "overlay.ppm", "run.json"):
            assert (out / name).exists()
        doc = json.loads((out / "heatmap.json").read_text())
        assert doc["grid"] == 2  # (image / patch)^2 patches
        assert len(doc["values"]) == 2 and len(doc["values"][0]) == 2
        manifest = json.loads((out / "run.json").read_text())
        assert manifest["command"] == "explain"
        assert manifest["method"] == "tokentm"
        assert manifest["dtype"] == "f64"

    def test_depth_limit_saturates(self, toy_dir):
        out1, out2 = toy_dir / "a", toy_dir / "b"
        assert run(["explain", *model_args(toy_dir), "--image", toy_dir / "img0.ppm",
                    "--depth-limit", "12", "--out", out1]) == 0
        assert run(["explain", *model_args(toy_dir), "--image", toy_dir / "img0.ppm",
                    "--out", out2]) == 0
        assert (out1 / "heatmap.json").read_text() == (out2 / "heatmap.json").read_text()

    def test_explicit_class(self, toy_dir):
        out = toy_dir / "c"
        assert run(["explain", *model_args(toy_dir), "--image", toy_dir / "img0.ppm",
                    "--class", "2", "--out", out]) == 0
        assert json.loads((out / "heatmap.json").read_text())["class_index"] == 2

    def test_missing_image_exit_2(self, toy_dir):
        assert run(["explain", *model_args(toy_dir), "--image", toy_dir / "nope.ppm",
                    "--out", toy_dir / "x"]) == 2

    def test_bad_model_container_exit_2(self, toy_dir):
        bad = toy_dir / "bad.bin"
        bad.write_bytes(b"\x00")
        assert run(["explain", "--model", bad, "--config", toy_dir / "model.json",
                    "--image", toy_dir / "img0.ppm", "--out", toy_dir / "x"]) == 2

    def test_shape_mismatch_exit_3(self, toy_dir, tmp_path):
        config = make_config(image_size=2, patch_size=1, n_blocks=1)
        bundle = make_bundle(config, seed=1)
        bundle.weights["head.w"] = bundle.weights["head.w"][:, :2]
        from vitexplain.container import write_config, write_container

        write_container(toy_dir / "broken.bin", bundle.weights)
        write_config(toy_dir / "broken.json", config)
        assert run(["explain", "--model", toy_dir / "broken.bin",
                    "--config", toy_dir / "broken.json",
                    "--image", toy_dir / "img0.ppm", "--out", toy_dir / "x"]) == 3

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_numeric_error_exit_4(self, toy_dir, tmp_path):
        config = make_config(image_size=2, patch_size=1, n_blocks=1)
        bundle = make_bundle(config, seed=1)
        bundle.weights["head.w"] = bundle.weights["head.w"] * 1e308
        bundle.weights["head.b"] = bundle.weights["head.b"] * 1e308
        save_bundle(bundle, tmp_path / "nan.bin", tmp_path / "nan.json")
        assert run(["explain", "--model", tmp_path / "nan.bin",
                    "--config", tmp_path / "nan.json",
                    "--image", toy_dir / "img0.ppm", "--out", tmp_path / "x"]) == 4


def test_rollout_and_tokentm_differ_on_deit_fixture(deit_tiny_dir):
    outs = []
    for method in ("tokentm", "rollout"):
        out = deit_tiny_dir / f"diff-{method}"
        assert run(["explain", "--model", deit_tiny_dir / "model.bin",
                    "--config", deit_tiny_dir / "model.json",
                    "--image", deit_tiny_dir / "fixture.ppm",
                    "--method", method, "--out", out]) == 0
        outs.append(np.array(json.loads((out / "heatmap.json").read_text())["values"]))
    assert float(np.max(np.abs(outs[0] - outs[1]))) > 1e-3


class TestEvalPerturb:
    def test_report_shape(self, toy_dir):
        out = toy_dir / "ep"
        code = run(["eval-perturb", *model_args(toy_dir),
                    "--manifest", toy_dir / "manifest.jsonl",
                    "--method", "tokentm,rollout", "--out", out])
        assert code == 0
        assert (out / "run.json").exists()
        report = json.loads((out / "report.json").read_text())
        assert set(report["methods"]) == {"tokentm", "rollout"}
        for entry in report["methods"].values():
            assert len(entry["accuracy_curve"]) == 9
            assert entry["n_images"] == 3
            assert 0.0 <= entry["auc"] <= 100.0
            assert "aopc" in entry and "lodds" in entry

    def test_byte_identical_reports(self, toy_dir):
        out1, out2 = toy_dir / "r1", toy_dir / "r2"
        args = ["eval-perturb", *model_args(toy_dir),
                "--manifest", toy_dir / "manifest.jsonl",
                "--method", "raw_attention", "--seed", "3", "--fractions", "0.2,0.5"]
        assert run(args + ["--out", out1]) == 0
        assert run(args + ["--out", out2, "--threads", "2"]) == 0
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()

    def test_gt_target_and_zero_fill(self, toy_dir):
        out = toy_dir / "gt"
        assert run(["eval-perturb", *model_args(toy_dir),
                    "--manifest", toy_dir / "manifest.jsonl", "--method", "rollout",
                    "--target", "gt", "--fill", "zero", "--order", "negative",
                    "--out", out]) == 0

    def test_unknown_method_exit_2(self, toy_dir):
        assert run(["eval-perturb", *model_args(toy_dir),
                    "--manifest", toy_dir / "manifest.jsonl",
                    "--method", "gradcam", "--out", toy_dir / "x"]) == 2


class TestEvalSeg:
    def test_perfect_fixtures_score_100(self, toy_dir):
        # build masks from the produced heatmaps: thresholded at their mean
        from vitexplain.container import load_bundle
        from vitexplain.evaluate import upsample
        from vitexplain.explain import ExplainerConfig, explain
        from vitexplain.model import normalize_image

        bundle = load_bundle(toy_dir / "model.bin", toy_dir / "model.json")
        lines = []
        for i in range(3):
            img = read_image(toy_dir / f"img{i}.ppm")
            heat = explain(bundle, normalize_image(img, bundle.norm_mean, bundle.norm_std),
                           None, ExplainerConfig())
            up = upsample(heat, 2, 2)
            mask = (up > up.mean()).astype(np.uint8) * 255
            with open(toy_dir / f"mask{i}.pgm", "wb") as f:
                f.write(b"P5\n2 2\n255\n" + mask.astype(np.uint8).tobytes())
            lines.append({"image_path": f"img{i}.ppm", "label": 0,
                          "mask_path": f"mask{i}.pgm"})
        with open(toy_dir / "seg.jsonl", "w") as f:
            f.writelines(json.dumps(l) + "\n" for l in lines)
        out = toy_dir / "seg"
        assert run(["eval-seg", *model_args(toy_dir), "--manifest", toy_dir / "seg.jsonl",
                    "--method", "tokentm", "--out", out]) == 0
        entry = json.loads((out / "report.json").read_text())["methods"]["tokentm"]
        assert entry["pixel_acc"] == 100.0
        assert entry["mIoU"] == 100.0
        assert entry["mAP"] == 100.0

    def test_missing_masks_listed(self, toy_dir, capsys):
        out = toy_dir / "segfail"
        code = run(["eval-seg", *model_args(toy_dir),
                    "--manifest", toy_dir / "manifest.jsonl",
                    "--method", "tokentm", "--out", out])
        assert code == 2
        assert "without masks" in capsys.readouterr().err


class TestTraceDump:
    def test_dump_contents(self, toy_dir):
        out = toy_dir / "td"
        assert run(["trace-dump", *model_args(toy_dir), "--image", toy_dir / "img0.ppm",
                    "--out", out]) == 0
        doc = json.loads((out / "trace.json").read_text())
        assert len(doc["logits"]) == 4
        assert len(doc["tokens"]) == 5 and len(doc["tokens"][0]) == 8
        assert len(doc["layers"]) == 12
        for layer in doc["layers"]:
            assert layer["residual_error"] < 1e-5
            if layer["kind"] == "mhsa":
                for head in layer["heads"]:
                    assert abs(sum(head["necc"]) - 1.0) < 1e-9
            else:
                assert abs(sum(layer["necc"]) - 1.0) < 1e-9
        tensors = read_container(out / "traces.bin")
        assert "layer.0.head.0.attn" in tensors
        assert "layer.0.head.0.grad_attn" in tensors
        assert tensors["layer.0.head.0.attn"].shape == (5, 5)
