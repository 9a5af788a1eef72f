import json

import jsonschema
import numpy as np
import pytest

from dsnerf.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from dsnerf.metrics import report_schema
from dsnerf.render import load_png

SMALL = ["--rays", "64", "--samples", "8", "--width", "16"]


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen", "--out", str(out), "--size", "16", "--seed", "2"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    run = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--data", str(small_data), "--out", str(run), "--iters", "4", *SMALL, "--deterministic"]) == EXIT_OK
    return run


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGen:
    def test_deterministic(self, small_data, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "again"), "--size", "16", "--seed", "2"]) == EXIT_OK
        assert tree_bytes(small_data) == tree_bytes(tmp_path / "again")

    def test_missing_out(self, capsys):
        assert main(["gen"]) == EXIT_USAGE
        assert "usage error" in capsys.readouterr().err

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"image_size": 12, "train_frames": 2, "heldout_frames": 1}))
        assert main(["gen", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == EXIT_OK
        assert load_png(tmp_path / "d" / "frames" / "f0_c0.png").shape == (12, 12, 3)

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"shininess": 3}))
        assert main(["gen", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == EXIT_DATA


class TestTrain:
    def test_outputs(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"config.json", "run_config.json", "train_log.ndjson", "final.bin", "best.bin"} <= names
        assert len((trained / "train_log.ndjson").read_text().splitlines()) == 4

    def test_resume_continues(self, small_data, trained, tmp_path):
        args = ["train", "--data", str(small_data), "--out", str(tmp_path), "--iters", "6", *SMALL, "--deterministic"]
        assert main([*args, "--resume", str(trained / "final.bin")]) == EXIT_OK
        log = [json.loads(x) for x in (tmp_path / "train_log.ndjson").read_text().splitlines()]
        assert [r["iter"] for r in log] == [4, 5]

    def test_zero_lr(self, small_data, tmp_path):
        from dsnerf.fields import init_params, load_checkpoint
        from dsnerf.train import Dataset, TrainConfig

        assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--iters", "2", "--lr", "0", *SMALL]) == EXIT_OK
        params, _, _ = load_checkpoint(tmp_path / "final.bin")
        cfg = TrainConfig(rays_per_batch=64, samples=8, width=16)
        init = init_params(cfg.field_config(Dataset(small_data).mesh.joints.count), params.frame_count, 0)
        assert all(np.array_equal(v, params.arrays[k]) for k, v in init.arrays.items())

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r"), "--iters", "1"]) == EXIT_DATA

    def test_bad_variant(self, small_data, tmp_path):
        assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--variant", "x"]) == EXIT_DATA


class TestRender:
    def test_deterministic(self, small_data, trained, tmp_path):
        args = ["--checkpoint", str(trained / "final.bin"), "--data", str(small_data), "--camera", "4", "--frame", "0", "--samples", "8"]
        assert main(["render", *args, "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["render", *args, "--out", str(tmp_path / "b")]) == EXIT_OK
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b and len(a) == 2

    def test_pose_file(self, small_data, trained, tmp_path):
        poses = json.loads((small_data / "poses.json").read_text())
        pf = tmp_path / "poses.json"
        pf.write_text(json.dumps({"version": 1, "frames": poses["frames"][:2]}))
        args = ["render", "--checkpoint", str(trained / "final.bin"), "--data", str(small_data), "--pose-file", str(pf), "--camera", "0", "--samples", "8", "--no-alpha"]
        assert main([*args, "--out", str(tmp_path / "out")]) == EXIT_OK
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["p0_c0.png", "p1_c0.png"]

    def test_missing_checkpoint(self, small_data, tmp_path):
        assert main(["render", "--checkpoint", str(tmp_path / "x.bin"), "--data", str(small_data), "--out", str(tmp_path)]) == EXIT_DATA

    def test_unknown_camera(self, small_data, trained, tmp_path):
        args = ["render", "--checkpoint", str(trained / "final.bin"), "--data", str(small_data), "--out", str(tmp_path), "--camera", "9"]
        assert main(args) == EXIT_USAGE

    def test_corrupt_checkpoint(self, small_data, trained, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes((trained / "final.bin").read_bytes()[:100])
        assert main(["render", "--checkpoint", str(bad), "--data", str(small_data), "--out", str(tmp_path)]) == EXIT_DATA


class TestEval:
    def test_ground_truth_against_itself(self, small_data, tmp_path, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        for name in ("f0_c4.png", "f1_c0.png"):
            (pred / name).write_bytes((small_data / "frames" / name).read_bytes())
        assert main(["eval", "--data", str(small_data), "--pred", str(pred)]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        jsonschema.validate(doc, report_schema())
        assert all(e["psnr"] == "inf" and e["ssim"] == pytest.approx(1.0) for e in doc["entries"])

    def test_aggregate_is_mean(self, small_data, trained, tmp_path):
        render = ["render", "--checkpoint", str(trained / "final.bin"), "--data", str(small_data), "--out", str(tmp_path / "r"), "--samples", "8"]
        assert main(render) == EXIT_OK
        assert main(["eval", "--data", str(small_data), "--pred", str(tmp_path / "r"), "--out", str(tmp_path / "rep.json"), "--grid", str(tmp_path / "g.png")]) == EXIT_OK
        doc = json.loads((tmp_path / "rep.json").read_text())
        jsonschema.validate(doc, report_schema())
        psnr = [e["psnr"] for e in doc["entries"]]
        assert len(psnr) == 10 * 5  # every training frame from every camera
        assert doc["aggregate"]["psnr"] == pytest.approx(np.mean(psnr))
        assert doc["aggregate"]["ssim"] == pytest.approx(np.mean([e["ssim"] for e in doc["entries"]]))
        assert (tmp_path / "g.png").exists()

    def test_self_check(self, small_data, tmp_path):
        assert main(["eval", "--data", str(small_data), "--self-check", "--out", str(tmp_path / "s.json")]) == EXIT_OK
        assert json.loads((tmp_path / "s.json").read_text())["aggregate"]["psnr"] == "inf"

    def test_needs_predictions(self, small_data):
        assert main(["eval", "--data", str(small_data)]) == EXIT_USAGE

    def test_empty_prediction_dir(self, small_data, tmp_path):
        assert main(["eval", "--data", str(small_data), "--pred", str(tmp_path)]) == EXIT_DATA


class TestAblate:
    def test_single_variant(self, small_data, tmp_path):
        args = ["ablate", "--data", str(small_data), "--out", str(tmp_path), "--iters", "2", *SMALL, "--variants", "no-lighting"]
        assert main(args) == EXIT_OK
        rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
        assert [r["variant"] for r in rows] == ["no-lighting"]
        md = (tmp_path / "ablation.md").read_text().splitlines()
        assert len(md) == 3 and md[2].startswith("| no-lighting |")
        from dsnerf.fields import load_checkpoint

        params, _, _ = load_checkpoint(tmp_path / "no-lighting" / "final.bin")
        assert not params.has_lighting and not any(k.startswith("light") for k in params.arrays)

    def test_unknown_variant(self, small_data, tmp_path):
        assert main(["ablate", "--data", str(small_data), "--out", str(tmp_path), "--variants", "full,shiny"]) == EXIT_USAGE


class TestBench:
    def test_report(self, capsys):
        assert main(["bench", "--faces", "20000", "--points", "4000", "--rays", "256", "--repeats", "2"]) == EXIT_OK
        rep = json.loads(capsys.readouterr().out)
        assert rep["config"]["faces"] >= 20000
        assert {"platform", "python", "numpy", "cpu_count"} <= set(rep["machine"])
        assert len(rep["config_hash"]) == 16
        cf = rep["closest_face_points_per_s"]
        assert cf["accelerated"] >= cf["brute_force"]


def test_numeric_failure_exit_code(small_data, tmp_path, monkeypatch):
    import dsnerf.train as train

    def explode(*a, **k):
        raise FloatingPointError("overflow")

    monkeypatch.setattr(train, "batch_loss", explode)
    args = ["train", "--data", str(small_data), "--out", str(tmp_path), "--iters", "1", *SMALL]
    assert main(args) == EXIT_NUMERIC


def test_threads_env_must_be_integer(small_data, monkeypatch):
    monkeypatch.setenv("DSNERF_THREADS", "many")
    assert main(["eval", "--data", str(small_data), "--self-check"]) == EXIT_USAGE
