import json
from pathlib import Path

import numpy as np
import pytest

from yolos import autodiff as ad
from yolos import checkpoint
from yolos.cli import main
from yolos.config import RunConfig, apply_overrides, dump_config
from yolos.model import Detector

FIXTURES = Path(__file__).parent / "fixtures"
SMALL = ["--set", "model.depth=1", "--set", "model.width=16", "--set", "model.heads=2",
         "--set", "model.det_tokens=4", "--set", "model.pe_grid=4x4", "--set", "data.canvas=32x32",
         "--set", "data.short_min=32", "--set", "data.short_max=32", "--set", "data.long_max=32",
         "--set", "data.train_count=6", "--set", "data.eval_count=4", "--set", "optim.batch_size=2"]


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture
def fixed_ckpt(tmp_path):
    """Every token predicts class 0 with probability ~1 and the box (0.5, 0.5, 0.5, 0.5)."""
    cfg = apply_overrides(RunConfig(), {"model.depth": "1", "model.width": "16", "model.heads": "2",
                                        "model.det_tokens": "4", "model.pe_grid": "4x4"})
    det = Detector.create(cfg.model, 0)
    for name, bias in (("class_head.2", [30.0, 0.0, 0.0, 0.0]), ("box_head.2", [0.0] * 4)):
        det.params[f"{name}.weight"] = ad.Tensor(np.zeros_like(det.params[f"{name}.weight"].data))
        det.params[f"{name}.bias"] = ad.Tensor(np.array(bias))
    path = tmp_path / "fixed.ylos"
    checkpoint.save(path, det.params)
    (tmp_path / "fixed.ylos.cfg").write_text(dump_config(cfg))
    return path


def test_predict_overlay_matches_golden(capsys, tmp_path, fixed_ckpt):
    overlay = tmp_path / "o.ppm"
    code, res, _ = _run(capsys, "--out", str(tmp_path), "predict", "--checkpoint", str(fixed_ckpt),
                        "--image", str(FIXTURES / "ramp32.ppm"), "--overlay", str(overlay))
    assert code == 0
    assert len(res["predictions"]) == 4
    assert res["predictions"][0]["bbox"] == pytest.approx([8, 8, 16, 16])
    assert res["predictions"][0]["category_id"] == 0
    assert overlay.read_bytes() == (FIXTURES / "ramp32_overlay_golden.ppm").read_bytes()
    assert json.loads((tmp_path / "predictions.json").read_text())["predictions"] == res["predictions"]


def test_predict_threshold_one_emits_nothing(capsys, tmp_path, fixed_ckpt):
    code, res, _ = _run(capsys, "--out", str(tmp_path), "predict", "--checkpoint", str(fixed_ckpt),
                        "--image", str(FIXTURES / "ramp32.ppm"), "--score-threshold", "1.0")
    assert code == 0 and res["predictions"] == []


def test_train_eval_predict_analyze(capsys, tmp_path):
    out = tmp_path / "run"
    code, res, _ = _run(capsys, *SMALL, "--out", str(out), "train", "--steps", "3")
    assert code == 0 and res["steps"] == 3
    lines = (out / "loss.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [0, 1, 2]
    ckpt = out / "model.ylos"
    assert ckpt.exists() and (out / "model.ylos.cfg").exists()

    code, res, _ = _run(capsys, "--out", str(out), "eval", "--checkpoint", str(ckpt))
    assert code == 0 and 0.0 <= res["mean_ap"] <= 1.0
    assert (out / "metrics.json").exists()

    code, res, _ = _run(capsys, "--out", str(out), "predict", "--checkpoint", str(ckpt),
                        "--image", str(FIXTURES / "ramp32.ppm"))
    assert code == 0 and len(res["predictions"]) <= 4

    for which in ("geometry", "class", "scatter", "categories", "attention"):
        code, res, err = _run(capsys, "--out", str(out), "analyze", "--checkpoint", str(ckpt), "--which", which)
        assert code == 0, err
        assert (out / f"analysis_{which}.json").exists()
    assert (out / "scatter_token0.ppm").exists()
    assert (out / "attn_l0_h0_t0.ppm").exists()


def test_train_zero_steps_is_init(capsys, tmp_path):
    code, _, _ = _run(capsys, *SMALL, "--out", str(tmp_path), "train", "--steps", "0")
    assert code == 0
    cfg = apply_overrides(RunConfig(), dict(a.split("=") for a in SMALL[1::2]))
    init = Detector.create(cfg.model, cfg.seed).params
    saved = checkpoint.load(tmp_path / "model.ylos")
    for k, t in init.items():
        np.testing.assert_array_equal(saved[k], t.data.astype(np.float32))


def test_flops_table(capsys):
    code, res, err = _run(capsys, "flops")
    assert code == 0
    rows = {r["name"]: r for r in res["rows"]}
    assert set(rows) == {"Ti", "S", "B", "S-dwr", "S-fast-dwr"}
    assert rows["Ti"]["ratio"] == pytest.approx(5.9, abs=0.15)
    assert "S-fast-dwr" in err


def test_flops_model(capsys):
    code, res, _ = _run(capsys, "flops", "--model")
    assert code == 0 and res["rows"][0]["name"] == "model"


def test_scale_dwr(capsys):
    code, res, _ = _run(capsys, "scale", "--target", "4.6e9")
    assert code == 0
    assert (res["depth"], res["width"], res["resolution"]) == (19, 240, 272)


def test_usage_errors_are_one_line(capsys):
    code, _, err = _run(capsys, "flops", "--preset", "XL")
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("yolos: error: usage:")
    code, _, err = _run(capsys, "frobnicate")
    assert code == 2 and err.count("\n") == 1


def test_missing_checkpoint(capsys, tmp_path):
    code, _, err = _run(capsys, "--out", str(tmp_path), "eval", "--checkpoint", str(tmp_path / "none.ylos"))
    assert code == 1 and "not-found" in err


def test_corrupt_checkpoint(capsys, tmp_path, fixed_ckpt):
    raw = bytearray(fixed_ckpt.read_bytes())
    raw[50] ^= 0xFF
    fixed_ckpt.write_bytes(bytes(raw))
    code, _, err = _run(capsys, "--out", str(tmp_path), "eval", "--checkpoint", str(fixed_ckpt))
    assert code == 1 and "CRC" in err


def test_unknown_config_key(capsys, tmp_path):
    code, _, err = _run(capsys, "--set", "model.nope=1", "flops")
    assert code == 1 and "model.nope" in err


def test_attention_layer_out_of_range(capsys, tmp_path, fixed_ckpt):
    code, _, err = _run(capsys, "--out", str(tmp_path), "analyze", "--checkpoint", str(fixed_ckpt),
                        "--which", "attention", "--image", str(FIXTURES / "ramp32.ppm"), "--layer", "5")
    assert code == 1 and "out of range" in err
