import json

import numpy as np
import pytest

from vsharp.cli import analytic_parameter_count, main, parse_mask
from vsharp.io import read_container, write_container
from vsharp.masks import MaskError
from vsharp.solver import ModelConfig, VSharpNet
from vsharp.training import make_phantom


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def volume(tmp_path):
    samples = [make_phantom(i, 32, 32, 3, 0.0, 4, dtype=np.float64) for i in range(2)]
    path = tmp_path / "vol.vsc"
    write_container(path, {"kspace": np.stack([s.y_full for s in samples]), "target": np.stack([s.target for s in samples])})
    return path


def test_recon_fully_sampled_reproduces_ground_truth(tmp_path, capsys, volume):
    code, out, _ = _run(capsys, "recon", "--input", volume, "--mask", "full", "--out", tmp_path / "r", "--png")
    assert code == 0
    report = json.loads(out)
    assert report["metrics"]["ssim"] > 0.99
    arrays, meta = read_container(tmp_path / "r" / "recon.vsc")
    assert arrays["recon"].shape == (2, 32, 32) and meta["mask"]["kind"] == "full"
    assert (tmp_path / "r" / "slice001.png").exists() and (tmp_path / "r" / "mask.png").exists()


def test_recon_threads_do_not_change_output(tmp_path, capsys, volume, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"solver": {"T": 3, "Tx": 3, "rho": 1.0, "eta": 0.4, "denoiser": {"kind": "soft-threshold", "lambda": 0.01}}}))
    args = ["recon", "--input", volume, "--mask", "equispaced,accel=4,seed=1", "--config", cfg, "--intermediate"]
    assert _run(capsys, *args, "--out", tmp_path / "a", "--threads", 1)[0] == 0
    monkeypatch.setenv("VSHARP_THREADS", "2")
    assert _run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    a, _ = read_container(tmp_path / "a" / "recon.vsc")
    b, _ = read_container(tmp_path / "b" / "recon.vsc")
    assert a["intermediate"].shape == (2, 3, 32, 32)
    assert np.array_equal(a["recon"], b["recon"])


def test_recon_with_model_config(tmp_path, capsys, volume):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"T": 2, "Tx": 1, "filters": 2, "sens_filters": 2, "lagrange_channels": 2}}))
    code, out, _ = _run(capsys, "recon", "--input", volume, "--mask", "poisson,accel=4", "--config", cfg, "--out", tmp_path / "m")
    assert code == 0 and "metrics" in json.loads(out)


def test_mask_gen_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = _run(capsys, "mask-gen", "--type", "poisson", "--accel", 8, "--size", "48x64", "--seed", 3, "--out", tmp_path / f"{name}.vsc", "--png", tmp_path / f"{name}.png")
        assert code == 0
    assert (tmp_path / "a.vsc").read_bytes() == (tmp_path / "b.vsc").read_bytes()
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_mask_file_is_accepted_by_recon(tmp_path, capsys, volume):
    _run(capsys, "mask-gen", "--type", "equispaced", "--accel", 4, "--size", "32x32", "--out", tmp_path / "m.vsc")
    mask = parse_mask(str(tmp_path / "m.vsc"), 32, 32)
    assert mask.grid.shape == (32, 32) and mask.acs.any()
    with pytest.raises(MaskError):
        parse_mask(str(tmp_path / "m.vsc"), 16, 32)


def test_eval_report(tmp_path, capsys, volume):
    _run(capsys, "recon", "--input", volume, "--mask", "equispaced,accel=4", "--out", tmp_path / "r")
    code, out, _ = _run(capsys, "eval", "--pred", tmp_path / "r" / "recon.vsc", "--gt", volume, "--report", tmp_path / "rep.json")
    assert code == 0
    rows = json.loads((tmp_path / "rep.json").read_text())
    assert [r["slice"] for r in rows] == [0, 1, "mean"]
    assert json.loads(out)["ssim"] == pytest.approx(rows[-1]["ssim"])


def test_bench_reports_analytic_parameter_count(tmp_path, capsys):
    cfg = tmp_path / "b.json"
    model = {"T": 4, "Tx": 2, "filters": 2, "sens_filters": 2, "lagrange_channels": 2}
    cfg.write_text(json.dumps({"model": model, "size": [16, 16], "slices": 2, "reduced_blocks": [[1, 4]]}))
    code, out, _ = _run(capsys, "bench", "--config", cfg, "--out", tmp_path / "bench.json")
    assert code == 0
    report = json.loads(out)
    assert report["parameters"] == report["analytic_parameters"] == VSharpNet(ModelConfig(**model)).num_parameters()
    assert set(report["timings"]) == {"full", "1,4"}


def test_analytic_count_by_hand():
    mc = ModelConfig(T=1, Tx=1, scales=1, filters=1, sens_scales=1, sens_filters=1, lagrange_channels=1, lagrange_dilations=(1,))
    unet_6_2 = (6 * 9 + 1) + (9 + 1) + (2 + 2)
    unet_2_2 = (2 * 9 + 1) + (9 + 1) + (2 + 2)
    lagrange = (2 * 9 + 1) + (1 + 1) + (2 + 2)
    assert analytic_parameter_count(mc) == 1 + 1 + unet_2_2 + lagrange + unet_6_2
    assert VSharpNet(mc).num_parameters() == analytic_parameter_count(mc)


@pytest.mark.parametrize(
    "argv,error,code",
    [
        (["mask-gen", "--type", "poisson", "--accel", "4", "--size", "bad"], "UsageError", 2),
        (["mask-gen", "--type", "equispaced", "--accel", "4", "--acs", "0.6", "--size", "32x32"], "MaskError", 4),
        (["recon", "--input", "/nonexistent", "--mask", "full", "--out", "x"], "FileNotFoundError", 7),
        (["frobnicate"], "UsageError", 2),
    ],
)
def test_errors_are_json_on_stderr(capsys, argv, error, code):
    got, out, err = _run(capsys, *argv)
    payload = json.loads(err)
    assert got == code == payload["exit_code"] and payload["error"] == error and out == ""


def test_bad_container_is_format_error(tmp_path, capsys):
    bad = tmp_path / "bad.vsc"
    bad.write_bytes(b"garbage" * 4)
    code, _, err = _run(capsys, "eval", "--pred", bad, "--gt", bad, "--report", tmp_path / "r.csv")
    assert code == 3 and json.loads(err)["error"] == "FormatError"


def test_bad_thread_env(tmp_path, capsys, monkeypatch, volume):
    monkeypatch.setenv("VSHARP_THREADS", "zero")
    code, _, err = _run(capsys, "recon", "--input", volume, "--mask", "full", "--out", tmp_path / "r")
    assert code == 2 and "VSHARP_THREADS" in json.loads(err)["message"]


def test_train_command(tmp_path, capsys):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({
        "model": {"T": 2, "Tx": 1, "filters": 2, "sens_filters": 2, "lagrange_channels": 2},
        "train": {"iters": 3, "eval_every": 2, "val_size": 1, "H": 16, "W": 16, "n_c": 2, "warmup_iters": 1},
    }))
    code, out, _ = _run(capsys, "train", "--config", cfg, "--out", tmp_path / "run")
    assert code == 0
    assert (tmp_path / "run" / "model.ckpt").exists() and (tmp_path / "run" / "history.csv").exists()
    assert "best_ssim" in json.loads(out)
