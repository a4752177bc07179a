"""Command-line interface: ``vsharp {recon,train,mask-gen,eval,bench}``.

Every command exits 0 on success.  Failures exit nonzero and print one JSON
object ``{"error": <class>, "message": ..., "exit_code": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from vsharp import autodiff as ad
from vsharp.autodiff import TapeError
from vsharp.io import FormatError, load_checkpoint, read_container, save_checkpoint, save_png, write_container, write_report
from vsharp.losses import evaluate
from vsharp.masks import MaskError, SamplingMask, make_mask
from vsharp.operators import normalize_sensitivities, rss
from vsharp.sensitivity import estimate_acs
from vsharp.solver import DivergenceError, ModelConfig, VSharpNet, classical_config, reconstruct
from vsharp.training import TrainConfig, TrainingError, make_phantom, train

THREADS_ENV = "VSHARP_THREADS"

EXIT_CODES = {
    "UsageError": 2,
    "FormatError": 3,
    "MaskError": 4,
    "TrainingError": 5,
    "DivergenceError": 5,
    "TapeError": 6,
    "FileNotFoundError": 7,
    "ValueError": 8,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


def _read_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"size must look like 64x64, got {text!r}") from None


# -- data helpers -------------------------------------------------------------


def _complex_slices(arr: np.ndarray, name: str, image: bool = False) -> np.ndarray:
    """Normalize stored arrays to complex ``(S, n_c, H, W)`` (or ``(S, H, W)`` for images).

    Real image arrays are read as magnitudes unless they are 4-D ``(S, 2, H, W)``.
    """
    arr = np.asarray(arr)
    if not np.iscomplexobj(arr):
        if (arr.ndim == 4 if image else arr.ndim >= 3) and arr.shape[-3] == 2:
            arr = ad.to_complex(arr)
        elif not image:
            raise FormatError(f"{name} must be complex or carry a 2-channel (re, im) axis, got {arr.shape}")
    want = 3 if image else 4
    while arr.ndim < want:
        arr = arr[None]
    if arr.ndim != want:
        raise FormatError(f"{name} has shape {arr.shape}, expected {want} dims after the complex axis")
    return arr


def parse_mask(spec: str, H: int, W: int) -> SamplingMask:
    """``full``, ``<kind>[,accel=R][,acs=F][,seed=S]`` or a container written by ``mask-gen``."""
    if Path(spec).is_file():
        arrays, meta = read_container(spec)
        if "grid" not in arrays:
            raise FormatError(f"{spec}: mask container lacks a 'grid' array")
        grid = arrays["grid"].astype(np.uint8)
        if grid.shape != (H, W):
            raise MaskError(f"mask {grid.shape} does not match k-space {(H, W)}")
        acs = arrays.get("acs", grid.astype(bool)).astype(bool)
        return SamplingMask(grid, acs, meta.get("acs_fraction", 0.0), meta.get("requested_accel", 1.0), meta.get("kind", "file"))
    kind, *opts = spec.split(",")
    kw = {}
    for opt in opts:
        key, _, value = opt.partition("=")
        if key not in ("accel", "acs", "seed"):
            raise UsageError(f"unknown mask option {key!r} in {spec!r}")
        kw[key] = int(value) if key == "seed" else float(value)
    if kind == "full":
        return make_mask("full", H, W, 1)
    return make_mask(kind, H, W, kw.get("accel", 4), kw.get("acs"), seed=kw.get("seed", 0))


class Reconstructor:
    """Per-slice reconstruction from either a checkpoint or a classical solver config.

    Config keys: ``checkpoint`` (path) or ``model`` (a model config, untrained)
    or ``solver`` (``{"T", "Tx", "rho", "eta", "denoiser": {...}}``);
    optional ``reduced_blocks`` and ``dtype``.
    """

    def __init__(self, config: dict):
        self.reduced = config.get("reduced_blocks")
        self.model: Optional[VSharpNet] = None
        if "checkpoint" in config:
            self.model, _ = load_checkpoint(config["checkpoint"])
        elif "model" in config:
            self.model = VSharpNet(ModelConfig.from_dict(config["model"]))
        solver = config.get("solver", {"T": 1, "Tx": 0, "rho": 1.0, "eta": 0.5, "denoiser": {"kind": "identity"}})
        self.solver = None if self.model else classical_config(
            int(solver["T"]), int(solver["Tx"]), solver["rho"], solver["eta"], solver["denoiser"]
        )
        if self.solver is not None and self.reduced is not None:
            self.solver.reduced_blocks = tuple(self.reduced)
        self.dtype = np.dtype(self.model.config.dtype if self.model else config.get("dtype", "float64"))

    def __call__(self, y_slice: np.ndarray, mask: SamplingMask, C: Optional[np.ndarray] = None) -> list[np.ndarray]:
        y = ad.from_complex(y_slice * mask.grid, self.dtype)[None]
        if self.model is not None:
            xs, _ = self.model(y, mask.grid[None], mask.acs[None], self.reduced)
        else:
            maps = normalize_sensitivities(ad.from_complex(C, self.dtype))[None] if C is not None else estimate_acs(y, mask).maps
            xs = reconstruct(y, maps, mask.grid, self.solver)
        return [ad.to_complex(x.data[0]) for x in xs]


def _map_slices(fn, n: int, threads: int) -> list:
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


# -- commands -----------------------------------------------------------------


def cmd_recon(args) -> dict:
    arrays, meta = read_container(args.input)
    if "kspace" not in arrays:
        raise FormatError(f"{args.input}: container lacks a 'kspace' array")
    y = _complex_slices(arrays["kspace"], "kspace")
    S, n_c, H, W = y.shape
    C = _complex_slices(arrays["sensitivities"], "sensitivities") if "sensitivities" in arrays else None
    mask = parse_mask(args.mask, H, W)
    recon = Reconstructor(_read_json(args.config))
    steps = _map_slices(lambda s: recon(y[s], mask, None if C is None else C[s % len(C)]), S, args.threads)
    final = np.stack([st[-1] for st in steps])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"recon": final, "magnitude": np.abs(final), "mask": mask.grid}
    if args.intermediate:
        result["intermediate"] = np.stack([np.stack(st) for st in steps])
    write_container(out / "recon.vsc", result, {"source": str(args.input), "mask": mask.metadata()})
    report = {"slices": S, "coils": n_c, "shape": [H, W], "achieved_accel": mask.achieved_accel}
    target = arrays.get("target")
    if target is None and args.target_from_kspace:
        target = rss(ad.from_complex(y, np.float64)).data
    if target is not None:
        target = np.abs(_complex_slices(target, "target", image=True))
        rows = [{"slice": s, **evaluate(target[s], np.abs(final[s]))} for s in range(S)]
        write_report(out / "metrics.json", rows)
        report["metrics"] = {k: float(np.mean([r[k] for r in rows])) for k in ("ssim", "psnr", "nmse")}
    if args.png:
        for s in range(S):
            save_png(out / f"slice{s:03d}.png", np.abs(final[s]))
        save_png(out / "mask.png", mask.grid)
    return report


def cmd_train(args) -> dict:
    config = _read_json(args.config)
    model = VSharpNet(ModelConfig.from_dict(config.get("model", {})))
    cfg = TrainConfig.from_dict(config.get("train", {}))
    start = time.perf_counter()
    result = train(model, cfg, Path(args.out))
    model.load_state_dict(result.best_state)
    save_checkpoint(Path(args.out) / "model.ckpt", model, {"best_ssim": result.best_ssim})
    return {
        "seconds": time.perf_counter() - start,
        "best_ssim": result.best_ssim,
        "final": result.final_metrics,
        "checkpoint": str(Path(args.out) / "model.ckpt"),
    }


def cmd_mask_gen(args) -> dict:
    H, W = _parse_size(args.size)
    mask = make_mask(args.type, H, W, args.accel, args.acs, seed=args.seed)
    meta = mask.metadata()
    if args.out:
        write_container(args.out, {"grid": mask.grid, "acs": mask.acs}, meta)
    if args.png:
        save_png(args.png, mask.grid)
    return meta


def _magnitudes(path: str, names: tuple) -> np.ndarray:
    arrays, _ = read_container(path)
    for name in names:
        if name in arrays:
            arr = arrays[name]
            if not np.iscomplexobj(arr) and arr.ndim == 4 and arr.shape[-3] == 2:
                arr = ad.to_complex(arr)
            arr = np.abs(arr)
            return arr[None] if arr.ndim == 2 else arr
    raise FormatError(f"{path}: none of the arrays {names} present")


def cmd_eval(args) -> dict:
    pred = _magnitudes(args.pred, ("magnitude", "recon", "image"))
    gt = _magnitudes(args.gt, ("target", "magnitude", "image", "recon"))
    if pred.shape != gt.shape:
        raise FormatError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    rows = [{"slice": s, **evaluate(gt[s], pred[s])} for s in range(len(gt))]
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("ssim", "psnr", "nmse")}
    write_report(args.report, rows + [{"slice": "mean", **summary}])
    return summary


def cmd_bench(args) -> dict:
    config = _read_json(args.config)
    if "checkpoint" in config:
        model, _ = load_checkpoint(config["checkpoint"])
    else:
        model = VSharpNet(ModelConfig.from_dict(config.get("model", {})))
    mc = model.config
    H, W = config.get("size", [64, 64])
    n_slices = int(config.get("slices", 4))
    accel = float(config.get("accel", 4))
    repeats = int(config.get("repeats", 1))
    samples = [make_phantom(1000 + s, H, W, int(config.get("coils", 4)), 0.0, accel, dtype=np.dtype(mc.dtype)) for s in range(n_slices)]
    subsets = {"full": None}
    for subset in config.get("reduced_blocks", [[b for b in (1, 2, 6, 10, 11, 12) if b <= mc.T]]):
        subsets[",".join(map(str, subset))] = tuple(subset)

    def run(blocks, s):
        smp = samples[s]
        xs, _ = model(smp.y_tilde[None], smp.mask.grid[None], smp.mask.acs[None], blocks)
        return evaluate(smp.target, np.abs(ad.to_complex(xs[-1].data[0])))["ssim"]

    timings = {}
    for name, blocks in subsets.items():
        best = np.inf
        for _ in range(repeats):
            start = time.perf_counter()
            ssims = _map_slices(lambda s: run(blocks, s), n_slices, args.threads)
            best = min(best, time.perf_counter() - start)
        timings[name] = {"seconds_per_volume": best, "ssim": float(np.mean(ssims))}
    report = {
        "parameters": model.num_parameters(),
        "analytic_parameters": analytic_parameter_count(mc),
        "slices_per_volume": n_slices,
        "threads": args.threads,
        "timings": timings,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return report


def analytic_parameter_count(mc: ModelConfig) -> int:
    from vsharp.denoisers import unet_parameter_count

    n_den = 1 if mc.share_denoisers else mc.T
    c = mc.lagrange_channels
    lag = 2 * c * 9 + c + (len(mc.lagrange_dilations) - 1) * (c * c * 9 + c)  # dilated 3x3 convs
    lag += (c * c + c) + 2 * c + 2  # 1x1 hidden + linear head
    return (
        mc.T
        + mc.Tx
        + unet_parameter_count(2, 2, mc.sens_scales, mc.sens_filters)
        + lag
        + n_den * unet_parameter_count(6, 2, mc.scales, mc.filters)
    )


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vsharp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def threads(p):
        p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")

    p = sub.add_parser("recon", help="reconstruct a k-space container")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", required=True, help="full | equispaced,accel=4,acs=0.08,seed=0 | poisson,... | mask file")
    p.add_argument("--config", help="JSON: checkpoint / model / solver settings")
    p.add_argument("--out", required=True)
    p.add_argument("--intermediate", action="store_true", help="also store every block output")
    p.add_argument("--target-from-kspace", action="store_true", help="score against the RSS of the input k-space")
    p.add_argument("--png", action="store_true")
    threads(p)

    p = sub.add_parser("train", help="train on synthetic phantoms")
    p.add_argument("--config", help="JSON with 'model' and 'train' sections")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mask-gen", help="generate an undersampling mask")
    p.add_argument("--type", required=True, choices=["equispaced", "poisson", "full"])
    p.add_argument("--accel", type=float, required=True)
    p.add_argument("--acs", type=float, default=None)
    p.add_argument("--size", required=True, help="HxW, e.g. 64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--png")

    p = sub.add_parser("eval", help="score reconstructions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True, help=".json or .csv")

    p = sub.add_parser("bench", help="time full and reduced-block inference")
    p.add_argument("--config", help="JSON: checkpoint or model, size, slices, coils, accel, reduced_blocks")
    p.add_argument("--out")
    threads(p)
    return parser


COMMANDS = {"recon": cmd_recon, "train": cmd_train, "mask-gen": cmd_mask_gen, "eval": cmd_eval, "bench": cmd_bench}


def main(argv: Optional[list] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if hasattr(args, "threads"):
            args.threads = _default_threads() if args.threads is None else args.threads
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
        result = COMMANDS[args.command](args)
    except (UsageError, FormatError, MaskError, TrainingError, DivergenceError, TapeError, FileNotFoundError, ValueError) as exc:
        return _fail(exc)
    except Exception as exc:  # anything unexpected still gets a JSON error
        return _fail(exc, 1)
    print(json.dumps(result, indent=2, default=float))
    return 0


def _fail(exc: BaseException, code: Optional[int] = None) -> int:
    name = type(exc).__name__
    if code is None:
        code = next((EXIT_CODES[k.__name__] for k in type(exc).__mro__ if k.__name__ in EXIT_CODES), 1)
    print(json.dumps({"error": name, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
