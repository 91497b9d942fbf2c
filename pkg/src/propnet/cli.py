"""Command-line entry point: synth, train, propagate, evaluate, ablate."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("propnet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _versions() -> dict:
    import scipy
    import torch

    return {"propnet": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def write_run_json(out: Path, command: str, argv: list[str], cfg=None, wall: float = 0.0, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "argv": argv,
        "versions": _versions(),
        "wall_time_s": wall,
        "config_fingerprint": cfg.fingerprint() if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
    }
    payload.update(extra or {})
    (out / "run.json").write_text(json.dumps(payload, indent=2))


def _config(args):
    from .config import parse_config

    return parse_config(getattr(args, "config", None), getattr(args, "set", None) or [])


def cmd_synth(args) -> dict:
    from .ablation import largest_slice
    from .data import phantom_set, save_mask, save_volume

    cfg = _config(args)
    out = Path(args.out)
    cases = phantom_set(cfg.data.phantom, args.count, split=args.split)
    manifest = []
    for vol, mask in cases:
        save_volume(vol, out / vol.id)
        save_mask(mask, out / mask.id)
        s = largest_slice(mask.voxels)
        save_mask(mask.voxels[s], out / "seeds" / mask.id, spacing=mask.spacing, id=mask.id,
                  extra={"slice_index": s})
        manifest.append({"id": vol.id, "shape": list(vol.shape), "spacing_mm": list(vol.spacing),
                         "tumor_voxels": int(mask.voxels.sum()), "seed_slice": s})
    (out / "manifest.json").write_text(json.dumps({"count": len(manifest), "cases": manifest}, indent=2))
    log.info("wrote %d phantoms to %s", len(manifest), out)
    return {"cfg": cfg}


def cmd_train(args) -> dict:
    import torch

    from .ablation import make_validator
    from .plots import training_curves
    from .train import train

    cfg = _config(args)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    res = train(cfg, args.out, resume=args.resume, validate=make_validator(cfg))
    training_curves(res.history, Path(args.out) / "training.png")
    return {"cfg": cfg, "extra": {"checkpoint": str(res.checkpoint),
                                  "best_checkpoint": str(res.best_checkpoint) if res.best_checkpoint else None}}


def cmd_propagate(args) -> dict:
    import dataclasses

    from .data import load_mask, load_volume, save_mask
    from .propagate import ModelPredictor, segment_volume
    from .train import load_model

    cfg = _config(args)
    pcfg = cfg.propagate
    if args.sequential:
        pcfg = dataclasses.replace(pcfg, parallel=False)
    vol = load_volume(args.volume)
    seed, meta = load_mask(args.seed_mask)
    if "slice_index" not in meta:
        raise ValueError("seed mask sidecar must record 'slice_index'")
    if seed.ndim == 3:
        seed = seed[meta["slice_index"]]
    model = load_model(args.ckpt)
    t0 = time.perf_counter()
    seg = segment_volume(ModelPredictor(model), vol, int(meta["slice_index"]), seed, pcfg,
                         cfg.data.target_spacing, cfg.data.normalize_mode)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    save_mask(seg.mask, out / vol.id)
    trace = seg.result.to_dict()
    trace.update(seed_index=int(meta["slice_index"]), crop=vars(seg.crop), total_time_s=elapsed,
                 mcc=pcfg.mcc, parallel=pcfg.parallel)
    (out / "trace.json").write_text(json.dumps(trace, indent=2, default=list))
    return {"cfg": cfg}


def cmd_evaluate(args) -> dict:
    from .plots import case_boxplot
    from .metrics import evaluate_set

    tolerances = tuple(float(t) for t in args.tolerances.split(",") if t.strip())
    report = evaluate_set(args.pred, args.gt, tolerances)
    report.fingerprint = {"pred": str(args.pred), "gt": str(args.gt)}
    report.write(args.out)
    case_boxplot(report, Path(args.out) / "report.png")
    for k, (m, s) in report.aggregates.items():
        print(f"{k:>9}: {m:.3f} ± {s:.3f}")
    return {}


def cmd_ablate(args) -> dict:
    from .ablation import format_deviation_table, format_table, run_ablation

    cfg = _config(args)
    reports = run_ablation(args.suite, cfg, args.ckpt_dir, args.out)
    rows = json.loads((Path(args.out) / "summary.json").read_text())["rows"]
    key = next(k for k in ("variant", "deviation_mm", "interval_mm") if k in rows[0])
    print(format_deviation_table(rows) if key == "deviation_mm" else format_table(rows, key))
    return {"cfg": cfg, "extra": {"reports": sorted(reports)}}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="propnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="JSON run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")

    sp = sub.add_parser("synth", help="generate phantom volumes, masks and seed slices")
    with_config(sp)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--split", type=int, default=0, help="0 train, 1 validation, other: extra sets")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a network")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("propagate", help="segment a volume from one annotated slice")
    with_config(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--seed-mask", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sequential", action="store_true", help="run the two fronts one after another")
    sp.set_defaults(func=cmd_propagate)

    sp = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tolerances", default="0.5,1.0,2.0")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="run an ablation or robustness suite")
    from .ablation import SUITES

    sp.add_argument("--suite", required=True, choices=SUITES)
    with_config(sp)
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    from .config import ConfigError

    t0 = time.perf_counter()
    try:
        result = args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("%s failed: %s", args.command, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_FAIL
    write_run_json(Path(args.out), args.command, argv, result.get("cfg"), time.perf_counter() - t0,
                   result.get("extra"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
