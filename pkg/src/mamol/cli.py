"""``mamol`` command line: gen, train, eval, grid, ablate, generalize, placement, selftest.

Exit codes: 0 success, 1 invalid input (config, data, checkpoint), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, dump_config, from_dict, load_config, to_dict
from .datagen import save_dataset
from .errors import CheckpointError, LoaderError, ValidationError
from .evalkit import (
    confusion_matrix,
    load_source,
    metrics_from_cm,
    placement_sweep,
    prepare_data,
    run_ablation,
    run_generalization,
    run_grid,
    seeded,
)
from .model import build_model
from .trainer import predict, train

log = logging.getLogger("mamol")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="dotted override, value parsed as YAML (repeatable)")
    p.add_argument("--output", metavar="DIR", help="output directory (default: output_dir from config)")
    p.add_argument("--seed", type=int, help="run seed (overrides the config's seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mamol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mamol {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("gen", "write the synthetic dataset to <output>/data"),
        ("train", "train one model; writes model.ckpt and train_log.jsonl"),
        ("eval", "score a checkpoint on the configured train/test splits"),
        ("grid", "missing-rate x split x variant grid"),
        ("ablate", "expert-family ablation table"),
        ("generalize", "train at one missing setting, sweep the test missing rate"),
        ("placement", "injection-layer / expert-count sweep"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        if name in ("grid", "ablate", "generalize", "placement"):
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH", help="default: <output>/model.ckpt")
    st = sub.add_parser("selftest", help="gradient and oracle self-checks")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--output", metavar="DIR", help="optional directory for selftest.json")
    return parser


def resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output:
        cfg.output_dir = args.output
    return cfg


def _begin(cfg: RunConfig, command: str) -> tuple[Path, dict]:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(dump_config(cfg))
    meta = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    return out, meta


def _finish(out: Path, meta: dict, t0: float) -> None:
    meta["finished"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    meta["elapsed_seconds"] = round(time.perf_counter() - t0, 3)
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen(cfg: RunConfig) -> Path:
    out, meta = _begin(cfg, "gen")
    t0 = time.perf_counter()
    if cfg.data.source != "synthetic":
        raise ValidationError("gen needs data.source = synthetic")
    ds = load_source(cfg, cfg.seed)
    manifest = save_dataset(ds, out / "data")
    print(f"wrote {len(ds)} samples to {manifest}")
    _finish(out, meta, t0)
    return manifest


def cmd_train(cfg: RunConfig) -> Path:
    out, meta = _begin(cfg, "train")
    t0 = time.perf_counter()
    run = seeded(cfg, 0)
    train_set, _ = prepare_data(run, run.seed)
    model = build_model(run.model, train_set.shapes, train_set.num_classes)
    checksum = model.frozen_checksum()
    result = train(model, train_set, run.train)
    if model.frozen_checksum() != checksum:
        raise RuntimeError("frozen parameters changed during training")
    (out / "train_log.jsonl").write_text(result.jsonl())
    ckpt = save_checkpoint(out / "model.ckpt", model, {
        "run_config": to_dict(cfg),
        "seed": run.seed,
        "model": dataclasses.asdict(run.model),
        "final_train_accuracy": result.train_accuracy,
    })
    print(f"train accuracy {100 * result.train_accuracy:.2f}%  steps {result.total_steps}  -> {ckpt}")
    _finish(out, meta, t0)
    return ckpt


def cmd_eval(cfg: RunConfig, checkpoint: str | Path) -> dict:
    model, _ = restore_model(checkpoint)
    out, md = _begin(cfg, "eval")
    t0 = time.perf_counter()
    run = seeded(cfg, 0)
    train_set, test_set = prepare_data(run, run.seed)
    report = {"checkpoint": str(checkpoint)}
    for name, ds in (("train", train_set), ("test", test_set)):
        if [tuple(s) for s in ds.shapes] != model.shapes:
            raise ValidationError(f"{name} data shapes {ds.shapes} do not match checkpoint {model.shapes}")
        m = metrics_from_cm(confusion_matrix(ds.labels, predict(model, ds), ds.num_classes))
        report[name] = m
        print(f"{name}: OA {100 * m['oa']:.2f}%  kappa {m['kappa_x100']:.2f}  F1-macro {100 * m['f1_macro']:.2f}")
    _write_json(out / "metrics.json", report)
    _finish(out, md, t0)
    return report


def _harness(cfg: RunConfig, command: str, fn, jobs: int) -> dict:
    out, meta = _begin(cfg, command)
    t0 = time.perf_counter()
    res = fn(cfg, output_dir=out, jobs=jobs)
    text = out / "results" / {"grid": "grid", "ablate": "ablation", "generalize": "generalization",
                  "placement": "placement"}[command]
    table = text / "table.txt"
    if table.exists():
        print(table.read_text(), end="")
    else:
        print(json.dumps(res["summary"]["oa"], indent=2, sort_keys=True))
    _finish(out, meta, t0)
    return res


def cmd_grid(cfg: RunConfig, jobs: int = 1) -> dict:
    return _harness(cfg, "grid", run_grid, jobs)


def cmd_ablate(cfg: RunConfig, jobs: int = 1) -> dict:
    return _harness(cfg, "ablate", run_ablation, jobs)


def cmd_selftest(seed: int = 0, output: str | None = None) -> bool:
    from .selftest import run_selftest

    report = run_selftest(seed)
    for check in report["checks"]:
        status = "PASS" if check["ok"] else "FAIL"
        print(f"[{status}] {check['name']}: {check['detail']}")
    print(f"selftest {'passed' if report['ok'] else 'FAILED'} in {report['seconds']:.1f}s")
    if output:
        Path(output).mkdir(parents=True, exist_ok=True)
        _write_json(Path(output) / "selftest.json", report)
    return report["ok"]


def _setup_logging() -> None:
    level = os.environ.get("MAMOL_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ValidationError(f"MAMOL_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        if args.command == "selftest":
            return 0 if cmd_selftest(args.seed, args.output) else 2
        cfg = resolve(args)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            ckpt = args.checkpoint or str(Path(cfg.output_dir) / "model.ckpt")
            if args.config is None and not args.overrides:
                # score against the data the checkpoint was trained on
                meta, _ = load_checkpoint(ckpt)
                cfg = from_dict(RunConfig, meta["run_config"])
                if args.seed is not None:
                    cfg.seed = args.seed
                cfg.output_dir = args.output or str(Path(ckpt).parent)
            cmd_eval(cfg, ckpt)
        elif args.command == "grid":
            cmd_grid(cfg, args.jobs)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.jobs)
        elif args.command == "generalize":
            _harness(cfg, "generalize", run_generalization, args.jobs)
        elif args.command == "placement":
            _harness(cfg, "placement", lambda c, output_dir, jobs: placement_sweep(c, output_dir=output_dir, jobs=jobs),
                     args.jobs)
    except (ValidationError, LoaderError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
