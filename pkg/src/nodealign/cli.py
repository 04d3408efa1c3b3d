"""Command-line entry point: ``nodealign train|sweep|eval|dump``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``NODEALIGN_OUT_ROOT`` supplies the output root when ``--out-dir`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, covalign
from .config import ConfigError, dump_config, load_config, set_param
from .trainer import (CheckpointVersionError, MetricsRecord, TrainConfig, evaluate,
                      load_checkpoint, save_checkpoint, train)

log = logging.getLogger("nodealign")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
OUT_ENV = "NODEALIGN_OUT_ROOT"


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    root = os.environ.get(OUT_ENV)
    if root:
        return Path(root)
    return Path("runs")


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRecord.CSV_FIELDS)
        for r in records:
            w.writerow(r.csv_row())


def run_training(cfg: TrainConfig, out: Path, ood_audit: bool = False) -> dict:
    """Train once and write metrics.csv, summary.json, model.ckpt, config.ini, manifest.json."""
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    ood_path = out / "ood.csv" if ood_audit else None
    if ood_path is not None and ood_path.exists():
        ood_path.unlink()
    result = train(cfg, ood_csv=ood_path)
    files = {
        "metrics": out / "metrics.csv",
        "summary": out / "summary.json",
        "checkpoint": out / "model.ckpt",
        "config": out / "config.ini",
    }
    if ood_path is not None:
        files["ood"] = ood_path
    write_metrics_csv(result.records, files["metrics"])
    save_checkpoint(result.state, cfg, files["checkpoint"])
    files["config"].write_text(dump_config(cfg))
    last = result.records[-1]
    summary = {
        "final": {k: getattr(last, k) for k in MetricsRecord.CSV_FIELDS},
        "wall_clock_s": last.wall_clock,
        "mask_builds": result.state.mask_builds,
        "epochs": [{"epoch": r.epoch, "wall_clock_s": r.wall_clock} for r in result.records],
    }
    files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True))
    manifest = {
        "tool": "nodealign",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "started": started,
        "finished": _now(),
        "artifacts": {k: str(v) for k, v in files.items()},
        "checksums": {k: _sha256(v) for k, v in files.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"record": last, "checksums": manifest["checksums"]}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(args)
    res = run_training(cfg, out, ood_audit=args.ood_audit)
    log.info("wrote %s (target acc %.4f)", out, res["record"].target_acc)
    if args.dump_xi or args.dump_mask:
        state, _ = load_checkpoint(out / "model.ckpt")
        if args.dump_xi and state.stats.xi is not None:
            covalign.write_matrix_csv(state.stats.xi, out / "xi.csv")
        if args.dump_mask and state.mask is not None:
            covalign.write_matrix_csv(state.mask.mask, out / "mask.csv")
    return EXIT_OK


def parse_sweep_params(specs: list[str]) -> dict[str, list[str]]:
    if not specs:
        raise UsageError("sweep needs at least one --param name=v1,v2,...")
    grid: dict[str, list[str]] = {}
    for spec in specs:
        name, sep, values = spec.partition("=")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not sep or not name.strip():
            raise UsageError(f"malformed --param {spec!r}; expected name=v1,v2")
        if not vals:
            raise UsageError(f"--param {name} has an empty value list")
        grid[name.strip()] = vals
    return grid


def _sweep_cell(job):
    cfg_dict, assignments, out = job
    cfg = TrainConfig.from_dict(cfg_dict)
    for name, value in assignments:
        set_param(cfg, name, value)
    cfg.validate()
    res = run_training(cfg, Path(out))
    return assignments, res


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    if args.seed is not None:
        base.seed = args.seed
    grid = parse_sweep_params(args.param)
    names = list(grid)
    # reject unknown names and bad values before anything runs
    cells = []
    for combo in itertools.product(*(grid[n] for n in names)):
        assignments = list(zip(names, combo))
        probe = TrainConfig.from_dict(base.to_dict())
        for name, value in assignments:
            set_param(probe, name, value)
        try:
            probe.validate()
        except ValueError as exc:
            raise ConfigError(f"sweep cell {dict(assignments)} is invalid: {exc}") from None
        cells.append(assignments)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for assignments in cells:
        tag = "_".join(f"{n}={v}" for n, v in assignments)
        jobs.append((base.to_dict(), assignments, str(out / tag)))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]
    rows = []
    for (assignments, res), job in zip(results, jobs):
        r = res["record"]
        row = dict(assignments)
        row.update({k: getattr(r, k) for k in MetricsRecord.CSV_FIELDS if k != "epoch"})
        row["run_dir"] = os.path.basename(job[2])
        row["metrics_sha256"] = res["checksums"]["metrics"]
        row["checkpoint_sha256"] = res["checksums"]["checkpoint"]
        rows.append(row)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    manifest = {
        "tool": "nodealign", "version": __version__, "grid": grid, "seed": base.seed,
        "config": base.to_dict(), "finished": _now(),
        "artifacts": [str(out / "sweep.csv")] + [j[2] for j in jobs],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("sweep of %d cells written to %s", len(rows), out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    rec = evaluate(args.checkpoint, cfg, batches=args.batches)
    payload = {"source_acc": rec.source_acc, "target_acc": rec.target_acc,
               "mask_density": rec.mask_density}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text)
    print(text)
    return EXIT_OK


class StateNotReady(RuntimeError):
    pass


def cmd_dump(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "bank":
        import numpy as np
        for tag, bank in (("source", state.bank_s), ("target", state.bank_t)):
            np.savetxt(out / f"bank_{tag}.csv", bank.prototypes, delimiter=",", fmt="%.17g")
    elif args.what == "mask":
        if state.mask is None:
            raise StateNotReady("style mask not built yet")
        covalign.write_matrix_csv(state.mask.mask, out / "mask.csv")
    else:
        if state.stats.xi is None:
            raise StateNotReady("statistics not finalized")
        covalign.write_matrix_csv(state.stats.xi, out / "xi.csv")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nodealign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    verb = p.add_mutually_exclusive_group()
    verb.add_argument("-q", "--quiet", action="store_true")
    verb.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train once")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--ood-audit", action="store_true", help="write ood.csv per epoch")
    t.add_argument("--dump-xi", action="store_true", help="write xi.csv at the end")
    t.add_argument("--dump-mask", action="store_true", help="write mask.csv at the end")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="Cartesian-product parameter sweep")
    s.add_argument("config")
    s.add_argument("--param", action="append", default=[], metavar="NAME=V1,V2")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--batches", type=int, default=20)
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump", help="write bank, mask or xi as CSV")
    d.add_argument("checkpoint")
    d.add_argument("--what", required=True)
    d.add_argument("--out-dir")
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "what", None) not in (None, "bank", "mask", "xi"):
            raise UsageError(f"unknown --what {args.what!r}; choose bank, mask or xi")
    except UsageError as exc:
        print(f"nodealign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"nodealign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StateNotReady, CheckpointVersionError, FileNotFoundError) as exc:
        print(f"nodealign: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"nodealign: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
