"""Command-line entry point: extract-stats, train, sample, verify, eval, energy.

Every command accepts ``--config FILE`` (key=value lines) and repeated
``--set key=value`` overrides, with precedence flags > file > defaults.  The
fully resolved config is written next to the outputs as ``resolved.cfg``;
rerunning with ``--config resolved.cfg`` reproduces the outputs exactly.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure,
5 a verification check reported FAIL.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK_FAILED = 0, 2, 3, 4, 5

log = logging.getLogger("priorbridge")


# ---------------------------------------------------------------------------
# run configs


@dataclass
class ExtractRun:
    data: str = ""
    out: str = "stats.json"
    K: int = 4
    types: str = ""
    tables: str = ""
    var_floor: float = 1e-6


@dataclass
class TrainRun:
    data: str = ""
    out: str = "train_out"
    stats: str = ""  # computed from the data when empty and the energy needs it
    tables: str = ""


@dataclass
class SampleRun:
    checkpoint: str = ""
    out: str = "samples"
    n_items: int = 8
    m_points: int = 64
    steps: int = 100
    seed: Optional[int] = None
    frames: bool = False
    format: str = "xyz"  # xyz | ply | txt
    tables: str = ""


@dataclass
class VerifyRun:
    out: str = "verify_out"
    bridge: str = "brownian"  # brownian | forced
    energy: str = "knn_uniform"
    pin: str = ""  # point file; a seeded random cloud when empty
    m_points: int = 64
    K: int = 4
    steps_list: str = "50,200,1000"
    n_paths: int = 100
    seed: Optional[int] = None
    tol_factor: float = 1.5
    schedule_kind: str = "constant"
    sigma_start: float = 1.0
    sigma_end: float = 1.0
    horizon: float = 1.0
    schedule_power: float = 2.0
    force_clip: float = 1e3
    gronwall_threshold: float = 1e3


@dataclass
class EvalRun:
    samples: str = ""
    reference: str = ""
    out: str = "eval_out"
    K: int = 4
    types: str = ""
    tables: str = ""
    emd: bool = True


@dataclass
class EnergyRun:
    input: str = ""
    energy: str = "riesz"
    out: str = ""  # directory; results go to stdout when empty
    stats: str = ""
    K: int = 4
    types: str = ""
    tables: str = ""
    term_mask: str = "bond,angle,lj,coulomb"


def _types(s: str):
    return tuple(t.strip() for t in s.split(",") if t.strip())


def _require(value, name):
    from .config import ConfigError

    if not value:
        raise ConfigError(f"missing required setting {name!r}")


def _fresh_seed() -> int:
    import numpy as np

    return int(np.random.SeedSequence().entropy % (2**31))


def _tables(path: str, types):
    from .geometry import load_tables

    if not types:
        return None
    return load_tables(path or None, types)


def _write_resolved(out_dir: Path, *objs, threads: Optional[int] = None) -> None:
    from .config import dump

    text = "".join(dump(o) for o in objs)
    if threads is not None:
        text += f"threads={threads}\n"
    (out_dir / "resolved.cfg").write_text(text)


def _split_layers(args, classes):
    """Distribute file and flag values over several config dataclasses."""
    from .config import ConfigError, parse_overrides, read_file

    file_vals = read_file(args.config) if args.config else {}
    flag_vals = parse_overrides(args.set)
    for layer in (file_vals, flag_vals):
        layer.pop("threads", None)
    owners = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            owners.setdefault(f.name, cls)
    for layer, vals in (("file", file_vals), ("flag", flag_vals)):
        unknown = sorted(k for k in vals if k not in owners)
        if unknown:
            raise ConfigError(f"unknown {layer} keys {unknown}")
    split = []
    for cls in classes:
        fv = {k: v for k, v in file_vals.items() if owners[k] is cls}
        gv = {k: v for k, v in flag_vals.items() if owners[k] is cls}
        split.append((fv, gv))
    return split


def _resolve(args, cls):
    from .config import resolve

    (fv, gv), = _split_layers(args, [cls])
    return resolve(cls, fv, gv)


# ---------------------------------------------------------------------------
# commands


def cmd_extract_stats(args) -> int:
    from .geometry import extract_stats
    from .io import read_dataset

    run = _resolve(args, ExtractRun)
    _require(run.data, "data")
    types = _types(run.types)
    tables = _tables(run.tables, types)
    dataset = read_dataset(run.data, types or None)
    stats = extract_stats(dataset, run.K, tables, run.var_floor)
    if types:
        stats = dataclasses.replace(stats, type_names=types)
    out = Path(run.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(stats.to_json())
    _write_resolved(out.parent, run, threads=args.threads)
    print(f"wrote {out} ({len(dataset)} items, fingerprint {stats.fingerprint()})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import resolve
    from .geometry import DatasetStats, extract_stats
    from .io import read_dataset
    from .model import TrainConfig, build_force, save_checkpoint, train

    (rf, rg), (tf, tg) = _split_layers(args, [TrainRun, TrainConfig])
    run = resolve(TrainRun, rf, rg)
    if "seed" not in tf and "seed" not in tg:
        tg = dict(tg, seed=_fresh_seed())
    cfg = resolve(TrainConfig, tf, tg)
    _require(run.data, "data")
    tables = _tables(run.tables, cfg.types)
    dataset = read_dataset(run.data, cfg.types or None)
    stats = None
    if cfg.energy in ("amber", "statistical", "knn_uniform"):
        if run.stats:
            stats = DatasetStats.from_json(Path(run.stats).read_text())
        else:
            stats = extract_stats(dataset, cfg.K, tables)
    force = build_force(cfg, stats, tables)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, run, cfg, threads=args.threads)
    rows = ["epoch,loss,alpha"]

    def cb(epoch, loss, model):
        rows.append(f"{epoch},{loss!r},{model.alpha!r}")

    ckpt = train(cfg, dataset, force, stats=stats, tables=tables, callback=cb)
    save_checkpoint(ckpt, out / "checkpoint.pbc")
    (out / "train_log.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {out / 'checkpoint.pbc'} (final loss {ckpt.loss_trace[-1]:.6g}, fingerprint {ckpt.fingerprint()})")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .config import ConfigError
    from .eval import sample
    from .geometry import MarkedPointSet
    from .io import write_item, write_xyz_frames
    from .model import load_checkpoint

    run = _resolve(args, SampleRun)
    _require(run.checkpoint, "checkpoint")
    if run.format not in ("xyz", "ply", "txt"):
        raise ConfigError(f"unknown format {run.format!r}")
    if run.seed is None:
        run = dataclasses.replace(run, seed=_fresh_seed())
    ckpt = load_checkpoint(run.checkpoint)
    tables = _tables(run.tables, ckpt.config.types)
    batch = sample(ckpt, run.n_items, run.m_points, run.steps, run.seed, tables=tables,
                   keep_trajectories=run.frames)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, run, threads=args.threads)
    for i, item in enumerate(batch.items):
        write_item(item, out / f"sample_{i:04d}.{run.format}")
    if run.frames:
        cfg = ckpt.config
        k = len(cfg.types)
        scale = cfg.type_scale if cfg.feature_scaling else 1.0
        tdir = out / "trajectories"
        tdir.mkdir(exist_ok=True)
        for i, traj in enumerate(batch.trajectories):
            frames = [MarkedPointSet.from_state(s, k, cfg.types, scale, round_output=True) for s in traj]
            write_xyz_frames(frames, tdir / f"trajectory_{i:04d}.xyz", batch.times)
    manifest = {"checkpoint_fingerprint": batch.fingerprint, "seed": batch.seed, "steps": batch.steps,
                "n_items": len(batch.items)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(batch.items)} samples to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    import numpy as np

    from .bridges import BridgeSpec, brownian_gronwall_series, gronwall_check, verify_pinning
    from .config import ConfigError
    from .energies import EnergyForce
    from .geometry import extract_stats
    from .io import read_item
    from .sde import NoiseSchedule, path_rng

    run = _resolve(args, VerifyRun)
    if run.seed is None:
        run = dataclasses.replace(run, seed=_fresh_seed())
    try:
        steps_list = [int(s) for s in run.steps_list.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"steps_list {run.steps_list!r} is not a comma-separated integer list") from None
    if run.bridge not in ("brownian", "forced"):
        raise ConfigError(f"unknown bridge {run.bridge!r}")
    schedule = NoiseSchedule(run.schedule_kind, run.sigma_start, run.sigma_end, run.horizon, run.schedule_power)
    if run.pin:
        pin_set = read_item(run.pin)
    else:
        from .geometry import MarkedPointSet

        pin_set = MarkedPointSet(path_rng(run.seed, 0, 5).standard_normal((run.m_points, 3)))
    pin = pin_set.coords
    if run.bridge == "forced":
        stats = extract_stats([pin_set], run.K) if run.energy in ("statistical", "knn_uniform") else None
        force = EnergyForce(run.energy, stats, None, run.K, clip=run.force_clip)
        spec = BridgeSpec("forced", pin, schedule, force=force)
    else:
        spec = BridgeSpec("brownian", pin, schedule)
    pinning = verify_pinning(spec, steps_list, run.n_paths, run.seed, tol_factor=run.tol_factor)
    gron = gronwall_check(brownian_gronwall_series(schedule, pin.size), threshold=run.gronwall_threshold)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, run, threads=args.threads)
    report = {"pinning": json.loads(pinning.to_json()), "gronwall": json.loads(gron.to_json())}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"pinning: {pinning.status}  {pinning.message}")
    print(f"gronwall: {'PASS' if gron.passed else 'FAIL'}  {gron.message}")
    return EXIT_OK if pinning.passed and gron.passed else EXIT_CHECK_FAILED


def cmd_eval(args) -> int:
    from .eval import evaluate
    from .io import read_dataset

    run = _resolve(args, EvalRun)
    _require(run.samples, "samples")
    types = _types(run.types)
    tables = _tables(run.tables, types)
    generated = read_dataset(run.samples, types or None)
    reference = read_dataset(run.reference, types or None) if run.reference else None
    report = evaluate(generated, reference, tables=tables, K=run.K, use_emd=run.emd)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, run, threads=args.threads)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def cmd_energy(args) -> int:
    from .energies import AMBER_TERMS, EnergyForce
    from .geometry import DatasetStats, extract_stats
    from .io import read_item

    run = _resolve(args, EnergyRun)
    _require(run.input, "input")
    types = _types(run.types)
    tables = _tables(run.tables, types)
    item = read_item(run.input, types or None)
    stats = None
    if run.energy in ("amber", "statistical", "knn_uniform"):
        if run.stats:
            stats = DatasetStats.from_json(Path(run.stats).read_text())
        else:
            stats = extract_stats([item], run.K, tables)
    mask = frozenset(s.strip() for s in run.term_mask.split(",") if s.strip()) or AMBER_TERMS
    ef = EnergyForce(run.energy, stats, tables, run.K, mask)
    fe = ef.frozen(item)
    e, g = fe.value_and_grad(item.coords)
    lines = [f"# energy={run.energy} value={e!r}", "# gradient rows: dE/dx dE/dy dE/dz"]
    lines += [" ".join(repr(float(v)) for v in row) for row in g]
    text = "\n".join(lines) + "\n"
    if run.out:
        out = Path(run.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(out, run, threads=args.threads)
        (out / "energy.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "extract-stats": (cmd_extract_stats, "per-type length/angle statistics from a data directory"),
    "train": (cmd_train, "fit the drift by bridge score matching"),
    "sample": (cmd_sample, "simulate the learned process from its Gaussian start"),
    "verify": (cmd_verify, "terminal pinning and Gronwall checks for a bridge"),
    "eval": (cmd_eval, "MMD/COV, uniformity, stability and uniqueness metrics"),
    "energy": (cmd_energy, "energy value and analytic gradient of one file"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="priorbridge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        sp.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    return p


def _exit_code(exc: BaseException) -> int:
    from . import bridges, energies
    from .config import ConfigError
    from .geometry import GeometryError, TableError
    from .io import DataError
    from .model import CheckpointError

    if isinstance(exc, (FloatingPointError, bridges.SingularityError, energies.SingularityError)):
        return EXIT_NUMERIC
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, GeometryError, TableError, CheckpointError, OSError)):
        return EXIT_DATA
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    raise exc


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    fn = COMMANDS[args.command][0]
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return fn(args)
        return fn(args)
    except Exception as exc:  # mapped to exit codes below
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
