"""Benchmark sweeps over the synthetic families.

Usage::

    fmmi run --config sweep.cfg [--jobs N] [--out results.csv]
    fmmi plot --csv results.csv --group-by dimension|mi_level [--out-dir DIR]
    fmmi selftest

The config is flat ``key = value`` text; see the README for the grammar.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import math
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .benchdist import FAMILIES, DatasetSpec, sample
from .errors import ConfigError, ValidationError
from .estimators import fit_cfmmi, fit_jfmmi, fmdoe_estimate
from .flowmatch import TrainConfig
from .oracle import ksg_estimate

ESTIMATORS = ("jfmmi_forward", "jfmmi_reverse", "cfmmi", "ksg")
GROUP_BY = ("dimension", "mi_level")
JOBS_ENV = "FMMI_JOBS"

RESULT_FIELDS = ("family", "dim_x", "dim_y", "target_mi_nats", "estimator", "seed",
                 "estimate_nats", "stderr_nats", "wp2_surrogate", "train_seconds", "eval_seconds")

_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)
                 if f.name not in ("seed", "trace_path")}


@dataclass
class SweepConfig:
    families: list[str]
    dims: list[tuple[int, int]]
    mi_levels_nats: list[float]
    estimators: list[str]
    seeds: list[int]
    train_size: int = 100_000
    eval_size: int = 10_000
    seed: int = 0
    ksg_k: int = 5
    timing: bool = False
    train: dict = field(default_factory=dict)
    output_path: str = "results.csv"

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def grid(self):
        """Grid points in deterministic order with their index tuple."""
        axes = (self.families, self.dims, self.mi_levels_nats, self.estimators, self.seeds)
        idx_axes = [range(len(a)) for a in axes]
        for idx in itertools.product(*idx_axes):
            yield idx, tuple(a[i] for a, i in zip(axes, idx))


def _split_list(value):
    return [tok.strip() for tok in value.split(",") if tok.strip()]


def _parse_scalar(text, kind, where):
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "Optional" in str(kind) or kind in (str, "str"):
            return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None
    return text


def parse_config(text: str) -> SweepConfig:
    """Parse flat ``key = value`` config text into a :class:`SweepConfig`."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first on line {raw[key][1]})")
        raw[key] = (value, lineno)

    def where(key):
        return f"line {raw[key][1]} ({key})"

    def take_list(key, conv):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
        items = _split_list(raw[key][0])
        if not items:
            raise ConfigError(f"{where(key)}: list must not be empty")
        return [conv(tok, key) for tok in items]

    def family(tok, key):
        if tok not in FAMILIES:
            raise ConfigError(f"{where(key)}: unknown family {tok!r}; expected one of {', '.join(FAMILIES)}")
        return tok

    def dims(tok, key):
        parts = tok.lower().split("x")
        try:
            dx, dy = (int(p) for p in parts) if len(parts) == 2 else (int(parts[0]),) * 2
        except ValueError:
            raise ConfigError(f"{where(key)}: bad dimension {tok!r}; use DXxDY or D") from None
        if dx < 1 or dy < 1:
            raise ConfigError(f"{where(key)}: dimensions must be positive")
        return dx, dy

    def level(tok, key):
        v = _parse_scalar(tok, float, where(key))
        if not (v >= 0 and math.isfinite(v)):
            raise ConfigError(f"{where(key)}: MI level must be finite and non-negative")
        return v

    def estimator(tok, key):
        if tok not in ESTIMATORS:
            raise ConfigError(f"{where(key)}: unknown estimator {tok!r}; expected one of {', '.join(ESTIMATORS)}")
        return tok

    cfg = SweepConfig(
        families=take_list("families", family),
        dims=take_list("dims", dims),
        mi_levels_nats=take_list("mi_levels", level),
        estimators=take_list("estimators", estimator),
        seeds=take_list("seeds", lambda tok, key: _parse_scalar(tok, int, where(key))),
    )
    scalars = {"train_size": int, "eval_size": int, "seed": int, "ksg.k": int,
               "timing": bool, "output_path": str}
    for key, (value, lineno) in raw.items():
        if key in ("families", "dims", "mi_levels", "estimators", "seeds"):
            continue
        if key in scalars:
            setattr(cfg, key.replace(".", "_"), _parse_scalar(value, scalars[key], where(key)))
        elif key.startswith("train."):
            name = key[len("train."):]
            if name not in _TRAIN_FIELDS:
                raise ConfigError(f"{where(key)}: unknown training option {name!r}")
            cfg.train[name] = _parse_scalar(value, _TRAIN_FIELDS[name], where(key))
        else:
            raise ConfigError(f"{where(key)}: unknown key {key!r}")
    if cfg.train_size < 2 or cfg.eval_size < 2:
        raise ConfigError("train_size and eval_size must both be at least 2")
    if cfg.ksg_k < 1:
        raise ConfigError("ksg.k must be positive")
    try:
        cfg.train_config()
    except ValidationError as exc:
        raise ConfigError(f"invalid training options: {exc}") from None
    return cfg


def load_config(path) -> SweepConfig:
    return parse_config(Path(path).read_text())


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_point(cfg: SweepConfig, idx, point) -> dict:
    """Evaluate one grid point; returns a result row (raises on failure).

    Data depend only on (config seed, family, dims, MI level, seed) so that
    every estimator sees the same sample; the estimator's own randomness is
    keyed on the grid index.
    """
    family, (dx, dy), mi, estimator, seed = point
    fi, di, mi_i, _, _ = idx
    spec = DatasetSpec(family, dx, dy, mi, seed=seed)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, fi, di, mi_i, seed & 0xFFFFFFFF]))
    data = sample(spec, cfg.train_size + cfg.eval_size, data_rng)
    flat = int(np.ravel_multi_index(idx, [len(cfg.families), len(cfg.dims), len(cfg.mi_levels_nats),
                                          len(cfg.estimators), len(cfg.seeds)]))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, flat, 0x5EED]))
    train_cfg = cfg.train_config()

    t0 = time.perf_counter()
    wp2 = 0.0
    stderr = 0.0
    if estimator == "ksg":
        t1 = time.perf_counter()
        value = ksg_estimate(data[:, :dx], data[:, dx:], cfg.ksg_k)
    else:
        if estimator == "cfmmi":
            model, ev = fit_cfmmi(data, dx, train_cfg, "y", rng, n_eval=cfg.eval_size)
            sign = -1.0
        else:
            direction = estimator.split("_")[1]
            model, ev = fit_jfmmi(data, dx, train_cfg, direction, rng, n_eval=cfg.eval_size)
            sign = -1.0 if direction == "forward" else 1.0
        t1 = time.perf_counter()
        res = fmdoe_estimate(model, ev, rng)
        value = sign * res.value_nats
        stderr = res.stderr_nats
        wp2 = res.wp_surrogate[1]
    t2 = time.perf_counter()
    if not all(math.isfinite(v) for v in (value, stderr, wp2)):
        raise ValidationError("non-finite estimate")
    return {
        "family": family, "dim_x": dx, "dim_y": dy, "target_mi_nats": float(mi),
        "estimator": estimator, "seed": seed, "estimate_nats": float(value),
        "stderr_nats": float(stderr), "wp2_surrogate": float(wp2),
        "train_seconds": float(t1 - t0) if cfg.timing else 0.0,
        "eval_seconds": float(t2 - t1) if cfg.timing else 0.0,
    }


def _safe_point(args):
    cfg, idx, point = args
    try:
        return run_point(cfg, idx, point), None
    except Exception as exc:  # isolate failures per grid point
        return None, f"{type(exc).__name__}: {exc}"


def run_sweep(cfg: SweepConfig, jobs: int = 1, out_path=None, stdout=None, stderr=None) -> int:
    """Run every grid point, write the CSV, print a summary; returns the exit status."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    out_path = Path(out_path or cfg.output_path)
    work = [(cfg, idx, point) for idx, point in cfg.grid()]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_safe_point, work))
    else:
        outcomes = [_safe_point(w) for w in work]

    out_path.parent.mkdir(parents=True, exist_ok=True)
    failures = []
    n_rows = 0
    with open(out_path, "w", newline="") as fh:
        fh.write(",".join(RESULT_FIELDS) + "\n")
        for (_, idx, point), (row, err) in zip(work, outcomes):
            if err is not None:
                failures.append((point, err))
                continue
            fh.write(",".join(_fmt(row[k]) for k in RESULT_FIELDS) + "\n")
            n_rows += 1

    print(f"wrote {n_rows} of {len(work)} grid points to {out_path}", file=stdout)
    for (family, (dx, dy), mi, est, seed), err in failures:
        print(f"FAILED {family} {dx}x{dy} mi={mi!r} {est} seed={seed}: {err}", file=stderr)
    return 0 if n_rows > 0 and not failures else 1


def read_results(csv_path) -> list[dict]:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RESULT_FIELDS:
            raise ValidationError(f"{csv_path}: header {header} does not match {list(RESULT_FIELDS)}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if len(rec) != len(RESULT_FIELDS):
                raise ValidationError(f"{csv_path}:{lineno}: expected {len(RESULT_FIELDS)} fields, got {len(rec)}")
            row = dict(zip(RESULT_FIELDS, rec))
            try:
                for k in ("dim_x", "dim_y", "seed"):
                    row[k] = int(row[k])
                for k in ("target_mi_nats", "estimate_nats", "stderr_nats", "wp2_surrogate",
                          "train_seconds", "eval_seconds"):
                    row[k] = float(row[k])
            except ValueError as exc:
                raise ValidationError(f"{csv_path}:{lineno}: {exc}") from None
            rows.append(row)
    return rows


def emit_plotdata(csv_path, group_by: str, out_dir=None) -> list[Path]:
    """Write one whitespace-separated file per (family, estimator).

    Columns: x (``dim_x`` or MI level), mean estimate over seeds,
    sample standard deviation over seeds (ddof=1, and 0 for a single
    seed), ground truth. Series that
    differ along the other axis are separate gnuplot data blocks.
    """
    if group_by not in GROUP_BY:
        raise ValidationError(f"group_by must be one of {GROUP_BY}")
    rows = read_results(csv_path)
    csv_path = Path(csv_path)
    out_dir = Path(out_dir) if out_dir else csv_path.with_name(f"{csv_path.stem}_plot_{group_by}")
    out_dir.mkdir(parents=True, exist_ok=True)

    groups: dict = {}
    for r in rows:
        if group_by == "dimension":
            x, block = r["dim_x"], ("target_mi_nats", r["target_mi_nats"])
        else:
            x, block = r["target_mi_nats"], ("dims", f"{r['dim_x']}x{r['dim_y']}")
        groups.setdefault((r["family"], r["estimator"]), {}) \
              .setdefault(block, {}).setdefault(x, []).append(r)

    written = []
    for (family, estimator), blocks in sorted(groups.items()):
        path = out_dir / f"{family}__{estimator}.dat"
        lines = [f"# family={family} estimator={estimator} group_by={group_by}",
                 "# columns: x mean_estimate_nats std_estimate_nats ground_truth_nats",
                 "# std is the sample standard deviation (ddof=1) across seeds, 0 when only one seed"]
        for b, (bname, bval) in enumerate(sorted(blocks)):
            if b:
                lines += ["", ""]
            lines.append(f"# {bname}={bval}")
            for x, members in sorted(blocks[(bname, bval)].items()):
                est = np.array([m["estimate_nats"] for m in members])
                truth = members[0]["target_mi_nats"]
                std = float(est.std(ddof=1)) if len(est) > 1 else 0.0
                lines.append(f"{x!r} {float(est.mean())!r} {std!r} {truth!r}")
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def _selftest(stdout) -> int:
    from . import selftest
    return selftest.run(stdout)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fmmi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a benchmark sweep")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--jobs", type=int, default=int(os.environ.get(JOBS_ENV, "1")),
                       help=f"worker processes (default: ${JOBS_ENV} or 1)")
    p_run.add_argument("--out", default=None, help="CSV path (overrides output_path)")
    p_plot = sub.add_parser("plot", help="turn a results CSV into plot-data files")
    p_plot.add_argument("--csv", required=True)
    p_plot.add_argument("--group-by", required=True, choices=GROUP_BY)
    p_plot.add_argument("--out-dir", default=None)
    sub.add_parser("selftest", help="run the analytic-field and oracle checks")
    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            cfg = load_config(args.config)
        except (ConfigError, OSError) as exc:
            print(f"error: {args.config}: {exc}", file=sys.stderr)
            return 2
        return run_sweep(cfg, max(1, args.jobs), args.out)
    if args.command == "plot":
        try:
            paths = emit_plotdata(args.csv, args.group_by, args.out_dir)
        except (ValidationError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for p in paths:
            print(p)
        return 0
    try:
        return _selftest(sys.stdout)
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
