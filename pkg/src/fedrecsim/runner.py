"""Run configs end to end and persist their results.

Each run gets its own directory under ``cfg.out`` holding ``metrics.csv``,
``run.json`` and ``events.jsonl``. A grid keeps going when a run fails and
reports a nonzero status at the end.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, apply_overrides, parse_config, serialize_config
from .data import InteractionDataset, build_dataset, load_ratings, synth_dataset
from .protocol import RoundReport, resolve_targets, run_training

log = logging.getLogger(__name__)

DEFENSE_STATS = ("clipped", "bank_mass", "released_mass")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def load_dataset(cfg: RunConfig) -> InteractionDataset:
    d = cfg.dataset
    seed = cfg.seed if d.seed < 0 else d.seed
    if d.source == "file":
        records = load_ratings(d.path, d.format)
        return build_dataset(records, d.test_fraction, d.neg_ratio, seed=seed, split=d.split)
    return synth_dataset(d.users, d.items, d.density, d.skew, seed=seed, test_fraction=d.test_fraction,
                         neg_ratio=d.neg_ratio)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_csv(reports: list[RoundReport], targets, er_k: int = 5, hr_k: int = 20) -> str:
    """One row per epoch; floats written with ``repr`` so reruns compare byte for byte."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch"] + [f"er@{er_k}_item{t}" for t in targets] + [f"er@{er_k}_mean", f"hr@{hr_k}", "loss"]
               + list(DEFENSE_STATS))
    for r in reports:
        w.writerow([r.epoch] + [_fmt(r.er.get(int(t))) for t in targets] + [_fmt(r.er_mean), _fmt(r.hr), _fmt(r.loss)]
                   + [_fmt(r.defense.get(k)) for k in DEFENSE_STATS])
    return buf.getvalue()


def run_dir(cfg: RunConfig, index: int = 0) -> Path:
    name = cfg.name or f"run{index:03d}-{cfg.attack.name}-{cfg.defense.name}-s{cfg.seed}"
    return Path(cfg.out) / name


@dataclass
class RunResult:
    name: str
    path: Path
    ok: bool
    reports: list[RoundReport]
    error: str = ""
    seconds: float = 0.0

    def summary(self) -> dict:
        last = self.reports[-1] if self.reports else None
        max_er = max((r.er_mean for r in self.reports[1:] if r.er_mean is not None), default=None)
        return {"run": self.name, "ok": self.ok, "epochs": last.epoch if last else 0,
                "max_er": max_er, "final_hr": last.hr if last else None, "seconds": round(self.seconds, 1),
                "error": self.error}


def run_one(cfg: RunConfig, index: int = 0, data: InteractionDataset | None = None) -> RunResult:
    """Execute a single run and write its result directory."""
    out = run_dir(cfg, index)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    events = open(out / "events.jsonl", "w")

    def emit(kind, **payload):
        events.write(json.dumps({"event": kind, **payload}, sort_keys=True) + "\n")
        events.flush()

    reports: list[RoundReport] = []
    try:
        if data is None:
            data = load_dataset(cfg)
        # pin the targets so run.json replays the run exactly
        if cfg.attack.name != "none" and not cfg.attack.targets:
            cfg = apply_overrides(parse_config(serialize_config(cfg)),
                                  {"attack.targets": resolve_targets(cfg, data)})
        (out / "run.json").write_text(json.dumps({"config": cfg.flat(), "config_text": serialize_config(cfg),
                                                  "dataset_digest": data.digest(), "version": version_string()},
                                                 indent=2, sort_keys=True) + "\n")
        emit("start", name=out.name, users=data.num_users, items=data.num_items)

        def on_round(sim, rep):
            emit("round", **rep.to_dict())

        reports = run_training(cfg, data, on_round=on_round)
        targets = resolve_targets(cfg, data)
        (out / "metrics.csv").write_text(metrics_csv(reports, targets, cfg.metrics.er_k, cfg.metrics.hr_k))
        emit("end", ok=True)
        return RunResult(out.name, out, True, reports, seconds=time.perf_counter() - t0)
    except Exception as exc:  # one bad run must not sink the grid
        log.exception("run %s failed", out.name)
        emit("end", ok=False, error=str(exc))
        return RunResult(out.name, out, False, reports, error=f"{type(exc).__name__}: {exc}",
                         seconds=time.perf_counter() - t0)
    finally:
        events.close()


def summary_table(results: list[RunResult]) -> str:
    rows = [r.summary() for r in results]
    head = f"{'run':40s} {'status':6s} {'epochs':>6s} {'max ER':>8s} {'final HR':>9s} {'sec':>6s}"
    lines = [head, "-" * len(head)]
    for s in rows:
        er = "-" if s["max_er"] is None else f"{s['max_er']:.4f}"
        hr = "-" if s["final_hr"] is None else f"{s['final_hr']:.4f}"
        status = "ok" if s["ok"] else "FAIL"
        lines.append(f"{s['run'][:40]:40s} {status:6s} {s['epochs']:6d} {er:>8s} {hr:>9s} {s['seconds']:6.1f}")
        if not s["ok"]:
            lines.append(f"    {s['error']}")
    return "\n".join(lines)


def run_grid(configs: list[RunConfig], print_fn=print) -> tuple[int, list[RunResult]]:
    """Run every config in order; returns ``(exit status, results)``."""
    if not configs:
        raise ValueError("run_grid needs at least one config")
    results = [run_one(cfg, i) for i, cfg in enumerate(configs)]
    print_fn(summary_table(results))
    return (0 if all(r.ok for r in results) else 1), results
