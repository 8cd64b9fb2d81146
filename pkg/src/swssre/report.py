"""Manifest execution and CSV output.

Completed scenarios are appended to ``progress.jsonl`` as they finish, so
an interrupted run can resume; the final ``results.csv`` is written
atomically once all scenarios are done. Wall-clock times are kept in the
progress file only, which keeps final tables byte-identical between runs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from swssre.distributions import GENERATOR_ID
from swssre.manifest import ExpandedScenario, RunManifest, dump_manifest
from swssre.simulation import FLAG_NAMES, ErrResult, estimate_err

logger = logging.getLogger(__name__)

RESULTS_SCHEMA = "swssre-results/1"
FIGURE_SCHEMA = "swssre-figure/1"
RESULTS_FILE = "results.csv"
PROGRESS_FILE = "progress.jsonl"
FIGURE_FILE = "figure_data.csv"
MANIFEST_COPY = "manifest.yaml"

N_FINAL_FIELDS = ("min", "q10", "median", "mean", "q90", "max")
COLUMNS = (
    ["schema", "index", "tds", "method", "rate", "variance_scenario", "assumed_c_mult", "assumed_e_mult"]
    + ["t", "tau", "sigma_pi_sq", "n_init", "n_min", "n_max", "r", "err", "mc_se", "tolerance_4se"]
    + [f"n_final_{k}" for k in N_FINAL_FIELDS]
    + list(FLAG_NAMES)
    + ["interim_sigma_c_sq_mean", "interim_sigma_e_sq_mean", "status", "message"]
    + ["seed", "generator", "version", "scenario"]
)
FIGURE_COLUMNS = ["tds", "method", "variance_scenario", "sigma_pi_sq", "eti", "mc_se"]


def fmt(x) -> str:
    """Six significant digits; NaN is blank, integers and strings pass through."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        return "" if math.isnan(x) else f"{x:.6g}"
    return str(x)


def _version() -> str:
    from swssre import __version__

    return __version__


@dataclass
class ResultsTable:
    columns: list[str]
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({c: row.get(c, "") for c in self.columns})
        return buf.getvalue()

    @property
    def errors(self) -> list[dict]:
        return [r for r in self.rows if r.get("status") != "ok"]


def scenario_json(item: ExpandedScenario) -> str:
    return json.dumps(item.spec.to_dict(), sort_keys=True, separators=(",", ":"))


def _row_key(item: ExpandedScenario, r: int, seed: int) -> str:
    payload = f"{scenario_json(item)}|{r}|{seed}|{GENERATOR_ID}|{_version()}"
    return hashlib.sha256(payload.encode()).hexdigest()


def _base_row(item: ExpandedScenario, r: int, seed: int) -> dict:
    sc = item.spec
    return {
        "schema": RESULTS_SCHEMA,
        "index": item.index,
        "tds": item.meta["tds"],
        "method": sc.method,
        "rate": item.meta["rate"],
        "variance_scenario": item.meta["variance_scenario"],
        "assumed_c_mult": fmt(float(item.meta["assumed_c_mult"])),
        "assumed_e_mult": fmt(float(item.meta["assumed_e_mult"])),
        "t": "" if sc.is_fixed else sc.t,
        "tau": fmt(float(sc.tau)),
        "sigma_pi_sq": fmt(float(sc.sigma_pi_sq)),
        "n_init": sc.n_init,
        "n_min": sc.n_min,
        "n_max": sc.n_max,
        "r": r,
        "seed": seed,
        "generator": GENERATOR_ID,
        "version": _version(),
        "scenario": scenario_json(item),
    }


def result_row(item: ExpandedScenario, res: ErrResult) -> dict:
    row = _base_row(item, res.r, res.seed)
    row.update(
        err=fmt(res.err),
        mc_se=fmt(res.mc_se),
        tolerance_4se=fmt(4 * res.mc_se),
        status="ok",
        message="",
        interim_sigma_c_sq_mean=fmt(res.interim_means["sigma_c_sq_hat"]),
        interim_sigma_e_sq_mean=fmt(res.interim_means["sigma_e_sq_hat"]),
    )
    for k in N_FINAL_FIELDS:
        row[f"n_final_{k}"] = fmt(res.n_final_summary[k])
    for name in FLAG_NAMES:
        row[name] = res.flag_counts[name]
    return {c: fmt(row.get(c)) if not isinstance(row.get(c), str) else row[c] for c in COLUMNS}


def error_row(item: ExpandedScenario, r: int, seed: int, exc: BaseException) -> dict:
    row = _base_row(item, r, seed)
    row.update(status="error", message=f"{type(exc).__name__}: {exc}")
    return {c: fmt(row.get(c)) if not isinstance(row.get(c), str) else row[c] for c in COLUMNS}


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _read_progress(path: Path) -> dict[int, dict]:
    done: dict[int, dict] = {}
    if not path.exists():
        return done
    for line in path.read_text().splitlines():
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            # a crash can leave the last line truncated
            continue
        done[int(rec["index"])] = rec
    return done


def run_manifest(
    manifest: RunManifest,
    out_dir: str | Path,
    replicates: int | None = None,
    seed: int | None = None,
    workers: int | None = None,
    resume: bool = False,
    on_row: Callable[[dict], None] | None = None,
) -> ResultsTable:
    """Run every scenario of ``manifest`` and write ``results.csv``.

    With ``resume=True`` scenarios already recorded in the progress file
    for the same scenario, replicate count and seed are not rerun.
    """
    r = replicates or manifest.replicates
    seed = manifest.seed if seed is None else seed
    workers = workers or manifest.workers
    if r < 1 or workers < 1:
        raise ValueError("replicates and workers must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    progress_path = out / PROGRESS_FILE
    done = _read_progress(progress_path) if resume else {}
    if not resume and progress_path.exists():
        progress_path.unlink()
    atomic_write(out / MANIFEST_COPY, dump_manifest(manifest))

    rows = []
    with open(progress_path, "a") as progress:
        for item in manifest.scenarios:
            key = _row_key(item, r, seed)
            prev = done.get(item.index)
            if prev is not None and prev.get("key") == key:
                rows.append(prev["row"])
                continue
            start = time.perf_counter()
            try:
                res = estimate_err(item.spec, r, seed, workers)
                row = result_row(item, res)
            except Exception as exc:  # recorded as an error row; the batch continues
                logger.exception("scenario %d failed", item.index)
                row = error_row(item, r, seed, exc)
            wall = time.perf_counter() - start
            progress.write(json.dumps({"index": item.index, "key": key, "wall_time_s": round(wall, 3), "row": row}) + "\n")
            progress.flush()
            os.fsync(progress.fileno())
            rows.append(row)
            if on_row is not None:
                on_row(row)
    table = ResultsTable(list(COLUMNS), rows)
    atomic_write(out / RESULTS_FILE, table.to_csv())
    return table


def emit_figure_data(
    manifest: RunManifest,
    out_dir: str | Path,
    replicates: int | None = None,
    seed: int | None = None,
    workers: int | None = None,
    resume: bool = False,
    on_row: Callable[[dict], None] | None = None,
) -> ResultsTable:
    """Run a period-effect sweep and write long-format ``figure_data.csv``."""
    bad = [s.index for s in manifest.scenarios if s.spec.tau != 0]
    if bad:
        raise ValueError(f"figure data needs tau = 0 in every scenario; scenarios {bad} differ")
    table = run_manifest(manifest, out_dir, replicates, seed, workers, resume, on_row)
    fig_rows = [
        {
            "tds": row["tds"],
            "method": row["method"],
            "variance_scenario": row["variance_scenario"],
            "sigma_pi_sq": row["sigma_pi_sq"],
            "eti": row["err"],
            "mc_se": row["mc_se"],
        }
        for row in table.rows
    ]
    fig = ResultsTable(FIGURE_COLUMNS, fig_rows)
    atomic_write(Path(out_dir) / FIGURE_FILE, fig.to_csv())
    return fig


__all__ = [
    "COLUMNS",
    "FIGURE_COLUMNS",
    "ResultsTable",
    "emit_figure_data",
    "fmt",
    "run_manifest",
]
