"""Monte-Carlo simulation study: grid of designs, replicated fits, bias and coverage."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import logging
import math
import os
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import ConfigError, build_dataclass, convert, parse_pairs
from .estimation import ConditioningError, FitOptions, InvalidDataError, fit
from .intervals import BracketError, covers, profile_interval, se_interval
from .model import Family, ModelSpec, ParameterVector
from .simulation import (
    COVARIATE_NAMES,
    CalibrationError,
    CensoringPlan,
    SimConfig,
    calibrate_theta,
    generate_dataset,
    mix_seed,
    sub_seed,
)

__all__ = [
    "CellSummary",
    "ParameterSummary",
    "PRESETS",
    "StudyConfig",
    "load_study_config",
    "run_cell",
    "run_grid",
    "write_report",
]

log = logging.getLogger(__name__)

SIGN_PATTERNS = ("++", "+-", "-+", "--")
METHODS = ("SE", "PL")
DOUBLE, SINGLE = "double", "single"


@dataclass(frozen=True)
class StudyConfig:
    """Grid axes and run settings of a simulation study.

    A sign pattern holds the sign of the scale coefficients followed by the
    sign of the shape coefficients, e.g. ``"+-"``; the magnitudes give the
    (Success, Score) coefficient sizes. ``frozen_parameters`` are held at
    their true values while fitting.
    """

    families: tuple[Family, ...] = (Family.WEIBULL,)
    sample_sizes: tuple[int, ...] = (300,)
    cluster_counts: tuple[int, ...] = (10,)
    censoring_rates: tuple[float, ...] = (0.0,)
    p_success_values: tuple[float, ...] = (0.5,)
    sign_patterns: tuple[str, ...] = ("--",)
    scale_magnitudes: tuple[float, ...] = (0.5, 1.0)
    shape_magnitudes: tuple[float, ...] = (0.05, 0.1)
    sigma2_values: tuple[float, ...] = (0.0,)
    weibull_ab: tuple[float, ...] = (20.0, 1.5)
    gompertz_ab: tuple[float, ...] = (1e-4, 0.1)
    replications: int = 200
    master_seed: int = 0
    interval_methods: tuple[str, ...] = METHODS
    level: float = 0.95
    fit_single_cox: bool = False
    pl_parameters: tuple[str, ...] = ()
    frozen_parameters: tuple[str, ...] = ()
    score_sd: float = math.sqrt(0.2)
    mc_n: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(Family.parse(f) for f in self.families))
        object.__setattr__(
            self, "interval_methods", tuple(m.strip().upper() for m in self.interval_methods)
        )
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple) and not v and f.name not in (
                "interval_methods", "pl_parameters", "frozen_parameters"
            ):
                raise ValueError(f"grid axis {f.name} must be nonempty")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        for p in self.sign_patterns:
            if p not in SIGN_PATTERNS:
                raise ValueError(f"sign pattern {p!r} not one of {SIGN_PATTERNS}")
        for m in self.interval_methods:
            if m not in METHODS:
                raise ValueError(f"interval method {m!r} not one of {METHODS}")
        for name in ("scale_magnitudes", "shape_magnitudes", "weibull_ab", "gompertz_ab"):
            if len(getattr(self, name)) != 2:
                raise ValueError(f"{name} needs exactly two values")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        names = set(ModelSpec(Family.WEIBULL, (0, 1), (0, 1)).param_names(COVARIATE_NAMES))
        for p in self.pl_parameters + self.frozen_parameters:
            if p not in names:
                raise ValueError(f"unknown parameter name {p!r}; expected one of {sorted(names)}")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(_fmt_value(x) for x in v)
            else:
                v = _fmt_value(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def replace(self, **changes) -> "StudyConfig":
        return dataclasses.replace(self, **changes)


def _fmt_value(v) -> str:
    if isinstance(v, Family):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


PRESETS: dict[str, StudyConfig] = {
    "paper-desk": StudyConfig(
        families=(Family.WEIBULL, Family.GOMPERTZ),
        sample_sizes=(300,),
        cluster_counts=(10, 100),
        censoring_rates=(0.4,),
        p_success_values=(0.5,),
        sign_patterns=("--",),
        sigma2_values=(0.0, 0.5, 2.0),
        replications=200,
    ),
}


def load_study_config(source: str | os.PathLike) -> StudyConfig:
    """Load a preset by name or a ``key = value`` file.

    A file may start from a preset with ``preset = <name>``.
    """
    if str(source) in PRESETS:
        return PRESETS[str(source)]
    return study_config_from_text(Path(source).read_text())


def study_config_from_text(text: str) -> StudyConfig:
    pairs = parse_pairs(text)
    preset = pairs.pop("preset", None)
    if preset is None:
        return build_dataclass(StudyConfig, pairs)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}", "preset")
    hints = typing.get_type_hints(StudyConfig)
    changes = {}
    for key, value in pairs.items():
        if key not in hints:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        try:
            changes[key] = convert(value, hints[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from None
    try:
        return PRESETS[preset].replace(**changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class Cell:
    index: int
    family: Family
    n: int
    n_clusters: int
    p_cens: float
    p_success: float
    sign_pattern: str
    sigma2: float


def grid_cells(study: StudyConfig) -> list[Cell]:
    product = itertools.product(
        study.families,
        study.sample_sizes,
        study.cluster_counts,
        study.censoring_rates,
        study.p_success_values,
        study.sign_patterns,
        study.sigma2_values,
    )
    return [Cell(i, *values) for i, values in enumerate(product)]


def true_parameters(study: StudyConfig, cell: Cell) -> ParameterVector:
    a, b = study.weibull_ab if cell.family is Family.WEIBULL else study.gompertz_ab
    s_sign = 1.0 if cell.sign_pattern[0] == "+" else -1.0
    k_sign = 1.0 if cell.sign_pattern[1] == "+" else -1.0
    return ParameterVector(
        a,
        b,
        tuple(s_sign * m for m in study.scale_magnitudes),
        tuple(k_sign * m + 0.0 for m in study.shape_magnitudes),
        cell.sigma2,
    )


def cell_sim_config(study: StudyConfig, cell: Cell) -> SimConfig:
    return SimConfig(
        family=cell.family,
        n=cell.n,
        n_clusters=cell.n_clusters,
        p_success=cell.p_success,
        score_sd=study.score_sd,
        true_params=true_parameters(study, cell),
        p_cens=cell.p_cens,
        seed=mix_seed(study.master_seed, cell.index),
        mc_n=study.mc_n,
    )


@dataclass
class ParameterSummary:
    model: str
    parameter: str
    true_value: float
    mean_estimate: float
    bias: float
    mc_se: float
    coverage_se: float
    coverage_pl: float
    n_nonconverged: int
    n_used: int
    se_failures: int = 0
    pl_failures: int = 0


@dataclass
class CellSummary:
    cell: Cell
    replications: int
    theta: float | None
    parameters: list[ParameterSummary] = field(default_factory=list)
    failure: str | None = None

    @property
    def used(self) -> int:
        counts = [p.n_used for p in self.parameters if p.model == DOUBLE]
        return min(counts) if counts else 0

    def get(self, parameter: str, model: str = DOUBLE) -> ParameterSummary:
        for p in self.parameters:
            if p.parameter == parameter and p.model == model:
                return p
        raise KeyError(f"{model}:{parameter}")


@dataclass(frozen=True)
class _ModelPlan:
    name: str
    spec: ModelSpec
    truth: np.ndarray
    names: tuple[str, ...]
    frozen: tuple[int, ...]
    profiled: tuple[int, ...]


@dataclass(frozen=True)
class _CellPlan:
    sim: SimConfig
    censoring: CensoringPlan
    models: tuple[_ModelPlan, ...]
    methods: tuple[str, ...]
    level: float
    options: FitOptions
    master_seed: int
    cell_index: int
    interval_stub: Callable | None = None


def _model_plans(study: StudyConfig, cell: Cell) -> tuple[_ModelPlan, ...]:
    truth = true_parameters(study, cell)
    plans = []
    specs = [(DOUBLE, ModelSpec(cell.family, (0, 1), (0, 1)))]
    if study.fit_single_cox:
        specs.append((SINGLE, ModelSpec(cell.family, (0, 1), ())))
    for name, spec in specs:
        names = tuple(spec.param_names(COVARIATE_NAMES))
        true_arr = np.array(
            [truth.a, truth.b, *truth.beta_scale, *truth.beta_shape[: len(spec.shape_terms)], truth.sigma2]
        )
        frozen = tuple(names.index(p) for p in study.frozen_parameters if p in names)
        wanted = study.pl_parameters or names
        profiled = tuple(names.index(p) for p in wanted if p in names)
        plans.append(_ModelPlan(name, spec, true_arr, names, frozen, profiled))
    return tuple(plans)


def _replicate(args: tuple[_CellPlan, int]) -> dict[str, tuple]:
    """Generate, fit and interval-check one replication."""
    plan, rep = args
    sim = dataclasses.replace(plan.sim, seed=sub_seed(plan.master_seed, plan.cell_index, rep))
    data = generate_dataset(sim, plan.censoring)
    out = {}
    for mp in plan.models:
        K = mp.spec.n_params
        est = np.full(K, np.nan)
        se_cov = np.full(K, np.nan)
        pl_cov = np.full(K, np.nan)
        fixed = {i: float(mp.truth[i]) for i in mp.frozen}
        try:
            res = fit(data, mp.spec, plan.options, fixed=fixed)
        except InvalidDataError as exc:
            log.debug("replication %d: %s", rep, exc)
            out[mp.name] = (est, False, se_cov, pl_cov)
            continue
        est = res.estimates.to_array()
        if res.converged:
            for j in range(K):
                if plan.interval_stub is not None:
                    for method, arr in (("SE", se_cov), ("PL", pl_cov)):
                        if method in plan.methods:
                            arr[j] = covers(plan.interval_stub(res, j, method), mp.truth[j])
                    continue
                if "SE" in plan.methods:
                    try:
                        se_cov[j] = covers(se_interval(res, j, plan.level), mp.truth[j])
                    except (ConditioningError, ArithmeticError, ValueError) as exc:
                        log.debug("SE interval failed: %s", exc)
                if "PL" in plan.methods and j in mp.profiled:
                    try:
                        iv = profile_interval(data, mp.spec, res, j, plan.level, plan.options)
                        pl_cov[j] = covers(iv, mp.truth[j])
                    except (BracketError, ArithmeticError, ValueError) as exc:
                        log.debug("PL interval failed: %s", exc)
        out[mp.name] = (est, bool(res.converged), se_cov, pl_cov)
    return out


def _aggregate(cell: Cell, plan: _CellPlan, reps: Sequence[dict], replications: int) -> CellSummary:
    summary = CellSummary(cell, replications, plan.censoring.theta)
    for mp in plan.models:
        est = np.array([r[mp.name][0] for r in reps])
        ok = np.array([r[mp.name][1] for r in reps], dtype=bool)
        se_cov = np.array([r[mp.name][2] for r in reps])
        pl_cov = np.array([r[mp.name][3] for r in reps])
        used = int(ok.sum())
        for j, name in enumerate(mp.names):
            vals = est[ok, j]
            # shifted mean: exact when every replication returns the same value
            mean = float(vals[0] + np.mean(vals - vals[0])) if used else float("nan")
            mc_se = float(np.std(vals - vals[0], ddof=1) / math.sqrt(used)) if used > 1 else float("nan")

            def coverage(arr, method):
                if method not in plan.methods or (method == "PL" and j not in mp.profiled):
                    return float("nan"), 0
                col = arr[ok, j]
                good = ~np.isnan(col)
                fails = int((~good).sum())
                return (float(np.mean(col[good])) if good.any() else float("nan")), fails

            cov_se, fail_se = coverage(se_cov, "SE")
            cov_pl, fail_pl = coverage(pl_cov, "PL")
            summary.parameters.append(
                ParameterSummary(
                    model=mp.name,
                    parameter=name,
                    true_value=float(mp.truth[j]),
                    mean_estimate=mean,
                    bias=mean - float(mp.truth[j]),
                    mc_se=mc_se,
                    coverage_se=cov_se,
                    coverage_pl=cov_pl,
                    n_nonconverged=len(reps) - used,
                    n_used=used,
                    se_failures=fail_se,
                    pl_failures=fail_pl,
                )
            )
    return summary


def run_cell(
    study: StudyConfig,
    cell: Cell,
    *,
    workers: int = 1,
    options: FitOptions | None = None,
    interval_stub: Callable | None = None,
) -> CellSummary:
    """Run all replications of one grid cell.

    Non-converged fits are left out of the averages and counted. A censoring
    calibration failure yields a summary with ``failure`` set and no rows.

    Parameters
    ----------
    study, cell
        Study settings and the grid cell to run.
    workers
        Process count for the replications; results do not depend on it.
    options
        Fit options; defaults to ``FitOptions()``.
    interval_stub
        Testing hook ``(fit_result, j, method) -> Interval`` that replaces
        the real interval computation. Must be picklable when ``workers > 1``.
    """
    sim = cell_sim_config(study, cell)
    try:
        censoring = calibrate_theta(sim)
    except CalibrationError as exc:
        log.warning("cell %d: calibration failed: %s", cell.index, exc)
        return CellSummary(cell, study.replications, None, [], f"calibration failed: {exc}")
    plan = _CellPlan(
        sim=sim,
        censoring=censoring,
        models=_model_plans(study, cell),
        methods=study.interval_methods,
        level=study.level,
        options=options or FitOptions(),
        master_seed=study.master_seed,
        cell_index=cell.index,
        interval_stub=interval_stub,
    )
    tasks = [(plan, r) for r in range(study.replications)]
    if workers > 1 and len(tasks) > 1:
        chunk = max(1, len(tasks) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(_replicate, tasks, chunksize=chunk))
    else:
        reps = [_replicate(t) for t in tasks]
    return _aggregate(cell, plan, reps, study.replications)


def run_grid(
    study: StudyConfig,
    out_dir: str | os.PathLike | None = None,
    *,
    workers: int = 1,
    resume: bool = False,
    options: FitOptions | None = None,
    on_cell: Callable[[CellSummary], None] | None = None,
) -> list[CellSummary]:
    """Run every grid cell in order.

    With ``out_dir`` each finished cell is saved under
    ``out_dir/run-<config hash>/``; ``resume`` reloads saved cells instead of
    recomputing them.
    """
    run_dir = None
    if out_dir is not None:
        run_dir = Path(out_dir) / f"run-{study.config_hash()}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(study.to_text())
    summaries = []
    for cell in grid_cells(study):
        path = run_dir / f"cell_{cell.index:04d}.csv" if run_dir else None
        if resume and path is not None and path.exists():
            summary = _load_cell(path, cell)
            log.info("cell %d: loaded from %s", cell.index, path)
        else:
            summary = run_cell(study, cell, workers=workers, options=options)
            if path is not None:
                tmp = path.with_suffix(".tmp")
                _write_rows(_cell_rows([summary], full=True), tmp, full=True)
                os.replace(tmp, path)
        summaries.append(summary)
        if on_cell is not None:
            on_cell(summary)
    return summaries


REPORT_COLUMNS = [
    "family", "n", "N_cl", "p_cens", "p_success", "sign_pattern", "sigma2_true",
    "model", "parameter", "true_value", "mean_estimate", "bias", "mc_se",
    "coverage_SE", "coverage_PL", "n_nonconverged", "n_used", "status",
]
_CELL_EXTRA = ["cell_index", "replications", "theta", "se_failures", "pl_failures"]


def _cell_rows(summaries: Iterable[CellSummary], full: bool = False) -> list[dict]:
    rows = []
    for s in summaries:
        c = s.cell
        base = {
            "family": c.family.value,
            "n": c.n,
            "N_cl": c.n_clusters,
            "p_cens": c.p_cens,
            "p_success": c.p_success,
            "sign_pattern": c.sign_pattern,
            "sigma2_true": c.sigma2,
        }
        extra = {"cell_index": c.index, "replications": s.replications, "theta": s.theta}
        if s.failure is not None:
            row = dict(base, status=s.failure)
            if full:
                row.update(extra)
            rows.append(row)
            continue
        for p in s.parameters:
            row = dict(
                base,
                model=p.model,
                parameter=p.parameter,
                true_value=p.true_value,
                mean_estimate=p.mean_estimate,
                bias=p.bias,
                mc_se=p.mc_se,
                coverage_SE=p.coverage_se,
                coverage_PL=p.coverage_pl,
                n_nonconverged=p.n_nonconverged,
                n_used=p.n_used,
                status="ok",
            )
            if full:
                row.update(extra, se_failures=p.se_failures, pl_failures=p.pl_failures)
            rows.append(row)
    return rows


def _fmt_cell(v, full: bool) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v) if full else f"{v:.6g}"
    return str(v)


def _write_rows(rows: list[dict], dest, full: bool = False) -> None:
    columns = REPORT_COLUMNS + (_CELL_EXTRA if full else [])
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt_cell(row.get(col), full) for col in columns])


def _num(text: str) -> float:
    return float("nan") if text in ("", "nan") else float(text)


def _load_cell(path: Path, cell: Cell) -> CellSummary:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty cell file")
    first = rows[0]
    theta = None if first["theta"] in ("", "nan") else float(first["theta"])
    summary = CellSummary(cell, int(first["replications"]), theta)
    if first["status"] != "ok":
        summary.failure = first["status"]
        return summary
    for r in rows:
        summary.parameters.append(
            ParameterSummary(
                model=r["model"],
                parameter=r["parameter"],
                true_value=_num(r["true_value"]),
                mean_estimate=_num(r["mean_estimate"]),
                bias=_num(r["bias"]),
                mc_se=_num(r["mc_se"]),
                coverage_se=_num(r["coverage_SE"]),
                coverage_pl=_num(r["coverage_PL"]),
                n_nonconverged=int(r["n_nonconverged"]),
                n_used=int(r["n_used"]),
                se_failures=int(r["se_failures"]),
                pl_failures=int(r["pl_failures"]),
            )
        )
    return summary


def write_report(summaries: Sequence[CellSummary], format: str, destination) -> None:
    """Write one row per (cell, model, parameter) as CSV or Markdown.

    ``destination`` is a path or a writable text stream.
    """
    if not summaries:
        raise ValueError("no summaries to report")
    fmt = format.lower()
    if fmt not in ("csv", "markdown", "md"):
        raise ValueError(f"unknown report format {format!r}")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in _cell_rows(summaries):
            w.writerow([_fmt_cell(row.get(col), False) for col in REPORT_COLUMNS])
        text = buf.getvalue()
    else:
        text = _markdown(summaries)
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        Path(destination).write_text(text)


_MD_COLUMNS = [
    ("n", "n"), ("N_cl", "N_cl"), ("%cens", None), ("p_success", "p_success"),
    ("signs", "sign_pattern"), ("sigma2", "sigma2_true"), ("model", "model"),
    ("parameter", "parameter"), ("true", "true_value"), ("mean", "mean_estimate"),
    ("bias", "bias"), ("MC SE", "mc_se"), ("cov SE", "coverage_SE"), ("cov PL", "coverage_PL"),
    ("non-conv", "n_nonconverged"), ("used", "n_used"), ("status", "status"),
]


def _markdown(summaries: Sequence[CellSummary]) -> str:
    out = []
    families = []
    for s in summaries:
        if s.cell.family not in families:
            families.append(s.cell.family)
    for fam in families:
        cells = sorted(
            (s for s in summaries if s.cell.family is fam),
            key=lambda s: (s.cell.n, s.cell.n_clusters, s.cell.p_cens, s.cell.index),
        )
        out.append(f"## {fam.value.capitalize()}\n")
        out.append("| " + " | ".join(h for h, _ in _MD_COLUMNS) + " |")
        out.append("|" + "---|" * len(_MD_COLUMNS))
        prev_group = None
        for row in _cell_rows(cells):
            group = (row["n"], row["N_cl"], row["p_cens"])
            vals = []
            for h, key in _MD_COLUMNS:
                if key is None:
                    v = f"{100 * row['p_cens']:g}"
                else:
                    v = _fmt_cell(row.get(key), False)
                vals.append(v)
            if group == prev_group:
                vals[0] = vals[1] = vals[2] = ""
            prev_group = group
            out.append("| " + " | ".join(vals) + " |")
        out.append("")
    return "\n".join(out)
