"""Ground-truth scenario generators and the evaluation harness.

Two scenario families: an outbreak (R starts below 1 and rises above 1 at
a random changepoint through a logistic ramp) and a random trend
(piecewise-linear R with random slope changes, clamped to a sane range).
On top of these, MAE and coverage metrics and a benchmark runner that
executes generate -> simulate -> observe -> fit for a grid of settings
and aggregates per-cell "mean +- sd" tables.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cori import CoriConfig, cori_posterior, suggested_delay_shift
from .disease import DiseaseConfig, InfectiousnessProfile, RtTrajectory, simulate
from .distributions import as_generator
from .engine import (
    InferenceProblem,
    SviConfig,
    fit,
    posterior_csv_rows,
)
from .errors import ConfigurationError
from .observation import (
    CrossSectional,
    Longitudinal,
    UniformUndersampling,
    sample_observations,
)
from .prior import GpKernelConfig, PriorConfig
from .testing import builtin_profile

GP_METHOD = "gp_svi"
CORI_METHOD = "cori"


@dataclass(frozen=True)
class OutbreakScenario:
    """R ramps from a sub-critical to a super-critical level.

    The changepoint is uniform over changepoint_frac * T and the ramp is
    logistic with its central rise spread over roughly transition_width
    days. Generated trajectories always start below 1 and end above 1.
    """

    horizon: int = 100
    r_low: tuple[float, float] = (0.6, 0.9)
    r_high: tuple[float, float] = (1.3, 1.8)
    changepoint_frac: tuple[float, float] = (0.3, 0.7)
    transition_width: float = 7.0

    def __post_init__(self):
        if self.horizon < 2:
            raise ConfigurationError("horizon must be >= 2")
        for name in ("r_low", "r_high", "changepoint_frac"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigurationError(f"{name} range must be ordered")
        if not self.r_high[0] > 1.0 > self.r_low[1]:
            raise ConfigurationError("r_low must stay below 1 and r_high above 1")
        if self.transition_width <= 0:
            raise ConfigurationError("transition_width must be positive")


@dataclass(frozen=True)
class RandomTrendScenario:
    """Piecewise-linear R: random change times, random slopes, clamped."""

    horizon: int = 100
    change_times: tuple[int, int] = (2, 4)
    slope: tuple[float, float] = (-0.04, 0.04)
    clamp: tuple[float, float] = (0.05, 3.0)
    start: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if self.horizon < 2:
            raise ConfigurationError("horizon must be >= 2")
        if not 0 <= self.change_times[0] <= self.change_times[1]:
            raise ConfigurationError("change_times range must be ordered and non-negative")
        if self.slope[0] > self.slope[1] or self.start[0] > self.start[1]:
            raise ConfigurationError("slope and start ranges must be ordered")
        if not 0 < self.clamp[0] < self.clamp[1]:
            raise ConfigurationError("clamp bounds must be ordered and positive")


ScenarioConfig = OutbreakScenario | RandomTrendScenario


def generate_scenario(
    config: ScenarioConfig, rng: int | np.random.Generator, gamma: float = 0.5
) -> RtTrajectory:
    """Draw one ground-truth trajectory; deterministic given the rng."""
    rng = as_generator(rng)
    if not isinstance(config, (OutbreakScenario, RandomTrendScenario)):
        raise ConfigurationError(f"unknown scenario {type(config).__name__}")
    T = config.horizon
    if isinstance(config, OutbreakScenario):
        lo = rng.uniform(*config.r_low)
        hi = rng.uniform(*config.r_high)
        tc = rng.uniform(config.changepoint_frac[0] * T, config.changepoint_frac[1] * T)
        t = np.arange(1, T + 1, dtype=float)
        # scale width/4: the 12%-88% rise spans about transition_width days
        ramp = 1.0 / (1.0 + np.exp(-(t - tc) / (config.transition_width / 4.0)))
        R = lo + (hi - lo) * ramp
    else:
        n_changes = int(rng.integers(config.change_times[0], config.change_times[1] + 1))
        start = rng.uniform(*config.start)
        if n_changes >= T - 1:
            n_changes = T - 2
        if n_changes > 0:
            breaks = np.sort(rng.choice(np.arange(2, T), size=n_changes, replace=False))
        else:
            breaks = np.asarray([], dtype=np.int64)
        slopes = rng.uniform(config.slope[0], config.slope[1], size=n_changes + 1)
        seg = np.searchsorted(breaks, np.arange(2, T + 1), side="right")
        R = start + np.concatenate([[0.0], np.cumsum(slopes[seg])])
        R = np.clip(R, config.clamp[0], config.clamp[1])
    if np.any(R < 0):
        raise ConfigurationError("generated scenario produced negative R")
    return RtTrajectory(R=R, gamma=gamma)


def scenario_from_json_dict(d: dict) -> ScenarioConfig:
    kind = d.get("kind")
    rest = {k: v for k, v in d.items() if k != "kind"}
    factories = {"outbreak": OutbreakScenario, "random_trend": RandomTrendScenario}
    if kind not in factories:
        raise ConfigurationError(f"unknown scenario kind {kind!r}")
    cls = factories[kind]
    known = set(cls.__dataclass_fields__)
    unknown = set(rest) - known
    if unknown:
        raise ConfigurationError(f"unknown scenario config keys: {sorted(unknown)}")
    for key, val in list(rest.items()):
        if isinstance(val, list):
            rest[key] = tuple(val)
    return cls(**rest)


def scenario_to_json_dict(config: ScenarioConfig) -> dict:
    kind = "outbreak" if isinstance(config, OutbreakScenario) else "random_trend"
    out = {"kind": kind}
    for name in config.__dataclass_fields__:
        val = getattr(config, name)
        out[name] = list(val) if isinstance(val, tuple) else val
    return out


def mae(posterior_mean, truth, valid=None) -> float:
    """Mean absolute error over days with an estimate; NaN if there are none."""
    pred = np.asarray(posterior_mean, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if pred.shape != tru.shape:
        raise ConfigurationError("posterior mean and truth must have equal length")
    mask = np.ones(pred.size, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    mask = mask & np.isfinite(pred)
    if not mask.any():
        return float("nan")
    return float(np.mean(np.abs(pred[mask] - tru[mask])))


def calibration_curve(posteriors, truths, levels) -> np.ndarray:
    """Coverage of central credible intervals across (instance, day) pairs.

    posteriors expose interval(level) -> (lo, hi) and a valid mask; only
    valid days count toward the denominator.
    """
    levels = np.asarray(levels, dtype=float)
    if len(posteriors) != len(truths) or not posteriors:
        raise ConfigurationError("need one truth per posterior, at least one instance")
    covered = np.zeros(levels.size)
    total = np.zeros(levels.size)
    for post, truth in zip(posteriors, truths):
        tru = np.asarray(truth, dtype=float)
        v = np.asarray(post.valid, dtype=bool)
        for j, level in enumerate(levels):
            lo, hi = post.interval(float(level))
            inside = (tru >= lo) & (tru <= hi) & v
            covered[j] += int(inside.sum())
            total[j] += int(v.sum())
    if np.any(total == 0):
        raise ConfigurationError("no valid days to evaluate coverage on")
    return covered / total


@dataclass(frozen=True)
class BenchmarkCell:
    """One Table-style cell: scenario x test x observation design."""

    label: str
    scenario: ScenarioConfig
    test_kind: str = "pcr"
    observation: dict = field(default_factory=lambda: {"kind": "cross_sectional", "fraction": 0.001})

    def resolve_scheme(self, config: DiseaseConfig):
        obs = dict(self.observation)
        kind = obs.pop("kind", None)
        fp = float(obs.pop("false_positive_rate", 0.0))
        if kind == "cross_sectional":
            frac = obs.pop("fraction", None)
            if obs or frac is None:
                raise ConfigurationError("cross_sectional cell needs exactly {fraction}")
            return CrossSectional.fraction(float(frac), config, false_positive_rate=fp)
        if kind == "longitudinal":
            frac = obs.pop("fraction", None)
            cadence = obs.pop("cadence", None)
            if obs or frac is None or cadence is None:
                raise ConfigurationError("longitudinal cell needs {fraction, cadence}")
            return Longitudinal.fraction(
                float(frac), config, int(cadence), false_positive_rate=fp
            )
        if kind == "uniform_undersampling":
            p = obs.pop("test_prob", None)
            if obs or p is None:
                raise ConfigurationError("uniform_undersampling cell needs {test_prob}")
            return UniformUndersampling(test_prob=float(p))
        raise ConfigurationError(f"unknown observation kind {kind!r}")


@dataclass(frozen=True)
class BenchmarkConfig:
    cells: tuple[BenchmarkCell, ...]
    instances: int = 20
    methods: tuple[str, ...] = (GP_METHOD, CORI_METHOD)
    population_size: int = 20000
    initial_infected: int = 5
    gamma: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not self.cells:
            raise ConfigurationError("benchmark needs at least one cell")
        if self.instances < 1:
            raise ConfigurationError("instances must be >= 1")
        labels = [c.label for c in self.cells]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("cell labels must be unique")
        for m in self.methods:
            if m not in (GP_METHOD, CORI_METHOD):
                raise ConfigurationError(f"unknown method {m!r}")


@dataclass
class MethodOutcome:
    method: str
    posterior: object | None
    mae: float
    failed: bool = False
    error: str = ""


@dataclass
class InstanceResult:
    instance: int
    truth: np.ndarray
    infections: np.ndarray
    observations: np.ndarray
    outcomes: dict[str, MethodOutcome]


@dataclass
class CellResult:
    label: str
    instances: list[InstanceResult]
    aggregates: dict[str, tuple[float, float]]  # method -> (mean MAE, sd MAE)
    failures: dict[str, int]
    flagged: bool


@dataclass
class BenchmarkResult:
    cells: list[CellResult]

    def cell(self, label: str) -> CellResult:
        for c in self.cells:
            if c.label == label:
                return c
        raise KeyError(label)


def _instance_seed(seq_key: tuple) -> int:
    return int(np.random.SeedSequence(entropy=seq_key).generate_state(1)[0])


def _run_instance(
    bench: BenchmarkConfig,
    cell: BenchmarkCell,
    cell_index: int,
    instance: int,
    svi: SviConfig,
    cori: CoriConfig,
) -> InstanceResult:
    profile = builtin_profile(cell.test_kind)
    disease = DiseaseConfig(
        population_size=bench.population_size,
        horizon=cell.scenario.horizon,
        profile=InfectiousnessProfile.default(),
        initial_infected=bench.initial_infected,
        importation_prior_mean=max(bench.gamma, 1e-3),
    )
    scheme = cell.resolve_scheme(disease)
    key = (bench.rng_seed, cell_index, instance)
    truth = generate_scenario(
        cell.scenario, np.random.default_rng(np.random.SeedSequence(key + (0,))), bench.gamma
    )
    counts = simulate(truth, disease, np.random.default_rng(np.random.SeedSequence(key + (1,))))
    x = sample_observations(
        counts, scheme, profile, disease, np.random.default_rng(np.random.SeedSequence(key + (2,)))
    )

    outcomes: dict[str, MethodOutcome] = {}
    for method in bench.methods:
        try:
            if method == GP_METHOD:
                problem = InferenceProblem(
                    disease=disease,
                    scheme=scheme,
                    profile=profile,
                    prior=PriorConfig(
                        kernel=GpKernelConfig(),
                        importation_mean=disease.importation_prior_mean,
                    ),
                )
                svi_inst = SviConfig(
                    **{**svi.to_json_dict(), "rng_seed": _instance_seed(key + (3,))}
                )
                post = fit(x, problem, svi_inst)
            else:
                shift = suggested_delay_shift(profile, scheme)
                cori_inst = CoriConfig(
                    **{**cori.to_json_dict(), "delay_shift": shift}
                )
                post = cori_posterior(x, disease.profile, cori_inst)
            err = mae(post.mean_R, truth.R, post.valid)
            outcomes[method] = MethodOutcome(method=method, posterior=post, mae=err)
        except Exception as e:  # recorded, not fatal: a cell tolerates stray failures
            outcomes[method] = MethodOutcome(
                method=method, posterior=None, mae=float("nan"), failed=True, error=str(e)
            )
    return InstanceResult(
        instance=instance,
        truth=truth.R,
        infections=counts,
        observations=x,
        outcomes=outcomes,
    )


def run_benchmark(
    bench: BenchmarkConfig,
    svi: SviConfig = SviConfig(),
    cori: CoriConfig = CoriConfig(),
    threads: int = 1,
) -> BenchmarkResult:
    """Run every cell x instance x method; deterministic given the seed.

    Instances may run on a thread pool; results are reduced in instance
    order so the output never depends on scheduling.
    """
    cells = []
    for ci, cell in enumerate(bench.cells):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                instances = list(
                    pool.map(
                        lambda i: _run_instance(bench, cell, ci, i, svi, cori),
                        range(bench.instances),
                    )
                )
        else:
            instances = [
                _run_instance(bench, cell, ci, i, svi, cori) for i in range(bench.instances)
            ]

        aggregates = {}
        failures = {}
        for method in bench.methods:
            maes = [
                r.outcomes[method].mae
                for r in instances
                if not r.outcomes[method].failed and np.isfinite(r.outcomes[method].mae)
            ]
            failures[method] = sum(r.outcomes[method].failed for r in instances)
            if maes:
                mean = float(np.mean(maes))
                sd = float(np.std(maes, ddof=1)) if len(maes) > 1 else 0.0
            else:
                mean, sd = float("nan"), float("nan")
            aggregates[method] = (mean, sd)
        flagged = any(n > 0.1 * bench.instances for n in failures.values())
        cells.append(
            CellResult(
                label=cell.label,
                instances=instances,
                aggregates=aggregates,
                failures=failures,
                flagged=flagged,
            )
        )
    return BenchmarkResult(cells=cells)


def benchmark_calibration(result: BenchmarkResult, method: str, levels) -> np.ndarray:
    """Coverage aggregated over every instance in every cell for one method."""
    posteriors, truths = [], []
    for cell in result.cells:
        for inst in cell.instances:
            out = inst.outcomes.get(method)
            if out is not None and not out.failed:
                posteriors.append(out.posterior)
                truths.append(inst.truth)
    if not posteriors:
        raise ConfigurationError(f"no successful fits for method {method!r}")
    return calibration_curve(posteriors, truths, levels)


# --- file output -----------------------------------------------------------

def _fmt(v: float) -> str:
    return format(v, ".10g")


def write_cell_csv(cell: CellResult, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["instance", "method", "mae", "failed"])
        for inst in cell.instances:
            for method, out in inst.outcomes.items():
                writer.writerow(
                    [inst.instance, method, _fmt(out.mae), int(out.failed)]
                )


def write_summary_csv(result: BenchmarkResult, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["cell", "method", "mae_mean", "mae_sd", "failures", "flagged"])
        for cell in result.cells:
            for method, (mean, sd) in cell.aggregates.items():
                writer.writerow(
                    [cell.label, method, _fmt(mean), _fmt(sd), cell.failures[method], int(cell.flagged)]
                )


def write_truth_csv(truth: np.ndarray, path: str) -> None:
    with open(path, "w", newline="") as f:
        f.write("day,R\n")
        for t, r in enumerate(truth, start=1):
            f.write(f"{t},{_fmt(r)}\n")


def write_series_csv(series: np.ndarray, path: str, column: str = "count") -> None:
    with open(path, "w", newline="") as f:
        f.write(f"day,{column}\n")
        for t, v in enumerate(series, start=1):
            f.write(f"{t},{int(v)}\n")


def benchmark_output_paths(result: BenchmarkResult) -> list[str]:
    """Relative paths write_benchmark_outputs will create, in write order."""
    paths = []
    for cell in result.cells:
        cell_dir = os.path.join("cells", cell.label)
        paths.append(os.path.join(cell_dir, "instances.csv"))
        for inst in cell.instances:
            inst_dir = os.path.join(cell_dir, f"instance_{inst.instance:03d}")
            paths.append(os.path.join(inst_dir, "truth.csv"))
            for method, out in inst.outcomes.items():
                if not out.failed:
                    paths.append(os.path.join(inst_dir, f"{method}_posterior.csv"))
    paths.append("summary.csv")
    return paths


def write_benchmark_outputs(result: BenchmarkResult, out_dir: str) -> list[str]:
    """Per-cell raw CSVs, per-instance truth/posterior files, and the summary."""
    paths = []
    for cell in result.cells:
        cell_dir = os.path.join(out_dir, "cells", cell.label)
        os.makedirs(cell_dir, exist_ok=True)
        cell_csv = os.path.join(cell_dir, "instances.csv")
        write_cell_csv(cell, cell_csv)
        paths.append(cell_csv)
        for inst in cell.instances:
            inst_dir = os.path.join(cell_dir, f"instance_{inst.instance:03d}")
            os.makedirs(inst_dir, exist_ok=True)
            truth_csv = os.path.join(inst_dir, "truth.csv")
            write_truth_csv(inst.truth, truth_csv)
            paths.append(truth_csv)
            for method, out in inst.outcomes.items():
                if out.failed:
                    continue
                post_csv = os.path.join(inst_dir, f"{method}_posterior.csv")
                with open(post_csv, "w", newline="") as f:
                    for row in posterior_csv_rows(out.posterior):
                        f.write(",".join(row) + "\n")
                paths.append(post_csv)
    summary = os.path.join(out_dir, "summary.csv")
    write_summary_csv(result, summary)
    paths.append(summary)
    return paths


# The posterior CSVs store the 5/25/50/75/95% quantiles, so file-based
# coverage supports exactly the central 50% and 90% levels.
FILE_LEVELS = {0.5: ("q25", "q75"), 0.9: ("q05", "q95")}


def coverage_from_files(results_dir: str, levels=(0.5, 0.9)) -> list[tuple[str, float, float]]:
    """Recompute coverage from benchmark output files.

    Returns (method, level, coverage) rows sorted by method then level.
    Baseline-agnostic: any posterior CSV with the shared quantile columns
    participates.
    """
    for level in levels:
        if level not in FILE_LEVELS:
            raise ConfigurationError(
                f"file-based coverage supports levels {sorted(FILE_LEVELS)}, got {level}"
            )
    counts: dict[tuple[str, float], list[int]] = {}
    cells_dir = os.path.join(results_dir, "cells")
    if not os.path.isdir(cells_dir):
        raise ConfigurationError(f"no cells directory under {results_dir!r}")
    for cell in sorted(os.listdir(cells_dir)):
        for inst in sorted(os.listdir(os.path.join(cells_dir, cell))):
            inst_dir = os.path.join(cells_dir, cell, inst)
            truth_path = os.path.join(inst_dir, "truth.csv")
            if not os.path.isdir(inst_dir) or not os.path.exists(truth_path):
                continue
            truth = _read_csv_dict(truth_path)
            truth_by_day = {int(r["day"]): float(r["R"]) for r in truth}
            for name in sorted(os.listdir(inst_dir)):
                if not name.endswith("_posterior.csv"):
                    continue
                method = name[: -len("_posterior.csv")]
                rows = _read_csv_dict(os.path.join(inst_dir, name))
                for level in levels:
                    lo_col, hi_col = FILE_LEVELS[level]
                    bucket = counts.setdefault((method, level), [0, 0])
                    for r in rows:
                        day = int(r["day"])
                        if day not in truth_by_day:
                            continue
                        tru = truth_by_day[day]
                        bucket[1] += 1
                        if float(r[lo_col]) <= tru <= float(r[hi_col]):
                            bucket[0] += 1
    out = []
    for (method, level), (cov, tot) in sorted(counts.items()):
        if tot:
            out.append((method, level, cov / tot))
    if not out:
        raise ConfigurationError(f"no posterior files found under {results_dir!r}")
    return out


def _read_csv_dict(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
