"""Command-line front end: simulate, infer, benchmark, calibrate.

All commands read a single JSON config with per-section keys and write a
manifest (atomically, before any result file) holding the fully resolved
config, the seed, the tool version and the output paths. Re-running a
command with its own manifest as --config reproduces every output
byte-for-byte, at any --threads setting; nothing time- or host-dependent
is ever written.

Exit codes: 0 success, 2 config/validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .cori import CoriConfig
from .disease import DiseaseConfig, RtTrajectory, simulate
from .engine import (
    InferenceProblem,
    SviConfig,
    fit,
    write_elbo_csv,
    write_posterior_csv,
)
from .errors import ConfigurationError
from .observation import (
    CrossSectional,
    Longitudinal,
    sample_observations,
    scheme_from_json_dict,
    scheme_to_json_dict,
)
from .prior import GpKernelConfig, PriorConfig
from .scenarios import (
    BenchmarkCell,
    BenchmarkConfig,
    benchmark_output_paths,
    coverage_from_files,
    generate_scenario,
    run_benchmark,
    scenario_from_json_dict,
    scenario_to_json_dict,
    write_benchmark_outputs,
    write_series_csv,
    write_truth_csv,
)
from .testing import TestProfile, builtin_profile

THREADS_ENV = "RT_INFER_THREADS"


def _atomic_write_json(payload: dict, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def load_config(path: str) -> tuple[dict, dict]:
    """Read a config file; a manifest unwraps to its embedded config."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON ({path}): {e}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    if "command" in raw and "config" in raw:
        inputs = raw.get("inputs", {})
        return dict(raw["config"]), dict(inputs)
    return raw, {}


def _reject_unknown_sections(cfg: dict, known: set[str]) -> None:
    unknown = set(cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")


def _require_section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise ConfigurationError(f"config is missing the {name!r} section")
    if not isinstance(cfg[name], dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    return cfg[name]


def resolve_seed(args, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    else:
        seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    return seed


def resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return _check_threads(args.threads)
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            return _check_threads(int(env))
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _check_threads(n: int) -> int:
    if n < 1:
        raise ConfigurationError("threads must be >= 1")
    return n


def resolve_test_profile(section: dict | None) -> TestProfile:
    if section is None:
        return builtin_profile("pcr")
    if "builtin" in section:
        if set(section) != {"builtin"}:
            raise ConfigurationError("test section with 'builtin' takes no other keys")
        return builtin_profile(section["builtin"])
    return TestProfile.from_json_dict(section)


def _test_section_resolved(section: dict | None) -> dict:
    # builtin names stay symbolic in the manifest; explicit pmfs round-trip
    if section is None:
        return {"builtin": "pcr"}
    return dict(section)


def resolve_observation(section: dict, disease: DiseaseConfig):
    obs = dict(section)
    if "fraction" in obs:
        kind = obs.pop("kind", None)
        frac = float(obs.pop("fraction"))
        fp = float(obs.pop("false_positive_rate", 0.0))
        if kind == "cross_sectional":
            if obs:
                raise ConfigurationError(f"unknown observation config keys: {sorted(obs)}")
            return CrossSectional.fraction(frac, disease, false_positive_rate=fp)
        if kind == "longitudinal":
            cadence = obs.pop("cadence", None)
            if cadence is None:
                raise ConfigurationError("longitudinal observation needs cadence")
            if obs:
                raise ConfigurationError(f"unknown observation config keys: {sorted(obs)}")
            return Longitudinal.fraction(frac, disease, int(cadence), false_positive_rate=fp)
        raise ConfigurationError("fraction is only valid for cross_sectional/longitudinal")
    return scheme_from_json_dict(section)


def resolve_prior(section: dict | None, disease: DiseaseConfig) -> PriorConfig:
    d = dict(section or {})
    d.setdefault("importation_mean", disease.importation_prior_mean)
    return PriorConfig.from_json_dict(d)


def read_observations(path: str, horizon: int) -> np.ndarray:
    """day,count CSV -> length-T count vector; errors carry the row number."""
    try:
        with open(path, newline="") as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise ConfigurationError(f"observations file not found: {path}") from None
    if not lines:
        raise ConfigurationError(f"observations file is empty: {path}")
    counts = {}
    for idx, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            day, count = int(parts[0]), int(parts[1])
            if day < 1 or count < 0:
                raise ValueError
        except (ValueError, IndexError):
            raise ConfigurationError(
                f"corrupt observations CSV at row {idx}: {line!r}"
            ) from None
        counts[day] = count
    if sorted(counts) != list(range(1, len(counts) + 1)):
        raise ConfigurationError("observations CSV must cover days 1..T exactly once")
    if len(counts) != horizon:
        raise ConfigurationError(
            f"observations cover {len(counts)} days but the horizon is {horizon}"
        )
    return np.asarray([counts[d] for d in range(1, horizon + 1)], dtype=np.int64)


def _write_manifest(
    out_dir: str, command: str, config: dict, seed: int, outputs: list[str], inputs: dict | None = None
) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "rng_seed": seed,
        "config": config,
        "outputs": outputs,
    }
    if inputs:
        payload["inputs"] = inputs
    _atomic_write_json(payload, os.path.join(out_dir, "manifest.json"))


def cmd_simulate(args) -> int:
    cfg, _ = load_config(args.config)
    _reject_unknown_sections(cfg, {"disease", "test", "observation", "scenario", "seed"})
    disease = DiseaseConfig.from_json_dict(_require_section(cfg, "disease"))
    profile = resolve_test_profile(cfg.get("test"))
    scheme = resolve_observation(_require_section(cfg, "observation"), disease)
    scen = dict(_require_section(cfg, "scenario"))
    seed = resolve_seed(args, cfg)

    gamma = float(scen.pop("gamma", 0.5))
    if scen.get("kind") == "fixed":
        values = scen.get("R")
        if values is None:
            raise ConfigurationError("fixed scenario needs an R array")
        if len(values) != disease.horizon:
            raise ConfigurationError("fixed scenario R length must match the horizon")
        truth = RtTrajectory(np.asarray(values, dtype=float), gamma)
        scen_resolved = {"kind": "fixed", "R": [float(v) for v in values], "gamma": gamma}
    else:
        scen.setdefault("horizon", disease.horizon)
        scenario = scenario_from_json_dict(scen)
        if scenario.horizon != disease.horizon:
            raise ConfigurationError("scenario horizon must match the disease horizon")
        truth = generate_scenario(
            scenario, np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0))), gamma
        )
        scen_resolved = {**scenario_to_json_dict(scenario), "gamma": gamma}

    counts = simulate(truth, disease, np.random.default_rng(np.random.SeedSequence(entropy=(seed, 1))))
    x = sample_observations(
        counts, scheme, profile, disease,
        np.random.default_rng(np.random.SeedSequence(entropy=(seed, 2))),
    )

    os.makedirs(args.out, exist_ok=True)
    resolved = {
        "disease": disease.to_json_dict(),
        "test": _test_section_resolved(cfg.get("test")),
        "observation": scheme_to_json_dict(scheme),
        "scenario": scen_resolved,
        "seed": seed,
    }
    outputs = ["rt_true.csv", "infections.csv", "observations.csv"]
    _write_manifest(args.out, "simulate", resolved, seed, outputs)
    write_truth_csv(truth.R, os.path.join(args.out, "rt_true.csv"))
    write_series_csv(counts, os.path.join(args.out, "infections.csv"))
    write_series_csv(x, os.path.join(args.out, "observations.csv"))
    return 0


def cmd_infer(args) -> int:
    cfg, inputs = load_config(args.config)
    _reject_unknown_sections(cfg, {"disease", "test", "observation", "prior", "svi", "seed"})
    disease = DiseaseConfig.from_json_dict(_require_section(cfg, "disease"))
    profile = resolve_test_profile(cfg.get("test"))
    scheme = resolve_observation(_require_section(cfg, "observation"), disease)
    prior = resolve_prior(cfg.get("prior"), disease)
    seed = resolve_seed(args, cfg)

    svi_dict = dict(cfg.get("svi", {}))
    if args.seed is not None or "rng_seed" not in svi_dict:
        svi_dict["rng_seed"] = seed
    svi = SviConfig.from_json_dict(svi_dict)

    obs_path = args.observations or inputs.get("observations")
    if obs_path is None:
        raise ConfigurationError("no observations file (pass --observations)")
    x = read_observations(obs_path, disease.horizon)
    threads = resolve_threads(args)
    problem = InferenceProblem(disease=disease, scheme=scheme, profile=profile, prior=prior)

    os.makedirs(args.out, exist_ok=True)
    resolved = {
        "disease": disease.to_json_dict(),
        "test": _test_section_resolved(cfg.get("test")),
        "observation": scheme_to_json_dict(scheme),
        "prior": prior.to_json_dict(),
        "svi": svi.to_json_dict(),
        "seed": seed,
    }
    outputs = ["posterior.csv", "elbo_trace.csv", "checkpoint.json"]
    _write_manifest(
        args.out, "infer", resolved, seed, outputs, inputs={"observations": obs_path}
    )
    summary = fit(
        x,
        problem,
        svi,
        threads=threads,
        checkpoint_path=os.path.join(args.out, "checkpoint.json"),
        resume_from=args.resume,
    )
    write_posterior_csv(summary, os.path.join(args.out, "posterior.csv"))
    write_elbo_csv(summary, os.path.join(args.out, "elbo_trace.csv"))
    return 0


def _parse_benchmark(cfg: dict, seed: int) -> BenchmarkConfig:
    section = dict(_require_section(cfg, "benchmark"))
    cells_raw = section.pop("cells", None)
    if not cells_raw:
        raise ConfigurationError("benchmark config needs a non-empty cells list")
    cells = []
    for i, c in enumerate(cells_raw):
        c = dict(c)
        unknown = set(c) - {"label", "scenario", "test_kind", "observation"}
        if unknown:
            raise ConfigurationError(f"unknown benchmark cell keys: {sorted(unknown)}")
        if "scenario" not in c:
            raise ConfigurationError(f"benchmark cell {i} is missing its scenario")
        cells.append(
            BenchmarkCell(
                label=str(c.get("label", f"cell_{i}")),
                scenario=scenario_from_json_dict(c["scenario"]),
                test_kind=str(c.get("test_kind", "pcr")),
                observation=dict(
                    c.get("observation", {"kind": "cross_sectional", "fraction": 0.001})
                ),
            )
        )
    known = {"instances", "methods", "population_size", "initial_infected", "gamma"}
    unknown = set(section) - known
    if unknown:
        raise ConfigurationError(f"unknown benchmark config keys: {sorted(unknown)}")
    return BenchmarkConfig(
        cells=tuple(cells),
        instances=int(section.get("instances", 20)),
        methods=tuple(section.get("methods", ["gp_svi", "cori"])),
        population_size=int(section.get("population_size", 20000)),
        initial_infected=int(section.get("initial_infected", 5)),
        gamma=float(section.get("gamma", 0.5)),
        rng_seed=seed,
    )


def _benchmark_section_dict(bench: BenchmarkConfig) -> dict:
    return {
        "cells": [
            {
                "label": c.label,
                "scenario": scenario_to_json_dict(c.scenario),
                "test_kind": c.test_kind,
                "observation": dict(c.observation),
            }
            for c in bench.cells
        ],
        "instances": bench.instances,
        "methods": list(bench.methods),
        "population_size": bench.population_size,
        "initial_infected": bench.initial_infected,
        "gamma": bench.gamma,
    }


def cmd_benchmark(args) -> int:
    cfg, _ = load_config(args.config)
    _reject_unknown_sections(cfg, {"benchmark", "svi", "cori", "seed"})
    seed = resolve_seed(args, cfg)
    bench = _parse_benchmark(cfg, seed)
    svi = SviConfig.from_json_dict(dict(cfg.get("svi", {})))
    cori = CoriConfig.from_json_dict(dict(cfg.get("cori", {})))
    threads = resolve_threads(args)

    result = run_benchmark(bench, svi, cori, threads=threads)

    os.makedirs(args.out, exist_ok=True)
    resolved = {
        "benchmark": _benchmark_section_dict(bench),
        "svi": svi.to_json_dict(),
        "cori": cori.to_json_dict(),
        "seed": seed,
    }
    _write_manifest(args.out, "benchmark", resolved, seed, benchmark_output_paths(result))
    write_benchmark_outputs(result, args.out)
    return 0


def cmd_calibrate(args) -> int:
    if args.config is not None:
        cfg, _ = load_config(args.config)
        _reject_unknown_sections(cfg, {"results_dir", "levels", "seed"})
    else:
        cfg = {}
    results_dir = args.results or cfg.get("results_dir")
    if results_dir is None:
        raise ConfigurationError("no results directory (pass --results)")
    levels = [float(v) for v in cfg.get("levels", [0.5, 0.9])]
    seed = resolve_seed(args, cfg)

    rows = coverage_from_files(results_dir, levels)

    os.makedirs(args.out, exist_ok=True)
    resolved = {"results_dir": results_dir, "levels": levels, "seed": seed}
    _write_manifest(args.out, "calibrate", resolved, seed, ["calibration.csv"])
    with open(os.path.join(args.out, "calibration.csv"), "w", newline="") as f:
        f.write("method,level,coverage\n")
        for method, level, coverage in rows:
            f.write(f"{method},{format(level, '.10g')},{format(coverage, '.10g')}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtinfer",
        description="Reproduction-number inference from sparse, partially observed test counts",
    )
    parser.add_argument("--version", action="version", version=f"rtinfer {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config (or a manifest)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help=f"worker threads (env {THREADS_ENV})")

    p = sub.add_parser("simulate", help="draw ground truth, infections and observations")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="fit the variational posterior to observations")
    common(p)
    p.add_argument("--observations", default=None, help="day,count CSV (defaults to the manifest's)")
    p.add_argument("--resume", default=None, help="checkpoint JSON to continue from")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("benchmark", help="run a benchmark grid of scenarios and methods")
    common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("calibrate", help="recompute coverage from benchmark output files")
    common(p, config_required=False)
    p.add_argument("--results", default=None, help="benchmark output directory")
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure, distinct from bad input
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
