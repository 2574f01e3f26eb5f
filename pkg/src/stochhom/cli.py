"""Reproducible experiment driver.

Usage::

    python3 -m stochhom <subcommand> --config cfg.json --out results/ [--seed S] [--threads K]

The config is one JSON document with ``field``, ``seed`` and a section named
after the subcommand. Every run writes ``manifest.json`` (resolved config with
defaults filled in, package version, status), the result tables, and
``checks.json``. Exit codes: 0 success, 2 config error, 3 solver failure,
4 invariant violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .field import FieldError, FieldSpec
from .grid import ConvergenceError, _fmt

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INVARIANT = 0, 2, 3, 4
SUBCOMMANDS = ("effective", "elliptic-convergence", "harmonic-map", "llg", "llg-compare", "birkhoff")

Matrix = Union[float, list[list[float]]]


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FieldConfig(Strict):
    kind: Literal["Constant", "Layered1D", "Checkerboard", "PoissonInclusion"]
    dimension: int = Field(ge=1, le=3)
    a_inside: Matrix
    a_outside: Optional[Matrix] = None
    inclusion_radius: float = 0.5
    intensity: float = 1.0
    phase_probability: float = 0.5
    cell_size: float = 1.0


class RVEConfig(Strict):
    L: float = Field(64.0, gt=0)
    n: int = Field(256, ge=2)
    M: int = Field(16, ge=1)
    tol: float = Field(1e-10, gt=0)


def _decreasing(v: list[float]) -> list[float]:
    if any(e <= 0 for e in v) or any(b >= a for a, b in zip(v, v[1:])):
        raise ValueError("must be positive and strictly decreasing")
    return v


class EllipticConfig(Strict):
    eps_list: list[float] = Field(min_length=1)
    f: float = 2.0
    side: float = Field(1.0, gt=0)
    cells_per_eps: int = Field(8, ge=1)
    n_fixed: Optional[int] = None
    a_eff: Optional[Matrix] = None
    rve: RVEConfig = RVEConfig()
    tol: float = Field(1e-10, gt=0)

    _check_eps = field_validator("eps_list")(_decreasing)


class HarmonicMapConfig(Strict):
    eps_list: list[float] = Field(min_length=1)
    n: int = Field(64, ge=4)
    cells_per_eps: int = Field(4, ge=1)
    turns: float = 0.5
    tilt: float = 0.3
    stop_tol: float = Field(1e-11, ge=0)
    max_steps: int = Field(1_000_000, ge=1)
    bank_size: int = Field(20, ge=1)
    bank_seed: int = 1
    ledger_every: int = Field(100, ge=1)
    a_eff: Optional[Matrix] = None
    rve: RVEConfig = RVEConfig(L=32, n=128, M=4)

    _check_eps = field_validator("eps_list")(_decreasing)


class LLGSection(Strict):
    eps: float = Field(gt=0)
    n: int = Field(32, ge=4)
    lam: float = Field(0.5, ge=0)
    dt: Optional[float] = Field(None, gt=0)
    T: float = Field(1.0, gt=0)
    record_every: int = Field(1, ge=1)
    budget: float = Field(1.0, ge=0)
    turns: float = 0.5
    tilt: float = 0.3


class LLGCompareConfig(Strict):
    eps_list: list[float] = Field(min_length=1)
    n: int = Field(64, ge=4)
    lam: float = Field(0.5, ge=0)
    dt: Optional[float] = Field(None, gt=0)
    T: float = Field(0.05, gt=0)
    record_every: int = Field(10, ge=1)
    budget: float = Field(1.0, ge=0)
    turns: float = 0.5
    tilt: float = 0.3
    a_eff: Optional[Matrix] = None
    rve: RVEConfig = RVEConfig(L=32, n=128, M=4)

    _check_eps = field_validator("eps_list")(_decreasing)


class BirkhoffConfig(Strict):
    t_list: list[float] = Field(min_length=1)
    statistic: Literal["phase_indicator", "a11", "constant"] = "phase_indicator"
    spread_seeds: int = Field(8, ge=0)

    @field_validator("t_list")
    @classmethod
    def _increasing(cls, v):
        if any(t <= 0 for t in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("must be positive and strictly increasing")
        return v


SECTIONS = {
    "effective": RVEConfig,
    "elliptic-convergence": EllipticConfig,
    "harmonic-map": HarmonicMapConfig,
    "llg": LLGSection,
    "llg-compare": LLGCompareConfig,
    "birkhoff": BirkhoffConfig,
}


class ConfigError(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


def load_config(path: Path, subcommand: str, seed_override: int | None) -> dict:
    """Parse and validate; return the fully resolved config as plain data."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    declared = raw.pop("subcommand", subcommand)
    if declared != subcommand:
        raise ConfigError(f"subcommand: config declares {declared!r} but {subcommand!r} was requested")
    problems = []
    unknown = set(raw) - {"field", "seed", subcommand}
    problems += [f"{k}: unexpected top-level key" for k in sorted(unknown)]
    seed = raw.get("seed") if seed_override is None else seed_override
    if seed is None:
        problems.append("seed: Field required")
    elif not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        problems.append("seed: must be an unsigned 64-bit integer")
    resolved = {"subcommand": subcommand, "seed": seed}
    for key, model in (("field", FieldConfig), (subcommand, SECTIONS[subcommand])):
        if key not in raw:
            problems.append(f"{key}: Field required")
            continue
        try:
            resolved[key] = model.model_validate(raw[key]).model_dump()
        except ValidationError as exc:
            for err in exc.errors():
                loc = ".".join(str(p) for p in (key,) + tuple(err["loc"]))
                problems.append(f"{loc}: {err['msg']}")
    if not problems:
        try:
            FieldSpec.from_dict(resolved["field"])
        except FieldError as exc:
            problems.append(f"field: {exc}")
    if problems:
        raise ConfigError("\n".join(problems))
    return resolved


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_cell(x) for x in r))
    path.write_text("\n".join(lines) + "\n")


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return _fmt(float(x))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(_fmt(float(obj)))
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


class Check(dict):
    def __init__(self, name: str, passed: bool, value=None, threshold=None, advisory: bool = False):
        super().__init__(name=name, passed=bool(passed), value=value, threshold=threshold,
                         advisory=advisory)


def _matrix_or_none(m, d):
    if m is None:
        return None
    return np.asarray(m, float) * (np.eye(d) if np.ndim(m) == 0 else 1.0)


def _a_eff(spec, seed, given, rve, threads):
    from .corrector import constant_tensor, effective_tensor

    if given is not None:
        return constant_tensor(_matrix_or_none(given, spec.dimension))
    return effective_tensor(spec, rve["L"], rve["n"], rve["M"], seed, rve["tol"], threads)


def run_effective(spec, seed, sec, out: Path, threads: int):
    from .corrector import effective_tensor

    t = effective_tensor(spec, sec["L"], sec["n"], sec["M"], seed, sec["tol"], threads)
    write_json(out / "effective.json", t.to_dict())
    d = spec.dimension
    header = ["sample"] + [f"a{i + 1}{j + 1}" for i in range(d) for j in range(d)] + ["asymmetry"]
    rows = [[m] + list(s.raw.ravel()) + [s.asymmetry] for m, s in enumerate(t.per_sample)]
    write_csv(out / "per_sample.csv", header, rows)
    write_csv(out / "effective.csv", ["i", "j", "value", "stderr"],
              [[i + 1, j + 1, t.matrix[i, j], t.stderr[i, j]] for i in range(d) for j in range(d)])
    return [Check("eigenvalues_within_ellipticity_bounds", t.bounds_check(), None, list(t.bounds)),
            Check("symmetric_part_asymmetry", t.raw_asymmetry <= 1e-6, t.raw_asymmetry, 1e-6),
            Check("energy_flux_consistency", t.q_consistency <= 1e-8, t.q_consistency, 1e-8)]


def run_elliptic(spec, seed, sec, out: Path, threads: int):
    from .elliptic import convergence_study

    a = _a_eff(spec, seed, sec["a_eff"], sec["rve"], threads)
    f = sec["f"]
    table = convergence_study(spec, seed, lambda x: np.full(len(x), f), sec["eps_list"],
                              side=sec["side"], cells_per_eps=sec["cells_per_eps"],
                              n_fixed=sec["n_fixed"], a_eff=a, tol=sec["tol"])
    write_csv(out / "convergence.csv", table.columns, table.as_rows())
    write_json(out / "a_eff.json", {"matrix": table.a_eff, "stderr": a.stderr})
    rel = table.rows[-1].rel_error
    return [Check("l2_error_strictly_decreasing", table.strictly_decreasing(), table.errors().tolist()),
            Check("h1_seminorm_bounded", table.h1_bounded(), max(r.h1_seminorm for r in table.rows),
                  table.h1_bound),
            Check("final_relative_error_below_10pct", rel < 0.1, rel, 0.1, advisory=True)]


def run_harmonic_map(spec, seed, sec, out: Path, threads: int):
    from .smap import homogenization_ladder

    a = _a_eff(spec, seed, sec["a_eff"], sec["rve"], threads)
    lad = homogenization_ladder(spec, seed, sec["eps_list"], a.matrix, sec["n"], turns=sec["turns"],
                                tilt=sec["tilt"], stop_tol=sec["stop_tol"], max_steps=sec["max_steps"],
                                bank_size=sec["bank_size"], bank_seed=sec["bank_seed"],
                                cells_per_eps=sec["cells_per_eps"])
    write_csv(out / "harmonic_map.csv", lad.columns, lad.as_rows())
    every = sec["ledger_every"]
    ledger = []
    for eps, energies in lad.ledgers.items():
        keep = list(range(0, len(energies), every))
        if keep[-1] != len(energies) - 1:
            keep.append(len(energies) - 1)
        ledger += [[eps, k, energies[k]] for k in keep]
    write_csv(out / "energy_ledger.csv", ("epsilon", "step", "energy"), ledger)
    fields = []
    for eps, u in lad.fields.items():
        x = u.grid.centers()
        fields += [[eps, i] + list(x[i]) + list(u.values[i]) for i in range(u.grid.size)]
    coords = tuple(f"x{k + 1}" for k in range(spec.dimension))
    write_csv(out / "final_fields.csv", ("epsilon", "cell") + coords + ("u1", "u2", "u3"), fields)
    checks = [Check("unit_norm_preserved", lad.max_norm_defect() <= 1e-12, lad.max_norm_defect(), 1e-12),
              Check("energy_nonincreasing", lad.energy_monotone()),
              Check("all_flows_converged", lad.all_converged())]
    checks += [Check(f"own_residual_eps_{_fmt(r.epsilon)}", r.residual_own <= 1e-4 * (r.energy + 1),
                     r.residual_own, 1e-4 * (r.energy + 1)) for r in lad.rows]
    checks.append(Check("homogenized_residual_decreasing", lad.homogenized_residual_decreasing(),
                        [r.residual_hom for r in lad.rows if r.epsilon > 0]))
    return checks


def _director(n, d, turns, tilt):
    from .grid import BC, Grid
    from .smap import winding_field

    return winding_field(Grid.cube(n, d, bc=BC.NEUMANN0), turns=turns, tilt=tilt)


def run_llg(spec, seed, sec, out: Path, threads: int):
    from .field import Kind, sample_field, scaled
    from .llg import LEDGER_COLUMNS, LLGConfig, run

    u0 = _director(sec["n"], spec.dimension, sec["turns"], sec["tilt"])
    box = None
    if spec.kind is Kind.POISSON:
        box = (np.zeros(spec.dimension), np.full(spec.dimension, 1.0 / sec["eps"]))
    coeff = scaled(sample_field(spec, seed, box), sec["eps"])
    traj = run(LLGConfig(u0, coeff, sec["lam"], sec["dt"], sec["T"], sec["record_every"], sec["budget"]))
    write_csv(out / "ledger.csv", LEDGER_COLUMNS + ("budget",),
              [list(r) + [b] for r, b in zip(traj.ledger, traj.budgets)])
    defect = float(np.abs(np.linalg.norm(traj.snapshots, axis=2) - 1).max())
    checks = [Check("unit_norm_preserved", defect <= 1e-12, defect, 1e-12),
              Check("energy_dissipation_inequality_with_budget", traj.energy_inequality_holds())]
    if sec["lam"] > 0:
        checks.append(Check("energy_nonincreasing", traj.energy_nonincreasing(), advisory=True))
    return checks


def run_llg_compare(spec, seed, sec, out: Path, threads: int):
    from .llg import LLGConfig, homogenization_comparison

    a = _a_eff(spec, seed, sec["a_eff"], sec["rve"], threads)
    u0 = _director(sec["n"], spec.dimension, sec["turns"], sec["tilt"])
    cfg = LLGConfig(u0, None, sec["lam"], sec["dt"], sec["T"], sec["record_every"], sec["budget"])
    table = homogenization_comparison(spec, seed, cfg, sec["eps_list"], a.matrix)
    write_csv(out / "llg_compare.csv", table.columns, table.as_rows())
    write_json(out / "energies.json", {"energy_mean_coefficient": table.energy_mean_coeff,
                                       "energy_effective": table.energy_effective,
                                       "flags": table.flags})
    return [Check("energy_dissipation_inequality_with_budget", all(r.energy_inequality_holds for r in table.rows)),
            Check("l2_error_monotone", table.monotone(), [r.l2_qt_error for r in table.rows],
                  advisory=True)]


def run_birkhoff(spec, seed, sec, out: Path, threads: int):
    from .ergodic import birkhoff_convergence, coefficient_entry, constant_statistic, phase_indicator

    stat = {"phase_indicator": phase_indicator, "a11": coefficient_entry,
            "constant": lambda s: constant_statistic()}[sec["statistic"]](spec)
    table = birkhoff_convergence(spec, seed, stat, sec["t_list"], sec["spread_seeds"])
    write_csv(out / "birkhoff.csv", table.columns, table.as_rows())
    write_json(out / "reference.json", {"value": table.reference, "provenance": table.provenance})
    return [Check("final_error_is_smallest", table.final_is_smallest, table.error[-1])]


RUNNERS = {
    "effective": run_effective,
    "elliptic-convergence": run_elliptic,
    "harmonic-map": run_harmonic_map,
    "llg": run_llg,
    "llg-compare": run_llg_compare,
    "birkhoff": run_birkhoff,
}


def run_experiment(cfg: dict, out: Path, threads: int = 1) -> int:
    """Execute a validated config; always leaves a manifest in ``out``."""
    from .corrector import ConsistencyError
    from .elliptic import UnderResolvedError
    from .field import OutOfDomainError
    from .smap import DegenerateStepError, StabilityError

    out.mkdir(parents=True, exist_ok=True)
    manifest = {"version": __version__, "config": cfg, "status": "running"}
    spec = FieldSpec.from_dict(cfg["field"])
    code = EXIT_OK
    try:
        checks = RUNNERS[cfg["subcommand"]](spec, cfg["seed"], cfg[cfg["subcommand"]], out, threads)
    except (UnderResolvedError, StabilityError) as exc:
        manifest.update(status="config_error", error=str(exc))
        code = EXIT_CONFIG
    except (ConvergenceError, ConsistencyError, DegenerateStepError, OutOfDomainError,
            FloatingPointError) as exc:
        manifest.update(status="solver_failure", error=f"{type(exc).__name__}: {exc}",
                        partial_outputs=sorted(p.name for p in out.iterdir() if p.name != "manifest.json"))
        code = EXIT_SOLVER
    else:
        write_json(out / "checks.json", checks)
        failed = [c["name"] for c in checks if not c["passed"] and not c["advisory"]]
        manifest["status"] = "invariant_violation" if failed else "ok"
        if failed:
            manifest["failed_checks"] = failed
            code = EXIT_INVARIANT
    manifest["outputs"] = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    write_json(out / "manifest.json", manifest)
    if code != EXIT_OK:
        print(f"{cfg['subcommand']}: {manifest['status']}: "
              f"{manifest.get('error') or ', '.join(manifest.get('failed_checks', []))}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochhom", description="Stochastic homogenization experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, type=Path, help="JSON experiment config")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo loops")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.subcommand, args.seed)
    except ConfigError as exc:
        for line in str(exc).splitlines():
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(cfg, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
