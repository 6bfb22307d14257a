"""Command-line driver for the kinetic-to-diffusion pipeline.

Verbs
-----
constants    explicit coercivity and equilibrium constants as JSON
operator     assemble the linearized collision operator and report diagnostics
fick-matrix  assemble the diffusion matrix, CSV + JSON reports
verify       randomized structural checks on the collision operator
solve        integrate the cross-diffusion system and report the decay rate
kinetic      one linearized kinetic run on the slab
study        chained fluid solve plus epsilon-convergence study

Exit codes: 0 success, 2 configuration error, 3 structural verification
failure, 4 numerical failure (blow-up or instability).  Reports are JSON with
stable key order; tabular output is comma-separated with ``.`` as the decimal
mark.  Every report embeds the config hash, the package version and the seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import zipfile
from pathlib import Path

import numpy as np

from . import __version__
from .collision import apply_Q, entropy_production, load_stencil, precompute_stencil, save_stencil
from .config import RunConfig, load_config
from .errors import BlowUpError, VerificationError
from .fick_matrix import (
    ComplementSolver,
    assemble_fick,
    eigen_report,
    matrix_function,
    verify_lemma_cij,
)
from .fick_solver import (
    QuasilinearCoefficients,
    SpectralFlow,
    discrete_time_derivative,
    frozen_provider,
    run,
    single_mode_field,
    validate_initial,
    write_decay_csv,
    write_state_csv,
)
from .kinetic import (
    KineticSource,
    build_source,
    eps_convergence_study,
    evolve_linearized,
    fluid_control,
    well_prepared_initial,
    write_trajectory_csv,
)
from .linear_operator import (
    assemble_L,
    explicit_constants,
    load_operator,
    numeric_spectral_gap,
    save_operator,
)
from .mixture import maxwellian_field, validate_hypotheses
from .velocity_grid import integrate

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STRUCTURAL = 3
EXIT_NUMERICAL = 4

KERNEL_RESIDUAL_THRESHOLD = 1e-6
DEGENERATE_FLAG = "degenerate spectrum: equal β"
TRIVIAL_FLAG = "trivial datum"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(payload), sort_keys=True, ensure_ascii=False, indent=2)
    path.write_text(text + "\n", encoding="utf-8")


def _base_payload(cfg: RunConfig, seed: int) -> dict:
    return {"config_hash": cfg.config_hash, "version": __version__, "seed": int(seed)}


def _ensure_pipeline(cfg: RunConfig, out_dir: Path, *, need_operator: bool = True) -> dict:
    """Build mixture, grid, stencil and operator, reusing on-disk caches."""
    mixture = cfg.mixture()
    grid = cfg.grid()
    concentrations = cfg.concentrations()
    cache_dir = out_dir / "cache"
    key = cfg.pipeline_hash[:16]
    cache = {"stencil": "miss", "operator": "miss"}

    cache_errors = (ValueError, OSError, KeyError, zipfile.BadZipFile)
    stencil_path = cache_dir / f"stencil-{key}.npz"
    stencil = None
    if stencil_path.exists():
        try:
            stencil = load_stencil(stencil_path, mixture, grid)
            cache["stencil"] = "hit"
        except cache_errors as exc:
            log.warning("stencil cache %s unusable (%s); regenerating", stencil_path, exc)
            cache["stencil"] = "regenerated"
    if stencil is None:
        stencil = precompute_stencil(mixture, grid)
        save_stencil(stencil, stencil_path)

    op = None
    if need_operator:
        op_path = cache_dir / f"operator-{key}.npz"
        if op_path.exists():
            try:
                op = load_operator(op_path, mixture, concentrations, grid)
                cache["operator"] = "hit"
            except cache_errors as exc:
                log.warning("operator cache %s unusable (%s); regenerating", op_path, exc)
                cache["operator"] = "regenerated"
        if op is None:
            op = assemble_L(mixture, concentrations, grid, stencil)
            save_operator(op, op_path)

    return {
        "mixture": mixture,
        "grid": grid,
        "n": concentrations,
        "stencil": stencil,
        "op": op,
        "cache": cache,
    }


# ---------------------------------------------------------------------------
# verbs


def cmd_constants(cfg: RunConfig, out_dir: Path, seed: int) -> None:
    mixture = cfg.mixture()
    grid = cfg.grid()
    hypotheses = validate_hypotheses(mixture)
    constants = explicit_constants(mixture, cfg.concentrations(), grid,
                                   c2=cfg.get("constants.c2"))
    payload = _base_payload(cfg, seed)
    payload["constants"] = constants.as_dict()
    payload["hypotheses_ok"] = bool(hypotheses.ok)
    _write_json(payload, out_dir / "constants.json")


def cmd_operator(cfg: RunConfig, out_dir: Path, seed: int) -> None:
    started = time.perf_counter()
    pipe = _ensure_pipeline(cfg, out_dir)
    gap = numeric_spectral_gap(pipe["op"])
    payload = _base_payload(cfg, seed)
    payload.update({
        "diagnostics": dict(pipe["op"].diagnostics),
        "spectral_gap": gap.lam,
        "operator_norm": gap.operator_norm,
        "kernel_dimension": gap.zero_count,
        "kernel_angle_max": float(np.max(gap.kernel_angles)),
        "cache": pipe["cache"],
        "elapsed_seconds": time.perf_counter() - started,
    })
    _write_json(payload, out_dir / "operator.json")


def _write_matrix_csv(matrix: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = matrix.shape[1]
    lines = [",".join(f"abar_{j + 1}" for j in range(n))]
    for row in matrix:
        lines.append(",".join(f"{v:.17g}" for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_fick_matrix(cfg: RunConfig, out_dir: Path, seed: int) -> None:
    pipe = _ensure_pipeline(cfg, out_dir)
    op = pipe["op"]
    started = time.perf_counter()
    solver = ComplementSolver(op)
    assembly = assemble_fick(pipe["mixture"], pipe["n"], pipe["grid"], op, solver)
    assembly_seconds = time.perf_counter() - started
    gap = numeric_spectral_gap(op)
    report = eigen_report(assembly, op, gap)

    payload = _base_payload(cfg, seed)
    flags = [DEGENERATE_FLAG] if report.degenerate else []
    payload.update({
        "abar": assembly.abar,
        "a": assembly.a,
        "eigenvalues": report.eigenvalues,
        "nonzero_eigenvalues": report.nonzero,
        "negative_count": report.negative_count,
        "c1": report.c1,
        "lambda_a": report.lambda_a,
        "bound_ok": bool(report.bound_ok),
        "degenerate_spread": report.degenerate_spread,
        "kernel_residual": assembly.kernel_residual,
        "symmetry_defect": assembly.symmetry_defect,
        "assembly_seconds": assembly_seconds,
        "cache": pipe["cache"],
        "flags": flags,
    })
    if pipe["mixture"].dim == 2:
        iso = verify_lemma_cij(pipe["mixture"], pipe["n"], pipe["grid"], op, solver)
        payload["isotropy"] = {
            "cross_max": iso.cross_max,
            "axis_mismatch": iso.axis_mismatch,
            "ok": bool(iso.ok),
        }
    _write_matrix_csv(assembly.abar, out_dir / "fick_matrix.csv")
    _write_json(payload, out_dir / "fick_matrix.json")
    if assembly.kernel_residual > KERNEL_RESIDUAL_THRESHOLD:
        raise VerificationError(
            f"diffusion-matrix kernel residual {assembly.kernel_residual:.3e} "
            f"exceeds {KERNEL_RESIDUAL_THRESHOLD:g}"
        )


def cmd_verify(cfg: RunConfig, out_dir: Path, seed: int) -> None:
    pipe = _ensure_pipeline(cfg, out_dir, need_operator=False)
    mixture, grid, stencil = pipe["mixture"], pipe["grid"], pipe["stencil"]
    n = pipe["n"]
    rng = np.random.default_rng(seed)

    equilibrium = maxwellian_field(mixture, n, grid.nodes)
    randomized = equilibrium * (0.5 + rng.random(equilibrium.shape))
    collided = apply_Q(randomized, mixture, grid, stencil)

    nodes = grid.nodes
    speed_sq = np.sum(nodes ** 2, axis=1)
    masses = mixture.masses
    mass_defect = max(abs(integrate(collided[i], grid)) for i in range(len(masses)))
    mass_scale = max(integrate(np.abs(collided[i]), grid) for i in range(len(masses)))
    momentum = sum(masses[i] * np.array(
        [integrate(collided[i] * nodes[:, a], grid) for a in range(grid.dim)]
    ) for i in range(len(masses)))
    momentum_scale = sum(masses[i] * integrate(np.abs(collided[i]) * np.sqrt(speed_sq), grid)
                         for i in range(len(masses)))
    energy = sum(masses[i] * integrate(collided[i] * speed_sq, grid)
                 for i in range(len(masses)))
    energy_scale = sum(masses[i] * integrate(np.abs(collided[i]) * speed_sq, grid)
                       for i in range(len(masses)))

    equilibrium_image = apply_Q(equilibrium, mixture, grid, stencil)
    equilibrium_norm = float(np.sqrt(np.sum(grid.weights * equilibrium_image ** 2)))
    entropy = entropy_production(randomized, mixture, grid, stencil)
    hypotheses = validate_hypotheses(mixture)

    checks = {
        "mass_defect_rel": mass_defect / max(mass_scale, 1e-300),
        "momentum_defect_rel": float(np.abs(momentum).max()) / max(momentum_scale, 1e-300),
        "energy_defect_rel": abs(energy) / max(energy_scale, 1e-300),
        "equilibrium_image_norm": equilibrium_norm,
        "entropy_production": entropy,
        "truncation_loss_max": float(max(stencil.truncation_loss.values())),
    }
    ok = (
        checks["mass_defect_rel"] <= 1e-10
        and checks["momentum_defect_rel"] <= 1e-10
        and checks["energy_defect_rel"] <= 1e-10
        and equilibrium_norm <= 1e-6
        and entropy <= 1e-12
        and hypotheses.ok
    )
    payload = _base_payload(cfg, seed)
    payload.update({"checks": checks, "hypotheses_ok": bool(hypotheses.ok), "ok": bool(ok)})
    _write_json(payload, out_dir / "verify.json")
    if not ok:
        raise VerificationError("structural checks failed; see verify.json")


def _solver_provider(cfg: RunConfig, pipe: dict, abar: np.ndarray):
    if cfg.get("solver.matrix_mode") == "frozen":
        return frozen_provider(abar, pipe["n"])
    return QuasilinearCoefficients(
        matrix_function(pipe["mixture"], pipe["grid"], pipe["stencil"])
    )


def _initial_field(cfg: RunConfig, cells: int):
    return single_mode_field(
        cfg.concentrations(),
        np.asarray(cfg.get("species.masses"), dtype=float),
        amplitude=cfg.get("init.amplitude"),
        wavenumber=cfg.get("init.wavenumber"),
        cells=cells,
    )


def cmd_solve(cfg: RunConfig, out_dir: Path, seed: int) -> None:
    pipe = _ensure_pipeline(cfg, out_dir)
    solver = ComplementSolver(pipe["op"])
    assembly = assemble_fick(pipe["mixture"], pipe["n"], pipe["grid"], pipe["op"], solver)
    field = _initial_field(cfg, cfg.get("solver.cells"))
    admissibility = validate_initial(
        field, cfg.get("solver.delta"), cfg.get("solver.delta_s"), cfg.get("solver.s"))
    if not admissibility.ok:
        raise ValueError(
            "initial datum rejected: " + ", ".join(admissibility.failures))

    provider = _solver_provider(cfg, pipe, assembly.abar)
    decay = run(field, cfg.get("solver.t_end"), cfg.get("solver.dt"),
                cfg.get("solver.s"), provider)
    write_decay_csv(decay, out_dir / "decay.csv")
    write_state_csv(decay.final, out_dir / "state.csv")

    payload = _base_payload(cfg, seed)
    flags = [TRIVIAL_FLAG] if decay.trivial else []
    payload.update({
        "rate": decay.rate,
        "efold_time": decay.efold_time,
        "fit_window": list(decay.fit_window),
        "monotone_defect": decay.monotone_defect,
        "closure_drift": decay.closure_drift,
        "positivity_margin": decay.positivity_margin,
        "mean_drift": decay.mean_drift,
        "cfl_flag_count": decay.cfl_flag_count,
        "matrix_mode": cfg.get("solver.matrix_mode"),
        "flags": flags,
        "cache": pipe["cache"],
    })
    if isinstance(provider, QuasilinearCoefficients):
        payload["provider_cache"] = {
            "hits": provider.hits, "misses": provider.misses, "size": provider.cache_size}
    _write_json(payload, out_dir / "solve.json")


def cmd_kinetic(cfg: RunConfig, out_dir: Path, seed: int) -> None:
    pipe = _ensure_pipeline(cfg, out_dir)
    op = pipe["op"]
    solver = ComplementSolver(op)
    assembly = assemble_fick(pipe["mixture"], pipe["n"], pipe["grid"], op, solver)
    epsilons = cfg.get("kinetic.epsilons")
    eps = float(epsilons[0])
    cells = cfg.get("kinetic.cells")
    profile = _initial_field(cfg, cells).perturbation
    matrix = pipe["n"][:, None] * assembly.abar
    flow = SpectralFlow(profile, matrix)
    source = KineticSource(flow, pipe["mixture"], pipe["grid"], op, eps)
    f0 = well_prepared_initial(source, op, solver=solver)
    dt = cfg.get("kinetic.dt_factor") * eps ** 2

    result = evolve_linearized(
        f0, eps, cfg.get("kinetic.t_end"), dt, op, source,
        s=cfg.get("kinetic.s"),
        flux_reference=lambda t: matrix @ flow.gradient(t),
    )
    control = fluid_control(flow, eps, cfg.get("kinetic.s"), result.times)
    write_trajectory_csv(result, out_dir / "trajectory.csv")

    payload = _base_payload(cfg, seed)
    payload.update({
        "epsilon": eps,
        "dt": result.dt,
        "steps": result.steps,
        "max_surrogate_ratio": result.max_ratio,
        "within_budget": bool(result.within_budget),
        "flux_error_sup": float(np.nanmax(result.flux_residuals)),
        "source_removed_fraction": source.sample(0.0)[1].removed_fraction,
        "fluid_control": {
            "first": float(control[0]),
            "last": float(control[-1]),
            "max": float(control.max()),
            "decreasing": bool(np.all(np.diff(control) <= 1e-12)),
        },
        "cache": pipe["cache"],
    })
    _write_json(payload, out_dir / "kinetic.json")
    if float(control.max()) > cfg.get("kinetic.control_threshold"):
        raise VerificationError(
            f"fluid control {control.max():.3e} exceeds the configured threshold")


class _SnapshotFluid:
    """Single-time fluid data captured from a live solver state."""

    def __init__(self, tilde, dtn, grad):
        self._tilde = tilde
        self._dtn = dtn
        self._grad = grad

    def value(self, t):
        return self._tilde

    def time_derivative(self, t):
        return self._dtn

    def gradient(self, t):
        return self._grad


def _spatial_derivative(arr: np.ndarray) -> np.ndarray:
    cells = arr.shape[-1]
    k = np.fft.rfftfreq(cells, d=1.0 / cells)
    mult = 2.0j * np.pi * k
    if cells % 2 == 0:
        mult = mult.copy()
        mult[-1] = 0.0
    return np.fft.irfft(np.fft.rfft(arr, axis=-1) * mult, n=cells, axis=-1)


def cmd_study(cfg: RunConfig, out_dir: Path, seed: int) -> None:
    payload = _base_payload(cfg, seed)
    payload["stage"] = "setup"

    def abort(stage: str, exc: Exception):
        payload["stage"] = stage
        payload["error"] = str(exc)
        _write_json(payload, out_dir / "study.json")

    try:
        pipe = _ensure_pipeline(cfg, out_dir)
        op = pipe["op"]
        solver = ComplementSolver(op)
        assembly = assemble_fick(pipe["mixture"], pipe["n"], pipe["grid"], op, solver)
    except Exception as exc:
        abort("setup", exc)
        raise

    epsilons = cfg.get("kinetic.epsilons")
    eps0 = float(epsilons[0])

    try:
        field = _initial_field(cfg, cfg.get("solver.cells"))
        provider = _solver_provider(cfg, pipe, assembly.abar)
        decay = run(field, cfg.get("solver.t_end"), cfg.get("solver.dt"),
                    cfg.get("solver.s"), provider)

        snapshots = [field]
        current = field
        quarter = cfg.get("solver.t_end") / 4.0
        for _ in range(4):
            segment = run(current, quarter, cfg.get("solver.dt"),
                          cfg.get("solver.s"), provider)
            current = segment.final
            snapshots.append(current)

        kernel_ratios = []
        removed = []
        control_series = []
        for snap in snapshots:
            tilde = snap.perturbation
            dtn = discrete_time_derivative(snap, provider)
            grad = _spatial_derivative(tilde)
            fluid = _SnapshotFluid(tilde, dtn, grad)
            _, report = build_source(fluid, eps0, pipe["mixture"], pipe["grid"], op)
            kernel_ratios.append(report.kernel_ratio)
            removed.append(report.removed_fraction)
            control_series.append(float(fluid_control(fluid, eps0,
                                                      cfg.get("solver.s"), [0.0])[0]))
        payload["fick"] = {
            "rate": decay.rate,
            "closure_drift": decay.closure_drift,
            "positivity_margin": decay.positivity_margin,
            "trivial": bool(decay.trivial),
        }
        payload["source_kernel_ratio_max"] = float(max(kernel_ratios))
        payload["source_removed_fractions"] = removed
        payload["fluid_control"] = {
            "series": control_series,
            "finite": bool(np.all(np.isfinite(control_series))),
            "decreasing": bool(np.all(np.diff(control_series) <= 1e-12)),
        }
    except Exception as exc:
        abort("fick-solve", exc)
        raise

    try:
        profile = _initial_field(cfg, cfg.get("kinetic.cells")).perturbation
        study = eps_convergence_study(
            epsilons, pipe["mixture"], pipe["grid"], op, assembly.abar, profile,
            t_end=cfg.get("kinetic.t_end"),
            dt_factor=cfg.get("kinetic.dt_factor"),
            s=cfg.get("kinetic.s"),
        )
    except Exception as exc:
        abort("kinetic-study", exc)
        raise

    flags = []
    if decay.trivial or study.degenerate:
        flags.append(TRIVIAL_FLAG)
    if study.inconclusive:
        flags.append("inconclusive order fit")
    payload["stage"] = "complete"
    payload.update({
        "eps": study.eps,
        "flux_error": study.errors,
        "order": study.order,
        "stability_margins": study.stability_margins,
        "monotone": bool(study.monotone),
        "degenerate": bool(study.degenerate),
        "flags": flags,
    })
    _write_json(payload, out_dir / "study.json")


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "constants": cmd_constants,
    "operator": cmd_operator,
    "fick-matrix": cmd_fick_matrix,
    "verify": cmd_verify,
    "solve": cmd_solve,
    "kinetic": cmd_kinetic,
    "study": cmd_study,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fickmix",
        description="Kinetic derivation pipeline for cross-diffusion mixtures",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", type=Path, default=None,
                       help="flat key=value config file; defaults apply if omitted")
        p.add_argument("--out", type=Path, default=Path("out"),
                       help="output directory for reports and caches")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for randomized checks; fixed seed, fixed report")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _COMMANDS[args.command](cfg, args.out, args.seed)
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_STRUCTURAL
    except BlowUpError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
