"""Running experiments and writing their artifacts.

An output directory holds

* ``config.txt``: the resolved configuration,
* ``trace.csv``: one row per outer iteration,
* ``marginals.bin``: final marginals, see :func:`write_marginals`,
* ``summary.txt``: key=value totals.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import gauss
from ..energy import delta_metric, phi_total
from ..model import ModelSpec, SiteParams
from ..solvers import SolverConfig, fast_ep, parallel_ep, sequential_ep
from ..solvers.common import SolverResult, marginal_tilde
from ..vb import compare_ep_vb, phi_vb, vb_solve
from .build import build_model
from .config import ExperimentConfig, load_config

MAGIC = b"EPMARG1\0"
HEADER_BYTES = 32
EP_SOLVERS = {"fast": fast_ep, "parallel": parallel_ep, "sequential": sequential_ep}


class DivergenceError(RuntimeError):
    pass


@dataclass
class Marginals:
    u_mean: np.ndarray
    u_var: np.ndarray
    s_mean: np.ndarray
    s_var: np.ndarray
    pi: np.ndarray
    b: np.ndarray

    @property
    def n(self):
        return self.u_mean.size

    @property
    def q(self):
        return self.s_mean.size


def write_marginals(path, marg: Marginals) -> None:
    """32-byte header (magic, n, q as little-endian uint64, zero padding), then float64 LE arrays."""
    header = MAGIC + struct.pack("<QQ", marg.n, marg.q)
    header += b"\0" * (HEADER_BYTES - len(header))
    body = [marg.u_mean, marg.u_var, marg.s_mean, marg.s_var, marg.pi, marg.b]
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in body:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_marginals(path) -> Marginals:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a marginals file")
    n, q = struct.unpack("<QQ", data[8:24])
    arr = np.frombuffer(data, dtype="<f8", offset=HEADER_BYTES)
    if arr.size != 2 * n + 4 * q:
        raise ValueError(f"{path}: expected {2 * n + 4 * q} values, found {arr.size}")
    parts = np.split(arr.astype(float), np.cumsum([n, n, q, q, q]))
    return Marginals(*parts)


def solver_config(cfg: ExperimentConfig) -> SolverConfig:
    return SolverConfig(
        epsilon=cfg.epsilon, damping=cfg.damping, max_outer=cfg.max_outer,
        tol_fixed_point=cfg.tol_fixed_point, solver_kind=cfg.solver,
        tol_inner=cfg.tol_inner, time_limit=cfg.time_limit,
    )


@dataclass
class RunResult:
    cfg: ExperimentConfig
    model: ModelSpec
    solver: str
    result: object
    trace: object
    marginals: Marginals
    summary: dict = field(default_factory=dict)


def _u_variances(state: gauss.GaussState):
    ainv = state.ainv if state.ainv is not None else gauss.inverse_from_chol(state.chol)
    return np.diag(ainv).copy()


def final_energy(model: ModelSpec, th: SiteParams, solver: str, state: gauss.GaussState | None = None) -> float:
    """Energy at a stored final state: phi(theta, Q marginals) for EP, phi_VB for VB."""
    if state is None or state.z is None:
        state = gauss.gauss_state(model, th)
    if solver == "vb":
        return phi_vb(th.pi, state.z, state.gstar, model)
    return phi_total(th, marginal_tilde(state), model, state).phi


def solve(model: ModelSpec, cfg: ExperimentConfig):
    """Runs the configured solver; returns (result, trace, th, state, phi)."""
    conf = solver_config(cfg)
    if cfg.solver == "vb":
        vb, trace = vb_solve(model, conf)
        return vb, trace, vb.th, vb.state, vb.phi_vb
    res: SolverResult = EP_SOLVERS[cfg.solver](model, conf)
    return res, res.trace, res.th, res.state, res.phi


def run_experiment(cfg: ExperimentConfig, write: bool = True, model: ModelSpec | None = None) -> RunResult:
    model = build_model(cfg) if model is None else model
    start = time.perf_counter()
    result, trace, th, state, phi = solve(model, cfg)
    elapsed = time.perf_counter() - start
    if state is None or state.z is None:
        state = gauss.gauss_state(model, th)
    marg = Marginals(state.u_star, _u_variances(state), state.s_star, state.z, th.pi, th.b)
    summary = {
        "solver": cfg.solver,
        "phi_star": float(phi),
        "phi_final": final_energy(model, th, cfg.solver, state),
        "n": model.n,
        "q": model.q,
        "m": model.m,
        "outer_iterations": len(trace.rows),
        "n_var_comp": trace.n_var_comp,
        "time_sec": elapsed,
    }
    if cfg.solver != "vb":
        summary.update({
            "residual": result.residual,
            "scaled_residual": result.info.get("scaled_residual", float("nan")),
            "converged": result.converged,
            "diverged": result.diverged,
            "fallback_steps": result.info.get("fallback_steps", 0),
        })
    run = RunResult(cfg, model, cfg.solver, result, trace, marg, summary)
    if write:
        write_outputs(run, Path(cfg.output))
    return run


def write_outputs(run: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.cfg.to_text())
    (out / "trace.csv").write_text(run.trace.to_csv())
    write_marginals(out / "marginals.bin", run.marginals)
    (out / "summary.txt").write_text(format_summary(run.summary))


def format_summary(summary: dict) -> str:
    lines = []
    for key, value in summary.items():
        if isinstance(value, (float, np.floating)):
            value = repr(float(value))
        elif isinstance(value, np.bool_):
            value = bool(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def read_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key] = value
    return out


def check_output(directory) -> tuple[bool, float, float]:
    """Recompute the final energy from marginals.bin; returns (ok, stored, recomputed)."""
    directory = Path(directory)
    cfg = load_config(directory / "config.txt")
    model = build_model(cfg)
    marg = read_marginals(directory / "marginals.bin")
    if (marg.n, marg.q) != (model.n, model.q):
        raise ValueError("marginals do not match the configured model")
    stored = float(read_summary(directory / "summary.txt")["phi_final"])
    phi = final_energy(model, SiteParams(marg.pi, marg.b), cfg.solver)
    ok = abs(delta_metric(stored, phi)) <= 1e-10
    return ok, stored, phi


def run_comparison(cfg: ExperimentConfig, solvers, rel: float = 1e-4) -> dict:
    """Runs several solvers on one model; writes per-solver outputs and compare.txt."""
    model = build_model(cfg)
    out = Path(cfg.output)
    runs = {}
    for name in solvers:
        sub = cfg.replace(solver=name, output=str(out / name))
        runs[name] = run_experiment(sub, model=model)
    ep_runs = {k: r for k, r in runs.items() if k != "vb"}
    report = {}
    if ep_runs:
        # reference value: the EP run with the smallest fixed-point residual
        ref = min(ep_runs.values(), key=lambda r: r.summary["residual"])
        phi_star = ref.summary["phi_star"]
        report["phi_star"] = phi_star
        report["phi_star_solver"] = ref.solver
        for name, r in ep_runs.items():
            t, nv = r.trace.time_to(phi_star, rel)
            report[f"{name}.phi"] = r.summary["phi_star"]
            report[f"{name}.time_to_rel"] = t
            report[f"{name}.var_comp_to_rel"] = nv
            report[f"{name}.converged"] = r.summary["converged"]
        names = sorted(ep_runs)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                report[f"delta.{a}.{b}"] = delta_metric(ep_runs[a].summary["phi_star"], ep_runs[b].summary["phi_star"])
        report["rel_threshold"] = rel
    if "vb" in runs and ep_runs:
        ep_name = "fast" if "fast" in ep_runs else sorted(ep_runs)[0]
        comp = compare_ep_vb(model, ep_runs[ep_name].result, runs["vb"].result)
        (out / "vb_comparison.txt").write_text(comp.to_text())
        report.update({f"vb.{k}": v for k, v in comp.summary.items()})
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.txt").write_text(format_summary(report))
    return report
