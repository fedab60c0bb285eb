"""Inexact Newton driver for the cavity control problem.

The first iteration linearizes around a zero wind, so it solves the Stokes
control problem; later iterations linearize around the current velocity. The
stabilization operator is frozen at the Stokes velocity: the first step runs
without it, every later step assembles it from that fixed wind. This keeps
the stabilization term exactly differentiated (it is linear in the unknowns
once its wind is fixed), which preserves the fast local convergence that
re-assembling it at every iterate destroys. Each step solves the coupled KKT
system with flexible GMRES under the configured preconditioner stack and
applies the full correction (no damping).
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .grid_fem import Geometry
from .krylov import KrylovConfig, fgmres
from .operators import (KktParams, StateIterate, build_kkt, eval_residual,
                        lift_boundary)
from .precond import build_precond, outer_p2_apply

log = logging.getLogger("nsctl.newton")

RESIDUAL_FLOOR = 1e-12


@dataclass
class NewtonConfig:
    tol: float = 1e-5                 # relative nonlinear residual reduction
    max_iters: int = 10
    precond: str = "al"               # "al" | "bpcd" | "ideal"
    linear: KrylovConfig = None
    inner_iters: int = 5
    cheb_steps: int = 20
    exact_blocks: bool = False

    def __post_init__(self):
        if not 0.0 < self.tol < 1.0:
            raise ValueError(f"tol must be in (0, 1), got {self.tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.precond not in ("al", "bpcd", "ideal"):
            raise ValueError(f"unknown preconditioner kind {self.precond!r}")
        if self.linear is None:
            self.linear = KrylovConfig(restart=10, rtol=1e-6, maxiter=200)


@dataclass
class NewtonTrace:
    """Per-step bookkeeping; residuals[0] is the reference residual of the
    lifted zero state, so entry k is the residual after Newton step k."""

    residuals: list = field(default_factory=list)
    fgmres_iters: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)
    linear_converged: list = field(default_factory=list)
    converged: bool = False

    @property
    def newton_iters(self):
        return len(self.fgmres_iters)

    @property
    def avg_fgmres(self):
        """Mean FGMRES count over completed steps, rounded to nearest integer
        (half away from zero)."""
        if not self.fgmres_iters:
            return 0
        return int(np.floor(np.mean(self.fgmres_iters) + 0.5))


def initial_state(dofmap, g=None) -> StateIterate:
    """Lifted zero state: boundary data on v, everything else zero."""
    return StateIterate(v=lift_boundary(dofmap, g),
                        zeta=np.zeros(dofmap.n_v_full),
                        mu=np.zeros(dofmap.n_p), p=np.zeros(dofmap.n_p), k=0)


def convergence_check(trace: NewtonTrace, cfg: NewtonConfig) -> bool:
    """Relative criterion against the reference residual, with an absolute
    floor guarding zero-data cases."""
    ref = trace.residuals[0]
    return trace.residuals[-1] <= max(cfg.tol * ref, RESIDUAL_FLOOR)


def _apply_update(state: StateIterate, system, x, dofmap) -> StateIterate:
    dv, dz, dmu, dp = system.split(x)
    v = state.v.copy()
    zeta = state.zeta.copy()
    v[dofmap.interior_vdofs] += dv
    zeta[dofmap.interior_vdofs] += dz
    mu = state.mu + system.expand_pressure(dmu)
    p = state.p + system.expand_pressure(dp)
    # remove the pressure nullspace component from the multipliers
    mu -= mu.mean()
    p -= p.mean()
    return StateIterate(v=v, zeta=zeta, mu=mu, p=p, k=state.k + 1)


def _newton_step(state, cfg: NewtonConfig, params: KktParams, geom: Geometry,
                 wind, stab_wind=None):
    system = build_kkt(state, geom.mesh, geom.dofmap, geom.patches, geom.quad,
                       params, wind=wind, stab_wind=stab_wind,
                       do_augment=(cfg.precond == "al"),
                       pin=(cfg.precond == "ideal"))
    stack = build_precond(system, kind=cfg.precond,
                          inner_iters=cfg.inner_iters,
                          cheb_steps=cfg.cheb_steps,
                          exact_blocks=cfg.exact_blocks, quad=geom.quad)
    mat = system.matrix()
    x, stats = fgmres(lambda u: mat @ u,
                      lambda r: outer_p2_apply(stack, r),
                      system.rhs(), cfg.linear)
    return _apply_update(state, system, x, geom.dofmap), stats, system


def stokes_init(params: KktParams, geom: Geometry,
                cfg: NewtonConfig = None) -> StateIterate:
    """Solve the Stokes control problem (zero-wind linearization at the lifted
    zero state); this is what the first Newton iteration computes."""
    if cfg is None:
        cfg = NewtonConfig()
    state = initial_state(geom.dofmap)
    new_state, stats, _ = _newton_step(state, cfg, params, geom,
                                       wind=np.zeros(geom.dofmap.n_v_full))
    if not stats.converged:
        log.warning("stokes init: linear solve not converged (%d iters, "
                    "residual %.3e)", stats.iters, stats.true_residual)
    return new_state


def newton_solve(cfg: NewtonConfig, params: KktParams, geom: Geometry,
                 on_system=None):
    """Run the inexact Newton iteration; returns (state, trace).

    Stops when the nonlinear residual drops below tol relative to the
    residual of the lifted zero state, or after max_iters steps (trace marked
    not converged, averages taken over completed steps). `on_system(k, sys)`
    is called with each assembled step system, e.g. for matrix export.
    """
    state = initial_state(geom.dofmap)
    zero = np.zeros(geom.dofmap.n_v_full)
    stab = zero
    res0 = eval_residual(state, geom.mesh, geom.dofmap, geom.patches,
                         geom.quad, params, stab_wind=stab)
    trace = NewtonTrace(residuals=[res0.norm])
    if convergence_check(trace, cfg):
        trace.converged = True
        return state, trace

    for k in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        wind = zero if k == 1 else state.v
        state, stats, system = _newton_step(state, cfg, params, geom, wind,
                                            stab_wind=stab)
        if k == 1:
            stab = state.v.copy()    # freeze the stabilization wind here
        if on_system is not None:
            on_system(k, system)
        res = eval_residual(state, geom.mesh, geom.dofmap, geom.patches,
                            geom.quad, params, stab_wind=stab)
        trace.fgmres_iters.append(stats.iters)
        trace.linear_converged.append(bool(stats.converged))
        trace.step_seconds.append(time.perf_counter() - t0)
        trace.residuals.append(res.norm)
        log.info("newton step %d: residual %.6e (fgmres %d)",
                 k, res.norm, stats.iters)
        if convergence_check(trace, cfg):
            trace.converged = True
            break
    return state, trace
