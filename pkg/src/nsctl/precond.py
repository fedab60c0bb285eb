"""Nested block preconditioners for the coupled Newton-step system.

The outer preconditioner is upper block-triangular: an approximate Schur
complement on the two pressure blocks (augmented-Lagrangian or block pressure
convection-diffusion), followed by a momentum correction solved by a fixed
number of GMRES iterations. The momentum solve itself is preconditioned by a
lower block-triangular operator built from a Chebyshev mass solve and the
matching-strategy Schur approximation. Ideal (exact-block) preconditioners are
provided for verification at desk scale.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .grid_fem import tabulate
from .krylov import (ChebyshevMassSolver, Factorization, KrylovConfig,
                     chebyshev_solve, factorize, gmres)
from .operators import KktSystem, augment, mass_eig_interval

__all__ = [
    "MatchingSchur", "AlOuterSchur", "BpcdOuterSchur", "PrecondStack",
    "IdealPrecond", "augment", "build_matching", "build_precond",
    "matching_apply", "matching_forward", "inner_p1_apply",
    "al_outer_schur_apply", "bpcd_outer_schur_apply", "outer_p2_apply",
    "ideal_precond_apply",
]

log = logging.getLogger("nsctl.precond")

_IDEAL_GUARD = 20000


def _demean(x):
    return x - x.mean()


def _pin_matrix(a):
    """Replace row/column 0 by the unit vector, making a Neumann operator
    invertible while leaving the remaining equations untouched."""
    n = a.shape[0]
    mask = np.ones(n)
    mask[0] = 0.0
    d = sp.diags(mask)
    e00 = sp.coo_matrix(([1.0], ([0], [0])), shape=(n, n))
    return (d @ a @ d + e00).tocsr()


def _pinned_solve(fact, r):
    """Solve a pinned Neumann operator with zero-mean projection on both sides."""
    rt = _demean(np.asarray(r, dtype=np.float64))
    rt[0] = 0.0
    return _demean(fact.solve(rt))


# --------------------------------------------------------------------------
# matching strategy (inner Schur approximation)
# --------------------------------------------------------------------------

@dataclass
class MatchingSchur:
    """Schur approximation S~ = (Psi2 + L) Phi^-1 (Psi1 + L)^T with L = M/sqrt(beta).

    Psi2 is the (2,1) momentum block and Psi1^T the (1,2) block of the
    (augmented, if applicable) system; the choice of L makes
    L Phi^-1 L^T match the (1/beta) M term of the exact Schur complement.
    """

    lam: sp.csr_matrix
    mass: sp.csr_matrix
    mat_21: sp.csr_matrix             # Psi2 + L
    mat_12: sp.csr_matrix             # (Psi1 + L)^T
    fact_21: Factorization
    fact_12: Factorization
    _mass_fact: Factorization = field(default=None, repr=False)


def build_matching(system: KktSystem) -> MatchingSchur:
    m = system.vel.m
    lam = (m / np.sqrt(system.params.beta)).tocsr()
    mat_21 = (system.a21 + lam).tocsr()
    mat_12 = (system.a12 + lam).tocsr()
    return MatchingSchur(lam=lam, mass=m, mat_21=mat_21, mat_12=mat_12,
                         fact_21=factorize(mat_21), fact_12=factorize(mat_12))


def matching_apply(ms: MatchingSchur, rhs):
    """S~^-1 rhs = (Psi1 + L)^-T M (Psi2 + L)^-1 rhs (two solves, one multiply)."""
    return ms.fact_12.solve(ms.mass @ ms.fact_21.solve(rhs))


def matching_forward(ms: MatchingSchur, x):
    """S~ x, the explicitly applied approximation (used for round-trip checks)."""
    if ms._mass_fact is None:
        ms._mass_fact = factorize(ms.mass)
    return ms.mat_21 @ ms._mass_fact.solve(ms.mat_12 @ x)


# --------------------------------------------------------------------------
# outer Schur approximations
# --------------------------------------------------------------------------

@dataclass
class AlOuterSchur:
    """Blockwise outer Schur inverse for the augmented system:
    [y1; y2] = [Kp^-1 r1 + g W^-1 r2; g W^-1 r1 - (1/beta) Kp^-1 r2]."""

    kp_fact: Factorization            # pinned pressure Laplacian
    w_diag: np.ndarray                # W = diag(Mp)
    gamma: float
    beta: float


def build_al_outer(system: KktSystem) -> AlOuterSchur:
    return AlOuterSchur(kp_fact=factorize(_pin_matrix(system.pres.kp)),
                        w_diag=system.pres.mp_diag.copy(),
                        gamma=system.params.gamma, beta=system.params.beta)


def al_outer_schur_apply(s: AlOuterSchur, r1, r2):
    k1 = _pinned_solve(s.kp_fact, r1)
    k2 = _pinned_solve(s.kp_fact, r2)
    y1 = k1 + s.gamma * (r2 / s.w_diag)
    y2 = s.gamma * (r1 / s.w_diag) - k2 / s.beta
    return y1, y2


@dataclass
class BpcdOuterSchur:
    """Commutator-based outer Schur inverse Mp_blk^-1 . D_p . Kp_blk^-1.

    D_p carries the pressure-space analogues of the momentum operators with
    the Newton matrices omitted; it is applied by multiplication.
    """

    kp_fact: Factorization            # pinned pressure Laplacian
    mp: sp.csr_matrix
    dp_od: sp.csr_matrix              # nu Kp - Np + Wp (the (1,2) entry)
    dp_do: sp.csr_matrix              # nu Kp + Np + Wp (the (2,1) entry)
    beta: float
    mp_solve: callable                # action of Mp^-1 (Chebyshev or direct)


def build_bpcd_outer(system: KktSystem, cheb_steps=20, exact_blocks=False,
                     quad=None) -> BpcdOuterSchur:
    pres = system.pres
    nu = system.params.nu
    base = (nu * pres.kp + pres.wp).tocsr()
    if exact_blocks:
        mp_fact = factorize(pres.mp)
        mp_solve = mp_fact.solve
    else:
        if quad is None:
            quad = tabulate(5)
        cheb = ChebyshevMassSolver(matrix=pres.mp,
                                   interval=mass_eig_interval(quad, "q1"),
                                   steps=cheb_steps)
        mp_solve = lambda b: chebyshev_solve(cheb, b)  # noqa: E731
    return BpcdOuterSchur(kp_fact=factorize(_pin_matrix(pres.kp)),
                          mp=pres.mp,
                          dp_od=(base - pres.np_conv).tocsr(),
                          dp_do=(base + pres.np_conv).tocsr(),
                          beta=system.params.beta, mp_solve=mp_solve)


def bpcd_outer_schur_apply(s: BpcdOuterSchur, r1, r2):
    u1 = _pinned_solve(s.kp_fact, r1)
    u2 = _pinned_solve(s.kp_fact, r2)
    t1 = s.mp @ u1 + s.dp_od @ u2
    t2 = s.dp_do @ u1 - (s.mp @ u2) / s.beta
    return s.mp_solve(t1), s.mp_solve(t2)


# --------------------------------------------------------------------------
# ideal preconditioners (verification only)
# --------------------------------------------------------------------------

class IdealPrecond:
    """Exact block-triangular preconditioner with direct momentum and dense
    Schur solves; desk-scale verification only."""

    def __init__(self, system: KktSystem):
        if system.dim > _IDEAL_GUARD:
            raise ValueError(f"ideal preconditioner refused: dimension "
                             f"{system.dim} exceeds {_IDEAL_GUARD}")
        if not system.pinned:
            raise ValueError("ideal preconditioner needs a pinned system")
        self.system = system
        self._f_mat = system.momentum().tocsr()
        self.f_fact = factorize(self._f_mat)
        b = system.b
        self.b_blk = sp.bmat([[b, None], [None, b]], format="csr")
        x = self.f_fact.solve(self.b_blk.T.toarray())
        self._sd = self.b_blk @ x
        self._schur_lu = sla.lu_factor(self._sd)

    def f_solve(self, r, refine=2):
        """Momentum solve, polished by iterative refinement so the defective
        unit eigenvalue of the preconditioned matrix survives in floating
        point (its perturbation enters under a square root)."""
        z = self.f_fact.solve(r)
        for _ in range(refine):
            z = z + self.f_fact.solve(r - self._f_mat @ z)
        return z

    def schur_solve(self, r, refine=2):
        z = sla.lu_solve(self._schur_lu, r)
        for _ in range(refine):
            z = z + sla.lu_solve(self._schur_lu, r - self._sd @ z)
        return z

    def apply(self, rhs, side="p2"):
        side = side.lower()
        if side not in ("p1", "p2"):
            raise ValueError(f"side must be P1 or P2, got {side!r}")
        nm = 2 * self.system.n_v
        r_m, r_p = rhs[:nm], rhs[nm:]
        if side == "p1":
            z_m = self.f_solve(r_m)
            z_p = -self.schur_solve(r_p - self.b_blk @ z_m)
        else:
            z_p = -self.schur_solve(r_p)
            z_m = self.f_solve(r_m - self.b_blk.T @ z_p)
        return np.concatenate([z_m, z_p])


def ideal_precond_apply(system: KktSystem, rhs, side="p1"):
    """One-shot ideal preconditioner application (factors are not cached;
    construct IdealPrecond directly for repeated applications)."""
    return IdealPrecond(system).apply(rhs, side)


# --------------------------------------------------------------------------
# the configured stack
# --------------------------------------------------------------------------

@dataclass
class PrecondStack:
    """Configured nested preconditioner: outer Schur approximation + fixed
    inner GMRES on the momentum block, which is preconditioned by the
    Chebyshev mass solve and the matching-strategy Schur approximation."""

    kind: str                         # "al" | "bpcd" | "ideal"
    system: KktSystem
    momentum: sp.csr_matrix
    matching: MatchingSchur = None
    outer: object = None              # AlOuterSchur | BpcdOuterSchur | IdealPrecond
    mass_solve: callable = None       # action of M^-1 on one velocity block
    inner_iters: int = 5
    cheb_steps: int = 20
    exact_blocks: bool = False


def build_precond(system: KktSystem, kind="al", inner_iters=5, cheb_steps=20,
                  exact_blocks=False, quad=None) -> PrecondStack:
    """Assemble factorizations and solvers for the requested preconditioner."""
    kind = kind.lower()
    if kind == "ideal":
        return PrecondStack(kind=kind, system=system,
                            momentum=system.momentum(),
                            outer=IdealPrecond(system),
                            inner_iters=inner_iters, cheb_steps=cheb_steps,
                            exact_blocks=exact_blocks)
    if kind not in ("al", "bpcd"):
        raise ValueError(f"unknown preconditioner kind {kind!r}")
    if system.pinned:
        raise ValueError("al/bpcd stacks operate on the unpinned system")
    if kind == "al" and not system.augmented:
        raise ValueError("the al preconditioner expects an augmented system")
    if kind == "bpcd" and system.augmented:
        raise ValueError("the bpcd preconditioner expects an unaugmented system")

    if exact_blocks:
        m_fact = factorize(system.vel.m)
        mass_solve = m_fact.solve
    else:
        if quad is None:
            quad = tabulate(5)
        cheb = ChebyshevMassSolver(matrix=system.vel.m,
                                   interval=mass_eig_interval(quad, "q2"),
                                   steps=cheb_steps)
        mass_solve = lambda b: chebyshev_solve(cheb, b)  # noqa: E731

    if kind == "al":
        outer = build_al_outer(system)
    else:
        outer = build_bpcd_outer(system, cheb_steps=cheb_steps,
                                 exact_blocks=exact_blocks, quad=quad)

    return PrecondStack(kind=kind, system=system, momentum=system.momentum(),
                        matching=build_matching(system), outer=outer,
                        mass_solve=mass_solve, inner_iters=inner_iters,
                        cheb_steps=cheb_steps, exact_blocks=exact_blocks)


def inner_p1_apply(stack: PrecondStack, rhs):
    """Lower block-triangular momentum preconditioner: mass solve on the first
    block, then the (negative) matching Schur solve on the corrected second."""
    nv = stack.system.n_v
    s1, s2 = rhs[:nv], rhs[nv:]
    z1 = stack.mass_solve(s1)
    z2 = -matching_apply(stack.matching, s2 - stack.system.a21 @ z1)
    return np.concatenate([z1, z2])


def outer_p2_apply(stack: PrecondStack, rhs):
    """Upper block-triangular outer preconditioner: (negative) Schur solve on
    the pressure blocks, momentum correction, then the fixed inner GMRES.

    The inner Krylov solve makes this operator vary between calls, so the
    outer iteration must be flexible.
    """
    if stack.kind == "ideal":
        return stack.outer.apply(rhs, side="p2")

    system = stack.system
    nm = 2 * system.n_v
    npp = system.n_p
    r_m = rhs[:nm]
    r_mu, r_p = rhs[nm:nm + npp], rhs[nm + npp:]

    if stack.kind == "al":
        y1, y2 = al_outer_schur_apply(stack.outer, r_mu, r_p)
    else:
        y1, y2 = bpcd_outer_schur_apply(stack.outer, r_mu, r_p)
    z_mu, z_p = -y1, -y2

    bt = system.b.T
    t_m = r_m - np.concatenate([bt @ z_mu, bt @ z_p])
    cfg = KrylovConfig(fixed_iters=stack.inner_iters)
    z_m, _ = gmres(lambda x: stack.momentum @ x,
                   lambda x: inner_p1_apply(stack, x), t_m, cfg)
    return np.concatenate([z_m, z_mu, z_p])
