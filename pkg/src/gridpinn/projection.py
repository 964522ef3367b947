"""Exact Euclidean projection onto per-step device feasible sets.

Each controllable device restricts its (P, Q) operating point to a small
convex polytope {x : G x <= h}. Requested setpoints are mapped to the nearest
feasible point; the dual variables of that projection QP certify optimality
through the KKT conditions and double as training targets for the
KKT-informed networks.

Because every polytope here is 2-dimensional with at most 10 faces, the
projection is solved exactly by enumeration: if the setpoint is interior it
is its own projection, otherwise the candidates are the projections onto
each face line and every pairwise face intersection, filtered for
feasibility, with the closest one optimal.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .grid import DeviceSpec

# feasibility slack used when classifying points as inside a polytope
FEAS_TOL = 1e-9


class EmptyPolytopeError(ValueError):
    """Raised when a device feasible set has no interior under given bounds."""


@dataclass(frozen=True)
class Polytope2D:
    """Linear-inequality feasible set {x in R^2 : G x <= h}."""

    g: np.ndarray  # (m, 2)
    h: np.ndarray  # (m,)

    @property
    def n_rows(self) -> int:
        return self.g.shape[0]

    def violations(self, x: np.ndarray) -> np.ndarray:
        """Componentwise constraint excess max(Gx - h, 0); batch-friendly."""
        slack = np.asarray(x) @ self.g.T - self.h
        return np.maximum(slack, 0.0)

    def contains(self, x: np.ndarray, tol: float = FEAS_TOL) -> bool:
        return bool(np.all(np.asarray(x) @ self.g.T - self.h <= tol))


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    primal_infeasibility: float
    dual_infeasibility: float
    complementarity: float

    @property
    def total(self) -> float:
        return (
            self.stationarity
            + self.primal_infeasibility
            + self.dual_infeasibility
            + self.complementarity
        )


def build_generator_polytope(device: DeviceSpec, p_max_t: float) -> Polytope2D:
    """Feasible set of a non-slack generator at one time step (7 rows).

    Row order: -P, +P (physical cap), +P (available capacity), -Q, +Q,
    upper capability line, lower capability line.
    """
    if p_max_t < device.p_min - FEAS_TOL:
        raise EmptyPolytopeError(
            f"generator {device.id}: available capacity {p_max_t} below p_min {device.p_min}"
        )
    (tau1, rho1), (tau2, rho2) = device.flex_lines
    g = np.array(
        [
            [-1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, -1.0],
            [0.0, 1.0],
            [-tau1, 1.0],
            [tau2, -1.0],
        ]
    )
    h = np.array(
        [
            -device.p_min,
            device.p_max,
            p_max_t,
            -device.q_min,
            device.q_max,
            rho1,
            -rho2,
        ]
    )
    return Polytope2D(g=g, h=h)


def build_des_polytope(device: DeviceSpec, soc: float, delta_t: float) -> Polytope2D:
    """Feasible set of the storage unit given its current state of charge (10 rows).

    The last two rows bound the power so that the post-step state of charge
    stays inside [soc_min, soc_max]:

        P >= (soc - soc_max) / (eta * dt)     (charging headroom)
        P <= eta * (soc - soc_min) / dt       (discharging headroom)
    """
    eta = device.efficiency
    soc_min, soc_max = device.soc_min, device.soc_max
    if not (soc_min - 1e-9 <= soc <= soc_max + 1e-9):
        raise ValueError(
            f"soc {soc} outside [{soc_min}, {soc_max}] for device {device.id}"
        )
    soc = min(max(soc, soc_min), soc_max)
    (t1, r1), (t2, r2), (t3, r3), (t4, r4) = device.flex_lines
    g = np.array(
        [
            [-1.0, 0.0],
            [1.0, 0.0],
            [0.0, -1.0],
            [0.0, 1.0],
            [-t1, 1.0],
            [t2, -1.0],
            [-t3, 1.0],
            [t4, -1.0],
            [-1.0, 0.0],
            [1.0, 0.0],
        ]
    )
    h = np.array(
        [
            -device.p_min,
            device.p_max,
            -device.q_min,
            device.q_max,
            r1,
            -r2,
            r3,
            -r4,
            -(soc - soc_max) / (eta * delta_t),
            eta * (soc - soc_min) / delta_t,
        ]
    )
    return Polytope2D(g=g, h=h)


def project_exact(
    setpoint: np.ndarray, poly: Polytope2D
) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean projection of a 2-vector onto the polytope plus dual certificate.

    Returns ``(x_star, lam)`` with ``lam`` the KKT multipliers of
    min 0.5*||x - setpoint||^2 s.t. Gx <= h. All residuals of
    :func:`kkt_residuals` at the returned pair are ~1e-12 scale.
    """
    a = np.asarray(setpoint, dtype=float)
    g, h = poly.g, poly.h
    m = poly.n_rows

    if poly.contains(a):
        return a.copy(), np.zeros(m)

    best = None  # (dist2, x, active_rows)
    # single-face candidates: orthogonal projection onto each constraint line
    slack = g @ a - h
    for i in range(m):
        gi = g[i]
        nn = gi @ gi
        if nn == 0.0:
            continue
        if slack[i] <= 0:
            continue  # face cannot be active alone if not violated
        x = a - (slack[i] / nn) * gi
        if poly.contains(x, tol=1e-8):
            d2 = float((x - a) @ (x - a))
            if best is None or d2 < best[0] - 1e-15:
                best = (d2, x, (i,))
    # vertex candidates: intersection of every face pair
    if best is None:
        for i, j in combinations(range(m), 2):
            gij = np.array([g[i], g[j]])
            det = gij[0, 0] * gij[1, 1] - gij[0, 1] * gij[1, 0]
            if abs(det) < 1e-12:
                continue
            x = np.linalg.solve(gij, np.array([h[i], h[j]]))
            if poly.contains(x, tol=1e-8):
                d2 = float((x - a) @ (x - a))
                if best is None or d2 < best[0] - 1e-15:
                    best = (d2, x, (i, j))
    if best is None:
        raise EmptyPolytopeError("polytope has no feasible point")

    _, x_star, _ = best
    lam = _recover_duals(a, x_star, poly)
    return x_star, lam


def _recover_duals(a: np.ndarray, x: np.ndarray, poly: Polytope2D) -> np.ndarray:
    """Multipliers satisfying (x - a) + G^T lam = 0, lam >= 0, complementary.

    The stationarity displacement r = a - x must be a nonnegative combination
    of active-constraint normals. In R^2 a valid certificate always exists on
    a support of at most two rows (Caratheodory), so small supports are
    enumerated and the minimum-norm nonnegative solution kept.
    """
    g, h = poly.g, poly.h
    m = poly.n_rows
    r = a - x
    lam = np.zeros(m)
    if r @ r < 1e-24:
        return lam

    active = np.flatnonzero(np.abs(g @ x - h) <= 1e-7)
    best = None
    for k in (1, 2):
        for rows in combinations(active, k):
            ga = g[list(rows)]  # (k, 2)
            # least-squares coefficients for r in the span of the normals
            gram = ga @ ga.T
            try:
                coef = np.linalg.solve(gram, ga @ r)
            except np.linalg.LinAlgError:
                continue
            if np.any(coef < -1e-9):
                continue
            resid = ga.T @ coef - r
            if resid @ resid > 1e-14 * max(1.0, r @ r):
                continue
            norm2 = float(coef @ coef)
            if best is None or norm2 < best[0]:
                best = (norm2, rows, np.maximum(coef, 0.0))
    if best is None:
        # fall back to unsigned least squares on all active rows; only hit
        # when roundoff keeps every small support slightly infeasible
        ga = g[active]
        coef, *_ = np.linalg.lstsq(ga.T, r, rcond=None)
        lam[active] = np.maximum(coef, 0.0)
        return lam
    _, rows, coef = best
    lam[list(rows)] = coef
    return lam


def kkt_residuals(
    setpoint: np.ndarray,
    poly: Polytope2D,
    primal: np.ndarray,
    duals: np.ndarray,
) -> KKTResiduals:
    """First-order optimality residuals of the projection QP at (primal, duals)."""
    a = np.asarray(setpoint, dtype=float)
    x = np.asarray(primal, dtype=float)
    lam = np.asarray(duals, dtype=float)
    slack = poly.g @ x - poly.h
    stationarity = np.linalg.norm((x - a) + poly.g.T @ lam)
    primal_inf = np.linalg.norm(np.maximum(slack, 0.0))
    dual_inf = np.linalg.norm(np.maximum(-lam, 0.0))
    comp = np.linalg.norm(lam * slack)
    return KKTResiduals(
        stationarity=float(stationarity),
        primal_infeasibility=float(primal_inf),
        dual_infeasibility=float(dual_inf),
        complementarity=float(comp),
    )


def soc_update(soc: float, p_des: float, eta: float, delta_t: float):
    """Advance the state of charge for one interval of storage power ``p_des``.

    Sign convention: p_des <= 0 charges the unit (energy flows in, scaled by
    eta), p_des > 0 discharges it (scaled by 1/eta). Works elementwise on
    arrays.
    """
    p = np.asarray(p_des, dtype=float)
    charge = soc - eta * delta_t * p
    discharge = soc - (delta_t / eta) * p
    out = np.where(p <= 0.0, charge, discharge)
    return float(out) if out.ndim == 0 else out
