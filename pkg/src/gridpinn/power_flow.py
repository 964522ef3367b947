"""AC power flow: Newton-Raphson solve, residuals, and branch flows.

All quantities per-unit. Bus positions follow the config order with the
slack bus first; its voltage is pinned to 1.0 p.u. at angle 0. The active
residual at bus i is

    rP_i = P_i - V_i * sum_k V_k (G_ik cos(th_i - th_k) + B_ik sin(th_i - th_k))

and the reactive residual uses the standard (G sin - B cos) form. Residual
and Jacobian evaluation accept a leading batch dimension so the same code
serves the iterative solver and the physics loss of the surrogate's power
balance network.

Non-convergence is not an error: it is returned as data because the
environment maps it to a terminal state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import AdmittanceMatrix, GridConfig

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20


@dataclass(frozen=True)
class PowerFlowSolution:
    v_mag: np.ndarray       # (n_bus,) p.u., index 0 = slack = 1.0
    theta: np.ndarray       # (n_bus,) rad, index 0 = 0.0
    slack_p: float          # p.u.
    slack_q: float          # p.u.
    converged: bool
    iterations: int
    max_residual: float


@dataclass(frozen=True)
class BranchFlows:
    i_from: np.ndarray      # complex current from->to per branch (p.u.)
    i_to: np.ndarray        # complex current to->from per branch (p.u.)
    s_from: np.ndarray      # |S| at the from end (p.u.)
    s_to: np.ndarray        # |S| at the to end (p.u.)


def calc_injections(v_mag, theta, ymat: AdmittanceMatrix):
    """Bus power injections implied by a voltage profile.

    ``v_mag``/``theta`` may be (n,) or (B, n). Returns (p, q) of matching
    shape over all buses.
    """
    v = np.asarray(v_mag, dtype=float)
    th = np.asarray(theta, dtype=float)
    g, b = ymat.g, ymat.b
    dth = th[..., :, None] - th[..., None, :]
    cos, sin = np.cos(dth), np.sin(dth)
    vv = v[..., :, None] * v[..., None, :]
    p = np.sum(vv * (g * cos + b * sin), axis=-1)
    q = np.sum(vv * (g * sin - b * cos), axis=-1)
    return p, q


def pf_residuals(v_mag, theta, p_bus, q_bus, ymat: AdmittanceMatrix):
    """Power-balance residuals at the non-slack buses.

    ``p_bus``/``q_bus`` hold specified injections for buses 2..n (p.u.).
    Shapes may carry a leading batch dimension. Returns (rP, rQ), each
    (..., n-1).
    """
    p_calc, q_calc = calc_injections(v_mag, theta, ymat)
    rp = np.asarray(p_bus, dtype=float) - p_calc[..., 1:]
    rq = np.asarray(q_bus, dtype=float) - q_calc[..., 1:]
    return rp, rq


def injection_jacobian(v_mag, theta, ymat: AdmittanceMatrix):
    """Partial derivatives of calculated injections w.r.t. angles and magnitudes.

    Returns (dp_dth, dp_dv, dq_dth, dq_dv), each (..., n, n) with entry
    [i, j] = d{p,q}_i / d{theta,V}_j. Full matrices; callers slice out the
    slack row/column as needed.
    """
    v = np.asarray(v_mag, dtype=float)
    th = np.asarray(theta, dtype=float)
    g, b = ymat.g, ymat.b
    n = g.shape[0]
    dth = th[..., :, None] - th[..., None, :]
    cos, sin = np.cos(dth), np.sin(dth)
    vv = v[..., :, None] * v[..., None, :]

    p_calc, q_calc = calc_injections(v, th, ymat)
    eye = np.eye(n, dtype=bool)

    # off-diagonal blocks
    dp_dth = vv * (g * sin - b * cos)
    dq_dth = -vv * (g * cos + b * sin)
    dp_dv = v[..., :, None] * (g * cos + b * sin)
    dq_dv = v[..., :, None] * (g * sin - b * cos)

    # diagonal entries overwrite the k = i terms
    diag_g = np.diagonal(g)
    diag_b = np.diagonal(b)
    dp_dth_d = -q_calc - diag_b * v**2
    dq_dth_d = p_calc - diag_g * v**2
    with np.errstate(divide="ignore", invalid="ignore"):
        dp_dv_d = p_calc / v + diag_g * v
        dq_dv_d = q_calc / v - diag_b * v

    dp_dth = np.where(eye, 0.0, dp_dth)
    dq_dth = np.where(eye, 0.0, dq_dth)
    dp_dv = np.where(eye, 0.0, dp_dv)
    dq_dv = np.where(eye, 0.0, dq_dv)
    idx = np.arange(n)
    dp_dth[..., idx, idx] = dp_dth_d
    dq_dth[..., idx, idx] = dq_dth_d
    dp_dv[..., idx, idx] = dp_dv_d
    dq_dv[..., idx, idx] = dq_dv_d
    return dp_dth, dp_dv, dq_dth, dq_dv


def solve(
    p_bus: np.ndarray,
    q_bus: np.ndarray,
    ymat: AdmittanceMatrix,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    flat_start: bool = True,
    v0: np.ndarray | None = None,
    theta0: np.ndarray | None = None,
) -> PowerFlowSolution:
    """Newton-Raphson power flow for the injections at buses 2..n (p.u.).

    Iterates on the 2*(n-1) unknowns (theta_i, V_i) from a flat start until
    the max residual drops below ``tol``. A singular Jacobian or exhausted
    iteration budget yields converged=False with the last iterate attached.
    """
    n = ymat.y.shape[0]
    if flat_start or v0 is None:
        v = np.ones(n)
        th = np.zeros(n)
    else:
        v = np.array(v0, dtype=float)
        th = np.array(theta0, dtype=float)
    p_bus = np.asarray(p_bus, dtype=float)
    q_bus = np.asarray(q_bus, dtype=float)

    iterations = 0
    converged = False
    max_res = np.inf
    for iterations in range(max_iter + 1):
        rp, rq = pf_residuals(v, th, p_bus, q_bus, ymat)
        mismatch = np.concatenate([rp, rq])
        max_res = float(np.max(np.abs(mismatch)))
        if not np.isfinite(max_res):
            break
        if max_res <= tol:
            converged = True
            break
        if iterations == max_iter:
            break
        dp_dth, dp_dv, dq_dth, dq_dv = injection_jacobian(v, th, ymat)
        jac = np.block(
            [
                [dp_dth[1:, 1:], dp_dv[1:, 1:]],
                [dq_dth[1:, 1:], dq_dv[1:, 1:]],
            ]
        )
        try:
            step = np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError:
            break
        th[1:] += step[: n - 1]
        v[1:] += step[n - 1 :]
        if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
            break

    p_calc, q_calc = calc_injections(v, th, ymat)
    return PowerFlowSolution(
        v_mag=v,
        theta=th,
        slack_p=float(p_calc[0]),
        slack_q=float(q_calc[0]),
        converged=converged,
        iterations=iterations,
        max_residual=max_res,
    )


def branch_flows(v_mag, theta, cfg: GridConfig) -> BranchFlows:
    """Directed branch currents and apparent-power magnitudes.

    Applies the two-port model of each branch to the endpoint voltages:

        [I_ij]   [ (y + y_sh)/|t|^2   -y/conj(t) ] [V_i]
        [I_ji] = [ -y/t                y + y_sh  ] [V_j]

    Accepts batched voltages (leading dims) and returns arrays with the
    branch axis last.
    """
    v = np.asarray(v_mag, dtype=float)
    th = np.asarray(theta, dtype=float)
    volt = v * np.exp(1j * th)

    fr = np.array([cfg.bus_position(br.from_bus) for br in cfg.branches])
    to = np.array([cfg.bus_position(br.to_bus) for br in cfg.branches])
    ys = np.array([br.y_series for br in cfg.branches])
    ysh = np.array([br.y_shunt for br in cfg.branches])
    t = np.array([complex(br.tap_ratio) for br in cfg.branches])

    v_f = volt[..., fr]
    v_t = volt[..., to]
    i_from = (ys + ysh) / np.abs(t) ** 2 * v_f - ys / np.conj(t) * v_t
    i_to = -(ys / t) * v_f + (ys + ysh) * v_t
    s_from = np.abs(v_f * np.conj(i_from))
    s_to = np.abs(v_t * np.conj(i_to))
    return BranchFlows(i_from=i_from, i_to=i_to, s_from=s_from, s_to=s_to)
