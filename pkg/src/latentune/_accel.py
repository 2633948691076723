"""Hot rollout kernels with optional numba compilation.

Closed-loop rollouts are scalar state recursions (thousands of sequential
steps per evaluation) that numpy cannot vectorize, so they carry the bulk of
the runtime when numba is unavailable. Each kernel is written once in the
numba-compatible subset of Python; the compiled and interpreted versions are
the same function object, so both paths share semantics exactly.

Set ``LATENTUNE_NUMBA=0`` to force the interpreted fallback. The
``latentune bench --accel`` command times both paths side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np


def numba_requested() -> bool:
    flag = os.environ.get("LATENTUNE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


def _cartpole_rollout(
    state0,  # (4,) [x_rel, v, theta, omega]; x_rel is position minus v_des*t
    gains,  # (segments, 5) [k_x, k_v, k_theta, k_omega, ff]
    v_des,
    dt,
    n_steps,
    fall_angle,
    fall_pos,
    u_max,
    m_cart,
    m_pole,
    half_len,
    gravity,
    c1,
):
    x = state0[0]
    v = state0[1]
    th = state0[2]
    w = state0[3]
    n_seg = gains.shape[0]
    total_mass = m_cart + m_pole
    pole_ml = m_pole * half_len

    obs = np.empty(n_steps, dtype=np.float64)
    cost = 0.0
    fell = False
    fall_step = -1
    done = 0
    for i in range(n_steps):
        if not (
            math.isfinite(x)
            and math.isfinite(v)
            and math.isfinite(th)
            and math.isfinite(w)
        ):
            # numerical divergence counts as a fall
            cost += c1
            fell = True
            fall_step = i
            break
        seg = (i * n_seg) // n_steps
        u = gains[seg, 4] * v_des - (
            gains[seg, 0] * x
            + gains[seg, 1] * (v - v_des)
            + gains[seg, 2] * th
            + gains[seg, 3] * w
        )
        if u > u_max:
            u = u_max
        elif u < -u_max:
            u = -u_max

        sin_th = math.sin(th)
        cos_th = math.cos(th)
        tmp = (u + pole_ml * w * w * sin_th) / total_mass
        th_acc = (gravity * sin_th - cos_th * tmp) / (
            half_len * (4.0 / 3.0 - m_pole * cos_th * cos_th / total_mass)
        )
        x_acc = tmp - pole_ml * th_acc * cos_th / total_mass

        # semi-implicit Euler: velocities first, then positions
        w = w + dt * th_acc
        th = th + dt * w
        v = v + dt * x_acc
        x = x + dt * (v - v_des)

        obs[i] = v
        done = i + 1
        if abs(th) > fall_angle or abs(x) > fall_pos:
            cost += c1
            fell = True
            fall_step = i
            break
        err = v - v_des
        cost += err * err
    return cost, fell, fall_step, obs, done


def _dint_mpc_rollout(
    state0,  # (2,) [e_p, e_v] position/velocity error relative to the reference
    weights,  # (segments, 5) [q_p, q_v, r, qT_p, qT_v]
    v_des,
    dt,
    n_steps,
    mpc_horizon,
    u_lo,
    u_hi,
    fall_pos,
    r_floor,
    c1,
):
    ep = state0[0]
    ev = state0[1]
    n_seg = weights.shape[0]

    # ZOH discretization of the double integrator in error coordinates
    a12 = dt
    b1 = 0.5 * dt * dt
    b2 = dt

    obs = np.empty(n_steps, dtype=np.float64)
    cost = 0.0
    fell = False
    fall_step = -1
    done = 0
    k1 = 0.0
    k2 = 0.0
    last_seg = -1
    for i in range(n_steps):
        if not (math.isfinite(ep) and math.isfinite(ev)):
            cost += c1
            fell = True
            fall_step = i
            break
        seg = (i * n_seg) // n_steps
        if seg != last_seg:
            # backward Riccati recursion for the finite-horizon gain
            qp = weights[seg, 0]
            qv = weights[seg, 1]
            r = weights[seg, 2] + r_floor
            p11 = weights[seg, 3]
            p12 = 0.0
            p22 = weights[seg, 4]
            for _ in range(mpc_horizon):
                # M = P A, with A = [[1, dt], [0, 1]]
                m11 = p11
                m12 = p11 * a12 + p12
                m21 = p12
                m22 = p12 * a12 + p22
                # Bt P B and Bt P A
                btpb = b1 * (b1 * p11 + b2 * p12) + b2 * (b1 * p12 + b2 * p22)
                btpa1 = b1 * m11 + b2 * m21
                btpa2 = b1 * m12 + b2 * m22
                s_inv = 1.0 / (r + btpb)
                k1 = s_inv * btpa1
                k2 = s_inv * btpa2
                # P = Q + At M - (Bt P A)^T K
                n11 = m11
                n12 = m12
                n21 = a12 * m11 + m21
                n22 = a12 * m12 + m22
                p11 = qp + n11 - btpa1 * k1
                p12 = n12 - btpa1 * k2
                p22 = qv + n22 - btpa2 * k2
            last_seg = seg
        u = -(k1 * ep + k2 * ev)
        if u > u_hi:
            u = u_hi
        elif u < u_lo:
            u = u_lo

        ep = ep + a12 * ev + b1 * u
        ev = ev + b2 * u

        obs[i] = ev + v_des
        done = i + 1
        p_abs = ep + v_des * (dt * (i + 1))
        if abs(p_abs) > fall_pos:
            cost += c1
            fell = True
            fall_step = i
            break
        cost += ev * ev
    return cost, fell, fall_step, obs, done


IMPLEMENTATIONS: dict[str, dict] = {
    "numpy": {"cartpole": _cartpole_rollout, "dint": _dint_mpc_rollout}
}

NUMBA_ENABLED = False
if numba_requested():
    try:
        from numba import njit
    except ImportError:
        pass
    else:
        IMPLEMENTATIONS["numba"] = {
            "cartpole": njit(cache=True)(_cartpole_rollout),
            "dint": njit(cache=True)(_dint_mpc_rollout),
        }
        NUMBA_ENABLED = True

ACTIVE = "numba" if NUMBA_ENABLED else "numpy"

cartpole_rollout = IMPLEMENTATIONS[ACTIVE]["cartpole"]
dint_mpc_rollout = IMPLEMENTATIONS[ACTIVE]["dint"]
