"""Compiled stepping kernel for the stiction simulator.

The simulator integrates at dt down to 1e-4 over seconds of horizon, so the
per-step work (FK sweep, mass matrix, Karnopp lock logic) runs as numba
kernels over flat model arrays. Semantics match the numpy implementations in
``dynamics``/``gravsim``; unit tests cross-check the two routes.

Controller dispatch codes: 0 zero, 1 constant, 2 PD, 3 gravity feedforward
from a second parameter set (optionally plus its spring term).

Loop status codes: 0 ran to the end, 1 reached a locked fixed point,
2 stopped on the threshold-crossing monitor, 3 mass matrix near-singular.
"""

import numpy as np
from numba import njit

N_J = 7


@njit(cache=True)
def _rnea(parent, kind, R_pre, t_const, u_d, coupling, gravity,
          inert_idx, inert_m, inert_h, inert_I, q, qd, qdd):
    """Gravity-biased rigid-body joint efforts for one state."""
    n = parent.shape[0]
    R = np.zeros((n, 3, 3))
    p = np.zeros((n, 3))
    w = np.zeros((n, 3))
    v = np.zeros((n, 3))
    al = np.zeros((n, 3))
    ac = np.zeros((n, 3))

    for i in range(n):
        th = 0.0
        rate = 0.0
        acc = 0.0
        for j in range(N_J):
            th += coupling[i, j] * q[j]
            rate += coupling[i, j] * qd[j]
            acc += coupling[i, j] * qdd[j]
        pa = parent[i]

        # local rotation / translation
        if kind[i] == 1:
            c = np.cos(th)
            s = np.sin(th)
        else:
            c = 1.0
            s = 0.0
        for r_ in range(3):
            R[i, r_, 0] = R_pre[i, r_, 0] * c + R_pre[i, r_, 1] * s
            R[i, r_, 1] = -R_pre[i, r_, 0] * s + R_pre[i, r_, 1] * c
            R[i, r_, 2] = R_pre[i, r_, 2]
        tx = t_const[i, 0]
        ty = t_const[i, 1]
        tz = t_const[i, 2]
        if kind[i] == 2:
            tx += th * u_d[i, 0]
            ty += th * u_d[i, 1]
            tz += th * u_d[i, 2]

        if pa >= 0:
            for r_ in range(3):
                p[i, r_] = p[pa, r_] + R[pa, r_, 0] * tx + R[pa, r_, 1] * ty + R[pa, r_, 2] * tz
            Rw = np.zeros((3, 3))
            for r_ in range(3):
                for c_ in range(3):
                    Rw[r_, c_] = (R[pa, r_, 0] * R[i, 0, c_] + R[pa, r_, 1] * R[i, 1, c_]
                                  + R[pa, r_, 2] * R[i, 2, c_])
            for r_ in range(3):
                for c_ in range(3):
                    R[i, r_, c_] = Rw[r_, c_]
            wp = w[pa]
            vp = v[pa]
            alp = al[pa]
            ap = ac[pa]
            ppx = p[pa, 0]
            ppy = p[pa, 1]
            ppz = p[pa, 2]
        else:
            p[i, 0] = tx
            p[i, 1] = ty
            p[i, 2] = tz
            wp = np.zeros(3)
            vp = np.zeros(3)
            alp = np.zeros(3)
            ap = -gravity
            ppx = 0.0
            ppy = 0.0
            ppz = 0.0

        dpx = p[i, 0] - ppx
        dpy = p[i, 1] - ppy
        dpz = p[i, 2] - ppz
        zx = R[i, 0, 2]
        zy = R[i, 1, 2]
        zz = R[i, 2, 2]

        # w x dp and base terms
        wxd_x = wp[1] * dpz - wp[2] * dpy
        wxd_y = wp[2] * dpx - wp[0] * dpz
        wxd_z = wp[0] * dpy - wp[1] * dpx
        bv_x = vp[0] + wxd_x
        bv_y = vp[1] + wxd_y
        bv_z = vp[2] + wxd_z
        axd_x = alp[1] * dpz - alp[2] * dpy
        axd_y = alp[2] * dpx - alp[0] * dpz
        axd_z = alp[0] * dpy - alp[1] * dpx
        wwd_x = wp[1] * wxd_z - wp[2] * wxd_y
        wwd_y = wp[2] * wxd_x - wp[0] * wxd_z
        wwd_z = wp[0] * wxd_y - wp[1] * wxd_x
        ba_x = ap[0] + axd_x + wwd_x
        ba_y = ap[1] + axd_y + wwd_y
        ba_z = ap[2] + axd_z + wwd_z

        if kind[i] == 1:
            w[i, 0] = wp[0] + zx * rate
            w[i, 1] = wp[1] + zy * rate
            w[i, 2] = wp[2] + zz * rate
            v[i, 0] = bv_x
            v[i, 1] = bv_y
            v[i, 2] = bv_z
            wxz_x = wp[1] * zz - wp[2] * zy
            wxz_y = wp[2] * zx - wp[0] * zz
            wxz_z = wp[0] * zy - wp[1] * zx
            al[i, 0] = alp[0] + zx * acc + wxz_x * rate
            al[i, 1] = alp[1] + zy * acc + wxz_y * rate
            al[i, 2] = alp[2] + zz * acc + wxz_z * rate
            ac[i, 0] = ba_x
            ac[i, 1] = ba_y
            ac[i, 2] = ba_z
        elif kind[i] == 2:
            w[i, 0] = wp[0]
            w[i, 1] = wp[1]
            w[i, 2] = wp[2]
            v[i, 0] = bv_x + zx * rate
            v[i, 1] = bv_y + zy * rate
            v[i, 2] = bv_z + zz * rate
            al[i, 0] = alp[0]
            al[i, 1] = alp[1]
            al[i, 2] = alp[2]
            wxz_x = wp[1] * zz - wp[2] * zy
            wxz_y = wp[2] * zx - wp[0] * zz
            wxz_z = wp[0] * zy - wp[1] * zx
            ac[i, 0] = ba_x + 2.0 * wxz_x * rate + zx * acc
            ac[i, 1] = ba_y + 2.0 * wxz_y * rate + zy * acc
            ac[i, 2] = ba_z + 2.0 * wxz_z * rate + zz * acc
        else:
            w[i, 0] = wp[0]
            w[i, 1] = wp[1]
            w[i, 2] = wp[2]
            v[i, 0] = bv_x
            v[i, 1] = bv_y
            v[i, 2] = bv_z
            al[i, 0] = alp[0]
            al[i, 1] = alp[1]
            al[i, 2] = alp[2]
            ac[i, 0] = ba_x
            ac[i, 1] = ba_y
            ac[i, 2] = ba_z

    # per-link wrenches
    F = np.zeros((n, 3))
    Nm = np.zeros((n, 3))
    for k in range(inert_idx.shape[0]):
        i = inert_idx[k]
        m = inert_m[k]
        hw = np.zeros(3)
        for r_ in range(3):
            hw[r_] = (R[i, r_, 0] * inert_h[k, 0] + R[i, r_, 1] * inert_h[k, 1]
                      + R[i, r_, 2] * inert_h[k, 2])
        a_x = ac[i, 0]
        a_y = ac[i, 1]
        a_z = ac[i, 2]
        alxh_x = al[i, 1] * hw[2] - al[i, 2] * hw[1]
        alxh_y = al[i, 2] * hw[0] - al[i, 0] * hw[2]
        alxh_z = al[i, 0] * hw[1] - al[i, 1] * hw[0]
        wxh_x = w[i, 1] * hw[2] - w[i, 2] * hw[1]
        wxh_y = w[i, 2] * hw[0] - w[i, 0] * hw[2]
        wxh_z = w[i, 0] * hw[1] - w[i, 1] * hw[0]
        wwh_x = w[i, 1] * wxh_z - w[i, 2] * wxh_y
        wwh_y = w[i, 2] * wxh_x - w[i, 0] * wxh_z
        wwh_z = w[i, 0] * wxh_y - w[i, 1] * wxh_x
        F[i, 0] += m * a_x + alxh_x + wwh_x
        F[i, 1] += m * a_y + alxh_y + wwh_y
        F[i, 2] += m * a_z + alxh_z + wwh_z
        Nm[i, 0] += hw[1] * a_z - hw[2] * a_y
        Nm[i, 1] += hw[2] * a_x - hw[0] * a_z
        Nm[i, 2] += hw[0] * a_y - hw[1] * a_x
        # I_w = R I R^T ; N += I_w al + w x (I_w w)
        Iw = np.zeros((3, 3))
        for r_ in range(3):
            for c_ in range(3):
                s = 0.0
                for t_ in range(3):
                    for s_ in range(3):
                        s += R[i, r_, t_] * inert_I[k, t_, s_] * R[i, c_, s_]
                IwrC = s
                Iw[r_, c_] = IwrC
        Ial = np.zeros(3)
        Iw_w = np.zeros(3)
        for r_ in range(3):
            Ial[r_] = Iw[r_, 0] * al[i, 0] + Iw[r_, 1] * al[i, 1] + Iw[r_, 2] * al[i, 2]
            Iw_w[r_] = Iw[r_, 0] * w[i, 0] + Iw[r_, 1] * w[i, 1] + Iw[r_, 2] * w[i, 2]
        Nm[i, 0] += Ial[0] + w[i, 1] * Iw_w[2] - w[i, 2] * Iw_w[1]
        Nm[i, 1] += Ial[1] + w[i, 2] * Iw_w[0] - w[i, 0] * Iw_w[2]
        Nm[i, 2] += Ial[2] + w[i, 0] * Iw_w[1] - w[i, 1] * Iw_w[0]

    # inward accumulation (children come after parents in topo order)
    for i in range(n - 1, -1, -1):
        pa = parent[i]
        if pa >= 0:
            dx = p[i, 0] - p[pa, 0]
            dy = p[i, 1] - p[pa, 1]
            dz = p[i, 2] - p[pa, 2]
            Nm[pa, 0] += Nm[i, 0] + dy * F[i, 2] - dz * F[i, 1]
            Nm[pa, 1] += Nm[i, 1] + dz * F[i, 0] - dx * F[i, 2]
            Nm[pa, 2] += Nm[i, 2] + dx * F[i, 1] - dy * F[i, 0]
            F[pa, 0] += F[i, 0]
            F[pa, 1] += F[i, 1]
            F[pa, 2] += F[i, 2]

    tau = np.zeros(N_J)
    for i in range(n):
        if kind[i] == 1:
            eff = R[i, 0, 2] * Nm[i, 0] + R[i, 1, 2] * Nm[i, 1] + R[i, 2, 2] * Nm[i, 2]
        elif kind[i] == 2:
            eff = R[i, 0, 2] * F[i, 0] + R[i, 1, 2] * F[i, 1] + R[i, 2, 2] * F[i, 2]
        else:
            continue
        for j in range(N_J):
            tau[j] += coupling[i, j] * eff
    return tau


@njit(cache=True)
def _mass_bias(parent, kind, R_pre, t_const, u_d, coupling, gravity,
               inert_idx, inert_m, inert_h, inert_I, mo_rows, mo_I, q, qd):
    zero = np.zeros(N_J)
    bias = _rnea(parent, kind, R_pre, t_const, u_d, coupling, gravity,
                 inert_idx, inert_m, inert_h, inert_I, q, qd, zero)
    g0 = _rnea(parent, kind, R_pre, t_const, u_d, coupling, gravity,
               inert_idx, inert_m, inert_h, inert_I, q, zero, zero)
    M = np.zeros((N_J, N_J))
    e = np.zeros(N_J)
    for k in range(N_J):
        e[k] = 1.0
        col = _rnea(parent, kind, R_pre, t_const, u_d, coupling, gravity,
                    inert_idx, inert_m, inert_h, inert_I, q, zero, e)
        for j in range(N_J):
            M[j, k] = col[j] - g0[j]
        e[k] = 0.0
    for t_ in range(mo_rows.shape[0]):
        for a_ in range(N_J):
            for b_ in range(N_J):
                M[a_, b_] += mo_I[t_] * mo_rows[t_, a_] * mo_rows[t_, b_]
    return M, bias


@njit(cache=True)
def sim_loop(parent, kind, R_pre, t_const, u_d, coupling, gravity,
             inert_idx, inert_m, inert_h, inert_I, mo_rows, mo_I,
             fr_rows, fr_fc, fr_fv, fr_fo, sp_rows, sp_k, spring_rest,
             breakaway, stiction_vel, dt, n_steps, clamp,
             ctrl_code, ctrl_vec1, ctrl_vec2, ctrl_vec3,
             gi_idx, gi_m, gi_h, gi_I, g_sp_rows, g_sp_k, gc_with_spring,
             monitor_on, q_ref, thresholds,
             cond_limit, cond_every, log_stride,
             log_t, log_q, log_qd, log_tau, q0, qd0):
    q = q0.copy()
    qd = qd0.copy()
    k_log = 0
    status = 0
    last_k = 0
    n_fr = fr_rows.shape[0]
    n_sp = sp_rows.shape[0]

    for k in range(n_steps + 1):
        # controller
        tau_cmd = np.zeros(N_J)
        if ctrl_code == 1:
            for j in range(N_J):
                tau_cmd[j] = ctrl_vec1[j]
        elif ctrl_code == 2:
            for j in range(N_J):
                tau_cmd[j] = ctrl_vec2[j] * (ctrl_vec1[j] - q[j]) - ctrl_vec3[j] * qd[j]
        elif ctrl_code == 3:
            zero = np.zeros(N_J)
            tau_cmd = _rnea(parent, kind, R_pre, t_const, u_d, coupling, gravity,
                            gi_idx, gi_m, gi_h, gi_I, q, zero, zero)
            if gc_with_spring == 1:
                for t_ in range(g_sp_rows.shape[0]):
                    xe = 0.0
                    for j in range(N_J):
                        xe += g_sp_rows[t_, j] * q[j]
                    sval = g_sp_k[t_] * (xe - spring_rest)
                    for j in range(N_J):
                        tau_cmd[j] += g_sp_rows[t_, j] * sval

        if k % log_stride == 0:
            log_t[k_log] = k * dt
            for j in range(N_J):
                log_q[k_log, j] = q[j]
                log_qd[k_log, j] = qd[j]
                log_tau[k_log, j] = tau_cmd[j]
            k_log += 1
        last_k = k
        if k == n_steps:
            break

        # threshold-crossing monitor
        if monitor_on == 1:
            for j in range(N_J):
                if abs(q[j] - q_ref[j]) > thresholds[j]:
                    status = 2
                    break
            if status == 2:
                break

        # Karnopp semi-implicit step
        qd_was_zero = True
        qd_eff = np.zeros(N_J)
        for j in range(N_J):
            if abs(qd[j]) >= stiction_vel and not clamp[j]:
                qd_eff[j] = qd[j]
                qd_was_zero = False

        M, bias = _mass_bias(parent, kind, R_pre, t_const, u_d, coupling, gravity,
                             inert_idx, inert_m, inert_h, inert_I, mo_rows, mo_I,
                             q, qd_eff)
        rhs = tau_cmd - bias
        for t_ in range(n_fr):
            ve = 0.0
            for j in range(N_J):
                ve += fr_rows[t_, j] * qd_eff[j]
            sgn = 0.0
            if ve > 0.0:
                sgn = 1.0
            elif ve < 0.0:
                sgn = -1.0
            fval = fr_fc[t_] * sgn + fr_fv[t_] * ve + fr_fo[t_]
            for j in range(N_J):
                rhs[j] -= fr_rows[t_, j] * fval
        for t_ in range(n_sp):
            xe = 0.0
            for j in range(N_J):
                xe += sp_rows[t_, j] * q[j]
            sval = sp_k[t_] * (xe - spring_rest)
            for j in range(N_J):
                rhs[j] -= sp_rows[t_, j] * sval

        locked = np.zeros(N_J, dtype=np.bool_)
        for j in range(N_J):
            locked[j] = (qd_eff[j] == 0.0) or clamp[j]

        qdd = np.zeros(N_J)
        for _ in range(N_J + 1):
            nf = 0
            for j in range(N_J):
                if not locked[j]:
                    nf += 1
            for j in range(N_J):
                qdd[j] = 0.0
            if nf > 0:
                sub = np.zeros((nf, nf))
                rsub = np.zeros(nf)
                fidx = np.zeros(nf, dtype=np.int64)
                a_ = 0
                for j in range(N_J):
                    if not locked[j]:
                        fidx[a_] = j
                        a_ += 1
                for a_ in range(nf):
                    rsub[a_] = rhs[fidx[a_]]
                    for b_ in range(nf):
                        sub[a_, b_] = M[fidx[a_], fidx[b_]]
                if k % cond_every == 0:
                    sv = np.linalg.svd(sub)[1]
                    if sv[nf - 1] <= 0.0 or sv[0] / sv[nf - 1] > cond_limit:
                        status = 3
                        break
                sol = np.linalg.solve(sub, rsub)
                for a_ in range(nf):
                    qdd[fidx[a_]] = sol[a_]
            n_break = 0
            for j in range(N_J):
                if locked[j] and not clamp[j]:
                    hold = -rhs[j]
                    for b_ in range(N_J):
                        hold += M[j, b_] * qdd[b_]
                    if abs(hold) > breakaway[j]:
                        locked[j] = False
                        n_break += 1
            if n_break == 0:
                break
        if status == 3:
            break

        all_locked = True
        for j in range(N_J):
            qd[j] = qd_eff[j] + dt * qdd[j]
            if locked[j]:
                qd[j] = 0.0
            else:
                all_locked = False
            q[j] = q[j] + dt * qd[j]

        if all_locked and qd_was_zero:
            status = 1
            break

    return k_log, status, last_k
