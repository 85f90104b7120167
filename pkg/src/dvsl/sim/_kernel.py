"""Compiled inner loop of the microsimulation.

State lives in two dense tables indexed by vehicle slot: ``vf`` (floats) and
``vi`` (ints). Lanes 0..n_main-1 are mainline lanes numbered from the left;
lane n_main is the on-ramp, whose last ``merge_length`` metres form the
acceleration lane. Positions are front bumpers.
"""
import math

import numpy as np
from numba import njit

# vf columns
F_X, F_V, F_ACC, F_LEN, F_VMAX, F_AMAX, F_BCOMF, F_THW, F_S0, F_ENTRY, F_WAIT, F_LCT = range(12)
NF = 12
# vi columns
I_ACTIVE, I_VID, I_CLS, I_ROUTE, I_LANE, I_BRAKED = range(6)
NI = 6

# P entries
(P_DT, P_CS, P_CE, P_MS, P_ME, P_OFF, P_END, P_RS, P_MAIN_LIM, P_RAMP_LIM, P_TOL,
 P_POL, P_THR, P_BSAFE, P_BIAS, P_EXIT_BIAS, P_MAND, P_COOL, P_WAIT, P_FORCED,
 P_BMAX, P_MINGAP, P_INS_MIN, P_LOOK_B, P_EMERG, P_REG_X0, P_REG_X1, P_REG_RAMP,
 P_ROLL, P_AERO) = range(30)
NP = 30

# class parameter columns
K_LEN, K_AMAX, K_BCOMF, K_VDES, K_FACTOR, K_FSTD, K_THW, K_S0 = range(8)

# counters (interval counters are reset from Python)
(C_IN, C_OUT_END, C_OUT_OFF, C_BRAKES, C_COMPLETED, C_VEH_STEPS, C_ENTERED,
 C_EXITED, C_NEXT_VID, C_EXITLOG, C_FREE_TOP) = range(11)
NC = 11

ROUTE_MAIN_OFF = 1
ROUTE_ON_MAIN = 2
INF = 1e18


@njit(cache=True)
def lane_limit(lane, x, n_main, ctrl, P):
    if lane == n_main:
        return P[P_RAMP_LIM]
    if P[P_CS] <= x < P[P_CE]:
        return ctrl[lane]
    return P[P_MAIN_LIM]


@njit(cache=True)
def anticipation_cap(lane, x, v, n_main, ctrl, P, b):
    """Highest speed from which the next lower limit ahead is met at comfortable decel."""
    if lane == n_main:
        return INF
    if x < P[P_CS]:
        boundary, nxt = P[P_CS], ctrl[lane]
    elif x < P[P_CE]:
        boundary, nxt = P[P_CE], P[P_MAIN_LIM]
    else:
        return INF
    nxt += P[P_TOL]
    if v <= nxt:
        return INF
    d = boundary - x - v * P[P_DT]
    if d < 0.0:
        d = 0.0
    return math.sqrt(nxt * nxt + 2.0 * b * d)


@njit(cache=True)
def idm(v, v0, gap, dv, amax, b, thw, s0, bmax):
    if v0 <= 1e-9:
        acc = -bmax if v > 0.0 else 0.0
    else:
        r = v / v0
        acc = amax * (1.0 - r * r * r * r)
    if gap < INF:
        s_star = v * thw + v * dv / (2.0 * math.sqrt(amax * b))
        if s_star < 0.0:
            s_star = 0.0
        s_star += s0
        g = gap if gap > 0.01 else 0.01
        acc -= amax * (s_star / g) ** 2
    if acc < -bmax:
        acc = -bmax
    if acc > amax:
        acc = amax
    return acc


@njit(cache=True)
def safe_speed(v, v_lead, gap, b, dt):
    """Krauss safe speed: the follower can still stop behind a leader braking at b."""
    vbar = 0.5 * (v + v_lead)
    return v_lead + (gap - v_lead * dt) / (vbar / b + dt)


@njit(cache=True)
def _acc_behind(vf, i, j, lane, n_main, ctrl, P):
    """IDM acceleration of slot i following slot j (j < 0: free road) in ``lane``."""
    x = vf[i, F_X]
    v = vf[i, F_V]
    v0 = min(vf[i, F_VMAX], lane_limit(lane, x, n_main, ctrl, P) + P[P_TOL])
    gap = INF
    dv = 0.0
    if j >= 0:
        gap = vf[j, F_X] - vf[j, F_LEN] - x
        dv = v - vf[j, F_V]
    if lane == n_main:
        g_end = P[P_ME] - x
        if g_end < gap:
            gap = g_end
            dv = v
    return idm(v, v0, gap, dv, vf[i, F_AMAX], vf[i, F_BCOMF], vf[i, F_THW], vf[i, F_S0], P[P_BMAX])


@njit(cache=True)
def _neighbours(vf, mem, cnt, lane, x, skip):
    """(leader, follower, insert position) around position x in a lane sorted downstream-first."""
    lead = -1
    pos = cnt[lane]
    for k in range(cnt[lane]):
        j = mem[lane, k]
        if j == skip:
            continue
        if vf[j, F_X] >= x:
            lead = j
        else:
            pos = k
            break
    foll = -1
    if pos < cnt[lane]:
        foll = mem[lane, pos]
    return lead, foll, pos


@njit(cache=True)
def _remove_member(mem, cnt, lane, i):
    k = 0
    while mem[lane, k] != i:
        k += 1
    for q in range(k, cnt[lane] - 1):
        mem[lane, q] = mem[lane, q + 1]
    cnt[lane] -= 1


@njit(cache=True)
def _insert_member(mem, cnt, lane, pos, i):
    for q in range(cnt[lane], pos, -1):
        mem[lane, q] = mem[lane, q - 1]
    mem[lane, pos] = i
    cnt[lane] += 1


@njit(cache=True)
def _build_members(vf, vi, mem, cnt, n_lanes):
    cap = vf.shape[0]
    for lane in range(n_lanes):
        cnt[lane] = 0
    for i in range(cap):
        if vi[i, I_ACTIVE] == 1:
            lane = vi[i, I_LANE]
            mem[lane, cnt[lane]] = i
            cnt[lane] += 1
    for lane in range(n_lanes):
        n = cnt[lane]
        if n > 1:
            keys = np.empty(n)
            for k in range(n):
                keys[k] = -vf[mem[lane, k], F_X]
            order = np.argsort(keys, kind="mergesort")
            tmp = mem[lane, :n].copy()
            for k in range(n):
                mem[lane, k] = tmp[order[k]]


@njit(cache=True)
def _try_change(vf, vi, mem, cnt, i, lane, tl, n_main, ctrl, P):
    """Evaluate one lane change of slot i from lane to tl; apply it and return True if taken."""
    x = vf[i, F_X]
    v = vf[i, F_V]
    dt = P[P_DT]
    ramp = lane == n_main
    lead, foll, pos = _neighbours(vf, mem, cnt, tl, x, i)
    mingap = P[P_MINGAP]
    if lead >= 0 and vf[lead, F_X] - vf[lead, F_LEN] - x < mingap:
        return False
    if foll >= 0 and x - vf[i, F_LEN] - vf[foll, F_X] < mingap:
        return False
    if v > lane_limit(tl, x, n_main, ctrl, P) + P[P_TOL] + vf[i, F_BCOMF] * dt:
        return False

    route = vi[i, I_ROUTE]
    exiting = route == ROUTE_MAIN_OFF
    mandatory_zone = exiting and (P[P_OFF] - P[P_MAND] <= x < P[P_OFF])
    right = tl > lane

    bsafe = P[P_BSAFE]
    if ramp and vf[i, F_WAIT] >= P[P_WAIT]:
        bsafe = P[P_FORCED]

    acc_new = _acc_behind(vf, i, lead, tl, n_main, ctrl, P)
    if acc_new < -bsafe:
        return False
    acc_f_new = 0.0
    if foll >= 0:
        # follower now follows i
        xf = vf[foll, F_X]
        vfv = vf[foll, F_V]
        v0 = min(vf[foll, F_VMAX], lane_limit(tl, xf, n_main, ctrl, P) + P[P_TOL])
        acc_f_new = idm(vfv, v0, x - vf[i, F_LEN] - xf, vfv - v, vf[foll, F_AMAX],
                        vf[foll, F_BCOMF], vf[foll, F_THW], vf[foll, F_S0], P[P_BMAX])
        if acc_f_new < -bsafe:
            return False

    if ramp:
        take = True
    elif mandatory_zone and right:
        take = True
    elif mandatory_zone:
        take = False
    else:
        # incentive with politeness towards old and new followers
        my_lead, my_foll, _ = _neighbours(vf, mem, cnt, lane, x, i)
        acc_old = _acc_behind(vf, i, my_lead, lane, n_main, ctrl, P)
        gain = acc_new - acc_old
        if foll >= 0:
            gain += P[P_POL] * (acc_f_new - _acc_behind(vf, foll, lead, tl, n_main, ctrl, P))
        if my_foll >= 0:
            gain += P[P_POL] * (_acc_behind(vf, my_foll, my_lead, lane, n_main, ctrl, P)
                                - _acc_behind(vf, my_foll, i, lane, n_main, ctrl, P))
        bias = P[P_EXIT_BIAS] if exiting else P[P_BIAS]
        if right:
            gain += bias
        else:
            gain -= bias
        take = gain > P[P_THR]
    if not take:
        return False

    _remove_member(mem, cnt, lane, i)
    # positions in tl are unchanged by the removal from another lane
    lead, foll, pos = _neighbours(vf, mem, cnt, tl, x, i)
    _insert_member(mem, cnt, tl, pos, i)
    vi[i, I_LANE] = tl
    vf[i, F_LCT] = 0.0
    vf[i, F_WAIT] = 0.0
    return True


@njit(cache=True)
def _lane_changes(vf, vi, mem, cnt, n_main, ctrl, P):
    cap = vf.shape[0]
    n = 0
    for i in range(cap):
        if vi[i, I_ACTIVE] == 1:
            n += 1
    cand = np.empty(n, dtype=np.int64)
    keys = np.empty(n)
    n = 0
    for i in range(cap):
        if vi[i, I_ACTIVE] == 1:
            cand[n] = i
            keys[n] = -vf[i, F_X]
            n += 1
    order = np.argsort(keys, kind="mergesort")
    for q in range(n):
        i = cand[order[q]]
        if vf[i, F_LCT] < P[P_COOL]:
            continue
        lane = vi[i, I_LANE]
        x = vf[i, F_X]
        if lane == n_main:
            if P[P_MS] <= x <= P[P_ME]:
                _try_change(vf, vi, mem, cnt, i, lane, n_main - 1, n_main, ctrl, P)
            continue
        if x >= P[P_END]:
            continue
        exiting = vi[i, I_ROUTE] == ROUTE_MAIN_OFF
        # exiting vehicles look right first, everyone else left first
        if exiting:
            if lane + 1 < n_main and _try_change(vf, vi, mem, cnt, i, lane, lane + 1, n_main, ctrl, P):
                continue
            if lane - 1 >= 0:
                _try_change(vf, vi, mem, cnt, i, lane, lane - 1, n_main, ctrl, P)
        else:
            if lane - 1 >= 0 and _try_change(vf, vi, mem, cnt, i, lane, lane - 1, n_main, ctrl, P):
                continue
            if lane + 1 < n_main:
                _try_change(vf, vi, mem, cnt, i, lane, lane + 1, n_main, ctrl, P)


@njit(cache=True)
def _spawn(vf, vi, free, counters, cls_par, cls, route, z, lane, x, v, entry):
    top = counters[C_FREE_TOP]
    if top == 0:
        return -1
    top -= 1
    i = free[top]
    counters[C_FREE_TOP] = top
    factor = cls_par[cls, K_FACTOR] + cls_par[cls, K_FSTD] * z
    if factor < 0.75:
        factor = 0.75
    if factor > 1.3:
        factor = 1.3
    vf[i, F_X] = x
    vf[i, F_V] = v
    vf[i, F_ACC] = 0.0
    vf[i, F_LEN] = cls_par[cls, K_LEN]
    vf[i, F_VMAX] = cls_par[cls, K_VDES] * factor
    vf[i, F_AMAX] = cls_par[cls, K_AMAX]
    vf[i, F_BCOMF] = cls_par[cls, K_BCOMF]
    vf[i, F_THW] = cls_par[cls, K_THW]
    vf[i, F_S0] = cls_par[cls, K_S0]
    vf[i, F_ENTRY] = entry
    vf[i, F_WAIT] = 0.0
    vf[i, F_LCT] = 1e9
    vi[i, I_ACTIVE] = 1
    vi[i, I_VID] = counters[C_NEXT_VID]
    counters[C_NEXT_VID] += 1
    vi[i, I_CLS] = cls
    vi[i, I_ROUTE] = route
    vi[i, I_LANE] = lane
    vi[i, I_BRAKED] = 0
    return i


@njit(cache=True)
def _insert_from_origin(vf, vi, free, counters, cls_par, n_main, ctrl, P,
                        s_step, s_route, s_cls, s_z, idx, n_arrived, ptr, o):
    """Move queued arrivals of origin o onto the road while an entry lane has room."""
    cap = vf.shape[0]
    if o == 0:
        lane_lo, lane_hi, x_in = 0, n_main, 0.0
    else:
        lane_lo, lane_hi, x_in = n_main, n_main + 1, P[P_RS]
    nl = lane_hi - lane_lo
    last = np.full(nl, -1, dtype=np.int64)
    for i in range(cap):
        if vi[i, I_ACTIVE] == 1:
            lane = vi[i, I_LANE]
            if lane_lo <= lane < lane_hi:
                k = lane - lane_lo
                if last[k] < 0 or vf[i, F_X] < vf[last[k], F_X]:
                    last[k] = i
    dt = P[P_DT]
    while ptr[o] < n_arrived:
        a = idx[ptr[o]]
        cls = s_cls[a]
        route = s_route[a]
        factor = cls_par[cls, K_FACTOR] + cls_par[cls, K_FSTD] * s_z[a]
        factor = min(max(factor, 0.75), 1.3)
        vdes = cls_par[cls, K_VDES] * factor
        thw = cls_par[cls, K_THW]
        s0 = cls_par[cls, K_S0]
        best = -1
        best_room = -INF
        best_v = 0.0
        lo = lane_lo
        if o == 0 and route == ROUTE_MAIN_OFF and n_main > 2:
            lo = n_main // 2
        for lane in range(lo, lane_hi):
            k = lane - lane_lo
            v0 = min(vdes, lane_limit(lane, x_in, n_main, ctrl, P) + P[P_TOL])
            if last[k] < 0:
                room = INF
                v_ins = v0
            else:
                j = last[k]
                room = vf[j, F_X] - vf[j, F_LEN] - x_in
                v_ins = v0
                if room < 200.0:
                    v_ins = min(v0, vf[j, F_V])
                v_fit = (room - s0) / thw
                if v_fit < v_ins:
                    v_ins = v_fit
                if v_ins < P[P_INS_MIN] or room < s0:
                    continue
            if room > best_room:
                best_room = room
                best = lane
                best_v = v_ins
        if best < 0:
            break
        entry = s_step[a] * dt
        i = _spawn(vf, vi, free, counters, cls_par, cls, route, s_z[a], best, x_in, best_v, entry)
        if i < 0:
            break
        last[best - lane_lo] = i
        ptr[o] += 1


@njit(cache=True)
def _detector_update(x0, x1, length, dt, xd):
    """(covered seconds, crossed) for a front moving linearly from x0 to x1 during dt."""
    if x1 <= x0:
        if xd <= x0 < xd + length:
            return dt, False
        return 0.0, False
    span = x1 - x0
    t_in = (xd - x0) / span * dt
    t_out = (xd + length - x0) / span * dt
    lo = max(t_in, 0.0)
    hi = min(t_out, dt)
    cover = hi - lo if hi > lo else 0.0
    crossed = x0 < xd <= x1
    return cover, crossed


@njit(cache=True)
def run_steps(k0, n_steps, vf, vi, free, counters, mem, cnt, P, n_main, ctrl, cls_par,
              s_step, s_route, s_cls, s_z, origin_idx, origin_cnt, ptr_arrived, ptr_inserted,
              det_x, det_lane, det_acc, em_coef, em_acc, exitlog, steplog):
    """Advance n_steps from step index k0 under fixed controlled-lane limits ``ctrl``."""
    cap = vf.shape[0]
    n_lanes = n_main + 1
    dt = P[P_DT]
    acc_cmd = np.zeros(cap)
    in_region_ramp = P[P_REG_RAMP] > 0.5
    nd = det_x.shape[0]
    for s in range(n_steps):
        k = k0 + s
        inflow = 0
        outflow = 0
        # arrivals join their origin queue
        for o in range(2):
            while ptr_arrived[o] < origin_cnt[o] and s_step[origin_idx[o, ptr_arrived[o]]] <= k:
                ptr_arrived[o] += 1
                inflow += 1
        counters[C_IN] += inflow
        counters[C_ENTERED] += inflow
        for o in range(2):
            if ptr_inserted[o] < ptr_arrived[o]:
                _insert_from_origin(vf, vi, free, counters, cls_par, n_main, ctrl, P,
                                    s_step, s_route, s_cls, s_z, origin_idx[o],
                                    ptr_arrived[o], ptr_inserted, o)
        n_active = 0
        for i in range(cap):
            if vi[i, I_ACTIVE] == 1:
                n_active += 1
        queued = (ptr_arrived[0] - ptr_inserted[0]) + (ptr_arrived[1] - ptr_inserted[1])
        counters[C_VEH_STEPS] += n_active + queued

        _build_members(vf, vi, mem, cnt, n_lanes)
        _lane_changes(vf, vi, mem, cnt, n_main, ctrl, P)

        # accelerations from the pre-move state
        for lane in range(n_lanes):
            for q in range(cnt[lane]):
                i = mem[lane, q]
                lead = mem[lane, q - 1] if q > 0 else -1
                acc_cmd[i] = _acc_behind(vf, i, lead, lane, n_main, ctrl, P)

        # move downstream-first so followers see the leader's new rear
        for lane in range(n_lanes):
            for q in range(cnt[lane]):
                i = mem[lane, q]
                x = vf[i, F_X]
                v = vf[i, F_V]
                a = acc_cmd[i]
                vn = v + a * dt
                if vn < 0.0:
                    xn = x + (v * v / (-2.0 * a) if a < 0.0 else 0.0)
                    vn = 0.0
                else:
                    xn = x + 0.5 * (v + vn) * dt
                if q > 0:
                    j = mem[lane, q - 1]
                    vs = safe_speed(v, vf[j, F_V], vf[j, F_X] - vf[j, F_LEN] - x, vf[i, F_BCOMF], dt)
                    if vn > vs:
                        vn = max(vs, 0.0)
                        xn = x + 0.5 * (v + vn) * dt
                if lane == n_main:
                    vs = safe_speed(v, 0.0, P[P_ME] - x, vf[i, F_BCOMF], dt)
                    if vn > vs:
                        vn = max(vs, 0.0)
                        xn = x + 0.5 * (v + vn) * dt
                cap_v = min(lane_limit(lane, x, n_main, ctrl, P) + P[P_TOL],
                            anticipation_cap(lane, x, v, n_main, ctrl, P, P[P_LOOK_B]))
                if vn > cap_v:
                    vn = max(cap_v, 0.0)
                    xn = x + 0.5 * (v + vn) * dt
                lim_new = lane_limit(lane, xn, n_main, ctrl, P) + P[P_TOL]
                if vn > lim_new:
                    vn = max(lim_new, 0.0)
                    xn = x + 0.5 * (v + vn) * dt
                x_max = INF
                if q > 0:
                    j = mem[lane, q - 1]
                    x_max = vf[j, F_X] - vf[j, F_LEN] - 0.01
                if lane == n_main and P[P_ME] < x_max:
                    x_max = P[P_ME]
                if xn > x_max:
                    xn = max(x, x_max)
                    v_fit = 2.0 * (xn - x) / dt - v
                    vn = max(0.0, min(vn, v_fit))
                an = (vn - v) / dt
                vf[i, F_X] = xn
                vf[i, F_V] = vn
                vf[i, F_ACC] = an
                vf[i, F_LCT] += dt
                if lane == n_main and xn >= P[P_MS]:
                    vf[i, F_WAIT] += dt

                in_region = P[P_REG_X0] <= xn < P[P_REG_X1] and (lane < n_main or in_region_ramp)
                if in_region:
                    if an < -P[P_EMERG] and vi[i, I_BRAKED] == 0:
                        vi[i, I_BRAKED] = 1
                        counters[C_BRAKES] += 1
                    c = vi[i, I_CLS]
                    power = vn * (an + P[P_ROLL] + P[P_AERO] * vn * vn)
                    if power < 0.0:
                        power = 0.0
                    for p in range(4):
                        em_acc[p] += (em_coef[c, p, 0] + em_coef[c, p, 1] * power) * dt

                for d in range(nd):
                    if det_lane[d] == lane:
                        cover, crossed = _detector_update(x, xn, vf[i, F_LEN], dt, det_x[d])
                        det_acc[d, 0] += cover
                        if crossed:
                            det_acc[d, 1] += 1.0
                            det_acc[d, 2] += (xn - x) / dt

        # retire vehicles leaving the mainline end or taking the off-ramp
        t_end = (k + 1) * dt
        for i in range(cap):
            if vi[i, I_ACTIVE] != 1:
                continue
            lane = vi[i, I_LANE]
            x = vf[i, F_X]
            gone = 0
            if lane < n_main and x >= P[P_END]:
                gone = 1
            elif vi[i, I_ROUTE] == ROUTE_MAIN_OFF and lane == n_main - 1 and x >= P[P_OFF]:
                gone = 2
            if gone == 0:
                continue
            if gone == 1:
                counters[C_OUT_END] += 1
            else:
                counters[C_OUT_OFF] += 1
            outflow += 1
            counters[C_COMPLETED] += 1
            counters[C_EXITED] += 1
            e = counters[C_EXITLOG]
            exitlog[e, 0] = vi[i, I_VID]
            exitlog[e, 1] = vf[i, F_ENTRY]
            exitlog[e, 2] = t_end
            exitlog[e, 3] = vi[i, I_ROUTE]
            exitlog[e, 4] = vi[i, I_CLS]
            counters[C_EXITLOG] = e + 1
            vi[i, I_ACTIVE] = 0
            free[counters[C_FREE_TOP]] = i
            counters[C_FREE_TOP] += 1

        n_active = 0
        for i in range(cap):
            if vi[i, I_ACTIVE] == 1:
                n_active += 1
        queued = (ptr_arrived[0] - ptr_inserted[0]) + (ptr_arrived[1] - ptr_inserted[1])
        steplog[s, 0] = n_active + queued
        steplog[s, 1] = inflow
        steplog[s, 2] = outflow
