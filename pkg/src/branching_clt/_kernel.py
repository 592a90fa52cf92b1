"""Compiled event loop for the particle system.

Particles are stored as indices into a *trait table*: every distinct trait
(a type of a finite model, or one house-of-cards mutant) has one table entry
holding its channel rates, offspring CDFs and test-function values.  Event
times are generated by thinning: candidate events arrive at rate
``n_alive * rbar`` with ``rbar`` an upper bound of the per-particle total
rate, a uniformly chosen particle is proposed, and the proposal is accepted
with probability ``total_rate / rbar``.  The resulting law is exact.

The kernel is resumable.  It returns ``NEED_POOL`` when the table has no
fresh mutant traits left and ``NEED_LOG`` when the event-log buffers are
full; the caller enlarges the buffers and calls again with the same state.
"""

import numpy as np
from numba import njit

# placements
P_LOCAL = 0
P_KERNEL = 1
P_IMMIGRATION = 2

# return codes
DONE = 0
NEED_POOL = 1
NEED_LOG = 2

# integer state slots
S_N = 0          # alive particles
S_NEXT_ID = 1    # next particle id
S_FILLED = 2     # table entries filled
S_POOL = 3       # next unused mutant entry
S_OBS = 4        # next observation index
S_EVENTS = 5     # events applied
S_TRUNC = 6      # truncation flag
S_NCHILD = 7     # children written to the log
S_HAS_IMM = 8    # model has an immigration channel
S_SIZE = 9

# float state slots
F_T = 0
F_RBAR = 1
F_SIZE = 2


@njit(cache=True, nogil=True)
def _observe(out, g, part_tab, n, tab_f):
    nf = tab_f.shape[0]
    for fi in range(nf):
        s = 0.0
        for q in range(n):
            s += tab_f[fi, part_tab[q]]
        out[g, fi] = s


@njit(cache=True, nogil=True)
def run(rng, istate, fstate, cap, part_tab, part_id,
        tab_rate, tab_cdf, tab_f, placement, kern_cdf,
        obs_times, out, record, ev_time, ev_parent, ev_nchild, ch_id, ch_tab):
    n_obs = obs_times.shape[0]
    n_ch = tab_rate.shape[0]
    kmax = tab_cdf.shape[2] - 1
    while True:
        n = istate[S_N]
        if n == 0:
            while istate[S_OBS] < n_obs:
                for fi in range(out.shape[1]):
                    out[istate[S_OBS], fi] = 0.0
                istate[S_OBS] += 1
            return DONE
        if istate[S_HAS_IMM] == 1 and istate[S_POOL] >= istate[S_FILLED]:
            return NEED_POOL
        if record and (istate[S_EVENTS] >= ev_time.shape[0]
                       or istate[S_NCHILD] + kmax + 2 > ch_id.shape[0]):
            return NEED_LOG
        rbar = fstate[F_RBAR]
        if rbar > 0.0:
            tn = fstate[F_T] + rng.exponential(1.0) / (n * rbar)
        else:
            tn = np.inf
        while istate[S_OBS] < n_obs and obs_times[istate[S_OBS]] < tn:
            _observe(out, istate[S_OBS], part_tab, n, tab_f)
            istate[S_OBS] += 1
        if istate[S_OBS] >= n_obs:
            fstate[F_T] = obs_times[n_obs - 1]
            return DONE
        fstate[F_T] = tn

        u = rng.random() * n
        p = int(u)
        if p >= n:
            p = n - 1
        v = (u - p) * rbar
        e = part_tab[p]
        c = -1
        acc = 0.0
        for ch in range(n_ch):
            acc += tab_rate[ch, e]
            if v < acc:
                c = ch
                break
        if c < 0:
            continue

        pid = part_id[p]
        # remove the parent (swap with last)
        part_tab[p] = part_tab[n - 1]
        part_id[p] = part_id[n - 1]
        n -= 1
        pl = placement[c]
        if pl == P_IMMIGRATION:
            k = 2
        else:
            w = rng.random()
            k = kmax
            for j in range(kmax + 1):
                if w < tab_cdf[c, e, j]:
                    k = j
                    break
        if record:
            ev = istate[S_EVENTS]
            ev_time[ev] = tn
            ev_parent[ev] = pid
            ev_nchild[ev] = k
        for j in range(k):
            if pl == P_LOCAL:
                ce = e
            elif pl == P_KERNEL:
                w2 = rng.random()
                ce = kern_cdf.shape[2] - 1
                for q in range(kern_cdf.shape[2]):
                    if w2 < kern_cdf[c, e, q]:
                        ce = q
                        break
            else:
                if j == 0:
                    ce = e
                else:
                    ce = istate[S_POOL]
                    istate[S_POOL] += 1
            if n < part_tab.shape[0]:
                part_tab[n] = ce
                part_id[n] = istate[S_NEXT_ID]
            if record:
                ch_id[istate[S_NCHILD]] = istate[S_NEXT_ID]
                ch_tab[istate[S_NCHILD]] = ce
                istate[S_NCHILD] += 1
            istate[S_NEXT_ID] += 1
            n += 1
        istate[S_EVENTS] += 1
        istate[S_N] = n
        if n > cap:
            istate[S_TRUNC] = 1
            while istate[S_OBS] < n_obs:
                for fi in range(out.shape[1]):
                    out[istate[S_OBS], fi] = np.nan
                istate[S_OBS] += 1
            return DONE
