"""Pure-numpy Monte-Carlo wave-function kernel (fallback backend).

Mirrors ``_kernel.pyx`` operation by operation so both backends consume
the uniform stream identically.  See :func:`simulate`.
"""

import math

import numpy as np

BATCH = 64

# Dormand-Prince 5(4)
C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


class IntegrationError(RuntimeError):
    def __init__(self, message, last_time):
        super().__init__(f"{message} (last good time {last_time!r})")
        self.last_time = last_time


class _Uniforms:
    def __init__(self, draw):
        self.draw = draw
        self.buf = np.empty(0)
        self.pos = 0

    def next(self):
        if self.pos >= self.buf.shape[0]:
            self.buf = np.asarray(self.draw(BATCH), dtype=float)
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


def _coefs(kinds, params, t, t_mid):
    out = np.empty(len(kinds))
    for j, kind in enumerate(kinds):
        if kind == 0:
            out[j] = 1.0 if params[j, 0] <= t_mid < params[j, 1] else 0.0
        else:
            out[j] = params[j, 0] * math.cos(params[j, 1] * t + params[j, 2])
    return out


def _rhs(system, y, t, t_mid):
    out = system.a0_dense @ y
    if system.n_td:
        c = _coefs(system.td_kind, system.td_params, t, t_mid)
        for j in range(system.n_td):
            if c[j] != 0.0:
                out += c[j] * (system.td_dense[j] @ y)
    return out


def _hermite(y0, f0, y1, f1, h, th):
    th2 = th * th
    th3 = th2 * th
    return ((2 * th3 - 3 * th2 + 1) * y0 + (th3 - 2 * th2 + th) * h * f0
            + (-2 * th3 + 3 * th2) * y1 + (th3 - th2) * h * f1)


def _record(samples, row, weights, psi):
    p = psi.real ** 2 + psi.imag ** 2
    samples[row] = (weights @ p) / p.sum()


def simulate(system, psi0, t0, t_end, draw, sample_times, obs_weights,
             rtol, atol, max_step, jump_tol):
    """Integrate one quantum trajectory from ``t0`` to ``t_end``.

    Returns ``(jump_times, jump_channels, samples, psi_final)``; ``samples``
    holds normalized diagonal observables at ``sample_times``.
    """
    n = system.dim
    y = np.array(psi0, dtype=complex)
    uni = _Uniforms(draw)
    threshold = uni.next()
    samples = np.full((len(sample_times), obs_weights.shape[0]), np.nan)
    s_pos = 0
    while s_pos < len(sample_times) and sample_times[s_pos] <= t0:
        if sample_times[s_pos] == t0:
            _record(samples, s_pos, obs_weights, y)
        s_pos += 1
    bps = [b for b in system.breakpoints if t0 < b < t_end] + [t_end]
    b_pos = 0
    jump_times, jump_channels = [], []
    t = t0
    h = 0.0
    fsal = False
    k = [None] * 7
    while t < t_end:
        while bps[b_pos] <= t:
            b_pos += 1
        t_stop = bps[b_pos]
        if not fsal:
            k[0] = _rhs(system, y, t, 0.5 * (t + t_stop))
            fsal = True
        if h == 0.0:
            sc = atol + rtol * np.abs(y)
            d0 = math.sqrt(np.mean(np.abs(y / sc) ** 2))
            d1 = math.sqrt(np.mean(np.abs(k[0] / sc) ** 2))
            h = 0.01 * d0 / d1 if (d0 > 1e-5 and d1 > 1e-5) else 1e-6 * (t_end - t0)
        h = min(h, max_step)
        clipped = t + h >= t_stop
        if clipped:
            h = t_stop - t
        if h <= 0.0 or h <= 1e-15 * abs(t):
            raise IntegrationError("step size underflow", t)
        t_mid = t + 0.5 * h
        for s in range(1, 7):
            acc = y.copy()
            for r in range(s):
                if A[s][r] != 0.0:
                    acc += (h * A[s][r]) * k[r]
            if s == 6:
                y_new = acc
            k[s] = _rhs(system, acc, t + C[s] * h, t_mid)
        err_vec = np.zeros(n, dtype=complex)
        for r in range(7):
            if E[r] != 0.0:
                err_vec += (h * E[r]) * k[r]
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = math.sqrt(np.mean(np.abs(err_vec / sc) ** 2))
        if err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2)
            continue
        t_new = t_stop if clipped else t + h
        factor = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** -0.2)
        nrm2 = float(np.vdot(y_new, y_new).real)
        if nrm2 < threshold:
            lo, hi = 0.0, 1.0
            while (hi - lo) * h > jump_tol:
                mid = 0.5 * (lo + hi)
                ym = _hermite(y, k[0], y_new, k[6], h, mid)
                if float(np.vdot(ym, ym).real) < threshold:
                    hi = mid
                else:
                    lo = mid
            t_jump = t + hi * h
            while s_pos < len(sample_times) and sample_times[s_pos] <= t_jump:
                th = (sample_times[s_pos] - t) / h
                _record(samples, s_pos, obs_weights, _hermite(y, k[0], y_new, k[6], h, th))
                s_pos += 1
            y_j = _hermite(y, k[0], y_new, k[6], h, hi)
            weights = np.empty(system.n_ch)
            cands = []
            for c in range(system.n_ch):
                v = system.jumps_dense[c] @ y_j
                cands.append(v)
                weights[c] = float(np.vdot(v, v).real)
            total = weights.sum()
            u = uni.next()
            if total > 0.0:
                target = u * total
                acc_w = 0.0
                ch = system.n_ch - 1
                for c in range(system.n_ch):
                    acc_w += weights[c]
                    if acc_w >= target and weights[c] > 0.0:
                        ch = c
                        break
                y = cands[ch] / math.sqrt(weights[ch])
                jump_times.append(t_jump)
                jump_channels.append(ch)
            else:
                y = y_j / math.sqrt(float(np.vdot(y_j, y_j).real))
            threshold = uni.next()
            t = t_jump
            fsal = False
            h *= factor
            continue
        while s_pos < len(sample_times) and sample_times[s_pos] <= t_new:
            th = (sample_times[s_pos] - t) / h
            _record(samples, s_pos, obs_weights, _hermite(y, k[0], y_new, k[6], h, th))
            s_pos += 1
        y = y_new
        k[0] = k[6]
        if clipped and t_new < t_end:
            fsal = False
        t = t_new
        h *= factor
    y = y / math.sqrt(float(np.vdot(y, y).real))
    return jump_times, jump_channels, samples, y
