# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Monte-Carlo wave-function kernel.

Same algorithm and uniform-stream consumption as ``_kernel_py.simulate``;
operators arrive as CSR arrays on a ``KernelSystem``.  The inner loops run
on raw pointers into arrays kept alive by ``_Sys``.
"""

import numpy as np
cimport numpy as np

np.import_array()

from libc.math cimport sqrt, cos, fabs, pow, fmax

from ._kernel_py import IntegrationError

cdef int BATCH = 64

cdef double C2 = 1.0 / 5, C3 = 3.0 / 10, C4 = 4.0 / 5, C5 = 8.0 / 9
cdef double A21 = 1.0 / 5
cdef double A31 = 3.0 / 40, A32 = 9.0 / 40
cdef double A41 = 44.0 / 45, A42 = -56.0 / 15, A43 = 32.0 / 9
cdef double A51 = 19372.0 / 6561, A52 = -25360.0 / 2187, A53 = 64448.0 / 6561, A54 = -212.0 / 729
cdef double A61 = 9017.0 / 3168, A62 = -355.0 / 33, A63 = 46732.0 / 5247, A64 = 49.0 / 176
cdef double A65 = -5103.0 / 18656
cdef double A71 = 35.0 / 384, A73 = 500.0 / 1113, A74 = 125.0 / 192, A75 = -2187.0 / 6784
cdef double A76 = 11.0 / 84
cdef double E1 = 71.0 / 57600, E3 = -71.0 / 16695, E4 = 71.0 / 1920, E5 = -17253.0 / 339200
cdef double E6 = 22.0 / 525, E7 = -1.0 / 40


# complex vectors are handled as interleaved (re, im) doubles


cdef inline void csr_acc(const double* data, const int* indices, const int* indptr,
                         int row0, int n, double coef, const double* x, double* out) noexcept nogil:
    cdef int i, p, j
    cdef double sr, si, dr, di
    for i in range(n):
        sr = 0.0
        si = 0.0
        for p in range(indptr[row0 + i], indptr[row0 + i + 1]):
            j = 2 * indices[p]
            dr = data[2 * p]
            di = data[2 * p + 1]
            sr += dr * x[j] - di * x[j + 1]
            si += dr * x[j + 1] + di * x[j]
        out[2 * i] += coef * sr
        out[2 * i + 1] += coef * si


cdef class _Sys:
    cdef int n, n_td, n_ch
    cdef object keep
    cdef const double* a0_data
    cdef const int* a0_ind
    cdef const int* a0_ptr
    cdef const double* td_data
    cdef const int* td_ind
    cdef const int* td_ptr
    cdef const int* td_kind
    cdef const double* td_params
    cdef const double* j_data
    cdef const int* j_ind
    cdef const int* j_ptr

    def __init__(self, system):
        cached = getattr(system, "_flat_arrays", None)
        if cached is None:
            cached = [np.ascontiguousarray(a) for a in (*system.a0_csr, *system.td_csr,
                                                         *system.jumps_csr)]
            for k in (0, 3, 6):
                cached[k] = np.append(cached[k], 0).view(float)
            cached.append(np.ascontiguousarray(system.td_kind, dtype=np.int32))
            cached.append(np.ascontiguousarray(system.td_params, dtype=float).reshape(-1))
            cached[9] = np.append(cached[9], 0).astype(np.int32)
            try:
                system._flat_arrays = cached
            except AttributeError:
                pass
        self.n = system.dim
        self.n_td = system.n_td
        self.n_ch = system.n_ch
        self.keep = cached
        self.a0_data = <const double*> np.PyArray_DATA(cached[0])
        self.a0_ind = <const int*> np.PyArray_DATA(cached[1])
        self.a0_ptr = <const int*> np.PyArray_DATA(cached[2])
        self.td_data = <const double*> np.PyArray_DATA(cached[3])
        self.td_ind = <const int*> np.PyArray_DATA(cached[4])
        self.td_ptr = <const int*> np.PyArray_DATA(cached[5])
        self.j_data = <const double*> np.PyArray_DATA(cached[6])
        self.j_ind = <const int*> np.PyArray_DATA(cached[7])
        self.j_ptr = <const int*> np.PyArray_DATA(cached[8])
        self.td_kind = <const int*> np.PyArray_DATA(cached[9])
        self.td_params = <const double*> np.PyArray_DATA(cached[10])

    cdef void rhs(self, const double* y, double t, double t_mid, double* out) noexcept nogil:
        cdef int i, j
        cdef double c
        for i in range(2 * self.n):
            out[i] = 0.0
        csr_acc(self.a0_data, self.a0_ind, self.a0_ptr, 0, self.n, 1.0, y, out)
        for j in range(self.n_td):
            if self.td_kind[j] == 0:
                c = 1.0 if (self.td_params[3 * j] <= t_mid < self.td_params[3 * j + 1]) else 0.0
            else:
                c = self.td_params[3 * j] * cos(self.td_params[3 * j + 1] * t
                                                + self.td_params[3 * j + 2])
            if c != 0.0:
                csr_acc(self.td_data, self.td_ind, self.td_ptr, j * self.n, self.n, c, y, out)


cdef inline void hermite(const double* y0, const double* f0, const double* y1, const double* f1,
                         double h, double th, int m, double* out) noexcept nogil:
    cdef double th2 = th * th
    cdef double th3 = th2 * th
    cdef double a = 2 * th3 - 3 * th2 + 1
    cdef double b = (th3 - 2 * th2 + th) * h
    cdef double c = -2 * th3 + 3 * th2
    cdef double d = (th3 - th2) * h
    cdef int i
    for i in range(m):
        out[i] = a * y0[i] + b * f0[i] + c * y1[i] + d * f1[i]


cdef inline double norm2(const double* y, int m) noexcept nogil:
    cdef double s = 0.0
    cdef int i
    for i in range(m):
        s += y[i] * y[i]
    return s


cdef void record(double* row, const double* w, int n_obs, const double* psi, int n) noexcept nogil:
    cdef int o, i
    cdef double tot = 0.0, acc, p
    for i in range(2 * n):
        tot += psi[i] * psi[i]
    for o in range(n_obs):
        acc = 0.0
        for i in range(n):
            p = psi[2 * i] * psi[2 * i] + psi[2 * i + 1] * psi[2 * i + 1]
            acc += w[o * n + i] * p
        row[o] = acc / tot


def simulate(system, psi0, double t0, double t_end, draw, sample_times, obs_weights,
             double rtol, double atol, double max_step, double jump_tol):
    """Integrate one quantum trajectory; see ``_kernel_py.simulate``."""
    cdef _Sys sys = _Sys(system)
    cdef int n = sys.n
    cdef int m = 2 * n
    cdef int n_ch = sys.n_ch
    cdef int i, c, ch
    work_arr = np.empty((12 + max(n_ch, 1)) * n, dtype=complex)
    work_arr[:n] = psi0
    cdef double* y = <double*> np.PyArray_DATA(work_arr)
    cdef double* y_new = y + m
    cdef double* acc = y + 2 * m
    cdef double* tmp = y + 3 * m
    cdef double* k0 = y + 4 * m
    cdef double* k1 = y + 5 * m
    cdef double* k2 = y + 6 * m
    cdef double* k3 = y + 7 * m
    cdef double* k4 = y + 8 * m
    cdef double* k5 = y + 9 * m
    cdef double* k6 = y + 10 * m
    cdef double* cand = y + 12 * m
    cdef double wts[64]
    if n_ch > 64:
        raise ValueError("at most 64 collapse channels supported")
    st_arr = np.ascontiguousarray(sample_times, dtype=float)
    cdef const double* st = <const double*> np.PyArray_DATA(st_arr)
    ow_arr = np.ascontiguousarray(obs_weights, dtype=float)
    cdef const double* owp = <const double*> np.PyArray_DATA(ow_arr)
    cdef int n_obs = ow_arr.shape[0]
    cdef int n_samp = st_arr.shape[0]
    samples_arr = np.full((max(n_samp, 1), n_obs), np.nan)
    cdef double* samples = <double*> np.PyArray_DATA(samples_arr)
    ubuf_arr = None
    cdef const double* ubuf = NULL
    cdef int ulen = 0
    cdef int upos = 0
    cdef int s_pos = 0
    cdef list bp_list = [b for b in system.breakpoints if t0 < b < t_end]
    bp_list.append(t_end)
    bps_arr = np.asarray(bp_list, dtype=float)
    cdef const double* bps = <const double*> np.PyArray_DATA(bps_arr)
    cdef int b_pos = 0
    cdef double t = t0, h = 0.0, t_stop, t_mid, t_new, err, sc, d0, d1, factor
    cdef double threshold, nrm2, lo, hi, mid, t_jump, total, target, acc_w, u, ay, an, er, ei
    cdef double h21, h31, h32, h41, h42, h43, h51, h52, h53, h54
    cdef double h61, h62, h63, h64, h65, h71, h73, h74, h75, h76
    cdef double e1, e3, e4, e5, e6, e7
    cdef bint fsal = False, clipped
    jump_times = []
    jump_channels = []

    ubuf_arr = np.ascontiguousarray(draw(BATCH), dtype=float)
    ubuf = <const double*> np.PyArray_DATA(ubuf_arr)
    ulen = ubuf_arr.shape[0]
    threshold = ubuf[upos]
    upos += 1

    while s_pos < n_samp and st[s_pos] <= t0:
        if st[s_pos] == t0:
            record(samples + s_pos * n_obs, owp, n_obs, y, n)
        s_pos += 1

    while t < t_end:
        while bps[b_pos] <= t:
            b_pos += 1
        t_stop = bps[b_pos]
        if not fsal:
            sys.rhs(y, t, 0.5 * (t + t_stop), k0)
            fsal = True
        if h == 0.0:
            d0 = 0.0
            d1 = 0.0
            for i in range(n):
                ay = y[2 * i] * y[2 * i] + y[2 * i + 1] * y[2 * i + 1]
                sc = atol + rtol * sqrt(ay)
                d0 += ay / (sc * sc)
                d1 += (k0[2 * i] * k0[2 * i] + k0[2 * i + 1] * k0[2 * i + 1]) / (sc * sc)
            d0 = sqrt(d0 / n)
            d1 = sqrt(d1 / n)
            if d0 > 1e-5 and d1 > 1e-5:
                h = 0.01 * d0 / d1
            else:
                h = 1e-6 * (t_end - t0)
        if h > max_step:
            h = max_step
        clipped = t + h >= t_stop
        if clipped:
            h = t_stop - t
        if h <= 0.0 or h <= 1e-15 * fabs(t):
            raise IntegrationError("step size underflow", t)
        t_mid = t + 0.5 * h

        with nogil:
            h21 = h * A21
            h31 = h * A31; h32 = h * A32
            h41 = h * A41; h42 = h * A42; h43 = h * A43
            h51 = h * A51; h52 = h * A52; h53 = h * A53; h54 = h * A54
            h61 = h * A61; h62 = h * A62; h63 = h * A63; h64 = h * A64; h65 = h * A65
            h71 = h * A71; h73 = h * A73; h74 = h * A74; h75 = h * A75; h76 = h * A76
            e1 = h * E1; e3 = h * E3; e4 = h * E4; e5 = h * E5; e6 = h * E6; e7 = h * E7
            for i in range(m):
                acc[i] = y[i] + h21 * k0[i]
            sys.rhs(acc, t + C2 * h, t_mid, k1)
            for i in range(m):
                acc[i] = y[i] + h31 * k0[i] + h32 * k1[i]
            sys.rhs(acc, t + C3 * h, t_mid, k2)
            for i in range(m):
                acc[i] = y[i] + h41 * k0[i] + h42 * k1[i] + h43 * k2[i]
            sys.rhs(acc, t + C4 * h, t_mid, k3)
            for i in range(m):
                acc[i] = y[i] + h51 * k0[i] + h52 * k1[i] + h53 * k2[i] + h54 * k3[i]
            sys.rhs(acc, t + C5 * h, t_mid, k4)
            for i in range(m):
                acc[i] = (y[i] + h61 * k0[i] + h62 * k1[i] + h63 * k2[i]
                          + h64 * k3[i] + h65 * k4[i])
            sys.rhs(acc, t + h, t_mid, k5)
            for i in range(m):
                y_new[i] = (y[i] + h71 * k0[i] + h73 * k2[i] + h74 * k3[i]
                            + h75 * k4[i] + h76 * k5[i])
            sys.rhs(y_new, t + h, t_mid, k6)
            err = 0.0
            for i in range(n):
                er = (e1 * k0[2 * i] + e3 * k2[2 * i] + e4 * k3[2 * i]
                      + e5 * k4[2 * i] + e6 * k5[2 * i] + e7 * k6[2 * i])
                ei = (e1 * k0[2 * i + 1] + e3 * k2[2 * i + 1] + e4 * k3[2 * i + 1]
                      + e5 * k4[2 * i + 1] + e6 * k5[2 * i + 1] + e7 * k6[2 * i + 1])
                ay = sqrt(y[2 * i] * y[2 * i] + y[2 * i + 1] * y[2 * i + 1])
                an = sqrt(y_new[2 * i] * y_new[2 * i] + y_new[2 * i + 1] * y_new[2 * i + 1])
                sc = atol + rtol * fmax(ay, an)
                err += (er * er + ei * ei) / (sc * sc)
            err = sqrt(err / n)

        if err > 1.0:
            h *= fmax(0.2, 0.9 * pow(err, -0.2))
            continue
        t_new = t_stop if clipped else t + h
        factor = 10.0 if err == 0.0 else min(10.0, 0.9 * pow(err, -0.2))
        nrm2 = norm2(y_new, m)
        if nrm2 < threshold:
            lo = 0.0
            hi = 1.0
            while (hi - lo) * h > jump_tol:
                mid = 0.5 * (lo + hi)
                hermite(y, k0, y_new, k6, h, mid, m, tmp)
                if norm2(tmp, m) < threshold:
                    hi = mid
                else:
                    lo = mid
            t_jump = t + hi * h
            while s_pos < n_samp and st[s_pos] <= t_jump:
                hermite(y, k0, y_new, k6, h, (st[s_pos] - t) / h, m, tmp)
                record(samples + s_pos * n_obs, owp, n_obs, tmp, n)
                s_pos += 1
            hermite(y, k0, y_new, k6, h, hi, m, acc)
            total = 0.0
            for c in range(n_ch):
                for i in range(m):
                    cand[c * m + i] = 0.0
                csr_acc(sys.j_data, sys.j_ind, sys.j_ptr, c * n, n, 1.0, acc, cand + c * m)
                wts[c] = norm2(cand + c * m, m)
                total += wts[c]
            if upos >= ulen:
                ubuf_arr = np.ascontiguousarray(draw(BATCH), dtype=float)
                ubuf = <const double*> np.PyArray_DATA(ubuf_arr)
                ulen = ubuf_arr.shape[0]
                upos = 0
            u = ubuf[upos]
            upos += 1
            if total > 0.0:
                target = u * total
                acc_w = 0.0
                ch = n_ch - 1
                for c in range(n_ch):
                    acc_w += wts[c]
                    if acc_w >= target and wts[c] > 0.0:
                        ch = c
                        break
                nrm2 = sqrt(wts[ch])
                for i in range(m):
                    y[i] = cand[ch * m + i] / nrm2
                jump_times.append(t_jump)
                jump_channels.append(ch)
            else:
                nrm2 = sqrt(norm2(acc, m))
                for i in range(m):
                    y[i] = acc[i] / nrm2
            if upos >= ulen:
                ubuf_arr = np.ascontiguousarray(draw(BATCH), dtype=float)
                ubuf = <const double*> np.PyArray_DATA(ubuf_arr)
                ulen = ubuf_arr.shape[0]
                upos = 0
            threshold = ubuf[upos]
            upos += 1
            t = t_jump
            fsal = False
            h *= factor
            continue
        while s_pos < n_samp and st[s_pos] <= t_new:
            hermite(y, k0, y_new, k6, h, (st[s_pos] - t) / h, m, tmp)
            record(samples + s_pos * n_obs, owp, n_obs, tmp, n)
            s_pos += 1
        for i in range(m):
            y[i] = y_new[i]
            k0[i] = k6[i]
        if clipped and t_new < t_end:
            fsal = False
        t = t_new
        h *= factor

    out = work_arr[:n].copy()
    out /= sqrt(norm2(y, m))
    return jump_times, jump_channels, samples_arr[:n_samp], out
