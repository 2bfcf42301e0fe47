# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled flow kernels; same contract and parameter layout as ``_reference``.

Work is done one point at a time with small scratch buffers, which for
n <= 10 and a few dozen hidden units beats batched numpy by a wide margin
(numpy spends its time in per-call overhead at these sizes).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, log, fabs, exp, log1p, sqrt, INFINITY, isfinite
from libc.string cimport memset, memcpy

cnp.import_array()

DEF MAXL = 16
cdef double LOG_SQRT_2PI = 0.5 * log(2.0 * 3.141592653589793)

BASE_NORMAL = 0
BASE_LOGISTIC = 1


cdef inline double fast_tanh(double a) nogil:
    # exp-based tanh; absolute error at rounding level, about 3x cheaper
    # than the libm routine (which goes through expm1)
    cdef double t = exp(-2.0 * fabs(a))
    cdef double r = (1.0 - t) / (1.0 + t)
    return r if a >= 0 else -r


cdef struct Layout:
    int n, h, l, K, S
    int woff[MAXL]
    int boff[MAXL]
    int rows[MAXL]
    int cols[MAXL]


cdef Layout make_layout(int n, int h, int l, int K) except *:
    cdef Layout L
    cdef int m, off = 0
    if l < 2 or l > MAXL:
        raise ValueError("number of sub-layers must lie in [2, %d]" % MAXL)
    L.n = n; L.h = h; L.l = l; L.K = K
    for m in range(l):
        L.rows[m] = n if m == l - 1 else h
        L.cols[m] = n if m == 0 else h
        L.woff[m] = off
        off += L.rows[m] * L.cols[m]
        L.boff[m] = off
        off += L.rows[m]
    L.S = off
    return L


cdef double lu_inplace(double* A, int n, int* piv) nogil:
    """Partial-pivot LU in place; returns log|det| (-inf when singular)."""
    cdef int i, j, k, p
    cdef double best, t, logdet = 0.0
    for k in range(n):
        p = k
        best = fabs(A[k * n + k])
        for i in range(k + 1, n):
            if fabs(A[i * n + k]) > best:
                best = fabs(A[i * n + k])
                p = i
        piv[k] = p
        if best == 0.0:
            return -INFINITY
        if p != k:
            for j in range(n):
                t = A[k * n + j]; A[k * n + j] = A[p * n + j]; A[p * n + j] = t
        logdet += log(best)
        for i in range(k + 1, n):
            A[i * n + k] /= A[k * n + k]
            t = A[i * n + k]
            for j in range(k + 1, n):
                A[i * n + j] -= t * A[k * n + j]
    return logdet


cdef void lu_inverse(const double* LU, const int* piv, int n, double* inv, double* col) nogil:
    cdef int i, j, k
    cdef double t
    for j in range(n):
        for i in range(n):
            col[i] = 1.0 if i == j else 0.0
        for k in range(n):
            if piv[k] != k:
                t = col[k]; col[k] = col[piv[k]]; col[piv[k]] = t
        for i in range(n):
            for k in range(i):
                col[i] -= LU[i * n + k] * col[k]
        for i in range(n - 1, -1, -1):
            for k in range(i + 1, n):
                col[i] -= LU[i * n + k] * col[k]
            col[i] /= LU[i * n + i]
        for i in range(n):
            inv[i * n + j] = col[i]


cdef void block_forward(const double* th, Layout* L, const double* z,
                        double* U, double* D, double* T, double* out, double* Jg,
                        bint jac) nogil:
    """One residual block: ``out = g(z)``; when ``jac`` also ``Jg = dg/dz``.

    U/D hold tanh activations and derivatives per hidden sub-layer
    (``(l-1) x h``); T holds the forward-mode products ``T_m`` (``h x n``)
    for ``m = 1 .. l-2``.
    """
    cdef int n = L.n, h = L.h, l = L.l
    cdef int m, r, c, j, rows, cols
    cdef const double* V
    cdef const double* Vr
    cdef const double* bias
    cdef const double* inp = z
    cdef const double* prev
    cdef const double* pc
    cdef const double* dp
    cdef double* dest
    cdef double* dr
    cdef double a, u, w
    for m in range(l):
        V = th + L.woff[m]
        bias = th + L.boff[m]
        rows = L.rows[m]
        cols = L.cols[m]
        if m < l - 1:
            dest = U + m * h
            dr = D + m * h
            for r in range(rows):
                Vr = V + r * cols
                a = bias[r]
                for c in range(cols):
                    a += Vr[c] * inp[c]
                u = fast_tanh(a)
                dest[r] = u
                dr[r] = 1.0 - u * u
            inp = dest
        else:
            for r in range(rows):
                Vr = V + r * cols
                a = bias[r]
                for c in range(cols):
                    a += Vr[c] * inp[c]
                out[r] = a
    if not jac:
        return
    prev = th + L.woff[0]
    for m in range(1, l):
        V = th + L.woff[m]
        rows = L.rows[m]
        dp = D + (m - 1) * h
        dest = T + m * h * n if m < l - 1 else Jg
        for r in range(rows):
            Vr = V + r * h
            dr = dest + r * n
            for j in range(n):
                dr[j] = 0.0
            for c in range(h):
                w = Vr[c] * dp[c]
                pc = prev + c * n
                for j in range(n):
                    dr[j] += w * pc[j]
        prev = dest


cdef void block_backward(const double* th, Layout* L, const double* z,
                         const double* U, const double* D, const double* T,
                         const double* Gout, const double* GJ, double* grad,
                         double* gz, double* ga, double* ga_new, double* Badj, double* Bp) nogil:
    """Accumulate ``d(<Gout, g> + <GJ, J_g>)/dparams`` into ``grad``; write d/dz to gz."""
    cdef int n = L.n, h = L.h, l = L.l
    cdef int m, r, c, j, rows, cols
    cdef const double* V
    cdef double* gV
    cdef double* gc
    cdef const double* inp
    cdef const double* prevT
    cdef const double* dp
    cdef const double* up
    cdef double v, acc, gd, gu
    cdef double* tmp
    memcpy(ga, Gout, n * sizeof(double))
    memcpy(Badj, GJ, n * n * sizeof(double))
    m = l - 1
    while m >= 0:
        V = th + L.woff[m]
        gV = grad + L.woff[m]
        gc = grad + L.boff[m]
        rows = L.rows[m]
        cols = L.cols[m]
        inp = z if m == 0 else U + (m - 1) * h
        for r in range(rows):
            gc[r] += ga[r]
            for c in range(cols):
                gV[r * cols + c] += ga[r] * inp[c]
        if m >= 1:
            prevT = th + L.woff[0] if m == 1 else T + (m - 1) * h * n
            dp = D + (m - 1) * h
            up = U + (m - 1) * h
            memset(Bp, 0, h * n * sizeof(double))
            for r in range(rows):
                for c in range(cols):
                    v = V[r * cols + c]
                    acc = 0.0
                    for j in range(n):
                        acc += Badj[r * n + j] * prevT[c * n + j]
                        Bp[c * n + j] += v * Badj[r * n + j]
                    gV[r * cols + c] += acc * dp[c]
            for c in range(h):
                gd = 0.0
                for j in range(n):
                    gd += Bp[c * n + j] * prevT[c * n + j]
                    Badj[c * n + j] = dp[c] * Bp[c * n + j]
                gu = 0.0
                for r in range(rows):
                    gu += V[r * cols + c] * ga[r]
                ga_new[c] = gu * dp[c] - 2.0 * gd * up[c] * dp[c]
            tmp = ga; ga = ga_new; ga_new = tmp
        else:
            for r in range(rows):
                for c in range(n):
                    gV[r * n + c] += Badj[r * n + c]
            for c in range(n):
                acc = 0.0
                for r in range(rows):
                    acc += V[r * n + c] * ga[r]
                gz[c] = acc
        m -= 1


cdef inline void matmul_nn(const double* A, const double* B, double* C, int n) nogil:
    cdef int i, j, k
    cdef double s
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += A[i * n + k] * B[k * n + j]
            C[i * n + j] = s


def forward(double[::1] theta, double[::1] shift, double[::1] scale, X,
            int n, int h, int l, int K, bint want_jac=True):
    """Push ``X`` through the flow; returns ``(Y, logdet, P or None)``."""
    cdef Layout L = make_layout(n, h, l, K)
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t B = Xv.shape[0]
    if Xv.shape[1] != n:
        raise ValueError("X has the wrong number of columns")
    if theta.shape[0] != K * L.S:
        raise ValueError("theta has the wrong size")
    Y_arr = np.empty((B, n))
    ld_arr = np.empty(B)
    P_arr = np.empty((B, n, n)) if want_jac else np.empty((1, n, n))
    cdef double[:, ::1] Y = Y_arr
    cdef double[::1] ld = ld_arr
    cdef double[:, :, ::1] Pv = P_arr
    cdef double[::1] z = np.empty(n)
    cdef double[::1] out = np.empty(n)
    cdef double[::1] U = np.empty(max(l - 1, 1) * h)
    cdef double[::1] D = np.empty(max(l - 1, 1) * h)
    cdef double[::1] T = np.empty(l * h * n)
    cdef double[::1] Jg = np.empty(n * n)
    cdef double[::1] Jk = np.empty(n * n)
    cdef double[::1] P = np.empty(n * n)
    cdef double[::1] Pn = np.empty(n * n)
    cdef int[::1] piv = np.empty(n, dtype=np.intc)
    cdef Py_ssize_t b
    cdef int k, i, j
    cdef double logdet, affine = 0.0
    cdef const double* th = &theta[0]
    for i in range(n):
        affine -= log(scale[i])
    with nogil:
        for b in range(B):
            for i in range(n):
                z[i] = (Xv[b, i] - shift[i]) / scale[i]
            if want_jac:
                for i in range(n):
                    for j in range(n):
                        P[i * n + j] = (1.0 / scale[i]) if i == j else 0.0
            logdet = affine
            for k in range(K):
                block_forward(th + k * L.S, &L, &z[0], &U[0], &D[0], &T[0], &out[0], &Jg[0], True)
                for i in range(n):
                    Jg[i * n + i] += 1.0
                if want_jac:
                    matmul_nn(&Jg[0], &P[0], &Pn[0], n)
                    memcpy(&P[0], &Pn[0], n * n * sizeof(double))
                logdet += lu_inplace(&Jg[0], n, &piv[0])
                for i in range(n):
                    z[i] += out[i]
            for i in range(n):
                Y[b, i] = z[i]
            ld[b] = logdet
            if want_jac:
                for i in range(n):
                    for j in range(n):
                        Pv[b, i, j] = P[i * n + j]
    return Y_arr, ld_arr, (P_arr if want_jac else None)


def objective_grad(double[::1] theta, double[::1] shift, double[::1] scale, X,
                   int n, int h, int l, int K, double lam, int base_kind):
    """Batch-mean ``ll - lam * pen`` and its gradient; see ``_reference``."""
    cdef Layout L = make_layout(n, h, l, K)
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t B = Xv.shape[0]
    if Xv.shape[1] != n:
        raise ValueError("X has the wrong number of columns")
    if theta.shape[0] != K * L.S:
        raise ValueError("theta has the wrong size")
    cdef int H = max(h, n)
    grad_arr = np.zeros(K * L.S)
    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] zs = np.empty((K + 1, n))
    cdef double[:, ::1] Us = np.empty((K, max(l - 1, 1) * h))
    cdef double[:, ::1] Ds = np.empty((K, max(l - 1, 1) * h))
    cdef double[:, ::1] Ts = np.empty((K, l * h * n))
    cdef double[:, ::1] Js = np.empty((K, n * n))
    cdef double[:, ::1] Ps = np.empty((K + 1, n * n))
    cdef double[::1] out = np.empty(n)
    cdef double[::1] Jg = np.empty(n * n)
    cdef double[::1] LU = np.empty(n * n)
    cdef double[::1] M = np.empty(n * n)
    cdef double[::1] GP = np.empty(n * n)
    cdef double[::1] GP2 = np.empty(n * n)
    cdef double[::1] GJ = np.empty(n * n)
    cdef double[::1] cn2 = np.empty(n)
    cdef double[::1] Gz = np.empty(n)
    cdef double[::1] gz = np.empty(n)
    cdef double[::1] col = np.empty(n)
    cdef double[::1] ga = np.empty(H)
    cdef double[::1] ga_new = np.empty(H)
    cdef double[::1] Badj = np.empty(H * n)
    cdef double[::1] Bp = np.empty(H * n)
    cdef int[::1] piv = np.empty(n, dtype=np.intc)
    cdef const double* th = &theta[0]
    cdef Py_ssize_t b
    cdef int k, i, j, q
    cdef double logdet, affine = 0.0, y, ay, logp, pen, s, t
    cdef double sum_obj = 0.0, sum_ll = 0.0, sum_pen = 0.0
    for i in range(n):
        affine -= log(scale[i])
    with nogil:
        for b in range(B):
            for i in range(n):
                zs[0, i] = (Xv[b, i] - shift[i]) / scale[i]
                for j in range(n):
                    Ps[0, i * n + j] = (1.0 / scale[i]) if i == j else 0.0
            logdet = affine
            for k in range(K):
                block_forward(th + k * L.S, &L, &zs[k, 0], &Us[k, 0], &Ds[k, 0], &Ts[k, 0],
                              &out[0], &Js[k, 0], True)
                for i in range(n):
                    Js[k, i * n + i] += 1.0
                    zs[k + 1, i] = zs[k, i] + out[i]
                matmul_nn(&Js[k, 0], &Ps[k, 0], &Ps[k + 1, 0], n)
                memcpy(&LU[0], &Js[k, 0], n * n * sizeof(double))
                logdet += lu_inplace(&LU[0], n, &piv[0])
            logp = 0.0
            for i in range(n):
                y = zs[K, i]
                if base_kind == 0:
                    logp += -0.5 * y * y - LOG_SQRT_2PI
                    Gz[i] = -y
                else:
                    ay = fabs(y)
                    logp += -ay - 2.0 * log1p(exp(-ay))
                    Gz[i] = -tanh(0.5 * y)
            memcpy(&LU[0], &Ps[K, 0], n * n * sizeof(double))
            lu_inplace(&LU[0], n, &piv[0])
            lu_inverse(&LU[0], &piv[0], n, &M[0], &col[0])
            pen = logdet
            for j in range(n):
                s = 0.0
                for i in range(n):
                    s += M[i * n + j] * M[i * n + j]
                cn2[j] = s
                pen += 0.5 * log(s)
            sum_ll += logp + logdet
            sum_pen += pen
            sum_obj += logp + logdet - lam * pen
            # GP = (1 - lam) M^T + lam M^T (M diag(1/cn2)) M^T
            for i in range(n):
                for j in range(n):
                    s = 0.0
                    for q in range(n):
                        s += M[q * n + i] * M[q * n + j] / cn2[j]
                    GP2[i * n + j] = s      # (M^T M diag(1/cn2))_{ij}
            for i in range(n):
                for j in range(n):
                    s = 0.0
                    for q in range(n):
                        s += GP2[i * n + q] * M[j * n + q]
                    GP[i * n + j] = (1.0 - lam) * M[j * n + i] + lam * s
            k = K - 1
            while k >= 0:
                # GJ = GP P_k^T ; GP <- J_k^T GP
                for i in range(n):
                    for j in range(n):
                        s = 0.0
                        t = 0.0
                        for q in range(n):
                            s += GP[i * n + q] * Ps[k, j * n + q]
                            t += Js[k, q * n + i] * GP[q * n + j]
                        GJ[i * n + j] = s
                        GP2[i * n + j] = t
                memcpy(&GP[0], &GP2[0], n * n * sizeof(double))
                block_backward(th + k * L.S, &L, &zs[k, 0], &Us[k, 0], &Ds[k, 0], &Ts[k, 0],
                               &Gz[0], &GJ[0], &grad[0] + k * L.S, &gz[0],
                               &ga[0], &ga_new[0], &Badj[0], &Bp[0])
                for i in range(n):
                    Gz[i] += gz[i]
                k -= 1
    grad_arr /= B
    return sum_obj / B, sum_ll / B, sum_pen / B, grad_arr


def spectral_normalize(double[::1] theta, double[::1] sn_vectors, int n, int h, int l, int K,
                       double coeff, int power_iters):
    """Warm-started power iteration per matrix; rescale when above ``coeff``."""
    cdef Layout L = make_layout(n, h, l, K)
    cdef int stride = 0, m, k, it, r, c, voff
    for m in range(l):
        stride += L.cols[m]
    if sn_vectors.shape[0] != K * stride:
        raise ValueError("sn_vectors has the wrong size")
    sig_arr = np.zeros((K, l))
    cdef double[:, ::1] sig = sig_arr
    cdef double[::1] u = np.empty(max(h, n))
    cdef double* W
    cdef double* v
    cdef double s, nrm, f
    with nogil:
        for k in range(K):
            voff = k * stride
            for m in range(l):
                W = &theta[0] + k * L.S + L.woff[m]
                v = &sn_vectors[0] + voff
                nrm = 0.0
                for c in range(L.cols[m]):
                    nrm += v[c] * v[c]
                nrm = sqrt(nrm) if nrm > 0 else 1.0
                for c in range(L.cols[m]):
                    v[c] /= nrm
                for it in range(power_iters):
                    nrm = 0.0
                    for r in range(L.rows[m]):
                        s = 0.0
                        for c in range(L.cols[m]):
                            s += W[r * L.cols[m] + c] * v[c]
                        u[r] = s
                        nrm += s * s
                    nrm = sqrt(nrm) if nrm > 1e-300 else 1e-300
                    for r in range(L.rows[m]):
                        u[r] /= nrm
                    nrm = 0.0
                    for c in range(L.cols[m]):
                        s = 0.0
                        for r in range(L.rows[m]):
                            s += W[r * L.cols[m] + c] * u[r]
                        v[c] = s
                        nrm += s * s
                    nrm = sqrt(nrm) if nrm > 1e-300 else 1e-300
                    for c in range(L.cols[m]):
                        v[c] /= nrm
                nrm = 0.0
                for r in range(L.rows[m]):
                    s = 0.0
                    for c in range(L.cols[m]):
                        s += W[r * L.cols[m] + c] * v[c]
                    nrm += s * s
                nrm = sqrt(nrm)
                sig[k, m] = nrm
                if nrm > coeff:
                    f = coeff / nrm
                    for r in range(L.rows[m] * L.cols[m]):
                        W[r] *= f
                voff += L.cols[m]
    return sig_arr
