"""Numba kernels for the blocked two-pass affine scans.

Each solve runs three phases: a parallel per-chunk sequential reduce producing
one composed summary per chunk, a serial exclusive scan over the (few) chunk
summaries converting them to chunk-entry states, and a parallel per-chunk
replay writing the output states. For a fixed chunk size the result is
bit-identical regardless of how many threads execute the chunks.

The wrappers in pscan.py allocate all scratch so tests can account for it.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def diag_scan_fill(j, u, s0, chunk, Jc, uc, pref, out):
    T, D = j.shape
    nchunks = Jc.shape[0]
    for c in prange(nchunks):
        lo = c * chunk
        hi = min(lo + chunk, T)
        jr = np.ones(D)
        ur = np.zeros(D)
        for t in range(lo, hi):
            for d in range(D):
                ur[d] = j[t, d] * ur[d] + u[t, d]
                jr[d] = j[t, d] * jr[d]
        for d in range(D):
            Jc[c, d] = jr[d]
            uc[c, d] = ur[d]
    carry = s0.copy()
    for c in range(nchunks):
        for d in range(D):
            pref[c, d] = carry[d]
            carry[d] = Jc[c, d] * carry[d] + uc[c, d]
    for c in prange(nchunks):
        lo = c * chunk
        hi = min(lo + chunk, T)
        run = pref[c].copy()
        for t in range(lo, hi):
            for d in range(D):
                run[d] = j[t, d] * run[d] + u[t, d]
                out[t, d] = run[d]


@njit(parallel=True, cache=True)
def dense_scan_fill(J, u, s0, chunk, Jc, uc, pref, out):
    T = J.shape[0]
    D = J.shape[1]
    nchunks = Jc.shape[0]
    for c in prange(nchunks):
        lo = c * chunk
        hi = min(lo + chunk, T)
        M = np.eye(D)
        w = np.zeros(D)
        Mnew = np.empty((D, D))
        wnew = np.empty(D)
        for t in range(lo, hi):
            # M <- J_t @ M ; w <- J_t @ w + u_t
            for r in range(D):
                acc_w = u[t, r]
                for k in range(D):
                    acc_w += J[t, r, k] * w[k]
                wnew[r] = acc_w
                for col in range(D):
                    acc = 0.0
                    for k in range(D):
                        acc += J[t, r, k] * M[k, col]
                    Mnew[r, col] = acc
            M, Mnew = Mnew, M
            w, wnew = wnew, w
        Jc[c] = M
        uc[c] = w
    carry = s0.copy()
    nxt = np.empty(D)
    for c in range(nchunks):
        for d in range(D):
            pref[c, d] = carry[d]
        for r in range(D):
            acc = uc[c, r]
            for k in range(D):
                acc += Jc[c, r, k] * carry[k]
            nxt[r] = acc
        carry, nxt = nxt, carry
    for c in prange(nchunks):
        lo = c * chunk
        hi = min(lo + chunk, T)
        run = pref[c].copy()
        step = np.empty(D)
        for t in range(lo, hi):
            for r in range(D):
                acc = u[t, r]
                for k in range(D):
                    acc += J[t, r, k] * run[k]
                step[r] = acc
            run, step = step, run
            for d in range(D):
                out[t, d] = run[d]


@njit(parallel=True, cache=True)
def block_scan_fill(a, b, c_, d, u, s0, chunk, Ac, Bc, Cc, Dc, uc, pref, out):
    T, D = a.shape
    nchunks = Ac.shape[0]
    for c in prange(nchunks):
        lo = c * chunk
        hi = min(lo + chunk, T)
        A = np.ones(D)
        B = np.zeros(D)
        C = np.zeros(D)
        Dd = np.ones(D)
        ux = np.zeros(D)
        uv = np.zeros(D)
        for t in range(lo, hi):
            for i in range(D):
                at = a[t, i]; bt = b[t, i]; ct = c_[t, i]; dt = d[t, i]
                # element_t composed onto the running summary: 8 products
                An = at * A[i] + bt * C[i]
                Bn = at * B[i] + bt * Dd[i]
                Cn = ct * A[i] + dt * C[i]
                Dn = ct * B[i] + dt * Dd[i]
                uxn = at * ux[i] + bt * uv[i] + u[t, i]
                uvn = ct * ux[i] + dt * uv[i] + u[t, D + i]
                A[i] = An; B[i] = Bn; C[i] = Cn; Dd[i] = Dn
                ux[i] = uxn; uv[i] = uvn
        for i in range(D):
            Ac[c, i] = A[i]; Bc[c, i] = B[i]
            Cc[c, i] = C[i]; Dc[c, i] = Dd[i]
            uc[c, i] = ux[i]; uc[c, D + i] = uv[i]
    carry = s0.copy()
    for c in range(nchunks):
        for i in range(2 * D):
            pref[c, i] = carry[i]
        for i in range(D):
            x = carry[i]; v = carry[D + i]
            carry[i] = Ac[c, i] * x + Bc[c, i] * v + uc[c, i]
            carry[D + i] = Cc[c, i] * x + Dc[c, i] * v + uc[c, D + i]
    for c in prange(nchunks):
        lo = c * chunk
        hi = min(lo + chunk, T)
        run = pref[c].copy()
        for t in range(lo, hi):
            for i in range(D):
                x = run[i]; v = run[D + i]
                run[i] = a[t, i] * x + b[t, i] * v + u[t, i]
                run[D + i] = c_[t, i] * x + d[t, i] * v + u[t, D + i]
            for i in range(2 * D):
                out[t, i] = run[i]
