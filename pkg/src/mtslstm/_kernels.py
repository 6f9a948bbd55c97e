"""Fused elementwise LSTM kernels.

Transcendentals stay in ``numpy.exp`` (SIMD); these loops only do the
arithmetic around them so each step touches its buffers once. Gate blocks are
laid out ``[forget | input | output | cell]`` along the last axis. No
fast-math: results are IEEE-reproducible for a given input.
"""
import numba


@numba.njit(cache=True)
def negate_preactivation(rec, xproj, out):
    """out = -(rec + xproj), doubled on the cell block so one exp serves tanh."""
    nb, g4 = rec.shape
    h3 = 3 * (g4 // 4)
    for b in range(nb):
        for j in range(h3):
            out[b, j] = -(rec[b, j] + xproj[b, j])
        for j in range(h3, g4):
            out[b, j] = -2.0 * (rec[b, j] + xproj[b, j])


@numba.njit(cache=True)
def cell_forward(expz, c_prev, gates, c, neg2c):
    """Turn exp(-z) into gate activations and update the cell state."""
    nb, g4 = expz.shape
    nh = g4 // 4
    for b in range(nb):
        for j in range(3 * nh):
            gates[b, j] = 1.0 / (1.0 + expz[b, j])
        for j in range(3 * nh, g4):
            gates[b, j] = 2.0 / (1.0 + expz[b, j]) - 1.0
        for j in range(nh):
            cc = gates[b, j] * c_prev[b, j] + gates[b, nh + j] * gates[b, 3 * nh + j]
            c[b, j] = cc
            neg2c[b, j] = -2.0 * cc


@numba.njit(cache=True)
def hidden_forward(exp2c, gates, tanh_c, h):
    nb, nh = h.shape
    for b in range(nb):
        for j in range(nh):
            t = 2.0 / (1.0 + exp2c[b, j]) - 1.0
            tanh_c[b, j] = t
            h[b, j] = gates[b, 2 * nh + j] * t


@numba.njit(cache=True)
def cell_backward(gates, c_prev, tanh_c, dh, dc, dz):
    """Gate pre-activation gradients of one step; ``dc`` becomes dL/dc_{t-1}."""
    nb, nh = dh.shape
    for b in range(nb):
        for j in range(nh):
            f = gates[b, j]
            i = gates[b, nh + j]
            o = gates[b, 2 * nh + j]
            g = gates[b, 3 * nh + j]
            t = tanh_c[b, j]
            d = dc[b, j] + dh[b, j] * o * (1.0 - t * t)
            dz[b, j] = d * c_prev[b, j] * f * (1.0 - f)
            dz[b, nh + j] = d * g * i * (1.0 - i)
            dz[b, 2 * nh + j] = dh[b, j] * t * o * (1.0 - o)
            dz[b, 3 * nh + j] = d * i * (1.0 - g * g)
            dc[b, j] = d * f
