"""Fused routing kernels used inside the capsule layers.

Same arithmetic as :func:`deepcap.capsules.route` (logits start at zero,
softmax over parents, weighted sum over children, squash, agreement
update) but compiled with numba and with a hand-written backward pass, so
the large prediction tensor is streamed a handful of times instead of
being copied by every elementwise op.

Prediction layout is ``(C, N, E, P)``: children, parents, parent capsule
dimension, flattened cells. ``P`` is contiguous.
"""
from __future__ import annotations

import numpy as np
import torch
from numba import njit

_FLOOR_SQ = 1e-24


@njit(cache=True)
def _squash_into(p, v, sq):
    n_par, dim, cells = p.shape
    for n in range(n_par):
        for q in range(cells):
            sq[n, q] = 0.0
        for e in range(dim):
            for q in range(cells):
                sq[n, q] += p[n, e, q] * p[n, e, q]
        for q in range(cells):
            s = sq[n, q]
            norm = np.sqrt(max(s, _FLOOR_SQ))
            sq[n, q] = s / (1.0 + s) / norm
        for e in range(dim):
            for q in range(cells):
                v[n, e, q] = p[n, e, q] * sq[n, q]


@njit(cache=True)
def _forward(uh, iterations, ps, cs, vs):
    n_child, n_par, dim, cells = uh.shape
    logits = np.zeros((n_child, n_par, cells), uh.dtype)
    scratch = np.empty((n_par, cells), uh.dtype)
    colmax = np.empty(cells, uh.dtype)
    colsum = np.empty(cells, uh.dtype)
    for r in range(iterations):
        c_r = cs[r]
        if r == 0:
            c_r[:] = 1.0 / n_par
        else:
            v_prev = vs[r - 1]
            for c in range(n_child):
                for n in range(n_par):
                    for e in range(dim):
                        for q in range(cells):
                            logits[c, n, q] += uh[c, n, e, q] * v_prev[n, e, q]
            for c in range(n_child):
                for q in range(cells):
                    colmax[q] = logits[c, 0, q]
                for n in range(1, n_par):
                    for q in range(cells):
                        if logits[c, n, q] > colmax[q]:
                            colmax[q] = logits[c, n, q]
                for q in range(cells):
                    colsum[q] = 0.0
                for n in range(n_par):
                    for q in range(cells):
                        x = np.exp(logits[c, n, q] - colmax[q])
                        c_r[c, n, q] = x
                        colsum[q] += x
                for n in range(n_par):
                    for q in range(cells):
                        c_r[c, n, q] /= colsum[q]
        p_r = ps[r]
        p_r[:] = 0.0
        for c in range(n_child):
            for n in range(n_par):
                for e in range(dim):
                    for q in range(cells):
                        p_r[n, e, q] += c_r[c, n, q] * uh[c, n, e, q]
        _squash_into(p_r, vs[r], scratch)


@njit(cache=True)
def _squash_backward(p, gv, gp):
    n_par, dim, cells = p.shape
    sq = np.zeros(cells, p.dtype)
    dot = np.zeros(cells, p.dtype)
    for n in range(n_par):
        sq[:] = 0.0
        dot[:] = 0.0
        for e in range(dim):
            for q in range(cells):
                sq[q] += p[n, e, q] * p[n, e, q]
                dot[q] += p[n, e, q] * gv[n, e, q]
        for q in range(cells):
            s = sq[q]
            if s > _FLOOR_SQ:
                root = np.sqrt(s)
                f = root / (1.0 + s)
                dfds = (1.0 - s) / (2.0 * root * (1.0 + s) * (1.0 + s))
            else:
                floor = np.sqrt(_FLOOR_SQ)
                f = s / ((1.0 + s) * floor)
                dfds = 1.0 / ((1.0 + s) * (1.0 + s) * floor)
            sq[q] = f
            dot[q] = 2.0 * dfds * dot[q]
        for e in range(dim):
            for q in range(cells):
                gp[n, e, q] = sq[q] * gv[n, e, q] + dot[q] * p[n, e, q]


@njit(cache=True)
def _backward(uh, iterations, ps, cs, vs, gv_out):
    n_child, n_par, dim, cells = uh.shape
    acc = np.zeros((n_child, n_par, cells), uh.dtype)
    accs = np.zeros((iterations, n_child, n_par, cells), uh.dtype)
    gps = np.empty((iterations, n_par, dim, cells), uh.dtype)
    gv = np.empty((n_par, dim, cells), uh.dtype)
    gc = np.empty((n_par, cells), uh.dtype)
    mean = np.empty(cells, uh.dtype)
    for r in range(iterations - 1, -1, -1):
        if r == iterations - 1:
            gv[:] = gv_out
        else:
            accs[r] = acc
            gv[:] = 0.0
            for c in range(n_child):
                for n in range(n_par):
                    for e in range(dim):
                        for q in range(cells):
                            gv[n, e, q] += acc[c, n, q] * uh[c, n, e, q]
        _squash_backward(ps[r], gv, gps[r])
        if r >= 1:
            c_r = cs[r]
            g_r = gps[r]
            for c in range(n_child):
                gc[:] = 0.0
                for n in range(n_par):
                    for e in range(dim):
                        for q in range(cells):
                            gc[n, q] += uh[c, n, e, q] * g_r[n, e, q]
                mean[:] = 0.0
                for n in range(n_par):
                    for q in range(cells):
                        mean[q] += c_r[c, n, q] * gc[n, q]
                for n in range(n_par):
                    for q in range(cells):
                        acc[c, n, q] += c_r[c, n, q] * (gc[n, q] - mean[q])
    grad = np.zeros_like(uh)
    for c in range(n_child):
        for n in range(n_par):
            for e in range(dim):
                row = grad[c, n, e]
                for r in range(iterations):
                    for q in range(cells):
                        row[q] += cs[r, c, n, q] * gps[r, n, e, q]
                for r in range(iterations - 1):
                    for q in range(cells):
                        row[q] += accs[r, c, n, q] * vs[r, n, e, q]
    return grad


def routing_forward(uh: np.ndarray, iterations: int):
    n_child, n_par, dim, cells = uh.shape
    ps = np.empty((iterations, n_par, dim, cells), uh.dtype)
    vs = np.empty_like(ps)
    cs = np.empty((iterations, n_child, n_par, cells), uh.dtype)
    _forward(uh, iterations, ps, cs, vs)
    return ps, cs, vs


class FusedRouting(torch.autograd.Function):
    """Autograd wrapper: ``(C, N, E, P)`` predictions -> ``(N, E, P)`` capsules."""

    @staticmethod
    def forward(ctx, u_hat, iterations):
        uh = u_hat.detach().contiguous().numpy()
        ps, cs, vs = routing_forward(uh, iterations)
        if u_hat.requires_grad:
            ctx.stash = (uh, ps, cs, vs, iterations)
        return torch.from_numpy(vs[-1].copy())

    @staticmethod
    def backward(ctx, grad_v):
        uh, ps, cs, vs, iterations = ctx.stash
        del ctx.stash
        gv = grad_v.detach().contiguous().numpy()
        return torch.from_numpy(_backward(uh, iterations, ps, cs, vs, gv)), None


def fused_route(u_hat: torch.Tensor, iterations: int) -> torch.Tensor:
    return FusedRouting.apply(u_hat, iterations)
