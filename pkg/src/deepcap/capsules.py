"""Capsule primitives: squash, local dynamic routing and the capsule layers.

A capsule grid is stored as a tensor of shape ``(B, M, D, H, W)``: batch,
capsule maps, capsule dimension, then the spatial grid. Keeping the
spatial axes last lets window gathering be plain strided slicing.

Transformation weights of a convolutional capsule layer have shape
``(M, k, k, M', D', D)``: one ``D -> D'`` matrix per input map, kernel
offset and output map, with no additive bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ConfigError, DimensionError, ParameterError
from .fastroute import fused_route
from .numerics import bilinear_resize, conv2d, conv_out_side, pad2d, softmax_axis

ROUTING_ITERATIONS = 3
UPSAMPLE_MODES = ("transposed", "bilinear")
_NORM_FLOOR = 1e-12


def squash(p: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """``|p|^2 / (1 + |p|^2) * p / |p|``, with ``squash(0) = 0``."""
    sq = (p * p).sum(dim=dim, keepdim=True)
    norm = torch.sqrt(sq.clamp_min(_NORM_FLOOR * _NORM_FLOOR))
    unit = p / norm
    return (sq / (1.0 + sq)) * unit


@dataclass
class RoutingState:
    logits: torch.Tensor
    weights: torch.Tensor
    iterations: int
    history: list = field(default_factory=list)


def route(u_hat: torch.Tensor, iterations: int = ROUTING_ITERATIONS, *,
          child_dim: int = -3, parent_dim: int = -2, vec_dim: int = -1,
          record: bool = False, final_update: bool = True):
    """Dynamic routing of prediction vectors ``u_hat`` to their parents.

    ``u_hat`` holds one prediction vector per (child, parent) pair; by default
    its trailing axes are ``(children, parents, D)`` but any axis layout can
    be named. Logits start at zero on every call. Each iteration takes the
    softmax of the logits over a child's parents, forms each parent's
    weighted sum over children, squashes it, and adds the agreement
    ``u_hat . v`` to the logits.

    Returns ``(v, state)`` where ``v`` has the child axis removed. With
    ``record=True`` the routing weights of every iteration are kept in
    ``state.history``. ``final_update=False`` skips the last logit update,
    which cannot change ``v``.
    """
    if iterations < 1:
        raise ParameterError(f"routing needs at least one iteration, got {iterations}")
    nd = u_hat.dim()
    child_dim, parent_dim, vec_dim = (d % nd for d in (child_dim, parent_dim, vec_dim))
    logits = torch.zeros_like(u_hat.sum(dim=vec_dim, keepdim=True))
    history = []
    for it in range(iterations):
        weights = softmax_axis(logits, dim=parent_dim)
        if record:
            history.append(weights.squeeze(vec_dim).detach().clone())
        p = (weights * u_hat).sum(dim=child_dim, keepdim=True)
        v = squash(p, dim=vec_dim)
        if final_update or it < iterations - 1:
            logits = logits + (u_hat * v).sum(dim=vec_dim, keepdim=True)
    state = RoutingState(logits.squeeze(vec_dim), weights.squeeze(vec_dim), iterations, history)
    return v.squeeze(child_dim), state


def primary_capsules(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
                     maps: int, dim: int, stride: int, padding: int,
                     expand_weight: torch.Tensor | None = None,
                     expand_bias: torch.Tensor | None = None) -> torch.Tensor:
    """Convolution, reshape of channels into ``(maps, dim)``, then squash.

    An optional 1x1 expansion convolution follows the first one. No routing.
    """
    feats = conv2d(x, weight, bias, stride=stride, padding=padding)
    if expand_weight is not None:
        feats = conv2d(feats, expand_weight, expand_bias)
    if feats.dim() == 3:
        feats = feats.unsqueeze(0)
    b, ch, h, w = feats.shape
    if ch != maps * dim:
        raise ConfigError(f"primary conv yields {ch} channels, need maps*dim = {maps * dim}")
    return squash(feats.view(b, maps, dim, h, w), dim=2)


def capsule_weight_count(m_in: int, d_in: int, m_out: int, d_out: int, k: int) -> int:
    return m_in * m_out * k * k * d_in * d_out


def gather_predictions(u: torch.Tensor, weight: torch.Tensor, taps, out_hw: tuple[int, int],
                       stride: int = 1) -> torch.Tensor:
    """Prediction vectors for every output cell, shape ``(C, M', D', B*H'*W')``.

    ``u`` is an already padded ``(B, M, D, Hp, Wp)`` grid. Each tap
    ``(dy, dx, i, j)`` names a child position relative to the output cell
    (scaled by ``stride``) and the kernel offset ``(i, j)`` of ``weight``
    that maps it; children are ordered (map, tap).
    """
    b, m, d, hp, wp = u.shape
    m_w, k, k2, n, e, d_w = weight.shape
    if (m_w, d_w) != (m, d) or k != k2:
        raise ConfigError(f"weights for ({m_w},{d_w}) capsules applied to ({m},{d})")
    ho, wo = out_hw
    for dy, dx, _, _ in taps:
        if dy < 0 or dx < 0 or dy + stride * (ho - 1) >= hp or dx + stride * (wo - 1) >= wp:
            raise DimensionError(f"kernel window leaves the padded {hp}x{wp} grid")
    windows = torch.stack([
        u[:, :, :, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride]
        for dy, dx, _, _ in taps], dim=0)                          # (T, B, M, D, Ho, Wo)
    t = len(taps)
    windows = windows.permute(2, 0, 3, 1, 4, 5).reshape(m * t, d, b * ho * wo)
    w = torch.stack([weight[:, i, j] for _, _, i, j in taps], dim=1)  # (M, T, N, E, D)
    u_hat = torch.bmm(w.reshape(m * t, n * e, d), windows)
    return u_hat.view(m * t, n, e, b * ho * wo)


def _routed(u_hat: torch.Tensor, batch: int, out_hw: tuple[int, int], iterations: int,
            fused: bool) -> torch.Tensor:
    if fused:
        v = fused_route(u_hat, iterations)
    else:
        v, _ = route(u_hat, iterations, child_dim=0, parent_dim=1, vec_dim=2, final_update=False)
    n, e, _ = v.shape
    return v.view(n, e, batch, *out_hw).permute(2, 0, 1, 3, 4)


def conv_capsule(u: torch.Tensor, weight: torch.Tensor, stride: int = 1, padding: int = 1,
                 iterations: int = ROUTING_ITERATIONS, fused: bool = True) -> torch.Tensor:
    """Convolutional capsule layer with locally constrained routing.

    Every output cell routes the ``k x k`` window of child capsules (over
    all input maps) to its ``M'`` parents. Out-of-grid children are zero
    capsules and so contribute zero prediction vectors. ``fused`` selects
    the compiled routing kernels; ``False`` runs :func:`route`.
    """
    if u.dim() == 4:
        return conv_capsule(u.unsqueeze(0), weight, stride, padding, iterations, fused)[0]
    k = weight.shape[1]
    h, w = u.shape[-2:]
    out_hw = (conv_out_side(h, k, stride, padding), conv_out_side(w, k, stride, padding))
    if min(out_hw) < 1:
        raise DimensionError(f"kernel {k} larger than padded grid {h + 2 * padding}x{w + 2 * padding}")
    taps = [(i, j, i, j) for i in range(k) for j in range(k)]
    u_hat = gather_predictions(pad2d(u, padding), weight, taps, out_hw, stride)
    return _routed(u_hat, u.shape[0], out_hw, iterations, fused)


def transposed_taps(k: int, factor: int, residue: int):
    """Kernel rows feeding output rows ``factor*q + residue`` and their child offsets.

    Mirrors :func:`~deepcap.numerics.conv2d_transpose` with padding ``k//2``
    and output padding ``factor-1``: input row ``x`` lands on output row
    ``factor*x - k//2 + i``.
    """
    pad = k // 2
    return [((residue + pad - i) // factor, i) for i in range(k) if (residue + pad - i) % factor == 0]


def upsample_capsule(u: torch.Tensor, weight: torch.Tensor, mode: str = "transposed",
                     iterations: int = ROUTING_ITERATIONS, factor: int = 2,
                     fused: bool = True) -> torch.Tensor:
    """Multiply the grid side by ``factor`` and map ``(M, D) -> (M', D')``.

    ``transposed``: prediction vectors come from a stride-``factor``
    transposed stencil, so each output cell sees exactly the children whose
    transposed kernel footprint covers it. Output cells are processed in
    ``factor**2`` parity classes, each an ordinary local routing problem.

    ``bilinear``: every ``(map, dim)`` plane is resized bilinearly, then a
    stride-1 capsule convolution follows.
    """
    if mode not in UPSAMPLE_MODES:
        raise ParameterError(f"unknown upsample mode {mode!r}; expected one of {UPSAMPLE_MODES}")
    if u.dim() == 4:
        return upsample_capsule(u.unsqueeze(0), weight, mode, iterations, factor, fused)[0]
    k = weight.shape[1]
    b, _, _, h, w = u.shape
    if mode == "bilinear":
        return conv_capsule(bilinear_resize(u, h * factor, w * factor), weight, 1, k // 2,
                            iterations, fused)
    classes = [transposed_taps(k, factor, r) for r in range(factor)]
    offsets = [dy for cls in classes for dy, _ in cls]
    lo, hi = max(0, -min(offsets)), max(0, max(offsets))
    grid = pad2d(u, lo, hi, lo, hi)
    n, e = weight.shape[3], weight.shape[4]
    out = u.new_zeros((b, n, e, h * factor, w * factor))
    for ry, rows in enumerate(classes):
        for rx, cols in enumerate(classes):
            taps = [(dy + lo, dx + lo, i, j) for dy, i in rows for dx, j in cols]
            if not taps:
                continue          # no child reaches this parity class: zero capsules
            u_hat = gather_predictions(grid, weight, taps, (h, w))
            out[..., ry::factor, rx::factor] = _routed(u_hat, b, (h, w), iterations, fused)
    return out


def capsule_out_side(side: int, k: int, stride: int, padding: int) -> int:
    return conv_out_side(side, k, stride, padding)
