"""Numeric kernels shared by every layer.

All kernels take and return ``torch`` tensors so gradients flow through
autograd; the arithmetic itself is written out here rather than delegated
to ``torch.nn.functional`` so that each output element is accumulated in
a fixed, documented order. Images are ``(C, H, W)`` or batched
``(B, C, H, W)``.

Convolution accumulates over ``(in_channel, row, col)`` of the kernel in
that order, starting from zero, and adds the bias last. The brute-force
oracle in the test-suite uses the same order, so both agree bit for bit
at 64-bit precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import DimensionError, NumericError, ParameterError

FD_EPS = 1e-4


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise DimensionError(f"expected (C,H,W) or (B,C,H,W), got shape {tuple(x.shape)}")
    return x, False


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite values in {what}")


def pad2d(x: torch.Tensor, top: int, bottom: int | None = None,
          left: int | None = None, right: int | None = None) -> torch.Tensor:
    """Zero-pad the two trailing axes."""
    bottom = top if bottom is None else bottom
    left = top if left is None else left
    right = left if right is None else right
    if top == bottom == left == right == 0:
        return x
    shape = list(x.shape)
    shape[-2] += top + bottom
    shape[-1] += left + right
    out = x.new_zeros(shape)
    out[..., top:top + x.shape[-2], left:left + x.shape[-1]] = x
    return out


def conv_out_side(side: int, k: int, stride: int, padding: int) -> int:
    return (side + 2 * padding - k) // stride + 1


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlate ``x`` with ``weight`` of shape ``(O, C, k, k)``."""
    x, squeeze = _batched(x)
    if stride < 1 or padding < 0:
        raise ParameterError(f"bad stride/padding {stride}/{padding}")
    out_ch, in_ch, kh, kw = weight.shape
    if in_ch != x.shape[1]:
        raise DimensionError(f"kernel expects {in_ch} input channels, got {x.shape[1]}")
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    _check_finite(x, "conv2d input")

    xp = pad2d(x, padding)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = x.new_zeros((x.shape[0], out_ch, ho, wo))
    for c in range(in_ch):
        plane = xp[:, c:c + 1]
        for i in range(kh):
            for j in range(kw):
                window = plane[:, :, i:i + stride * (ho - 1) + 1:stride,
                               j:j + stride * (wo - 1) + 1:stride]
                out = out + weight[:, c, i, j].view(1, out_ch, 1, 1) * window
    if bias is not None:
        out = out + bias.view(1, out_ch, 1, 1)
    return out[0] if squeeze else out


def conv2d_transpose(y: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> torch.Tensor:
    """Adjoint of :func:`conv2d` for the same ``(O, C, k, k)`` kernels.

    Maps an ``O``-channel grid back to ``C`` channels; ``bias`` has one entry
    per output (``C``) channel. ``output_padding`` extends the bottom/right
    edge so a stride-2 layer can exactly double a grid.
    """
    y, squeeze = _batched(y)
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise ParameterError(f"bad stride/padding/output_padding {stride}/{padding}/{output_padding}")
    out_ch, in_ch, kh, kw = weight.shape
    if out_ch != y.shape[1]:
        raise DimensionError(f"kernel expects {out_ch} input channels, got {y.shape[1]}")
    _check_finite(y, "conv2d_transpose input")

    hi, wi = y.shape[2], y.shape[3]
    hp = (hi - 1) * stride + kh + output_padding
    wp = (wi - 1) * stride + kw + output_padding
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise DimensionError("padding removes the whole transposed output")
    full = y.new_zeros((y.shape[0], in_ch, hp, wp))
    for o in range(out_ch):
        plane = y[:, o:o + 1]
        for i in range(kh):
            for j in range(kw):
                full[:, :, i:i + stride * (hi - 1) + 1:stride,
                     j:j + stride * (wi - 1) + 1:stride] += weight[o, :, i, j].view(1, in_ch, 1, 1) * plane
    out = full[:, :, padding:hp - padding, padding:wp - padding]
    if bias is not None:
        out = out + bias.view(1, in_ch, 1, 1)
    return out[0] if squeeze else out


def interp_matrix(n_in: int, n_out: int, dtype=torch.float64) -> torch.Tensor:
    """Corner-aligned linear interpolation weights, shape ``(n_out, n_in)``."""
    mat = torch.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        i0 = min(int(math.floor(src)), n_in - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        if frac > 0.0:
            mat[i, i0 + 1] += frac
    return mat


def bilinear_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize the two trailing axes with corner-aligned bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be positive, got {out_h}x{out_w}")
    if x.dim() < 2:
        raise DimensionError("bilinear_resize needs at least two axes")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    return torch.matmul(torch.matmul(ry, x), rx.T)


def gaussian_kernel2d(k: int, sigma: float) -> torch.Tensor:
    """Normalised ``k x k`` Gaussian, returned as a ``(1, 1, k, k)`` float64 stack."""
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"kernel side must be odd and positive, got {k}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = k // 2
    d = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return (g / g.sum()).view(1, 1, k, k)


def gaussian_blur(x: torch.Tensor, k: int, sigma: float) -> torch.Tensor:
    """Blur every channel of a ``(B, C, H, W)`` grid independently, size preserved."""
    x, squeeze = _batched(x)
    b, c, h, w = x.shape
    kern = gaussian_kernel2d(k, sigma).to(x.dtype)
    out = conv2d(x.reshape(b * c, 1, h, w), kern, stride=1, padding=k // 2).reshape(b, c, h, w)
    return out[0] if squeeze else out


def softmax_axis(values: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = values - values.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


@dataclass
class GradReport:
    max_rel_error: float
    worst_coordinate: tuple
    n_checked: int = 0


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               eps: float = FD_EPS, max_coords: int | None = None, seed: int = 0) -> GradReport:
    """Compare autograd gradients of the scalar ``fn(*inputs)`` with central differences.

    Every input must be a float tensor; gradients are taken w.r.t. all of
    them. ``max_coords`` subsamples coordinates per input (seeded) when the
    full sweep would be too slow. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g.detach() for g, t in zip(analytic, leaves)]
    for g in analytic:
        _check_finite(g, "analytic gradient")

    gen = torch.Generator().manual_seed(seed)
    worst, where, count = 0.0, (), 0
    with torch.no_grad():
        probes = [t.detach().clone() for t in leaves]
        for idx, (probe, grad) in enumerate(zip(probes, analytic)):
            flat = probe.view(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = torch.randperm(flat.numel(), generator=gen)[:max_coords].tolist()
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                f_plus = fn(*probes).item()
                flat[c] = orig - eps
                f_minus = fn(*probes).item()
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = grad.view(-1)[c].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                count += 1
                if rel > worst or not where:
                    worst = rel
                    where = (idx, *(int(v) for v in torch.unravel_index(torch.tensor(c), probe.shape)))
    return GradReport(worst, where, count)
