"""Synthetic IVOCT-like pullbacks with exact lumen masks.

Each frame is a 300x300 Cartesian image: a dark lumen bounded by a smooth
star-shaped contour, a bright vessel wall that fades into a tissue floor,
multiplicative speckle and a guidewire shadow. Optional artifacts are blood
haze, light fall-off, stent struts and a side-branch opening. Masks always
cover the parent lumen only.

Pullback-level geometry comes from ``seed``; each frame's noise and
artifact draws come from a generator keyed by ``(seed, frame_index)``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .preprocess import FRAME_SIDE, ManifestRecord, Pullback, write_gray, write_manifest

LUMEN_LEVEL = 0.05
TISSUE_LEVEL = 0.3
WALL_PEAK = 0.6
MASK_THRESHOLD = 0.175   # between the lumen level and the tissue floor


@dataclass
class PhantomSpec:
    n_frames: int = 64
    side: int = FRAME_SIDE
    base_radius: float = 55.0
    radius_swing: float = 0.15          # relative amplitude of the slow radius change
    radius_period: float = 48.0         # frames
    shape_harmonics: float = 0.06       # relative amplitude of contour lobes
    center_drift: float = 12.0          # pixels
    wall_scale: float = 12.0            # wall brightness decay length, pixels
    shadow_width_deg: float = 14.0
    p_blood: float = 0.114
    p_light: float = 0.114
    p_stent: float = 0.231
    p_bifurcation: float = 0.1
    noise: float = 0.3
    frame_spacing_um: float = 200.0
    seed: int = 0
    pullback_id: str = "pb000"

    def validate(self) -> None:
        for name in ("p_blood", "p_light", "p_stent", "p_bifurcation"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.n_frames < 1:
            raise ConfigError("n_frames must be positive")
        if not 0 <= self.radius_swing < 1 or not 0 <= self.shape_harmonics < 0.5:
            raise ConfigError("radius_swing must be in [0, 1) and shape_harmonics in [0, 0.5)")
        reach = (self.base_radius * (1 + self.radius_swing) * (1 + 2 * self.shape_harmonics)
                 + self.center_drift + 2)
        if reach > self.side / 2:
            raise ConfigError(f"lumen reaches {reach:.1f} px from the centre, frame half-side is {self.side / 2}")


@dataclass
class PhantomPullback:
    pullback_id: str
    frames: list            # uint8 (side, side)
    masks: list             # uint8 0/1
    labels: list            # per frame: set of artifact names
    frame_spacing_um: float
    spec: PhantomSpec | None = None

    def to_pullback(self) -> Pullback:
        return Pullback(self.pullback_id, self.frame_spacing_um,
                        [f.astype(np.float64) / 255.0 for f in self.frames],
                        [m.copy() for m in self.masks])


@dataclass
class FrameGeometry:
    cx: float
    cy: float
    radius: float
    lobes: np.ndarray        # (n, 3): harmonic order, relative amplitude, phase
    shadow_angle: float


def _segment(rng: np.random.Generator, n: int, fraction: float) -> set[int]:
    length = int(round(fraction * n))
    if length <= 0:
        return set()
    start = int(rng.integers(0, n - length + 1))
    return set(range(start, start + length))


def pullback_geometry(spec: PhantomSpec) -> tuple[list[FrameGeometry], dict]:
    """Smooth per-frame lumen geometry and the frame segments holding stents / branches."""
    rng = np.random.default_rng([spec.seed, 0])
    phase_r, phase_x, phase_y, phase_g = rng.uniform(0, 2 * math.pi, 4)
    orders = np.array([2.0, 3.0, 4.0])
    amps = rng.uniform(0.3, 1.0, 3) * spec.shape_harmonics / np.array([1.0, 1.5, 2.0])
    lobe_phase = rng.uniform(0, 2 * math.pi, 3)
    lobe_drift = rng.uniform(-0.05, 0.05, 3)
    shadow0 = rng.uniform(0, 2 * math.pi)
    c = spec.side / 2.0 - 0.5
    frames = []
    for z in range(spec.n_frames):
        t = 2 * math.pi * z / spec.radius_period
        radius = spec.base_radius * (1 + spec.radius_swing * math.sin(t + phase_r))
        cx = c + spec.center_drift * math.sin(0.7 * t + phase_x)
        cy = c + spec.center_drift * math.cos(0.5 * t + phase_y)
        lobes = np.stack([orders, amps, lobe_phase + lobe_drift * z], axis=1)
        shadow = shadow0 + 0.3 * math.sin(0.4 * t + phase_g)
        frames.append(FrameGeometry(cx, cy, radius, lobes, shadow))
    segments = {
        "stent": _segment(rng, spec.n_frames, spec.p_stent),
        "bifurcation": _segment(rng, spec.n_frames, spec.p_bifurcation),
        "branch_angle": float(rng.uniform(0, 2 * math.pi)),
    }
    return frames, segments


def _polar_grid(geo: FrameGeometry, side: int):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - geo.cx, yy - geo.cy
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def contour_radius(geo: FrameGeometry, theta: np.ndarray) -> np.ndarray:
    r = np.ones_like(theta)
    for order, amp, phase in geo.lobes:
        r = r + amp * np.cos(order * theta + phase)
    return geo.radius * r


def lumen_mask(geo: FrameGeometry, side: int) -> np.ndarray:
    """Pixels strictly inside the contour; star-shaped around the centre."""
    rho, theta = _polar_grid(geo, side)
    inside = rho < contour_radius(geo, theta)
    labels, count = ndimage.label(inside)          # 4-connectivity
    if count > 1:
        keep = labels[int(round(geo.cy)), int(round(geo.cx))]
        inside = labels == keep
    return inside.astype(np.uint8)


def render_clean(geo: FrameGeometry, side: int, wall_scale: float = 12.0,
                 mask: np.ndarray | None = None) -> np.ndarray:
    """Noise-free, artifact-free intensities; thresholding at ``MASK_THRESHOLD`` gives the mask."""
    if mask is None:
        mask = lumen_mask(geo, side)
    rho, theta = _polar_grid(geo, side)
    depth = np.maximum(rho - contour_radius(geo, theta), 0.0)
    wall = TISSUE_LEVEL + WALL_PEAK * np.exp(-depth / wall_scale)
    return np.where(mask > 0, LUMEN_LEVEL, wall)


def _angle_gap(theta: np.ndarray, centre: float) -> np.ndarray:
    return np.abs(np.angle(np.exp(1j * (theta - centre))))


def render_frame(spec: PhantomSpec, geo: FrameGeometry, z: int, segments: dict,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, set]:
    side = spec.side
    mask = lumen_mask(geo, side)
    rho, theta = _polar_grid(geo, side)
    contour = contour_radius(geo, theta)
    depth = np.maximum(rho - contour, 0.0)
    img = np.where(mask > 0, LUMEN_LEVEL, TISSUE_LEVEL + WALL_PEAK * np.exp(-depth / spec.wall_scale))
    labels = set()

    if z in segments["bifurcation"]:
        # Side branch: a dark opening through the wall; the mask keeps the parent lumen.
        ang = segments["branch_angle"]
        branch_r = 0.45 * geo.radius
        bx = geo.cx + math.cos(ang) * geo.radius * 1.25
        by = geo.cy + math.sin(ang) * geo.radius * 1.25
        yy, xx = np.mgrid[0:side, 0:side]
        opening = (np.hypot(xx - bx, yy - by) < branch_r) & (mask == 0)
        img = np.where(opening, LUMEN_LEVEL + 0.05, img)
        labels.add("bifurcation")
    if z in segments["stent"]:
        n_struts = int(rng.integers(8, 13))
        angles = np.sort(rng.uniform(0, 2 * math.pi, n_struts))
        yy, xx = np.mgrid[0:side, 0:side]
        for a in angles:
            r_edge = float(contour_radius(geo, np.array([a]))[0]) + 3.0
            sx, sy = geo.cx + r_edge * math.cos(a), geo.cy + r_edge * math.sin(a)
            strut = np.hypot(xx - sx, yy - sy) < 2.5
            shadow = (_angle_gap(theta, a) < 2.0 / r_edge) & (rho > r_edge + 2.5)
            img = np.where(shadow, img * 0.2, img)
            img = np.where(strut & (mask == 0), 1.0, img)
        labels.add("stent")
    if rng.random() < spec.p_blood:
        haze = ndimage.gaussian_filter(rng.random((side, side)), 6.0)
        haze = (haze - haze.min()) / max(float(np.ptp(haze)), 1e-9)
        img = np.where(mask > 0, img + 0.12 * haze, img)
        labels.add("blood")
    if rng.random() < spec.p_light:
        centre = rng.uniform(0, 2 * math.pi)
        falloff = 0.55 + 0.45 * np.clip(_angle_gap(theta, centre) / (0.5 * math.pi), 0.0, 1.0)
        img = img * falloff
        labels.add("light")

    # Guidewire: bright reflector at the lumen edge casting a full-depth shadow.
    gap = _angle_gap(theta, geo.shadow_angle)
    half_width = math.radians(spec.shadow_width_deg) / 2
    img = np.where((gap < half_width) & (rho > 0.85 * contour), 0.0, img)
    r_wire = 0.8 * float(contour_radius(geo, np.array([geo.shadow_angle]))[0])
    wx = geo.cx + r_wire * math.cos(geo.shadow_angle)
    wy = geo.cy + r_wire * math.sin(geo.shadow_angle)
    yy, xx = np.mgrid[0:side, 0:side]
    img = np.where(np.hypot(xx - wx, yy - wy) < 3.0, 0.9, img)

    img = img * (1.0 + spec.noise * rng.uniform(-1.0, 1.0, img.shape))
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, mask, labels


def generate_phantom(spec: PhantomSpec) -> PhantomPullback:
    spec.validate()
    geometry, segments = pullback_geometry(spec)
    frames, masks, labels = [], [], []
    for z, geo in enumerate(geometry):
        rng = np.random.default_rng([spec.seed, 1, z])
        img, mask, lab = render_frame(spec, geo, z, segments, rng)
        frames.append(img)
        masks.append(mask)
        labels.append(lab)
    return PhantomPullback(spec.pullback_id, frames, masks, labels, spec.frame_spacing_um, spec)


def generate_dataset(n_frames: int, seed: int, frames_per_pullback: int = 32,
                     **overrides) -> list[PhantomPullback]:
    """Split ``n_frames`` into pullbacks of at most ``frames_per_pullback`` frames."""
    out, start, k = [], 0, 0
    while start < n_frames:
        count = min(frames_per_pullback, n_frames - start)
        spec = PhantomSpec(n_frames=count, seed=seed * 1000 + k, pullback_id=f"pb{k:03d}", **overrides)
        out.append(generate_phantom(spec))
        start += count
        k += 1
    return out


def render_manifest(pullbacks: list[PhantomPullback], directory, fmt: str = "png",
                    name: str = "manifest.tsv") -> str:
    """Write frames, masks and the manifest under ``directory``; returns the manifest path."""
    if fmt not in ("png", "pgm"):
        raise ConfigError(f"image format must be png or pgm, got {fmt!r}")
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{directory}: cannot create output directory: {exc}") from None
    records = []
    for pb in pullbacks:
        sub = os.path.join(directory, pb.pullback_id)
        os.makedirs(sub, exist_ok=True)
        for z, (img, mask) in enumerate(zip(pb.frames, pb.masks)):
            img_path = os.path.join(sub, f"frame_{z:04d}.{fmt}")
            mask_path = os.path.join(sub, f"mask_{z:04d}.{fmt}")
            write_gray(img_path, img)
            write_gray(mask_path, (mask * 255).astype(np.uint8))
            records.append(ManifestRecord(pb.pullback_id, z, img_path, mask_path, pb.frame_spacing_um))
    path = os.path.join(directory, name)
    write_manifest(path, records)
    return path


def cartesian_to_polar(image, n_angles: int = 360, n_depths: int = 720) -> np.ndarray:
    """Sample a square image on the polar grid used by ``polar_to_cartesian``."""
    image = np.asarray(image, dtype=np.float64)
    side = image.shape[0]
    half = side / 2.0
    theta = (np.arange(n_angles) * 2 * math.pi / n_angles)[:, None]
    radius = (np.arange(n_depths) * half / n_depths)[None, :]
    x = half - 0.5 + radius * np.cos(theta)
    y = half - 0.5 + radius * np.sin(theta)
    return ndimage.map_coordinates(image, [y, x], order=1, mode="nearest")
