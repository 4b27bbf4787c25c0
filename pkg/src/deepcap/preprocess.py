"""Frame preparation: polar to Cartesian, crops, augmentation and the model input stack.

Frames are float arrays in ``[0, 1]``; masks are ``uint8`` arrays of 0/1.
Augmentation draws come from a generator keyed by
``(seed, pullback_id, frame_index, epoch)`` so the order in which samples
are processed cannot change what each sample sees.
"""
from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, DimensionError

POLAR_SHAPE = (360, 720)      # (angle rows, depth columns)
CARTESIAN_SIDE = 360
FRAME_SIDE = 300
CROP_SIDE = 256
DERIVATIVE_SIGMA = 1.0
BLUR_SIGMA = 1.0
NOISE_DENSITY = 0.01
AUGMENT_P = 0.5

VARIANT_CHANNELS = {"IM": 1, "2DG": 2, "ADM": 2, "ALL": 3}


# --- geometry --------------------------------------------------------------

def polar_to_cartesian(polar, out_side: int = CARTESIAN_SIDE) -> np.ndarray:
    """Resample an ``(angles, depths)`` frame onto an ``out_side`` square.

    Pixel centres are measured from the canvas centre; angle is
    ``atan2(dy, dx)`` with rows pointing down, so row 0 of the polar frame
    points along +x and angles advance clockwise on screen. The depth axis
    spans radius ``0 .. out_side/2``. Sampling is bilinear, wrapping in
    angle; pixels beyond radius ``out_side/2`` are 0.
    """
    polar = np.asarray(polar, dtype=np.float64)
    if polar.ndim != 2:
        raise DimensionError(f"polar frame must be 2-D, got shape {polar.shape}")
    if out_side < 2 or out_side % 2:
        raise DimensionError(f"out_side must be even and positive, got {out_side}")
    n_ang, n_dep = polar.shape
    half = out_side / 2.0
    coords = np.arange(out_side) + 0.5 - half
    dy, dx = np.meshgrid(coords, coords, indexing="ij")
    radius = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2.0 * math.pi)
    row = theta * n_ang / (2.0 * math.pi)
    col = np.minimum(radius * n_dep / half, n_dep - 1)
    r0 = np.floor(row).astype(int)
    c0 = np.floor(col).astype(int)
    fr, fc = row - r0, col - c0
    r0 %= n_ang
    r1 = (r0 + 1) % n_ang
    c1 = np.minimum(c0 + 1, n_dep - 1)
    out = ((1 - fr) * (1 - fc) * polar[r0, c0] + (1 - fr) * fc * polar[r0, c1]
           + fr * (1 - fc) * polar[r1, c0] + fr * fc * polar[r1, c1])
    out[radius > half] = 0.0
    return out


def center_crop(image, size: int) -> np.ndarray:
    """Central ``size x size`` window of the two trailing axes (offsets floored)."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if size > h or size > w or size < 1:
        raise DimensionError(f"cannot crop {size}x{size} from {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[..., top:top + size, left:left + size]


# --- auxiliary channels ----------------------------------------------------

def gaussian_derivative(image, sigma: float = DERIVATIVE_SIGMA, rescale: bool = True) -> np.ndarray:
    """Gradient magnitude of the image under first-derivative-of-Gaussian filters.

    With ``rescale`` the result is divided by ``1/(sigma*sqrt(2*pi))``, the
    response to a unit step edge, which bounds any ``[0, 1]`` image; it is
    then clipped to ``[0, 1]``.
    """
    image = np.asarray(image, dtype=np.float64)
    gy = ndimage.gaussian_filter(image, sigma, order=(1, 0), mode="nearest")
    gx = ndimage.gaussian_filter(image, sigma, order=(0, 1), mode="nearest")
    mag = np.hypot(gx, gy)
    if rescale:
        mag = np.clip(mag * sigma * math.sqrt(2.0 * math.pi), 0.0, 1.0)
    return mag


def axial_difference(prev, nxt) -> np.ndarray:
    """``next - prev``: the raw intensity change across the frame's neighbours."""
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape:
        raise DimensionError(f"neighbour shapes differ: {prev.shape} vs {nxt.shape}")
    return nxt - prev


# --- samples ---------------------------------------------------------------

@dataclass
class Sample:
    frame: np.ndarray
    mask: np.ndarray
    prev_frame: np.ndarray
    next_frame: np.ndarray
    frame_index: int
    frame_spacing_um: float
    pullback_id: str

    def __post_init__(self):
        shapes = {self.frame.shape, self.mask.shape, self.prev_frame.shape, self.next_frame.shape}
        if len(shapes) != 1:
            raise DimensionError(f"sample planes disagree in shape: {sorted(shapes)}")


@dataclass
class Pullback:
    pullback_id: str
    frame_spacing_um: float
    frames: list
    masks: list
    frame_indices: list = field(default_factory=list)

    def __post_init__(self):
        if not self.frame_indices:
            self.frame_indices = list(range(len(self.frames)))

    def __len__(self) -> int:
        return len(self.frames)

    def sample(self, i: int) -> Sample:
        """Frame ``i`` with its axial neighbours, clamped at the pullback ends."""
        last = len(self.frames) - 1
        return Sample(self.frames[i], self.masks[i], self.frames[max(i - 1, 0)],
                      self.frames[min(i + 1, last)], self.frame_indices[i],
                      self.frame_spacing_um, self.pullback_id)

    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]


@dataclass
class Augmented:
    frame: np.ndarray
    prev_frame: np.ndarray
    next_frame: np.ndarray
    mask: np.ndarray
    applied: dict


@dataclass
class InputStack:
    channels: np.ndarray     # (C, 256, 256) float32
    mask: np.ndarray         # (256, 256) uint8
    variant: str


def sample_rng(seed: int, pullback_id: str, frame_index: int, epoch: int) -> np.random.Generator:
    key = zlib.crc32(str(pullback_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(frame_index), int(epoch)]))


AUGMENTATIONS = ("hflip", "vflip", "blur", "rotate", "noise")


def _rotate(plane: np.ndarray, angle: float) -> np.ndarray:
    return ndimage.rotate(plane, angle, reshape=False, order=1, mode="constant", cval=0.0)


def augment(sample: Sample, rng: np.random.Generator, enabled=AUGMENTATIONS,
            p: float = AUGMENT_P, crop: int = CROP_SIDE) -> Augmented:
    """Random crop, then each enabled transform with probability ``p``.

    Geometric transforms (crop, flips, rotation) move the frame, its
    neighbours and the mask together. Blur and salt-and-pepper noise touch
    the current frame only. Every draw is made whether or not its transform
    is enabled, so disabling one transform leaves the others' draws intact.
    """
    planes = [np.asarray(a, dtype=np.float64) for a in (sample.frame, sample.prev_frame, sample.next_frame)]
    mask = np.asarray(sample.mask, dtype=np.float64)
    h, w = mask.shape
    if crop > h or crop > w:
        raise DimensionError(f"cannot crop {crop} from {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    draws = {name: bool(rng.random() < p) for name in AUGMENTATIONS}
    angle = float(rng.uniform(0.0, 360.0))
    noise_rng = np.random.default_rng(rng.integers(0, 2**63))
    on = {name: draws[name] and name in enabled for name in AUGMENTATIONS}

    window = (slice(top, top + crop), slice(left, left + crop))
    planes = [a[window] for a in planes]
    mask = mask[window]
    if on["hflip"]:
        planes = [a[:, ::-1] for a in planes]
        mask = mask[:, ::-1]
    if on["vflip"]:
        planes = [a[::-1, :] for a in planes]
        mask = mask[::-1, :]
    if on["blur"]:
        planes[0] = ndimage.gaussian_filter(planes[0], BLUR_SIGMA, mode="nearest")
    if on["rotate"]:
        planes = [_rotate(a, angle) for a in planes]
        # Same bilinear resampling as the image, then a 0.5 threshold: the mask
        # stays binary and lands exactly where a binary image would.
        mask = _rotate(mask, angle)
    if on["noise"]:
        img = planes[0].copy()
        hit = noise_rng.random(img.shape) < NOISE_DENSITY
        salt = noise_rng.random(img.shape) < 0.5
        img[hit & salt] = 1.0
        img[hit & ~salt] = 0.0
        planes[0] = img
    planes = [np.clip(np.ascontiguousarray(a), 0.0, 1.0) for a in planes]
    applied = dict(on, crop=(top, left), angle=angle if on["rotate"] else 0.0)
    return Augmented(*planes, (mask > 0.5).astype(np.uint8), applied)


def center_sample(sample: Sample, crop: int = CROP_SIDE) -> Augmented:
    """Deterministic path for validation and test data: centre crop only."""
    planes = [center_crop(np.asarray(a, dtype=np.float64), crop)
              for a in (sample.frame, sample.prev_frame, sample.next_frame)]
    mask = center_crop(np.asarray(sample.mask), crop).astype(np.uint8)
    return Augmented(*planes, mask, {"crop": "center"})


def assemble_input(sample: Sample, variant: str = "ALL", seed: int | None = None,
                   epoch: int = 0, enabled=AUGMENTATIONS) -> InputStack:
    """Channel stack ``[image, gradient magnitude?, axial difference?]`` plus mask.

    ``seed=None`` skips augmentation (centre crop). Derivative and difference
    channels are computed from the augmented planes so all channels stay
    co-registered.
    """
    if variant not in VARIANT_CHANNELS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANT_CHANNELS)}")
    if seed is None:
        aug = center_sample(sample)
    else:
        aug = augment(sample, sample_rng(seed, sample.pullback_id, sample.frame_index, epoch), enabled)
    chans = [aug.frame]
    if variant in ("2DG", "ALL"):
        chans.append(gaussian_derivative(aug.frame))
    if variant in ("ADM", "ALL"):
        chans.append(axial_difference(aug.prev_frame, aug.next_frame))
    return InputStack(np.stack(chans).astype(np.float32), aug.mask, variant)


# --- files -----------------------------------------------------------------

def read_gray(path) -> np.ndarray:
    """8-bit grayscale PGM or PNG as a ``uint8`` array."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "1"):
                img = img.convert("L")
            return np.array(img.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image: {exc}") from None


def write_gray(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError(f"{path}: expected uint8 pixels, got {array.dtype}")
    fmt = "PPM" if str(path).lower().endswith(".pgm") else "PNG"
    try:
        Image.fromarray(array, mode="L").save(path, format=fmt)
    except OSError as exc:
        raise DataError(f"{path}: cannot write image: {exc}") from None


def frame_to_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def prepare_frame(pixels: np.ndarray, is_mask: bool = False) -> np.ndarray:
    """Bring a stored frame to the 300x300 Cartesian layout.

    360x720 arrays are treated as polar acquisitions and converted first.
    """
    data = (pixels > 127).astype(np.float64) if is_mask else frame_to_float(pixels)
    if data.shape == POLAR_SHAPE:
        data = polar_to_cartesian(data, CARTESIAN_SIDE)
    if data.shape != (FRAME_SIDE, FRAME_SIDE):
        data = center_crop(data, FRAME_SIDE)
    if is_mask:
        return (data > 0.5).astype(np.uint8)
    return data


@dataclass
class ManifestRecord:
    pullback_id: str
    frame_index: int
    image_path: str
    mask_path: str
    frame_spacing_um: float


def read_manifest(path) -> list[ManifestRecord]:
    """Parse the tab-separated manifest; relative paths resolve against its folder."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        pid, idx, img, msk, spacing = parts
        try:
            records.append(ManifestRecord(pid, int(idx), os.path.join(base, img),
                                          os.path.join(base, msk), float(spacing)))
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad frame index or spacing") from None
    if not records:
        raise DataError(f"{path}: manifest has no records")
    return records


def write_manifest(path, records: list[ManifestRecord]) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            img = os.path.relpath(r.image_path, base)
            msk = os.path.relpath(r.mask_path, base)
            fh.write(f"{r.pullback_id}\t{r.frame_index}\t{img}\t{msk}\t{r.frame_spacing_um!r}\n")


def load_dataset(path) -> list[Pullback]:
    """Group manifest records into pullbacks ordered by frame index."""
    groups: dict[str, list[ManifestRecord]] = {}
    for r in read_manifest(path):
        groups.setdefault(r.pullback_id, []).append(r)
    pullbacks = []
    for pid, recs in groups.items():
        recs.sort(key=lambda r: r.frame_index)
        spacings = {r.frame_spacing_um for r in recs}
        if len(spacings) != 1:
            raise DataError(f"pullback {pid}: inconsistent frame spacing {sorted(spacings)}")
        frames = [prepare_frame(read_gray(r.image_path)) for r in recs]
        masks = [prepare_frame(read_gray(r.mask_path), is_mask=True) for r in recs]
        pullbacks.append(Pullback(pid, recs[0].frame_spacing_um, frames, masks,
                                  [r.frame_index for r in recs]))
    return pullbacks
