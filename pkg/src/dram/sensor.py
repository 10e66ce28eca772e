"""Retina-like glimpse extraction.

Locations live in a Cartesian frame centered on the image middle: +x right,
+y down, one coordinate unit = `unit_width_px` pixels. Extraction touches
only the pixels inside the requested windows, so its cost is independent of
the full image size. Out-of-bounds pixels read as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SensorConfig:
    unit_width_px: float = 20.0
    patch_size: int = 12
    coarse_factor: int = 3
    context_size: int = 32


@dataclass
class GlimpseObservation:
    """Two-scale foveal observation at one location."""

    fine: np.ndarray      # (c, p, p) full-resolution patch
    coarse: np.ndarray    # (c, p, p) downsampled wide surround
    loc_xy: np.ndarray    # (2,) coordinate units
    center_rc: np.ndarray  # (2,) fractional pixel center (row, col)

    def stacked(self) -> np.ndarray:
        """(2c, p, p) fine and coarse stacked along channels."""
        return np.concatenate([self.fine, self.coarse], axis=0)


def loc_to_pixels(loc_xy, image_hw, unit_width_px: float) -> np.ndarray:
    """Map (x, y) coordinate units to fractional (row, col) pixels; no rounding.

    Accepts a single (2,) location or a batch (..., 2).
    """
    loc = np.asarray(loc_xy, dtype=np.float64)
    h, w = image_hw
    rc = np.empty_like(loc)
    rc[..., 0] = h / 2.0 + loc[..., 1] * unit_width_px
    rc[..., 1] = w / 2.0 + loc[..., 0] * unit_width_px
    return rc


def round_half_up(v):
    """Round with ties toward +inf (0.5 -> 1, -0.5 -> 0)."""
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def extract_patch(image: np.ndarray, center_rc, size: int) -> np.ndarray:
    """Square crop of side `size` around a fractional pixel center.

    The center rounds half-up to an integer pixel; the window starts
    size//2 pixels above/left of it. Pixels outside the image are zero.
    """
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    ctr = round_half_up(center_rc)
    r0 = int(ctr[0]) - size // 2
    c0 = int(ctr[1]) - size // 2
    out = np.zeros((c, size, size), dtype=img.dtype)
    rs, re = max(r0, 0), min(r0 + size, h)
    cs, ce = max(c0, 0), min(c0 + size, w)
    if rs < re and cs < ce:
        out[:, rs - r0: re - r0, cs - c0: ce - c0] = img[:, rs:re, cs:ce]
    return out[0] if squeeze else out


def _bilinear_axis_weights(n_in: int, n_out: int):
    """Source indices and lerp weights for one axis, pixel-center aligned."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def resize_bilinear(image: np.ndarray, out_hw) -> np.ndarray:
    """Separable bilinear resize (up or down) of (h, w) or (c, h, w)."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    oh, ow = out_hw
    _, h, w = img.shape
    r0, r1, rf = _bilinear_axis_weights(h, oh)
    c0, c1, cf = _bilinear_axis_weights(w, ow)
    rows = img[:, r0, :] * (1.0 - rf)[None, :, None] + img[:, r1, :] * rf[None, :, None]
    out = rows[:, :, c0] * (1.0 - cf)[None, None, :] + rows[:, :, c1] * cf[None, None, :]
    return out[0] if squeeze else out


def downsample(patch: np.ndarray, out_hw) -> np.ndarray:
    """Reduce resolution: area averaging when extents divide evenly, else bilinear."""
    img = np.asarray(patch, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    oh, ow = out_hw
    if oh > h or ow > w:
        raise ValueError(f"downsample target {out_hw} exceeds input {(h, w)}")
    if h % oh == 0 and w % ow == 0:
        fh, fw = h // oh, w // ow
        # Gather each block contiguously before reducing so the result is
        # bit-identical to flattening the block and taking its mean.
        blocks = img.reshape(c, oh, fh, ow, fw).transpose(0, 1, 3, 2, 4)
        blocks = np.ascontiguousarray(blocks).reshape(c, oh, ow, fh * fw)
        out = blocks.mean(axis=-1)
    else:
        out = resize_bilinear(img, out_hw)
    return out[0] if squeeze else out


def extract_foveal_glimpse(image: np.ndarray, loc_xy, cfg: SensorConfig) -> GlimpseObservation:
    """Fine patch plus coarse surround (factor x wider, downsampled) at one location."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    h, w = img.shape[1:]
    center = loc_to_pixels(np.asarray(loc_xy, dtype=np.float64), (h, w), cfg.unit_width_px)
    fine = extract_patch(img, center, cfg.patch_size)
    wide = extract_patch(img, center, cfg.patch_size * cfg.coarse_factor)
    coarse = downsample(wide, (cfg.patch_size, cfg.patch_size))
    return GlimpseObservation(
        fine=fine.astype(np.float64),
        coarse=coarse,
        loc_xy=np.asarray(loc_xy, dtype=np.float64).copy(),
        center_rc=center,
    )


def glimpse_batch(images: np.ndarray, locs: np.ndarray, cfg: SensorConfig) -> np.ndarray:
    """(B, 2c, p, p) stacked observations for a batch of per-image locations."""
    out = np.empty(
        (images.shape[0], 2 * images.shape[1], cfg.patch_size, cfg.patch_size), dtype=np.float64
    )
    for i in range(images.shape[0]):
        out[i] = extract_foveal_glimpse(images[i], locs[i], cfg).stacked()
    return out


def context_image(image: np.ndarray, cfg: SensorConfig) -> np.ndarray:
    """Coarse whole-image view feeding the context network: (c, s, s)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    return downsample(img, (cfg.context_size, cfg.context_size))
