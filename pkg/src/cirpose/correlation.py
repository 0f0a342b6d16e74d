"""All-pairs correlation volumes, pooled pyramids and the windowed lookup."""

from __future__ import annotations

import struct

import numpy as np

NUM_LEVELS = 4
RADIUS = 3

_MAGIC = b"CORRPYR1"


def _avg_pool2x2(vol):
    """2x2 average pooling over the last two axes (odd trailing row/col dropped)."""
    h, w = vol.shape[-2] // 2, vol.shape[-1] // 2
    v = vol[..., : 2 * h, : 2 * w]
    return 0.25 * (v[..., 0::2, 0::2] + v[..., 1::2, 0::2] + v[..., 0::2, 1::2] + v[..., 1::2, 1::2])


class CorrelationPyramid:
    """Stack of correlation volumes; level ``k`` has shape ``(H, W, H2 >> k, W2 >> k)``."""

    def __init__(self, levels):
        self.levels = [np.asarray(v) for v in levels]
        for v in self.levels:
            v.flags.writeable = False

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]

    @property
    def shape(self):
        return self.levels[0].shape

    def scaled(self, alpha):
        return CorrelationPyramid([alpha * v for v in self.levels])

    def __add__(self, other):
        return CorrelationPyramid([a + b for a, b in zip(self.levels, other.levels)])

    def save(self, path):
        """Write little-endian float32 volumes behind a small shape header."""
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", len(self.levels)))
            for v in self.levels:
                f.write(struct.pack("<I", v.ndim))
                f.write(struct.pack(f"<{v.ndim}I", *v.shape))
                f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        if data[:8] != _MAGIC:
            raise ValueError("not a correlation pyramid dump")
        off = 8
        levels = []
        try:
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            for _ in range(n):
                (ndim,) = struct.unpack_from("<I", data, off)
                off += 4
                shape = struct.unpack_from(f"<{ndim}I", data, off)
                off += 4 * ndim
                count = int(np.prod(shape))
                levels.append(np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(float))
                off += 4 * count
        except (struct.error, ValueError) as exc:
            raise ValueError(f"truncated correlation dump at byte {off}") from exc
        return cls(levels)


def build_correlation(f1, f2, num_levels=NUM_LEVELS):
    """Dot products between every feature of ``f1`` and every feature of ``f2``.

    Maps are ``(H1, W1, D)`` and ``(H2, W2, D)``.  Level 0 holds ``<f1[u], f2[v]>``; each further
    level average-pools the ``f2`` axes by 2.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.ndim != 3 or f2.ndim != 3 or f1.shape[-1] != f2.shape[-1]:
        raise ValueError(f"feature maps must be (H, W, D) with equal D: {f1.shape} vs {f2.shape}")
    if not (np.all(np.isfinite(f1)) and np.all(np.isfinite(f2))):
        raise ValueError("feature maps contain non-finite values")
    vol = np.einsum("ijd,kld->ijkl", f1, f2)
    levels = [vol]
    for _ in range(num_levels - 1):
        vol = _avg_pool2x2(vol)
        levels.append(vol)
    return CorrelationPyramid(levels)


def bilinear_sample(img, x, y):
    """Sample ``img[..., H, W]`` at float pixel positions with zero padding.

    ``img`` has the grid on its last two axes; ``x`` (column) and ``y`` (row)
    broadcast against its leading axes plus any trailing sample axes: the
    result has shape ``x.shape``, where ``x.shape[:img.ndim-2]`` must match
    ``img.shape[:-2]``.
    """
    img = np.asarray(img)
    H, W = img.shape[-2:]
    if H == 0 or W == 0:
        return np.zeros(np.shape(x))
    lead = img.shape[:-2]
    flat = img.reshape(-1, H * W) if lead else img.reshape(1, H * W)
    nb = flat.shape[0]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shape = x.shape
    x = x.reshape(nb, -1)
    y = y.reshape(nb, -1)
    x0 = np.floor(x)
    y0 = np.floor(y)
    out = np.zeros(x.shape)
    rows = np.arange(nb)[:, None]
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wgt = (1.0 - np.abs(x - xi)) * (1.0 - np.abs(y - yi))
            inside = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
            idx = (np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)).astype(np.intp)
            out += np.where(inside, wgt * flat[rows, idx], 0.0)
    return out.reshape(shape)


def lookup(pyr, coords, radius=RADIUS):
    """Gather a ``(2r+1)^2`` window from every pyramid level around ``coords``.

    ``coords`` is ``(H, W, >=2)`` holding pixel positions ``(x, y)`` in the
    second map's level-0 grid; extra channels are ignored.  Output is
    ``(H, W, levels * (2r+1)^2)``, ordered level-major, then window row
    (dy), then column (dx).
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    coords = np.asarray(coords, dtype=float)
    H, W = pyr.shape[:2]
    if coords.shape[:2] != (H, W):
        raise ValueError(f"coords grid {coords.shape[:2]} does not match volume {(H, W)}")
    offs = np.arange(-radius, radius + 1, dtype=float)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    dx = dx.ravel()
    dy = dy.ravel()
    feats = []
    for k, vol in enumerate(pyr.levels):
        scale = 0.5**k
        cx = coords[..., 0:1] * scale + dx
        cy = coords[..., 1:2] * scale + dy
        feats.append(bilinear_sample(vol, cx, cy))
    return np.concatenate(feats, axis=-1)
