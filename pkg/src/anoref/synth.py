"""Pseudo-anomaly synthesis: Perlin-noise masks filled with procedural
texture (or, for the cutpaste strategy, with a rectangle cropped from a
different pseudo-normal), alpha-blended onto pseudo-normal images.

Every pair is reproducible from (base_seed, source_index, copy_index)
alone; the per-pair seed derivation makes generation order irrelevant.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ShapeError, SynthesisError
from .rng import make_rng, mix64

OPACITY_MIN = 0.15
MAX_MASK_COVERAGE = 0.5
_MASK_RETRIES = 16

TEXTURE_KINDS = ("checker", "stripes", "value_noise")
_KIND_TAGS = {"checker": 11, "stripes": 12, "value_noise": 13}

_MASK_STREAM = 101
_TEXTURE_STREAM = 102


@dataclass
class SynthParams:
    seed: int
    strategy: str
    opacity: float


@dataclass
class SynthPair:
    """One training unit: blended image plus its exact binary mask."""

    image: np.ndarray
    mask: np.ndarray
    source_index: int
    params: SynthParams

    def __post_init__(self):
        if self.mask.ndim != 3 or self.mask.shape[2] != 1:
            raise ShapeError(f"mask must be [H,W,1], got {self.mask.shape}")
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise ShapeError(
                f"image {self.image.shape} and mask {self.mask.shape} disagree"
            )
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise ShapeError("mask must be binary 0/1")
        cover = self.mask.sum() / (self.mask.shape[0] * self.mask.shape[1])
        if self.mask.sum() < 1 or cover > MAX_MASK_COVERAGE:
            raise SynthesisError(f"mask coverage {cover:.3f} out of (0, 0.5]")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ShapeError("image values must lie in [0,1]")


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _lattice_gradients(seed: int, gh: int, gw: int) -> tuple:
    """Seeded unit gradient vectors on a (gh, gw) integer lattice."""
    rng = make_rng(seed)
    angles = rng.uniform(0.0, 2.0 * math.pi, size=(gh, gw))
    return np.cos(angles), np.sin(angles)


def gradient_noise(H: int, W: int, cell: float, seed: int) -> np.ndarray:
    """Single-octave 2D gradient (Perlin) noise sampled at pixel (y, x) ->
    lattice coordinate (y/cell, x/cell). Exactly zero on lattice points."""
    gh = int(math.ceil(H / cell)) + 1
    gw = int(math.ceil(W / cell)) + 1
    gx, gy = _lattice_gradients(seed, gh, gw)
    v = np.arange(H, dtype=np.float64)[:, None] / cell
    u = np.arange(W, dtype=np.float64)[None, :] / cell
    i0 = np.floor(v).astype(np.intp)
    j0 = np.floor(u).astype(np.intp)
    dy = v - i0
    dx = u - j0
    i0 = np.broadcast_to(i0, (H, W))
    j0 = np.broadcast_to(j0, (H, W))
    dy = np.broadcast_to(dy, (H, W))
    dx = np.broadcast_to(dx, (H, W))
    i1, j1 = i0 + 1, j0 + 1
    n00 = gx[i0, j0] * dx + gy[i0, j0] * dy
    n01 = gx[i0, j1] * (dx - 1.0) + gy[i0, j1] * dy
    n10 = gx[i1, j0] * dx + gy[i1, j0] * (dy - 1.0)
    n11 = gx[i1, j1] * (dx - 1.0) + gy[i1, j1] * (dy - 1.0)
    sx = _fade(dx)
    sy = _fade(dy)
    ix0 = n00 + sx * (n01 - n00)
    ix1 = n10 + sx * (n11 - n10)
    return ix0 + sy * (ix1 - ix0)


def perlin_field(
    H: int, W: int, seed: int, octaves: int = 2, persistence: float = 0.5
) -> np.ndarray:
    """Octave sum of gradient noise; base lattice cell is H/4."""
    base_cell = H / 4.0
    field = np.zeros((H, W), dtype=np.float64)
    amp = 1.0
    for o in range(octaves):
        field += amp * gradient_noise(H, W, base_cell / (2.0**o), mix64(seed, o))
        amp *= persistence
    return field


def perlin_mask(
    H: int, W: int, seed: int, octaves: int = 2, threshold: float = 0.5
) -> np.ndarray:
    """Binary [H,W,1] mask from thresholded, min-max normalized Perlin
    noise. Empty or >50%-coverage draws are retried with seed+1, bounded."""
    if H < 8 or W < 8:
        raise ShapeError(f"mask dims must be >= 8, got {H}x{W}")
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    for attempt in range(_MASK_RETRIES + 1):
        field = perlin_field(H, W, seed + attempt, octaves=octaves)
        fmin, fmax = field.min(), field.max()
        if fmax == fmin:
            continue
        mask = ((field - fmin) / (fmax - fmin)) > threshold
        count = int(mask.sum())
        if 1 <= count <= MAX_MASK_COVERAGE * H * W:
            return mask.astype(np.uint8)[:, :, None]
    raise SynthesisError(
        f"no usable mask after {_MASK_RETRIES} retries (seed {seed})"
    )


def procedural_texture(kind: str, H: int, W: int, seed: int) -> np.ndarray:
    """Deterministic [H,W,1] texture in [0,1] standing in for an external
    texture corpus."""
    if kind not in TEXTURE_KINDS:
        raise ValueError(f"unknown texture kind {kind!r}")
    rng = make_rng(seed, _KIND_TAGS[kind])
    yy = np.arange(H, dtype=np.float64)[:, None]
    xx = np.arange(W, dtype=np.float64)[None, :]
    # every kind gets a seeded brightness band: the textures must carry
    # mean-level shifts, not just high-frequency structure, or they read as
    # near-normal to patch statistics
    level = rng.uniform(0.1, 0.9)
    span = rng.uniform(0.15, 0.45)
    lo = float(np.clip(level - span, 0.0, 1.0))
    hi = float(np.clip(level + span, 0.0, 1.0))
    if kind == "checker":
        period = int(rng.integers(2, max(3, min(H, W) // 4) + 1))
        cells = ((yy // period) + (xx // period)) % 2
        tex = np.where(cells > 0, hi, lo)
    elif kind == "stripes":
        theta = rng.uniform(0.0, math.pi)
        wavelength = rng.uniform(4.0, max(8.0, min(H, W) / 2.0))
        phase = rng.uniform(0.0, 2.0 * math.pi)
        proj = xx * math.cos(theta) + yy * math.sin(theta)
        wave = 0.5 + 0.5 * np.sin(2.0 * math.pi * proj / wavelength + phase)
        tex = lo + (hi - lo) * wave
    else:  # value_noise
        gh = gw = 5
        grid = rng.uniform(0.0, 1.0, size=(gh, gw))
        ry = np.clip(yy / max(H - 1, 1) * (gh - 1), 0, gh - 1)
        rx = np.clip(xx / max(W - 1, 1) * (gw - 1), 0, gw - 1)
        iy = np.minimum(ry.astype(np.intp), gh - 2)
        ix = np.minimum(rx.astype(np.intp), gw - 2)
        ty, tx = ry - iy, rx - ix
        iy = np.broadcast_to(iy, (H, W))
        ix = np.broadcast_to(ix, (H, W))
        ty = np.broadcast_to(ty, (H, W))
        tx = np.broadcast_to(tx, (H, W))
        top = grid[iy, ix] * (1 - tx) + grid[iy, ix + 1] * tx
        bot = grid[iy + 1, ix] * (1 - tx) + grid[iy + 1, ix + 1] * tx
        tex = top * (1 - ty) + bot * ty
        tmin, tmax = tex.min(), tex.max()
        if tmax == tmin:
            raise SynthesisError("degenerate value-noise texture")
        tex = lo + (hi - lo) * (tex - tmin) / (tmax - tmin)
    return tex.astype(np.float32)[:, :, None]


def paste_anomaly(
    image: np.ndarray,
    mask: np.ndarray,
    texture: np.ndarray,
    opacity: float,
    source_index: int = 0,
    params: SynthParams | None = None,
) -> SynthPair:
    """Blend texture into the masked region:
    out = (1-M) * I + M * (opacity * T + (1-opacity) * I)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    if mask.shape[:2] != image.shape[:2] or texture.shape[:2] != image.shape[:2]:
        raise ShapeError(
            f"dims disagree: image {image.shape}, mask {mask.shape}, "
            f"texture {texture.shape}"
        )
    if not (0.0 <= opacity <= 1.0):
        raise ValueError(f"opacity must be in [0,1], got {opacity}")
    m = mask.astype(np.float32)
    blend = np.float32(opacity) * texture + np.float32(1.0 - opacity) * image
    # float32 rounding can push a convex blend a half-ulp past 1.0; the clip
    # is the identity outside the mask since sources already lie in [0,1]
    out = np.clip((1.0 - m) * image + m * blend, 0.0, 1.0)
    if params is None:
        params = SynthParams(seed=0, strategy="manual", opacity=opacity)
    return SynthPair(out.astype(np.float32), mask.astype(np.uint8), source_index, params)


def _cutpaste_texture(rng, donors, H, W) -> np.ndarray:
    donor = donors[int(rng.integers(0, len(donors)))]
    if donor.ndim == 2:
        donor = donor[:, :, None]
    rh = int(rng.integers(max(2, H // 8), H // 2 + 1))
    rw = int(rng.integers(max(2, W // 8), W // 2 + 1))
    y0 = int(rng.integers(0, donor.shape[0] - rh + 1))
    x0 = int(rng.integers(0, donor.shape[1] - rw + 1))
    crop = donor[y0 : y0 + rh, x0 : x0 + rw]
    reps = (math.ceil(H / rh), math.ceil(W / rw), 1)
    return np.tile(crop, reps)[:H, :W].astype(np.float32)


def _pick_texture(rng, pair_seed, H, W, textures):
    if textures:
        tex = textures[int(rng.integers(0, len(textures)))]
        if tex.ndim == 2:
            tex = tex[:, :, None]
        reps = (math.ceil(H / tex.shape[0]), math.ceil(W / tex.shape[1]), 1)
        return np.tile(tex, reps)[:H, :W].astype(np.float32)
    kind = TEXTURE_KINDS[int(rng.integers(0, len(TEXTURE_KINDS)))]
    return procedural_texture(kind, H, W, mix64(pair_seed, _TEXTURE_STREAM))


def synthesize_set(
    pseudo_normals,
    l: int,
    strategy: str,
    base_seed: int,
    textures=None,
) -> list:
    """r*l pseudo-anomaly pairs, one independent seed per
    (source_index, copy_index). ``textures``, when given, replaces the
    procedural textures with a seeded uniform pick from the list."""
    if l < 1:
        raise ValueError(f"l must be >= 1, got {l}")
    if strategy not in ("perlin_texture", "cutpaste"):
        raise ValueError(f"unknown synthesis strategy {strategy!r}")
    normals = [np.asarray(im, dtype=np.float32) for im in pseudo_normals]
    if strategy == "cutpaste" and len(normals) < 2:
        raise ProtocolError("cutpaste needs at least 2 pseudo-normal images")
    pairs = []
    for si, img in enumerate(normals):
        if img.ndim == 2:
            img = img[:, :, None]
        H, W = img.shape[:2]
        for ci in range(l):
            pair_seed = mix64(base_seed, si, ci)
            rng = make_rng(pair_seed)
            mask = perlin_mask(H, W, mix64(pair_seed, _MASK_STREAM))
            opacity = float(OPACITY_MIN + (1.0 - OPACITY_MIN) * rng.random())
            if strategy == "cutpaste":
                donors = [d for j, d in enumerate(normals) if j != si]
                tex = _cutpaste_texture(rng, donors, H, W)
            else:
                tex = _pick_texture(rng, pair_seed, H, W, textures)
            pairs.append(
                paste_anomaly(
                    img, mask, tex, opacity,
                    source_index=si,
                    params=SynthParams(pair_seed, strategy, opacity),
                )
            )
    return pairs
