"""Dataset plumbing: JSON-lines manifests, run configuration, and a
procedural product-image generator used in place of a real inspection
corpus.

Generated "products" are a seeded ring + gradient + low-amplitude value
noise pattern with per-image jitter; defects are Perlin-masked intensity
shifts or texture patches, each written with its exact binary mask. The
very first RNG draw for image i decides defect injection, so the label
sequence can be replayed from (seed, i) alone.
"""

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, ProtocolError
from .formats import write_image
from .rng import make_rng, mix64
from .synth import perlin_mask, procedural_texture

_IMAGE_STREAM = 7
_MASK_STREAM = 8
_TEX_STREAM = 9


@dataclass
class ManifestRecord:
    image_id: str
    path: str
    category: str
    gt_mask_path: str | None = None
    gt_label: int | None = None

    def to_json(self) -> str:
        rec = {"image_id": self.image_id, "path": self.path, "category": self.category}
        if self.gt_mask_path is not None:
            rec["gt_mask_path"] = self.gt_mask_path
        if self.gt_label is not None:
            rec["gt_label"] = self.gt_label
        return json.dumps(rec)


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path) -> list:
    records = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            try:
                rec = ManifestRecord(
                    image_id=obj["image_id"],
                    path=obj["path"],
                    category=obj["category"],
                    gt_mask_path=obj.get("gt_mask_path"),
                    gt_label=obj.get("gt_label"),
                )
            except KeyError as exc:
                raise FormatError(f"{path}:{lineno}: missing field {exc}") from None
            if rec.image_id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            records.append(rec)
    if not records:
        raise ProtocolError(f"{path}: empty manifest")
    return records


@dataclass
class RunConfig:
    """Everything a `run` needs; defaults follow the reference training
    recipe (groups of 30, 5 pseudo-normals, 4 pairs each, 20 epochs of
    SGD at lr 0.001) at desk scale (64px images, 8px patches)."""

    u: int = 30
    r: int = 5
    l: int = 4
    epochs: int = 20
    lr: float = 0.001
    strategy: str = "perlin_texture"
    base_seed: int = 0
    patch: int = 8
    eps_dice: float = 1.0
    input_size: int = 64
    scorer: str = "builtin"
    texture_dir: str | None = None
    output_dir: str = "out"
    seeds: tuple = (0,)
    manifest: str | None = None
    external_dir: str | None = None
    normalize_external: bool = True
    contamination: float = 0.0
    category: str | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not (1 <= self.r <= self.u):
            raise ProtocolError(f"need 1 <= r <= u, got r={self.r} u={self.u}")
        if self.l < 1:
            raise ProtocolError(f"l must be >= 1, got {self.l}")
        if self.lr <= 0:
            raise ProtocolError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ProtocolError(f"epochs must be >= 1, got {self.epochs}")
        if self.input_size % self.patch != 0:
            raise ProtocolError(
                f"input_size {self.input_size} not divisible by patch {self.patch}"
            )
        if self.scorer not in ("builtin", "external"):
            raise ProtocolError(f"unknown scorer {self.scorer!r}")
        if not (0.0 <= self.contamination < 1.0):
            raise ProtocolError(f"contamination must be in [0,1), got {self.contamination}")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            obj = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise FormatError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**obj)


def _base_pattern(rng, size: int) -> np.ndarray:
    s = size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    level = rng.uniform(0.38, 0.50)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    grad_amp = rng.uniform(0.05, 0.12)
    grad = grad_amp * ((xx * math.cos(theta) + yy * math.sin(theta)) / s)
    cx = s / 2.0 + rng.uniform(-2.0, 2.0)
    cy = s / 2.0 + rng.uniform(-2.0, 2.0)
    r0 = 0.30 * s * (1.0 + rng.uniform(-0.05, 0.05))
    sigma = 0.04 * s * (1.0 + rng.uniform(-0.1, 0.1))
    ring_amp = rng.uniform(0.18, 0.28)
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    ring = ring_amp * np.exp(-((dist - r0) ** 2) / (2.0 * sigma**2))
    noise_seed = int(rng.integers(0, 2**32))
    noise = procedural_texture("value_noise", s, s, noise_seed)[:, :, 0]
    img = level + grad + ring + 0.06 * (noise - 0.5)
    return np.clip(img, 0.02, 0.98)


def _inject_defect(rng, img: np.ndarray, mask2d: np.ndarray, seed_parts) -> np.ndarray:
    masked = mask2d.astype(bool)
    out = img.copy()
    if rng.random() < 0.5:
        # intensity shift, pushed away from the nearer saturation bound
        mag = rng.uniform(0.25, 0.45)
        direction = -1.0 if out[masked].mean() > 0.5 else 1.0
        out[masked] = np.clip(out[masked] + direction * mag, 0.02, 0.98)
    else:
        kind = ("checker", "stripes", "value_noise")[int(rng.integers(0, 3))]
        tex = procedural_texture(kind, *img.shape, mix64(*seed_parts, _TEX_STREAM))
        opacity = rng.uniform(0.6, 0.95)
        out[masked] = (1 - opacity) * out[masked] + opacity * tex[:, :, 0][masked]
    return out


def generate_dataset(
    n_images: int,
    defect_rate: float,
    input_size: int,
    seed: int,
    output_dir,
    category: str = "widget",
) -> list:
    """Write a synthetic single-category product dataset and its manifest;
    returns the manifest records (paths relative to ``output_dir``)."""
    if n_images < 4:
        raise ProtocolError(f"need at least 4 images, got {n_images}")
    if not (0.0 <= defect_rate < 1.0):
        raise ProtocolError(f"defect rate must be in [0,1), got {defect_rate}")
    out = Path(output_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_images):
        rng = make_rng(seed, i, _IMAGE_STREAM)
        defect_draw = rng.random()  # first draw: replayable label decision
        img = _base_pattern(rng, input_size)
        image_id = f"{category}_{i:04d}"
        rel_img = f"images/{image_id}.pgm"
        gt_mask_path = None
        gt_label = 0
        if defect_draw < defect_rate:
            # threshold a bit above the synthesis default: defects stay
            # smaller than training blobs but in the same shape family
            mask = perlin_mask(
                input_size, input_size, mix64(seed, i, _MASK_STREAM), threshold=0.6
            )[:, :, 0]
            img = _inject_defect(rng, img, mask, (seed, i))
            gt_label = 1
            gt_mask_path = f"masks/{image_id}.pgm"
            write_image(out / gt_mask_path, mask.astype(np.float64))
        write_image(out / rel_img, img)
        records.append(
            ManifestRecord(image_id, rel_img, category, gt_mask_path, gt_label)
        )
    write_manifest(out / "manifest.jsonl", records)
    return records


def load_gt_mask(base_dir, record, input_size: int) -> np.ndarray:
    """Binary [H,W,1] ground-truth mask; all zeros when no mask is listed."""
    from .formats import read_image

    if record.gt_mask_path is None:
        return np.zeros((input_size, input_size, 1), dtype=np.uint8)
    arr = read_image(Path(base_dir) / record.gt_mask_path)
    return (arr[:, :, :1] > 0.5).astype(np.uint8)
