"""Coarse patch-level anomaly scoring.

The built-in scorer is a deliberately small stand-in for a heavy
patch-embedding backbone: hand-rolled patch statistics plus a seeded
random filter bank, scored by mutual nearest-patch distances across the
images of one group. Externally computed feature/score files can be
loaded instead (see ``load_external``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ProtocolError, ShapeError
from .rng import make_rng
from .tensor import Tensor

N_BANK_FILTERS = 8


@dataclass
class PatchFeatureMap:
    """Per-patch feature grid [h_p, w_p, C] for one image."""

    grid: Tensor
    patch_size: int
    source_dims: tuple

    def __post_init__(self):
        h_p, w_p = self.grid.dims[0], self.grid.dims[1]
        H, W = self.source_dims
        if h_p != H // self.patch_size or w_p != W // self.patch_size:
            raise ShapeError(
                f"patch grid {h_p}x{w_p} inconsistent with source {H}x{W} "
                f"at patch size {self.patch_size}"
            )

    @property
    def channels(self) -> int:
        return self.grid.dims[2]


@dataclass
class CoarseAnomalyMap:
    """Per-patch scalar score grid [h_p, w_p, 1]."""

    grid: Tensor
    normalized: bool

    def __post_init__(self):
        if self.grid.data.ndim != 3 or self.grid.dims[2] != 1:
            raise ShapeError(f"anomaly map must be [h,w,1], got {self.grid.dims}")


_bank_cache: dict = {}


def _filter_bank(bank_seed: int) -> np.ndarray:
    """Eight seeded zero-mean 3x3 filters, shared by every image of a run."""
    bank = _bank_cache.get(bank_seed)
    if bank is None:
        rng = make_rng(bank_seed)
        bank = rng.uniform(-1.0, 1.0, size=(N_BANK_FILTERS, 3, 3))
        bank -= bank.mean(axis=(1, 2), keepdims=True)
        _bank_cache[bank_seed] = bank
    return bank


def _conv3x3_edge(img: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Same-size responses of each bank filter; edge-replicated padding so a
    constant image yields (identically) zero responses everywhere."""
    padded = np.pad(img, 1, mode="edge")
    s0, s1 = padded.strides
    h, w = img.shape
    windows = np.lib.stride_tricks.as_strided(
        padded, shape=(h, w, 3, 3), strides=(s0, s1, s0, s1)
    )
    return np.einsum("ijkl,fkl->ijf", windows, bank, optimize=True)


# Fixed component gains: raw patch means sit in [0,1] while stds and bank
# responses of typical [0,1] images live around a few percent; rescaling
# gives every component an O(1) spread so no family dominates the feature
# distance and the decoder sees inputs of usable magnitude.
_MEAN_OFFSET = 0.5
_MEAN_GAIN = 2.0
_STD_GAIN = 8.0
_RESPONSE_GAIN = 4.0


def _patch_stats(image, intensity, responses, rows, cols):
    """Per-patch [mean per channel, intensity std, mean bank responses] over
    the pixel window rows x cols of each patch."""
    h_p, w_p = len(rows), len(cols)
    ch = image.shape[2]
    out = np.empty((h_p, w_p, ch + 1 + responses.shape[2]), dtype=np.float64)
    for i, rs in enumerate(rows):
        for j, cs in enumerate(cols):
            out[i, j, :ch] = (
                image[rs, cs].mean(axis=(0, 1)) - _MEAN_OFFSET
            ) * _MEAN_GAIN
            out[i, j, ch] = intensity[rs, cs].std() * _STD_GAIN
            out[i, j, ch + 1 :] = responses[rs, cs].mean(axis=(0, 1)) * _RESPONSE_GAIN
    return out


def extract_patch_features(
    image: np.ndarray, patch_size: int, bank_seed: int
) -> PatchFeatureMap:
    """Patch statistics at two scales (full patch, averaged 2x2 sub-blocks),
    averaged into one C = ch+1+8 dim vector per patch. Pure and deterministic
    given ``bank_seed``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"image must be [H,W] or [H,W,ch in {{1,3}}], got {img.shape}")
    H, W = img.shape[:2]
    P = int(patch_size)
    if P < 2:
        raise ShapeError(f"patch size must be >= 2, got {P}")
    if H < P or W < P:
        raise ShapeError(f"image {H}x{W} smaller than one {P}x{P} patch")
    h_p, w_p = H // P, W // P
    img = img[: h_p * P, : w_p * P]

    intensity = img.mean(axis=2)
    responses = _conv3x3_edge(intensity, _filter_bank(bank_seed))

    full_rows = [slice(i * P, (i + 1) * P) for i in range(h_p)]
    full_cols = [slice(j * P, (j + 1) * P) for j in range(w_p)]
    scale1 = _patch_stats(img, intensity, responses, full_rows, full_cols)

    half = P // 2
    quad = np.zeros_like(scale1)
    for dr in (0, half):
        for dc in (0, half):
            rows = [slice(i * P + dr, i * P + (half if dr == 0 else P))
                    for i in range(h_p)]
            cols = [slice(j * P + dc, j * P + (half if dc == 0 else P))
                    for j in range(w_p)]
            quad += _patch_stats(img, intensity, responses, rows, cols)
    scale2 = quad / 4.0

    feats = ((scale1 + scale2) / 2.0).astype(np.float32)
    return PatchFeatureMap(Tensor(feats), P, (H, W))


class GroupScorer:
    """Frozen snapshot of one group's features plus its score normalization.

    Built once per group; exposes the group's coarse maps and can score a
    new image (e.g. a synthesized pseudo-anomaly) against the same context
    with the same normalization constants.
    """

    def __init__(self, flat_feats, maps, raw_min, raw_max):
        self._feats = flat_feats
        self.maps = maps
        self.raw_min = raw_min
        self.raw_max = raw_max

    @staticmethod
    def _raw_scores(query: np.ndarray, references) -> np.ndarray:
        """Mean over references of nearest-patch Euclidean distance."""
        acc = np.zeros(query.shape[0], dtype=np.float64)
        for ref in references:
            d2 = ((query[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
            acc += np.sqrt(d2.min(axis=1))
        return acc / len(references)

    @classmethod
    def fit(cls, features) -> "GroupScorer":
        features = list(features)
        if len(features) < 2:
            raise ProtocolError(
                f"mutual scoring needs at least 2 images, got {len(features)}"
            )
        dims0 = features[0].grid.dims
        for f in features[1:]:
            if f.grid.dims != dims0:
                raise ShapeError(
                    f"feature grids differ across group: {f.grid.dims} vs {dims0}"
                )
        h_p, w_p, c = dims0
        flat = [f.grid.data.reshape(-1, c).astype(np.float64) for f in features]
        raws = []
        for i in range(len(flat)):
            refs = [flat[j] for j in range(len(flat)) if j != i]
            raws.append(cls._raw_scores(flat[i], refs))
        allraw = np.stack(raws)
        gmin, gmax = float(allraw.min()), float(allraw.max())
        maps = []
        for raw in raws:
            if gmax == gmin:
                norm = np.zeros_like(raw)
            else:
                norm = (raw - gmin) / (gmax - gmin)
            grid = norm.astype(np.float32).reshape(h_p, w_p, 1)
            maps.append(CoarseAnomalyMap(Tensor(grid), normalized=True))
        return cls(flat, maps, gmin, gmax)

    def score_external(
        self, features: PatchFeatureMap, exclude: int | None = None
    ) -> CoarseAnomalyMap:
        """Score a new image against the group snapshot, applying the group's
        normalization constants and clipping to [0, 1]."""
        c = features.channels
        if self._feats and self._feats[0].shape[1] != c:
            raise ShapeError(
                f"feature width {c} does not match group width "
                f"{self._feats[0].shape[1]}"
            )
        refs = [f for j, f in enumerate(self._feats) if j != exclude]
        if not refs:
            raise ProtocolError("no reference images left after exclusion")
        raw = self._raw_scores(
            features.grid.data.reshape(-1, c).astype(np.float64), refs
        )
        if self.raw_max == self.raw_min:
            norm = np.zeros_like(raw)
        else:
            norm = np.clip((raw - self.raw_min) / (self.raw_max - self.raw_min), 0, 1)
        h_p, w_p = features.grid.dims[:2]
        grid = norm.astype(np.float32).reshape(h_p, w_p, 1)
        return CoarseAnomalyMap(Tensor(grid), normalized=True)


def mutual_score(features) -> list:
    """Coarse maps for one group: per patch, the mean over the other images
    of the nearest-patch distance, min-max normalized per group."""
    return GroupScorer.fit(features).maps


def image_score(amap: CoarseAnomalyMap) -> float:
    if amap.grid.size == 0:
        raise ShapeError("image_score on empty map")
    return float(amap.grid.data.max())


def load_external(
    feature_path, anomaly_path, patch_size: int = 8
) -> tuple[PatchFeatureMap, CoarseAnomalyMap]:
    """Load an externally computed (features, anomaly map) pair from ANR1
    files, validating ranks and matching spatial dims."""
    from .formats import read_tensor

    feat = read_tensor(feature_path)
    if feat.data.ndim != 3:
        raise FormatError(
            f"{feature_path}: feature tensor must have rank 3, got {feat.data.ndim}"
        )
    anom = read_tensor(anomaly_path)
    if anom.data.ndim != 3:
        raise FormatError(
            f"{anomaly_path}: anomaly tensor must have rank 3, got {anom.data.ndim}"
        )
    if anom.data.shape[2] != 1:
        raise FormatError(f"{anomaly_path}: last dim must be 1, got {anom.data.shape[2]}")
    if anom.data.shape[:2] != feat.data.shape[:2]:
        raise FormatError(
            f"{anomaly_path}: spatial dims {anom.data.shape[:2]} do not match "
            f"feature dims {feat.data.shape[:2]}"
        )
    h_p, w_p = feat.data.shape[:2]
    fmap = PatchFeatureMap(feat, patch_size, (h_p * patch_size, w_p * patch_size))
    return fmap, CoarseAnomalyMap(anom, normalized=False)
