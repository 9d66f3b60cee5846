"""Progressive group-wise test-time training.

The image stream of each category is cut into contiguous groups. Group 1
is passed through untouched (upsampled coarse maps). For every group k,
the r lowest-scoring images are taken as pseudo-normals, r*l
pseudo-anomaly pairs are synthesized from them, the decoder is trained on
those pairs (continuing from its previous state, never reinitialized),
and the freshly trained decoder refines group k+1. Final maps of groups
>= 2 are the elementwise mean of the upsampled coarse map and the
refined map.
"""

import contextlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    def threadpool_limits(*_args, **_kwargs):
        return contextlib.nullcontext()

from .errors import NumericError, ProtocolError, ShapeError
from .decoder import ArdModel, ard_forward
from .formats import read_image
from .rng import make_rng, mix64, stable_id
from .scorer import (
    CoarseAnomalyMap,
    GroupScorer,
    extract_patch_features,
    image_score,
    load_external,
)
from .synth import synthesize_set
from .tensor import Graph, Tensor, scalar, sgd_step, upsample_array

_SYNTH_STREAM = 21
_TRAIN_STREAM = 22
_CONTAM_STREAM = 23


@dataclass
class PgtConfig:
    """Protocol constants; see RunConfig for the file-level superset."""

    u: int = 30
    r: int = 5
    l: int = 4
    epochs: int = 20
    lr: float = 0.001
    strategy: str = "perlin_texture"
    base_seed: int = 0
    patch: int = 8
    eps_dice: float = 1.0

    def __post_init__(self):
        if not (1 <= self.r <= self.u):
            raise ProtocolError(f"need 1 <= r <= u, got r={self.r} u={self.u}")
        if self.l < 1:
            raise ProtocolError(f"l must be >= 1, got {self.l}")
        if self.lr <= 0:
            raise ProtocolError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ProtocolError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class GroupState:
    index: int  # 1-based position in the stream
    image_ids: list
    coarse_maps: list
    final_maps: list | None = None
    trained_through: bool = False


@dataclass
class ImageResult:
    image_id: str
    category: str
    group_index: int
    coarse_patch: np.ndarray
    final_map: np.ndarray
    final_score: float


@dataclass
class CategoryResult:
    category: str
    groups: list
    images: list
    epoch_losses: dict = field(default_factory=dict)
    group_seconds: dict = field(default_factory=dict)


@dataclass
class RunResult:
    categories: list

    def all_images(self):
        for cat in self.categories:
            yield from cat.images


def partition_groups(image_ids, u: int) -> list:
    """ceil(N/u) contiguous groups of near-equal size: the first N mod g
    groups take ceil(N/g) images, the rest floor(N/g)."""
    ids = list(image_ids)
    n = len(ids)
    if n < 2:
        raise ProtocolError(f"need at least 2 images to form groups, got {n}")
    g = -(-n // u)
    base, rem = divmod(n, g)
    groups = []
    start = 0
    for k in range(g):
        size = base + (1 if k < rem else 0)
        groups.append(ids[start : start + size])
        start += size
    return groups


def select_pseudo_normals(coarse_maps, r: int) -> list:
    """Positions of the r lowest image scores, ties broken by stream index;
    returned in ascending score order."""
    maps = list(coarse_maps)
    if r > len(maps):
        raise ProtocolError(f"r={r} exceeds group size {len(maps)}")
    scored = sorted(range(len(maps)), key=lambda i: (image_score(maps[i]), i))
    return scored[:r]


def dice_loss(g: Graph, pred: Tensor, mask, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*m) + eps) / (sum(p) + sum(m) + eps), differentiable in
    pred."""
    m = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float32))
    if pred.dims != m.dims:
        raise ShapeError(f"pred dims {pred.dims} != mask dims {m.dims}")
    inter = g.sum(g.mul(pred, m))
    num = g.add(g.mul(inter, scalar(2.0)), scalar(eps))
    den = g.add(g.add(g.sum(pred), g.sum(m)), scalar(eps))
    return g.sub(scalar(1.0), g.div(num, den))


@dataclass
class TrainContext:
    """Everything train_group needs besides the pairs themselves: the
    group's scorer snapshot, where each pseudo-normal sits in the group,
    and the seeds that pin feature extraction and epoch shuffling."""

    scorer: GroupScorer
    pn_positions: list
    bank_seed: int
    shuffle_seed: int


def train_group(model: ArdModel, pairs, cfg, ctx: TrainContext) -> list:
    """Train the decoder on synthesized pairs; per-pair (features, score
    map) come from re-scoring the synthesized image in the group's scorer
    context. Returns the mean dice loss of each epoch."""
    if not pairs:
        raise ProtocolError("train_group called with no pairs")
    prepared = []
    for pair in pairs:
        feats = extract_patch_features(pair.image, cfg.patch, ctx.bank_seed)
        if tuple(feats.grid.dims[:2]) != tuple(model.patch_grid):
            raise ProtocolError(
                f"pair patch grid {feats.grid.dims[:2]} does not match model "
                f"grid {model.patch_grid}"
            )
        amap = ctx.scorer.score_external(
            feats, exclude=ctx.pn_positions[pair.source_index]
        )
        mask = Tensor(pair.mask.astype(np.float32))
        prepared.append((feats, amap, mask))
    params = model.parameters()
    epoch_means = []
    for epoch in range(cfg.epochs):
        rng = make_rng(ctx.shuffle_seed, epoch)
        order = rng.permutation(len(prepared))
        total = 0.0
        for idx in order:
            feats, amap, mask = prepared[idx]
            g = Graph()
            pred = ard_forward(g, model, feats, amap)
            loss = dice_loss(g, pred, mask, cfg.eps_dice)
            lv = loss.item()
            if not np.isfinite(lv):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1}, pair {idx}"
                )
            g.backward(loss)
            sgd_step(params, cfg.lr)
            total += lv
        epoch_means.append(total / len(prepared))
    if cfg.epochs > 0:
        model.trained_groups += 1
    return epoch_means


def refine_group(model: ArdModel, feats_list, coarse_list, group_index: int) -> list:
    """Refined+averaged final maps for one group: per image,
    (upsample(coarse, P) + decoder(F, A)) / 2."""
    if group_index > 1 and model.trained_groups < 1:
        raise ProtocolError(
            f"group {group_index} reached with an untrained decoder"
        )
    finals = []
    half = np.float32(0.5)
    for feats, amap in zip(feats_list, coarse_list):
        coarse_px = upsample_array(amap.grid.data, model.patch_size)
        g = Graph()
        refined = ard_forward(g, model, feats, amap).data
        finals.append((coarse_px + refined) * half)
    return finals


def _passthrough(coarse_list, patch: int) -> list:
    return [upsample_array(a.grid.data, patch) for a in coarse_list]


class _GroupData:
    """Loaded per-group working set."""

    def __init__(self, state, images, features, scorer, records):
        self.state = state
        self.images = images
        self.features = features
        self.scorer = scorer
        self.records = records


def _normalize_file_maps(maps):
    """Per-group min-max normalization of externally loaded score maps,
    with the constant-group exemption."""
    raw = np.stack([m.grid.data for m in maps])
    gmin, gmax = float(raw.min()), float(raw.max())
    out = []
    for m in maps:
        if gmax == gmin:
            grid = np.zeros_like(m.grid.data)
        else:
            grid = ((m.grid.data - gmin) / (gmax - gmin)).astype(np.float32)
        out.append(CoarseAnomalyMap(Tensor(grid), normalized=True))
    return out


def _load_group(records, base_dir, cfg, index) -> _GroupData:
    images = [read_image(Path(base_dir) / r.path) for r in records]
    features = []
    file_maps = []
    for rec, img in zip(records, images):
        if cfg.scorer == "external":
            ext = Path(cfg.external_dir)
            fmap, amap = load_external(
                ext / f"{rec.image_id}.feature.anr1",
                ext / f"{rec.image_id}.anomaly.anr1",
                patch_size=cfg.patch,
            )
            file_maps.append(amap)
        else:
            fmap = extract_patch_features(img, cfg.patch, cfg.base_seed)
        features.append(fmap)
    scorer = GroupScorer.fit(features)
    if cfg.scorer == "external":
        coarse = (
            _normalize_file_maps(file_maps) if cfg.normalize_external else file_maps
        )
    else:
        coarse = scorer.maps
    state = GroupState(index, [r.image_id for r in records], coarse)
    return _GroupData(state, images, features, scorer, records)


def _contaminate(pn_positions, records, seed):
    """Swap the highest-score tail of the pseudo-normal picks for known
    defect images from the same group (the robustness experiment knob)."""
    defect_positions = [
        i for i, r in enumerate(records) if r.gt_label == 1 and i not in pn_positions
    ]
    return defect_positions, make_rng(seed)


def _load_textures(texture_dir):
    if texture_dir is None:
        return None
    paths = sorted(
        p for p in Path(texture_dir).iterdir() if p.suffix in (".pgm", ".ppm")
    )
    if not paths:
        raise ProtocolError(f"texture dir {texture_dir} holds no P5/P6 images")
    return [read_image(p) for p in paths]


def run_pgt(records, cfg, base_dir, progress=None) -> RunResult:
    """Execute the full protocol over a manifest; returns in-memory results
    only (callers own all file output)."""
    # the decoder's GEMMs are small enough that one BLAS thread beats the
    # pool, and a pinned count keeps results byte-identical across machines
    # with different ambient threading
    with threadpool_limits(limits=1, user_api="blas"):
        return _run_pgt(records, cfg, base_dir, progress)


def _run_pgt(records, cfg, base_dir, progress=None) -> RunResult:
    records = list(records)
    if not records:
        raise ProtocolError("empty manifest")
    textures = _load_textures(getattr(cfg, "texture_dir", None))
    by_category: dict = {}
    for rec in records:
        by_category.setdefault(rec.category, []).append(rec)

    categories = []
    for category in sorted(by_category):
        cat_records = by_category[category]
        cat_id = stable_id(category)
        groups_ids = partition_groups([r.image_id for r in cat_records], cfg.u)
        rec_by_id = {r.image_id: r for r in cat_records}
        model = None
        cat_result = CategoryResult(category, [], [])
        for gi, gids in enumerate(groups_ids, start=1):
            t0 = time.monotonic()
            grecords = [rec_by_id[i] for i in gids]
            data = _load_group(grecords, base_dir, cfg, gi)
            if gi == 1:
                data.state.final_maps = _passthrough(data.state.coarse_maps, cfg.patch)
            else:
                data.state.final_maps = refine_group(
                    model, data.features, data.state.coarse_maps, gi
                )
            has_next = gi < len(groups_ids)
            if has_next:
                if model is None:
                    f0 = data.features[0]
                    model = ArdModel.create(
                        f0.grid.dims[0], f0.grid.dims[1], f0.channels,
                        cfg.patch, seed=mix64(cfg.base_seed, cat_id),
                    )
                pn_positions = select_pseudo_normals(data.state.coarse_maps, cfg.r)
                if cfg.contamination > 0:
                    n_swap = int(round(cfg.contamination * len(pn_positions)))
                    defect_positions, crng = _contaminate(
                        pn_positions, grecords,
                        mix64(cfg.base_seed, cat_id, gi, _CONTAM_STREAM),
                    )
                    n_swap = min(n_swap, len(defect_positions))
                    if n_swap:
                        picks = crng.choice(
                            len(defect_positions), size=n_swap, replace=False
                        )
                        swapped = [defect_positions[int(p)] for p in picks]
                        pn_positions = pn_positions[: len(pn_positions) - n_swap] + swapped
                pairs = synthesize_set(
                    [data.images[p] for p in pn_positions],
                    cfg.l,
                    cfg.strategy,
                    mix64(cfg.base_seed, cat_id, gi, _SYNTH_STREAM),
                    textures=textures,
                )
                ctx = TrainContext(
                    scorer=data.scorer,
                    pn_positions=pn_positions,
                    bank_seed=cfg.base_seed,
                    shuffle_seed=mix64(cfg.base_seed, cat_id, gi, _TRAIN_STREAM),
                )
                losses = train_group(model, pairs, cfg, ctx)
                cat_result.epoch_losses[gi] = losses
                data.state.trained_through = True
            seconds = time.monotonic() - t0
            cat_result.group_seconds[gi] = seconds
            if progress is not None:
                progress(category, gi, cat_result.epoch_losses.get(gi), seconds)
            for pos, rec in enumerate(grecords):
                fmap = data.state.final_maps[pos]
                cat_result.images.append(
                    ImageResult(
                        rec.image_id, category, gi,
                        data.state.coarse_maps[pos].grid.data.copy(),
                        fmap, float(fmap.max()),
                    )
                )
            cat_result.groups.append(data.state)
        categories.append(cat_result)
    return RunResult(categories)
