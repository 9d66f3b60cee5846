"""Independent oracles the test suite checks the fast paths against.

Everything here is deliberately written in the most literal way possible
(explicit loops, pairwise counting, per-pixel evaluation) and never calls
the implementation paths it is used to verify.
"""

import math

import numpy as np

from anoref.rng import make_rng, mix64


# -- finite differences ----------------------------------------------------


def finite_difference(f, tensor, indices, h=1e-3):
    """Central-difference gradient of scalar f() at the given flat indices
    of tensor.data; f re-runs the whole forward pass each call."""
    flat = tensor.data.reshape(-1)
    grads = []
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + np.float32(h)
        up = f()
        flat[idx] = orig - np.float32(h)
        down = f()
        flat[idx] = orig
        grads.append((up - down) / (2.0 * h))
    return np.asarray(grads, dtype=np.float64)


def fd_relative_error(f, tensors, h=1e-3, max_coords=None, rng=None):
    """Max |autodiff - fd| over sampled coordinates of every tensor,
    normalized by the largest fd-gradient magnitude seen (with a floor of
    1.0 so a near-zero gradient field cannot inflate the ratio)."""
    worst = 0.0
    scale = 1.0
    errs = []
    for t in tensors:
        n = t.data.size
        if max_coords is None or n <= max_coords:
            indices = np.arange(n)
        else:
            indices = rng.choice(n, size=max_coords, replace=False)
        ad = t.grad.reshape(-1)[indices].astype(np.float64)
        fd = finite_difference(f, t, indices, h)
        scale = max(scale, float(np.abs(fd).max(initial=0.0)))
        errs.append(np.abs(ad - fd))
    for e in errs:
        worst = max(worst, float(e.max(initial=0.0)))
    return worst / scale


# -- metric oracles ----------------------------------------------------------


def brute_auroc(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = float((pos[:, None] > neg[None, :]).sum())
    ties = float((pos[:, None] == neg[None, :]).sum())
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def brute_average_precision(scores, labels):
    """Per-positive rank counting under the pessimistic tie rule (negatives
    before positives at equal score); precisions summed in rank order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    entries = []
    for i in np.flatnonzero(labels == 1):
        s = scores[i]
        higher = int((scores > s).sum())
        eq_neg = int(((scores == s) & (labels == 0)).sum())
        eq_pos_before = int(((scores == s) & (labels == 1))[:i].sum())
        rank = higher + eq_neg + eq_pos_before + 1
        tp_at_rank = int((scores > s)[labels == 1].sum()) + eq_pos_before + 1
        entries.append((rank, tp_at_rank / rank))
    entries.sort()
    total = 0.0
    for _, prec in entries:
        total += prec
    return total / int((labels == 1).sum())


def brute_f1_max(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = int((labels == 1).sum())
    best = 0.0
    for tau in np.unique(scores):
        pred = scores >= tau
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        fn = p - tp
        denom = 2 * tp + fp + fn
        f1 = 0.0 if denom == 0 else (2 * tp) / denom
        if f1 > best:
            best = f1
    return best


def brute_mutual_scores(grids):
    """Triple-loop mean nearest-patch distance, mirroring the contract."""
    n = len(grids)
    flats = [np.asarray(g, dtype=np.float64).reshape(-1, grids[0].shape[-1]) for g in grids]
    m = flats[0].shape[0]
    raws = []
    for i in range(n):
        raw = np.zeros(m)
        for p in range(m):
            acc = 0.0
            for j in range(n):
                if j == i:
                    continue
                best = math.inf
                for q in range(m):
                    d = math.sqrt(float(((flats[i][p] - flats[j][q]) ** 2).sum()))
                    best = min(best, d)
                acc += best
            raw[p] = acc / (n - 1)
        raws.append(raw)
    return raws


# -- reference Perlin (scalar, loop-based) -----------------------------------


def reference_gradient_noise(H, W, cell, seed):
    """Per-pixel scalar re-implementation of single-octave gradient noise,
    using the same lattice-gradient draw and blend formulas."""
    gh = int(math.ceil(H / cell)) + 1
    gw = int(math.ceil(W / cell)) + 1
    rng = make_rng(seed)
    angles = rng.uniform(0.0, 2.0 * math.pi, size=(gh, gw))
    gx = np.cos(angles)
    gy = np.sin(angles)

    def fade(t):
        return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)

    out = np.zeros((H, W), dtype=np.float64)
    for y in range(H):
        for x in range(W):
            v = y / cell
            u = x / cell
            i0 = math.floor(v)
            j0 = math.floor(u)
            dy = v - i0
            dx = u - j0
            n00 = gx[i0, j0] * dx + gy[i0, j0] * dy
            n01 = gx[i0, j0 + 1] * (dx - 1.0) + gy[i0, j0 + 1] * dy
            n10 = gx[i0 + 1, j0] * dx + gy[i0 + 1, j0] * (dy - 1.0)
            n11 = gx[i0 + 1, j0 + 1] * (dx - 1.0) + gy[i0 + 1, j0 + 1] * (dy - 1.0)
            sx = fade(dx)
            sy = fade(dy)
            ix0 = n00 + sx * (n01 - n00)
            ix1 = n10 + sx * (n11 - n10)
            out[y, x] = ix0 + sy * (ix1 - ix0)
    return out


def reference_perlin_mask(H, W, seed, octaves=2, threshold=0.5, persistence=0.5):
    base_cell = H / 4.0
    for attempt in range(17):
        field = np.zeros((H, W), dtype=np.float64)
        amp = 1.0
        for o in range(octaves):
            field += amp * reference_gradient_noise(
                H, W, base_cell / (2.0**o), mix64(seed + attempt, o)
            )
            amp *= persistence
        fmin, fmax = field.min(), field.max()
        if fmax == fmin:
            continue
        mask = ((field - fmin) / (fmax - fmin)) > threshold
        if 1 <= mask.sum() <= 0.5 * H * W:
            return mask.astype(np.uint8)[:, :, None]
    raise AssertionError("reference mask synthesis failed")
