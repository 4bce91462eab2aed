"""Explanation engines: occlusion maps, HiResCAM, kernel SHAP with an
exact Shapley oracle, cumulative class heatmaps, and cross-method
agreement scoring.

Occlusion and SHAP only need a probability function, so they accept
either a trained model or any object/callable exposing one (handy for
stub models in tests).  HiResCAM needs the real model's feature-map
gradients.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .binviz import nearest_resize
from .errors import (EmptyList, MixedMethods, ShapeMismatch, TooManySegments,
                     TooManySegmentsForExact, WindowTooLarge)
from .seeding import rng_for

OCCLUSION = "occlusion"
HIRESCAM = "hirescam"
SHAP = "shap"

EXACT_ORACLE_MAX_SEGMENTS = 12
EXACT_KERNEL_MAX_SEGMENTS = 20


@dataclass
class Heatmap:
    """Per-region importance map with its raw values preserved; rescaling
    to [0, 1] keeps the (min, max) record so raw values stay recoverable."""

    method: str
    raw: np.ndarray
    target_class: int
    meta: dict = field(default_factory=dict)

    @property
    def normalization(self) -> tuple[float, float]:
        return float(self.raw.min()), float(self.raw.max())

    def rescaled(self) -> np.ndarray:
        lo, hi = self.normalization
        if hi > lo:
            return (self.raw - lo) / (hi - lo)
        return np.zeros_like(self.raw)


@dataclass
class Segmentation:
    """Pixel -> segment id map over a regular g x g grid."""

    seg_map: np.ndarray  # (side, side) int
    n_segments: int

    @classmethod
    def regular_grid(cls, side: int, g: int) -> "Segmentation":
        rows = (np.arange(side) * g) // side
        cols = (np.arange(side) * g) // side
        seg = rows[:, None] * g + cols[None, :]
        return cls(seg_map=seg.astype(np.int64), n_segments=g * g)


@dataclass
class AgreementScore:
    pair: tuple[str, str]
    iou_topk: float
    rank_corr: float
    k: int


def _as_predict_fn(model):
    if callable(model) and not hasattr(model, "predict_proba"):
        return model
    return model.predict_proba


# ---------------------------------------------------------------------------
# occlusion


def occlusion_map(model, x: np.ndarray, window: int = 8, stride: int = 4,
                  baseline: float = 0.0, target_class: int | None = None) -> Heatmap:
    """Slide a baseline-filled window over the input and record the drop in
    the predicted class probability; overlapping windows average per pixel."""
    predict_fn = _as_predict_fn(model)
    x = np.asarray(x, dtype=np.float32)
    side_h, side_w = x.shape
    if window > min(side_h, side_w):
        raise WindowTooLarge(f"window {window} exceeds input side {min(side_h, side_w)}")
    p0 = np.asarray(predict_fn(x[None]))[0]
    c = int(target_class) if target_class is not None else int(p0.argmax())

    def positions(side):
        pos = list(range(0, side - window + 1, stride))
        if pos[-1] != side - window:
            pos.append(side - window)
        return pos

    rows = positions(side_h)
    cols = positions(side_w)
    occluded = np.empty((len(rows) * len(cols), side_h, side_w), dtype=np.float32)
    k = 0
    for r in rows:
        for cc in cols:
            occ = x.copy()
            occ[r:r + window, cc:cc + window] = baseline
            occluded[k] = occ
            k += 1
    probs = np.asarray(predict_fn(occluded))[:, c]
    scores = p0[c] - probs

    acc = np.zeros((side_h, side_w), dtype=np.float64)
    cnt = np.zeros((side_h, side_w), dtype=np.float64)
    k = 0
    for r in rows:
        for cc in cols:
            acc[r:r + window, cc:cc + window] += scores[k]
            cnt[r:r + window, cc:cc + window] += 1.0
            k += 1
    raw = acc / np.maximum(cnt, 1.0)
    return Heatmap(method=OCCLUSION, raw=raw, target_class=c,
                   meta={"window": window, "stride": stride, "baseline": baseline})


# ---------------------------------------------------------------------------
# HiResCAM


def hirescam(model, x: np.ndarray, target_class: int) -> Heatmap:
    """Elementwise product of the last conv feature map with the gradient
    of the pre-softmax class score, summed over channels; signed values
    are kept (no ReLU clipping) and upsampled nearest to the input size."""
    from .nn import class_score_feature_grad

    x = np.asarray(x)
    a, d_a = class_score_feature_grad(model, x[None] if x.ndim == 2 else x, int(target_class))
    raw_small = (a[0].astype(np.float64) * d_a[0].astype(np.float64)).sum(axis=0)
    side = x.shape[-1]
    raw = nearest_resize(raw_small, side, side)
    return Heatmap(method=HIRESCAM, raw=raw, target_class=int(target_class),
                   meta={"feature_shape": list(raw_small.shape)})


# ---------------------------------------------------------------------------
# kernel SHAP


def _masked_batch(x: np.ndarray, seg: Segmentation, coalitions: np.ndarray,
                  background: float) -> np.ndarray:
    out = np.empty((len(coalitions),) + x.shape, dtype=np.float32)
    for i, z in enumerate(coalitions):
        keep = z[seg.seg_map]
        out[i] = np.where(keep, x, np.float32(background))
    return out


def _kernel_weight(m: int, s: int) -> float:
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _solve_weighted(z: np.ndarray, y: np.ndarray, w: np.ndarray, delta: float) -> np.ndarray:
    """Kernel-weighted least squares with the efficiency constraint folded
    in by eliminating the last segment."""
    m = z.shape[1]
    if m == 1:
        return np.array([delta])
    zlast = z[:, m - 1]
    design = z[:, :m - 1] - zlast[:, None]
    target = y - zlast * delta
    sw = np.sqrt(w)[:, None]
    phi_head, *_ = np.linalg.lstsq(design * sw, target * sw[:, 0], rcond=None)
    phi = np.empty(m, dtype=np.float64)
    phi[:m - 1] = phi_head
    phi[m - 1] = delta - phi_head.sum()
    return phi


def kernel_shap(model, x: np.ndarray, seg: Segmentation, background: float = 0.0,
                n_coalitions: int | str = 2048, seed: int = 0,
                target_class: int | None = None, chunk: int = 64) -> Heatmap:
    """Shapley values per segment via the kernel-weighted regression; with
    ``n_coalitions="all"`` every coalition is enumerated (exact)."""
    predict_fn = _as_predict_fn(model)
    x = np.asarray(x, dtype=np.float32)
    m = seg.n_segments
    exact = n_coalitions == "all"
    if exact and m > EXACT_KERNEL_MAX_SEGMENTS:
        raise TooManySegmentsForExact(f"{m} segments is too many to enumerate")
    if not exact and int(n_coalitions) < m + 2:
        raise TooManySegments(f"need at least {m + 2} coalitions for {m} segments")

    p0 = np.asarray(predict_fn(x[None]))[0]
    c = int(target_class) if target_class is not None else int(p0.argmax())

    def values_for(coalitions: np.ndarray) -> np.ndarray:
        vals = np.empty(len(coalitions), dtype=np.float64)
        for start in range(0, len(coalitions), chunk):
            batch = _masked_batch(x, seg, coalitions[start:start + chunk], background)
            vals[start:start + chunk] = np.asarray(predict_fn(batch))[:, c]
        return vals

    v_empty = float(values_for(np.zeros((1, m), dtype=bool))[0])
    v_full = float(p0[c])
    delta = v_full - v_empty
    if m == 1:
        phi = np.array([delta])
    else:
        if exact:
            coalitions = []
            weights = []
            for bits in itertools.product((False, True), repeat=m):
                s = sum(bits)
                if 0 < s < m:
                    coalitions.append(bits)
                    weights.append(_kernel_weight(m, s))
            z = np.array(coalitions, dtype=bool)
            w = np.array(weights, dtype=np.float64)
        else:
            rng = rng_for(seed, "shap")
            sizes = np.arange(1, m)
            size_p = (m - 1) / (sizes * (m - sizes))
            size_p = size_p / size_p.sum()
            counts: dict[bytes, int] = {}
            for _ in range(int(n_coalitions)):
                s = int(rng.choice(sizes, p=size_p))
                members = rng.choice(m, size=s, replace=False)
                zz = np.zeros(m, dtype=bool)
                zz[members] = True
                key = zz.tobytes()
                counts[key] = counts.get(key, 0) + 1
            z = np.array([np.frombuffer(k, dtype=bool) for k in sorted(counts)], dtype=bool)
            w = np.array([counts[k] for k in sorted(counts)], dtype=np.float64)
        y = values_for(z) - v_empty
        phi = _solve_weighted(z.astype(np.float64), y, w, delta)
    raw = phi[seg.seg_map].astype(np.float64)
    return Heatmap(method=SHAP, raw=raw, target_class=c,
                   meta={"segments": m, "coalitions": "all" if exact else int(n_coalitions),
                         "seed": seed, "background": background, "phi": phi.tolist()})


def exact_shap_oracle(value_fn, m: int) -> np.ndarray:
    """Direct Shapley sum over all 2^m coalitions (float64 test oracle)."""
    if m > EXACT_ORACLE_MAX_SEGMENTS:
        raise TooManySegments(f"{m} segments is too many for the exact oracle")
    values = np.empty(1 << m, dtype=np.float64)
    for mask in range(1 << m):
        z = np.array([(mask >> j) & 1 for j in range(m)], dtype=bool)
        values[mask] = float(value_fn(z))
    fact = [math.factorial(i) for i in range(m + 1)]
    phi = np.zeros(m, dtype=np.float64)
    for i in range(m):
        for mask in range(1 << m):
            if (mask >> i) & 1:
                continue
            s = bin(mask).count("1")
            weight = fact[s] * fact[m - s - 1] / fact[m]
            phi[i] += weight * (values[mask | (1 << i)] - values[mask])
    return phi


# ---------------------------------------------------------------------------
# aggregation and agreement


def cumulative_heatmap(maps: list[Heatmap]) -> Heatmap:
    """Elementwise mean of raw grids from one method/class/resolution."""
    if not maps:
        raise EmptyList("no heatmaps to accumulate")
    first = maps[0]
    for h in maps[1:]:
        if h.method != first.method:
            raise MixedMethods(f"cannot mix {first.method} with {h.method}")
        if h.raw.shape != first.raw.shape:
            raise MixedMethods("heatmap resolutions differ")
        if h.target_class != first.target_class:
            raise MixedMethods("heatmap target classes differ")
    acc = np.zeros_like(first.raw, dtype=np.float64)
    for h in maps:
        acc += h.raw
    return Heatmap(method=first.method, raw=acc / len(maps), target_class=first.target_class,
                   meta={"cumulative_of": len(maps)})


def resample_heatmap(h: Heatmap, side: int) -> Heatmap:
    if h.raw.shape == (side, side):
        return h
    return Heatmap(method=h.method, raw=nearest_resize(h.raw, side, side),
                   target_class=h.target_class, meta=dict(h.meta))


def grid_overlay(side: int, cell: int, line: int = 255, background: int = 0) -> np.ndarray:
    """Companion image with grid lines every ``cell`` pixels, for reading
    coordinates off exported heatmaps."""
    img = np.full((side, side), background, dtype=np.uint8)
    img[::cell, :] = line
    img[:, ::cell] = line
    img[-1, :] = line
    img[:, -1] = line
    return img


def _rank_with_ties(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a), dtype=np.float64)
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation with tie-averaged ranks; 0.0 when either
    side is constant."""
    ra, rb = _rank_with_ties(a), _rank_with_ties(b)
    sa, sb = ra.std(), rb.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(((ra - ra.mean()) * (rb - rb.mean())).mean() / (sa * sb))


def top_k_cells(raw: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest cells in the flattened grid, ties broken
    by lower index."""
    flat = raw.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    return [int(i) for i in order[:k]]


def agreement(h1: Heatmap, h2: Heatmap, k: int = 16) -> AgreementScore:
    """Top-k IoU over cell indices plus Spearman correlation of the raw
    grids; symmetric in argument order."""
    if h1.raw.shape != h2.raw.shape:
        raise ShapeMismatch(f"heatmap shapes differ: {h1.raw.shape} vs {h2.raw.shape}")
    t1 = set(top_k_cells(h1.raw, k))
    t2 = set(top_k_cells(h2.raw, k))
    union = len(t1 | t2)
    iou = len(t1 & t2) / union if union else 1.0
    rho = spearman(h1.raw.ravel(), h2.raw.ravel())
    return AgreementScore(pair=(h1.method, h2.method), iou_topk=float(iou),
                          rank_corr=rho, k=k)
