"""Saliency mining over exemplar/search feature grids.

Pipeline pieces: ROI pooling of the exemplar box to a fixed grid, the
cosine-similarity volume between exemplar cells and search cells, main-lobe
extraction per similarity map, the peak-to-sidelobe intensity, lobe
concentration, a center-weighted Gaussian prior, and top-K selection.

Region masks (main lobe / sidelobe) are computed from raw values and treated
as constants during backward; gradients flow through the map values only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


@dataclass
class SaliencyConfig:
    alpha: float = 0.5  # concentration exponent
    lam: float = 1.0  # weight of the Gaussian prior
    sigma_g: float = 2.0  # prior std, grid units
    k: int = 48  # saliencies to keep
    eps: float = 1e-6

    def validate(self) -> None:
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if self.sigma_g <= 0:
            raise ContractError("sigma_g must be > 0")
        if self.k < 1:
            raise ContractError("k must be >= 1")


@dataclass
class MainLobe:
    mask: np.ndarray  # bool, h_s x w_s
    area: int
    peak: tuple  # (p, q)


@dataclass
class SaliencySet:
    p_x: list  # K exemplar cells (u, v), saliency-descending
    p_s: list  # matched search cells (p, q)
    values: np.ndarray  # K scores, non-increasing


def roi_pool_exemplar(frame, box, out_hw=(8, 8)) -> Tensor:
    """Average-pool the box region of a feature frame onto a fixed out_hw grid.

    The frame is treated as a piecewise-constant field where cell (r, c)
    covers [c, c+1) x [r, r+1); each output cell averages its sub-rectangle
    of the box exactly, via separable area-overlap weights.  A box aligned
    to an out_hw block of cells therefore returns those cells unchanged.
    """
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    h, w, _ = data.shape
    x, y, bw, bh = (float(v) for v in box)
    if bw < 1.0 or bh < 1.0:
        raise ContractError(f"degenerate box {box}: extents must be >= 1 grid unit")
    if x < 0 or y < 0 or x + bw > w or y + bh > h:
        raise ContractError(f"box {box} outside {h}x{w} frame")
    out_h, out_w = out_hw
    wy = _overlap_weights(y, bh, out_h, h)
    wx = _overlap_weights(x, bw, out_w, w)
    pooled = np.einsum("ir,jc,rck->ijk", wy, wx, data.astype(np.float64))
    return Tensor(pooled.astype(data.dtype))


def _overlap_weights(start: float, extent: float, bins: int, n_cells: int) -> np.ndarray:
    """weights[i, c] = fraction of output bin i covered by input cell c."""
    weights = np.zeros((bins, n_cells), dtype=np.float64)
    step = extent / bins
    for i in range(bins):
        lo = start + i * step
        hi = lo + step
        c0, c1 = int(np.floor(lo)), int(np.ceil(hi))
        for c in range(max(c0, 0), min(c1, n_cells)):
            weights[i, c] = max(0.0, min(hi, c + 1.0) - max(lo, c)) / step
    return weights


def build_similarity_volume(f_x, f_s, eps: float = 1e-6) -> Tensor:
    """Cosine similarities S[(u,v),(p,q)] as an (h_x*w_x, h_s, w_s) tensor.

    Cells whose feature norm falls below eps get similarity 0 everywhere,
    so zeroed (occluded) content never matches anything.
    """
    xd = (f_x.data if isinstance(f_x, Tensor) else np.asarray(f_x)).astype(np.float64)
    sd = (f_s.data if isinstance(f_s, Tensor) else np.asarray(f_s)).astype(np.float64)
    if xd.shape[-1] != sd.shape[-1]:
        raise ad.ShapeError(f"channel mismatch: {xd.shape} vs {sd.shape}")
    hx, wx, c = xd.shape
    hs, ws, _ = sd.shape
    xf = xd.reshape(-1, c)
    sf = sd.reshape(-1, c)
    xn = np.linalg.norm(xf, axis=1)
    sn = np.linalg.norm(sf, axis=1)
    xu = np.where(xn[:, None] < eps, 0.0, xf / np.maximum(xn, eps)[:, None])
    su = np.where(sn[:, None] < eps, 0.0, sf / np.maximum(sn, eps)[:, None])
    vol = np.clip(xu @ su.T, -1.0, 1.0)
    orig = (f_s.data if isinstance(f_s, Tensor) else np.asarray(f_s)).dtype
    dtype = orig if orig in (np.float32, np.float64) else ad.DEFAULT_DTYPE
    return Tensor(vol.reshape(hx * wx, hs, ws).astype(dtype))


def _dilate8(masks: np.ndarray) -> np.ndarray:
    """8-connected dilation of a stack of boolean masks (n, h, w)."""
    n, h, w = masks.shape
    padded = np.zeros((n, h + 2, w + 2), dtype=bool)
    padded[:, 1 : h + 1, 1 : w + 1] = masks
    out = np.zeros_like(masks)
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            out |= padded[:, di : di + h, dj : dj + w]
    return out


def batch_main_lobes(maps: np.ndarray):
    """Main lobes of a stack of maps (n, h, w) at once.

    Returns (masks, areas, peaks): the 8-connected component of each map's
    argmax within its >= mean super-level set, grown by repeated dilation.
    """
    maps = np.asarray(maps, dtype=np.float64)
    n, h, w = maps.shape
    # the mean of a constant map can round a hair above its elements, which
    # would empty the level set; the max always belongs to it by definition
    thresh = np.minimum(maps.mean(axis=(1, 2)), maps.max(axis=(1, 2)))
    above = maps >= thresh[:, None, None]
    flat_peaks = maps.reshape(n, -1).argmax(axis=1)
    peaks = np.stack([flat_peaks // w, flat_peaks % w], axis=1)
    masks = np.zeros((n, h, w), dtype=bool)
    masks[np.arange(n), peaks[:, 0], peaks[:, 1]] = True
    while True:
        grown = _dilate8(masks) & above
        if (grown == masks).all():
            break
        masks = grown
    areas = masks.sum(axis=(1, 2))
    return masks, areas, peaks


def main_lobe(s_uv) -> MainLobe:
    data = s_uv.data if isinstance(s_uv, Tensor) else np.asarray(s_uv)
    masks, areas, peaks = batch_main_lobes(data[None])
    return MainLobe(mask=masks[0], area=int(areas[0]), peak=(int(peaks[0, 0]), int(peaks[0, 1])))


def intensity_gamma(s_uv, lobe: MainLobe, eps: float = 1e-6) -> float:
    """Peak-to-sidelobe ratio with the sidelobe std floored at eps.

    The floor (rather than an additive eps) keeps gamma exactly invariant
    under positive affine rescaling of the map whenever the sidelobe has
    any spread at all.  Empty sidelobe means the peak explains the whole
    map, which is non-discriminative: gamma = 0.
    """
    data = (s_uv.data if isinstance(s_uv, Tensor) else np.asarray(s_uv)).astype(np.float64)
    phi = data[~lobe.mask]
    if phi.size == 0:
        return 0.0
    return float((data.max() - phi.mean()) / max(phi.std(), eps))


def concentration(lobe: MainLobe) -> float:
    if lobe.area < 1:
        raise ContractError("main lobe must contain at least the peak")
    return 1.0 / float(lobe.area)


def gaussian_prior(u: int, v: int, h_x: int, w_x: int, sigma_g: float) -> float:
    """Unnormalized center-peaked prior on the exemplar grid, max 1 at the center."""
    cu, cv = (h_x - 1) / 2.0, (w_x - 1) / 2.0
    d2 = (u - cu) ** 2 + (v - cv) ** 2
    return float(np.exp(-d2 / (2.0 * sigma_g**2)))


def saliency_score(s_uv, cfg: SaliencyConfig, uv, exemplar_hw) -> Tensor:
    """Differentiable saliency of one exemplar cell: s = gamma * c^alpha + lam * g.

    The main-lobe mask, its area, and the peak index are recomputed from the
    raw values and then frozen, so backward() sees a fixed region selection.
    """
    cfg.validate()
    t = s_uv if isinstance(s_uv, Tensor) else Tensor(np.asarray(s_uv))
    lobe = main_lobe(t)
    g = gaussian_prior(uv[0], uv[1], exemplar_hw[0], exemplar_hw[1], cfg.sigma_g)
    prior_term = cfg.lam * g
    phi_idx = np.flatnonzero(~lobe.mask.reshape(-1))
    if phi_idx.size == 0:
        return Tensor(np.asarray(prior_term, dtype=t.dtype)) + (t.reshape(-1)[0] * 0.0)
    flat = t.reshape(-1)
    peak_idx = int(lobe.peak[0] * t.shape[1] + lobe.peak[1])
    peak = flat[peak_idx]
    phi = flat[phi_idx]
    mu = ad.tmean(phi)
    centered = phi - mu
    sigma = ad.sqrt(ad.tmean(centered * centered))
    gamma = (peak - mu) / ad.maximum(sigma, Tensor(np.asarray(cfg.eps, dtype=t.dtype)))
    c_pow = concentration(lobe) ** cfg.alpha
    return gamma * c_pow + prior_term


def score_all(volume, cfg: SaliencyConfig, exemplar_hw):
    """Saliency scores for every exemplar cell, plus per-map argmax positions.

    Fast float64 path over the whole volume; agrees with saliency_score cell
    by cell.  Returns (scores[n_x], peaks[n_x, 2]).
    """
    cfg.validate()
    h_x, w_x = exemplar_hw
    data = (volume.data if isinstance(volume, Tensor) else np.asarray(volume)).astype(np.float64)
    n_x = data.shape[0]
    if n_x != h_x * w_x:
        raise ad.ShapeError(f"volume has {n_x} maps, exemplar grid is {h_x}x{w_x}")
    masks, areas, peaks = batch_main_lobes(data)
    n = data.shape[1] * data.shape[2]
    flat = data.reshape(n_x, -1)
    phi_counts = n - areas
    sums = np.where(masks, 0.0, data).sum(axis=(1, 2))
    sq_sums = np.where(masks, 0.0, data**2).sum(axis=(1, 2))
    gammas = np.zeros(n_x)
    nonempty = phi_counts > 0
    mu = np.zeros(n_x)
    var = np.zeros(n_x)
    mu[nonempty] = sums[nonempty] / phi_counts[nonempty]
    var[nonempty] = np.maximum(sq_sums[nonempty] / phi_counts[nonempty] - mu[nonempty] ** 2, 0.0)
    sig = np.maximum(np.sqrt(var), cfg.eps)
    gammas[nonempty] = (flat.max(axis=1)[nonempty] - mu[nonempty]) / sig[nonempty]
    uu, vv = np.meshgrid(np.arange(h_x), np.arange(w_x), indexing="ij")
    cu, cv = (h_x - 1) / 2.0, (w_x - 1) / 2.0
    prior = np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2.0 * cfg.sigma_g**2)).reshape(-1)
    scores = gammas * (1.0 / areas) ** cfg.alpha + cfg.lam * prior
    return scores, peaks


def select_saliencies(volume, cfg: SaliencyConfig, exemplar_hw) -> SaliencySet:
    """Top-K exemplar cells by saliency; ties keep the smaller row-major index."""
    h_x, w_x = exemplar_hw
    if cfg.k > h_x * w_x:
        raise ContractError(f"k={cfg.k} exceeds exemplar cell count {h_x * w_x}")
    scores, peaks = score_all(volume, cfg, exemplar_hw)
    order = np.argsort(-scores, kind="stable")[: cfg.k]
    p_x = [(int(i) // w_x, int(i) % w_x) for i in order]
    p_s = [(int(peaks[i, 0]), int(peaks[i, 1])) for i in order]
    return SaliencySet(p_x=p_x, p_s=p_s, values=scores[order])


def score_map(volume, cfg: SaliencyConfig, exemplar_hw) -> np.ndarray:
    """Saliency of every exemplar cell as an (h_x, w_x) float64 grid."""
    scores, _ = score_all(volume, cfg, exemplar_hw)
    return scores.reshape(exemplar_hw)
