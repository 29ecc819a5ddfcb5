"""Classification/regression heads, losses, and the online discriminative filter.

The heads are small anchor-free conv stacks over the correlation map: each
location predicts a confidence and the (l, t, r, b) distances to the box
sides, exp-activated so extents stay positive.  The online filter is a
ridge-regression correlation filter solved by a few conjugate-gradient steps
over an exponentially weighted sample memory; its response regularizes the
head confidence through a weighted fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor


@dataclass
class BranchParams:
    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor
    proj: Tensor
    pb: Tensor

    def tensors(self, prefix: str) -> dict:
        return {
            f"{prefix}.k1": self.k1, f"{prefix}.b1": self.b1,
            f"{prefix}.k2": self.k2, f"{prefix}.b2": self.b2,
            f"{prefix}.proj": self.proj, f"{prefix}.pb": self.pb,
        }


@dataclass
class HeadParams:
    cls: BranchParams
    reg: BranchParams

    def tensors(self) -> dict:
        return {**self.cls.tensors("cls"), **self.reg.tensors("reg")}


def _init_branch(rng: ad.Rng, d_in: int, d_head: int, out_ch: int) -> BranchParams:
    def conv(kh, kw, cin, cout, std):
        return Tensor(rng.normal((kh, kw, cin, cout), std=std), requires_grad=True)

    def bias(n):
        return Tensor(np.zeros(n, dtype=ad.DEFAULT_DTYPE), requires_grad=True)

    return BranchParams(
        k1=conv(3, 3, d_in, d_head, np.sqrt(2.0 / (9 * d_in))),
        b1=bias(d_head),
        k2=conv(3, 3, d_head, d_head, np.sqrt(2.0 / (9 * d_head))),
        b2=bias(d_head),
        proj=conv(1, 1, d_head, out_ch, 0.01),
        pb=bias(out_ch),
    )


def init_heads(rng: ad.Rng, d_in: int, d_head: int = 32) -> HeadParams:
    return HeadParams(
        cls=_init_branch(rng, d_in, d_head, 1),
        reg=_init_branch(rng, d_in, d_head, 4),
    )


def _branch(corr, p: BranchParams) -> Tensor:
    x = corr if isinstance(corr, Tensor) else Tensor(np.asarray(corr))
    x = ad.relu(ad.conv2d(x, p.k1) + p.b1)
    x = ad.relu(ad.conv2d(x, p.k2) + p.b2)
    return ad.conv2d(x, p.proj) + p.pb


def cls_head(corr, params: HeadParams) -> Tensor:
    """Per-location confidence in (0, 1), shape (h, w)."""
    z = _branch(corr, params.cls)
    h, w = z.shape[0], z.shape[1]
    return ad.sigmoid(z.reshape(h, w))


def reg_head(corr, params: HeadParams) -> Tensor:
    """Per-location box side distances (l, t, r, b), exp-activated, shape (h, w, 4)."""
    return ad.exp(_branch(corr, params.reg))


def decode_box(p_cls, offsets, grid_hw=None):
    """Box and confidence at the argmax of the fused score map.

    The location (p, q) with offsets (l, t, r, b) decodes to
    x = q - l, y = p - t, w = l + r, h = t + b; ties pick the smallest
    row-major index; the box is clamped into grid_hw when given.
    """
    scores = p_cls.data if isinstance(p_cls, Tensor) else np.asarray(p_cls)
    offs = offsets.data if isinstance(offsets, Tensor) else np.asarray(offsets)
    h, w = scores.shape
    flat = int(np.argmax(scores))
    p, q = flat // w, flat % w
    l, t, r, b = (float(v) for v in offs[p, q])
    box = [q - l, p - t, l + r, t + b]
    if grid_hw is not None:
        gh, gw = grid_hw
        box[2] = min(box[2], float(gw))
        box[3] = min(box[3], float(gh))
        box[0] = float(np.clip(box[0], 0.0, gw - box[2]))
        box[1] = float(np.clip(box[1], 0.0, gh - box[3]))
    return tuple(float(v) for v in box), float(scores[p, q])


def fuse_response(p_r, p_o, beta: float = 0.8) -> np.ndarray:
    """p_cls = beta * p_r + (1 - beta) * p_o."""
    pr = p_r.data if isinstance(p_r, Tensor) else np.asarray(p_r)
    po = p_o.data if isinstance(p_o, Tensor) else np.asarray(p_o)
    if pr.shape != po.shape:
        raise ShapeError(f"response shapes differ: {pr.shape} vs {po.shape}")
    return beta * pr + (1.0 - beta) * po


def make_cls_labels(gt_box, h: int, w: int, radius: float = 1.5):
    """Center-sampled binary labels over integer anchors, plus positive indices."""
    x, y, bw, bh = (float(v) for v in gt_box)
    cx, cy = x + bw / 2.0, y + bh / 2.0
    qs, ps = np.meshgrid(np.arange(w), np.arange(h))
    d2 = (qs - cx) ** 2 + (ps - cy) ** 2
    labels = (d2 <= radius * radius).astype(np.float64)
    return labels, np.flatnonzero(labels.reshape(-1))


def gaussian_map(h: int, w: int, center, sigma: float) -> np.ndarray:
    """Unit-peak Gaussian label map, used by the online filter."""
    cx, cy = float(center[0]), float(center[1])
    qs, ps = np.meshgrid(np.arange(w), np.arange(h))
    return np.exp(-((qs - cx) ** 2 + (ps - cy) ** 2) / (2.0 * sigma * sigma))


def giou_loss(pred: Tensor, gt) -> Tensor:
    """Mean (1 - GIoU) between (n, 4) box tensors, in [0, 2]; areas floored at 1e-6."""
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    gt = gt.astype(pred.dtype)
    px, py = pred[:, 0], pred[:, 1]
    pw, ph = pred[:, 2], pred[:, 3]
    gx, gy, gw, gh = gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3]
    ix = ad.clip(ad.minimum(px + pw, Tensor(gx + gw)) - ad.maximum(px, Tensor(gx)), 0.0, np.inf)
    iy = ad.clip(ad.minimum(py + ph, Tensor(gy + gh)) - ad.maximum(py, Tensor(gy)), 0.0, np.inf)
    inter = ix * iy
    union = ad.maximum(pw * ph + Tensor(gw * gh) - inter, 1e-6)
    hx = ad.maximum(px + pw, Tensor(gx + gw)) - ad.minimum(px, Tensor(gx))
    hy = ad.maximum(py + ph, Tensor(gy + gh)) - ad.minimum(py, Tensor(gy))
    hull = ad.maximum(hx * hy, 1e-6)
    giou = inter / union - (hull - union) / hull
    return ad.tmean(1.0 - giou)


def bce_loss(p, labels, pos_weight: float = 1.0) -> Tensor:
    """Mean weighted binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p))
    pc = ad.clip(p, 1e-7, 1.0 - 1e-7)
    pos = Tensor((y * pos_weight).astype(pc.dtype))
    neg = Tensor((1.0 - y).astype(pc.dtype))
    return -ad.tmean(pos * ad.log(pc) + neg * ad.log(1.0 - pc))


# ---------------------------------------------------------------------------
# online discriminative filter


@dataclass
class FilterConfig:
    k: int = 5  # kernel extent (odd)
    lam: float = 0.1  # ridge regularizer
    eta: float = 0.1  # memory learning rate
    n_cg: int = 5  # CG steps per update
    n_cg_init: int = 20  # CG steps at init
    max_memory: int = 30
    label_sigma: float = 2.0

    def validate(self) -> None:
        if self.k % 2 == 0:
            raise ContractError("filter kernel extent must be odd")
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError("eta must be in [0, 1]")


@dataclass
class OnlineFilterState:
    cfg: FilterConfig
    kernel: np.ndarray  # (k, k, d) float64
    feats: list  # memory sample features, each (h, w, d) float64
    labels: list  # matching label maps, each (h, w)
    weights: np.ndarray  # memory weights, sum to 1
    flags: list = field(default_factory=list)


def _correlate_stack(kernel: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Apply the kernel to a stack (m, h, w, d) -> responses (m, h, w)."""
    k = kernel.shape[0]
    pad = k // 2
    m, h, w, d = feats.shape
    padded = np.zeros((m, h + 2 * pad, w + 2 * pad, d))
    padded[:, pad : pad + h, pad : pad + w] = feats
    out = np.zeros((m, h, w))
    for di in range(k):
        for dj in range(k):
            out += padded[:, di : di + h, dj : dj + w] @ kernel[di, dj]
    return out


def _correlate_adjoint(resid: np.ndarray, feats: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of _correlate_stack in the kernel argument: (m,h,w)x(m,h,w,d)->(k,k,d)."""
    pad = k // 2
    m, h, w, d = feats.shape
    padded = np.zeros((m, h + 2 * pad, w + 2 * pad, d))
    padded[:, pad : pad + h, pad : pad + w] = feats
    out = np.zeros((k, k, d))
    for di in range(k):
        for dj in range(k):
            out[di, dj] = np.einsum("mhw,mhwc->c", resid, padded[:, di : di + h, dj : dj + w])
    return out


def _cg_solve(state: OnlineFilterState, steps: int) -> np.ndarray:
    """Run CG on the weighted ridge normal equations, warm-started at the kernel."""
    cfg = state.cfg
    feats = np.stack(state.feats)
    labels = np.stack(state.labels)
    wts = state.weights[:, None, None]

    def normal_op(kern):
        return _correlate_adjoint(wts * _correlate_stack(kern, feats), feats, cfg.k) + cfg.lam * kern

    b = _correlate_adjoint(wts * labels, feats, cfg.k)
    x = state.kernel.copy()
    r = b - normal_op(x)
    p = r.copy()
    rs = float((r * r).sum())
    for _ in range(steps):
        if rs == 0.0:
            break
        ap = normal_op(p)
        alpha = rs / float((p * ap).sum())
        x += alpha * p
        r -= alpha * ap
        rs_new = float((r * r).sum())
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def init_filter(cfg: FilterConfig, corr, label: np.ndarray) -> OnlineFilterState:
    """Fresh state from the exemplar-frame correlation map and its label."""
    cfg.validate()
    feat = np.asarray(corr.data if isinstance(corr, Tensor) else corr, dtype=np.float64)
    state = OnlineFilterState(
        cfg=cfg,
        kernel=np.zeros((cfg.k, cfg.k, feat.shape[2])),
        feats=[feat],
        labels=[np.asarray(label, dtype=np.float64)],
        weights=np.array([1.0]),
    )
    state.kernel = _cg_solve(state, cfg.n_cg_init)
    return state


def online_filter_update(state: OnlineFilterState, corr, label: np.ndarray) -> OnlineFilterState:
    """Blend the new sample into memory and refine the kernel by CG.

    eta = 0 leaves the state untouched; non-finite features skip the update
    and record a flag.
    """
    cfg = state.cfg
    if cfg.eta == 0.0:
        return state
    feat = np.asarray(corr.data if isinstance(corr, Tensor) else corr, dtype=np.float64)
    if not np.all(np.isfinite(feat)):
        flagged = OnlineFilterState(
            cfg=cfg, kernel=state.kernel, feats=state.feats, labels=state.labels,
            weights=state.weights, flags=state.flags + ["non-finite features; update skipped"],
        )
        return flagged
    feats = list(state.feats) + [feat]
    labels = list(state.labels) + [np.asarray(label, dtype=np.float64)]
    weights = np.concatenate([state.weights * (1.0 - cfg.eta), [cfg.eta]])
    if len(feats) > cfg.max_memory:
        drop = int(np.argmin(weights))
        feats.pop(drop)
        labels.pop(drop)
        weights = np.delete(weights, drop)
        weights = weights / weights.sum()
    new_state = OnlineFilterState(
        cfg=cfg, kernel=state.kernel, feats=feats, labels=labels,
        weights=weights, flags=list(state.flags),
    )
    new_state.kernel = _cg_solve(new_state, cfg.n_cg)
    return new_state


def apply_filter(state: OnlineFilterState, corr) -> np.ndarray:
    """Response map p_r of the current kernel over a correlation map."""
    feat = np.asarray(corr.data if isinstance(corr, Tensor) else corr, dtype=np.float64)
    return _correlate_stack(state.kernel, feat[None])[0]


def filter_residual(state: OnlineFilterState) -> float:
    """Weighted data-term residual norm over the memory, for diagnostics."""
    feats = np.stack(state.feats)
    labels = np.stack(state.labels)
    resid = _correlate_stack(state.kernel, feats) - labels
    return float(np.sqrt((state.weights[:, None, None] * resid**2).sum()))