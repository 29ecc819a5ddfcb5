"""Tracking loop, toy training, evaluation metrics, and ablation variants.

Variant switch points, mirroring the ablation ladder:
  base     heads + online filter directly on the search features
  ppfm     similarity volume stacked with F_s, adjusted by a two-layer CNN
  pam      graph association over all exemplar cells, equal gating
  saot     graph association gated by mined saliencies (the full model)
  dw_corr  depth-wise cross-correlation with the exemplar as one holistic kernel
  pg_corr  similarity maps + channel-kernel response combined by a 1x1 conv

Rng stream allocation for a harness seed: 7 parameter init, 8 frame picks
during training, 31..35 per-component init streams (worlds use 1..5, 11..13
and 100+/1000+ per-frame streams; see synth_world).
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import association as assoc
from . import autodiff as ad
from . import heads as hd
from . import io_formats as iof
from . import saliency as sal_mod
from . import synth_world as world
from .autodiff import ContractError, Rng, Tensor

VARIANTS = ("base", "ppfm", "pam", "saot", "dw_corr", "pg_corr")


@dataclass
class TrackerConfig:
    variant: str = "saot"
    saliency: sal_mod.SaliencyConfig = field(default_factory=sal_mod.SaliencyConfig)
    graph: assoc.GraphConfig = field(default_factory=assoc.GraphConfig)
    filter: hd.FilterConfig = field(default_factory=hd.FilterConfig)
    beta: float = 0.8
    exemplar_hw: tuple = (8, 8)
    head_width: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.saliency.validate()
        self.graph.validate()
        self.filter.validate()
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError("beta must be in [0, 1]")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["exemplar_hw"] = list(self.exemplar_hw)
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "TrackerConfig":
        return TrackerConfig(
            variant=doc["variant"],
            saliency=sal_mod.SaliencyConfig(**doc["saliency"]),
            graph=assoc.GraphConfig(**doc["graph"]),
            filter=hd.FilterConfig(**doc["filter"]),
            beta=doc["beta"],
            exemplar_hw=tuple(doc["exemplar_hw"]),
            head_width=doc["head_width"],
            seed=doc["seed"],
        )


@dataclass
class TrainConfig:
    steps: int = 600
    batch: int = 2
    lr: float = 1e-3
    lr_end: float = 1e-4
    weight_decay: float = 1e-4
    w_cls: float = 1.0
    w_reg: float = 1.0
    pos_weight: float = 16.0
    radius: float = 1.5
    grid: tuple = (24, 24)
    channels: int = 16
    world_frames: int = 4
    world_seed_base: int = 10_000
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ContractError("need at least one training step")


@dataclass
class Metrics:
    ious: list
    center_errors: list
    mean_iou: float
    success_auc: float
    precision: float


@dataclass
class AdjustParams:
    """Two-layer CNN of the ppfm arm."""
    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor

    def tensors(self) -> dict:
        return {"adjust.k1": self.k1, "adjust.b1": self.b1,
                "adjust.k2": self.k2, "adjust.b2": self.b2}


@dataclass
class ProjParams:
    """1x1 combiner of the pg_corr arm."""
    w: Tensor
    b: Tensor

    def tensors(self) -> dict:
        return {"pg.w": self.w, "pg.b": self.b}


@dataclass
class ModelParams:
    heads: hd.HeadParams
    mlp: assoc.EdgeMlpParams | None = None
    gcn: assoc.GcnParams | None = None
    adjust: AdjustParams | None = None
    proj: ProjParams | None = None

    def flat(self) -> dict:
        out = dict(self.heads.tensors())
        for part in (self.mlp, self.gcn, self.adjust, self.proj):
            if part is not None:
                out.update(part.tensors())
        return out


def head_input_channels(cfg: TrackerConfig, channels: int) -> int:
    if cfg.variant in ("base", "dw_corr"):
        return channels
    return cfg.graph.d_out


def init_params(cfg: TrackerConfig, channels: int, rng: Rng) -> ModelParams:
    cfg.validate()
    n_x = cfg.exemplar_hw[0] * cfg.exemplar_hw[1]
    d_node = n_x + channels
    heads = hd.init_heads(rng.child(33), head_input_channels(cfg, channels), cfg.head_width)
    params = ModelParams(heads=heads)
    if cfg.variant in ("pam", "saot"):
        params.mlp = assoc.init_edge_mlp(rng.child(31), d_node, cfg.graph.d_edge)
        params.gcn = assoc.init_gcn(rng.child(32), d_node, cfg.graph)
    elif cfg.variant == "ppfm":
        r = rng.child(34)
        params.adjust = AdjustParams(
            k1=Tensor(r.normal((3, 3, d_node, cfg.graph.d_hidden), std=np.sqrt(2.0 / (9 * d_node))), requires_grad=True),
            b1=Tensor(np.zeros(cfg.graph.d_hidden, dtype=ad.DEFAULT_DTYPE), requires_grad=True),
            k2=Tensor(r.normal((3, 3, cfg.graph.d_hidden, cfg.graph.d_out), std=np.sqrt(2.0 / (9 * cfg.graph.d_hidden))), requires_grad=True),
            b2=Tensor(np.zeros(cfg.graph.d_out, dtype=ad.DEFAULT_DTYPE), requires_grad=True),
        )
    elif cfg.variant == "pg_corr":
        r = rng.child(35)
        params.proj = ProjParams(
            w=Tensor(r.normal((1, 1, d_node, cfg.graph.d_out), std=np.sqrt(2.0 / d_node)), requires_grad=True),
            b=Tensor(np.zeros(cfg.graph.d_out, dtype=ad.DEFAULT_DTYPE), requires_grad=True),
        )
    return params


def detach_params(cfg: TrackerConfig, params: ModelParams, channels: int) -> ModelParams:
    """Inference copy: same values, no gradient tracking, original untouched."""
    clone = init_params(cfg, channels, Rng(0))
    flat_src = params.flat()
    for name, t in clone.flat().items():
        t.data = flat_src[name].data.copy()
        t.requires_grad = False
    return clone


def save_params(out_dir: str, cfg: TrackerConfig, params: ModelParams) -> str:
    os.makedirs(out_dir, exist_ok=True)
    names = {}
    for name, t in sorted(params.flat().items()):
        fname = name.replace(".", "_") + ".tf"
        iof.write_tensor(os.path.join(out_dir, fname), t)
        names[name] = fname
    index = {"config": cfg.to_dict(), "tensors": names}
    path = os.path.join(out_dir, "params.json")
    import json

    with open(path, "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_params(params_dir: str, channels: int):
    import json

    with open(os.path.join(params_dir, "params.json")) as fh:
        index = json.load(fh)
    cfg = TrackerConfig.from_dict(index["config"])
    params = init_params(cfg, channels, Rng(0))
    for name, t in params.flat().items():
        loaded = iof.read_tensor(os.path.join(params_dir, index["tensors"][name]))
        if loaded.shape != t.shape:
            raise ContractError(f"stored parameter {name} has shape {loaded.shape}, expected {t.shape}")
        t.data = loaded.data.astype(t.data.dtype)
    return cfg, params


# ---------------------------------------------------------------------------
# per-variant correlation representations


def _stack_volume(volume, f_s) -> Tensor:
    vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    fs = f_s.data if isinstance(f_s, Tensor) else np.asarray(f_s)
    n_x = vol.shape[0]
    h, w, _ = fs.shape
    stacked = np.concatenate([vol.reshape(n_x, h, w).transpose(1, 2, 0), fs], axis=2)
    return Tensor(stacked.astype(fs.dtype))


def _depthwise_corr(f_x: np.ndarray, f_s: np.ndarray) -> np.ndarray:
    """Exemplar as one k_h x k_w depth-wise kernel slid over the search grid."""
    kh, kw, c = f_x.shape
    h, w, _ = f_s.shape
    oy, ox = (kh - 1) // 2, (kw - 1) // 2
    padded = np.zeros((h + kh - 1, w + kw - 1, c), dtype=np.float64)
    padded[oy : oy + h, ox : ox + w] = f_s
    out = np.zeros((h, w, c), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            out += padded[u : u + h, v : v + w] * f_x[u, v]
    return out


def correlation_forward(cfg: TrackerConfig, params: ModelParams, f_x, f_s):
    """Correlation map for the configured variant; (map, saliencies-or-None)."""
    if cfg.variant == "base":
        return (f_s if isinstance(f_s, Tensor) else Tensor(np.asarray(f_s))), None
    if cfg.variant == "dw_corr":
        xd = f_x.data if isinstance(f_x, Tensor) else np.asarray(f_x)
        sd = f_s.data if isinstance(f_s, Tensor) else np.asarray(f_s)
        return Tensor(_depthwise_corr(xd, sd).astype(sd.dtype)), None
    if cfg.variant == "ppfm":
        volume = sal_mod.build_similarity_volume(f_x, f_s, cfg.saliency.eps)
        x = _stack_volume(volume, f_s)
        a = params.adjust
        hidden = ad.relu(ad.conv2d(x, a.k1) + a.b1)
        return ad.conv2d(hidden, a.k2) + a.b2, None
    if cfg.variant == "pg_corr":
        volume = sal_mod.build_similarity_volume(f_x, f_s, cfg.saliency.eps)
        xd = (f_x.data if isinstance(f_x, Tensor) else np.asarray(f_x)).astype(np.float64)
        sd = (f_s.data if isinstance(f_s, Tensor) else np.asarray(f_s)).astype(np.float64)
        kernel = xd.mean(axis=(0, 1))
        norm = np.linalg.norm(kernel)
        if norm > cfg.saliency.eps:
            kernel = kernel / norm
        channel_resp = Tensor((sd * kernel).astype(volume.dtype))
        x = _stack_volume(volume, channel_resp)
        return ad.relu(ad.conv2d(x, params.proj.w) + params.proj.b), None
    if cfg.variant == "pam":
        corr = assoc.correlate(f_x, f_s, cfg.saliency, params.mlp, params.gcn, gate_saliency=False)
        return corr, None
    corr, chosen = assoc.correlate(
        f_x, f_s, cfg.saliency, params.mlp, params.gcn, gate_saliency=True, return_saliencies=True
    )
    return corr, chosen


# ---------------------------------------------------------------------------
# tracking loop


def _region_geometry(box, grid_hw):
    gh, gw = grid_hw
    bw, bh = float(box[2]), float(box[3])
    side = int(math.ceil(math.sqrt(25.0 * bw * bh)))
    return min(side, gh), min(side, gw)


def _region_origin(center, side_hw, grid_hw):
    (sh, sw), (gh, gw) = side_hw, grid_hw
    ox = int(np.clip(round(center[0] - sw / 2.0), 0, gw - sw))
    oy = int(np.clip(round(center[1] - sh / 2.0), 0, gh - sh))
    return ox, oy


def _saliency_entries(chosen, origin, k: int) -> list:
    if chosen is None:
        return [(0.0, 0.0, 0.0)] * k
    ox, oy = origin
    return [
        (float(q + ox), float(p + oy), float(v))
        for (p, q), v in zip(chosen.p_s, chosen.values)
    ]


def track_sequence(manifest: iof.SequenceManifest, cfg: TrackerConfig, params: ModelParams):
    """Run the tracker over a written sequence; one TrackRecord per frame."""
    cfg.validate()
    if manifest.exemplar_frame_index != 0:
        raise ContractError("tracking assumes the exemplar is frame 0")

    def load(i):
        try:
            return iof.read_tensor(manifest.frames[i])
        except (OSError, iof.FormatError) as exc:
            raise RuntimeError(f"frame {i} unreadable: {exc}") from exc

    frame0 = load(0)
    gh, gw, channels = frame0.shape
    det = detach_params(cfg, params, channels)
    ex_box = manifest.exemplar_box
    f_x = sal_mod.roi_pool_exemplar(frame0, ex_box, cfg.exemplar_hw)
    side_hw = _region_geometry(ex_box, (gh, gw))

    box = tuple(float(v) for v in ex_box)
    center = (box[0] + box[2] / 2.0, box[1] + box[3] / 2.0)
    ox, oy = _region_origin(center, side_hw, (gh, gw))
    crop = Tensor(frame0.data[oy : oy + side_hw[0], ox : ox + side_hw[1]].copy())
    corr, chosen = correlation_forward(cfg, det, f_x, crop)
    label = hd.gaussian_map(side_hw[0], side_hw[1], (center[0] - ox, center[1] - oy), cfg.filter.label_sigma)
    fstate = hd.init_filter(cfg.filter, corr, label)
    records = [iof.TrackRecord(0, box, 1.0, _saliency_entries(chosen, (ox, oy), cfg.saliency.k))]

    for f in range(1, len(manifest.frames)):
        frame = load(f)
        center = (box[0] + box[2] / 2.0, box[1] + box[3] / 2.0)
        ox, oy = _region_origin(center, side_hw, (gh, gw))
        crop = Tensor(frame.data[oy : oy + side_hw[0], ox : ox + side_hw[1]].copy())
        corr, chosen = correlation_forward(cfg, det, f_x, crop)
        p_o = hd.cls_head(corr, det.heads)
        offsets = hd.reg_head(corr, det.heads)
        p_r = hd.apply_filter(fstate, corr)
        p_cls = hd.fuse_response(p_r, p_o, cfg.beta)
        local_box, conf = hd.decode_box(p_cls, offsets, side_hw)
        box = (local_box[0] + ox, local_box[1] + oy, local_box[2], local_box[3])
        local_center = (local_box[0] + local_box[2] / 2.0, local_box[1] + local_box[3] / 2.0)
        pseudo = hd.gaussian_map(side_hw[0], side_hw[1], local_center, cfg.filter.label_sigma)
        fstate = hd.online_filter_update(fstate, corr, pseudo)
        records.append(iof.TrackRecord(f, box, conf, _saliency_entries(chosen, (ox, oy), cfg.saliency.k)))
    return records


# ---------------------------------------------------------------------------
# evaluation


def evaluate(records, manifest: iof.SequenceManifest) -> Metrics:
    """Per-frame IoU and center error versus ground truth; exemplar frame skipped.

    success AUC = mean over thresholds 0, 0.05, ..., 0.95 of the fraction of
    frames with IoU strictly above the threshold.
    """
    if manifest.gt_boxes is None:
        raise ContractError("manifest carries no ground-truth boxes")
    if len(records) != len(manifest.frames):
        raise ContractError(f"{len(records)} records for {len(manifest.frames)} frames")
    ious, errs = [], []
    for rec, gt in zip(records, manifest.gt_boxes):
        if rec.frame_index == manifest.exemplar_frame_index:
            continue
        px, py, pw, ph = (float(v) for v in rec.box)
        gx, gy, gbw, gbh = (float(v) for v in gt)
        ix = max(0.0, min(px + pw, gx + gbw) - max(px, gx))
        iy = max(0.0, min(py + ph, gy + gbh) - max(py, gy))
        inter = ix * iy
        union = pw * ph + gbw * gbh - inter
        ious.append(inter / union if union > 0.0 else 0.0)
        dx = (px + pw / 2.0) - (gx + gbw / 2.0)
        dy = (py + ph / 2.0) - (gy + gbh / 2.0)
        errs.append((dx * dx + dy * dy) ** 0.5)
    n = len(ious)
    if n == 0:
        raise ContractError("no non-exemplar frames to evaluate")
    thresholds = [0.05 * t for t in range(20)]
    auc = sum(sum(1 for v in ious if v > thr) / n for thr in thresholds) / len(thresholds)
    precision = sum(1 for e in errs if e <= 2.0) / n
    return Metrics(
        ious=ious,
        center_errors=errs,
        mean_iou=sum(ious) / n,
        success_auc=auc,
        precision=precision,
    )


# ---------------------------------------------------------------------------
# toy training


def _training_sample(train_cfg: TrainConfig, wseed: int, frame_pick: int):
    wcfg = world.train_config(wseed, n_frames=train_cfg.world_frames)
    wcfg.grid = train_cfg.grid
    wcfg.channels = train_cfg.channels
    manifest, samples = world.gen_sequence(wcfg)
    fidx = frame_pick % len(samples)
    return manifest.exemplar_box, samples[0].features, samples[fidx]


def _sample_loss(cfg: TrackerConfig, params: ModelParams, train_cfg: TrainConfig,
                 exemplar_box, frame0, sample):
    f_x = sal_mod.roi_pool_exemplar(frame0, exemplar_box, cfg.exemplar_hw)
    f_s = sample.features
    h, w, _ = f_s.shape
    corr, _ = correlation_forward(cfg, params, f_x, f_s)
    p_o = hd.cls_head(corr, params.heads)
    labels, pos = hd.make_cls_labels(sample.gt_box, h, w, train_cfg.radius)
    l_cls = hd.bce_loss(p_o, labels, train_cfg.pos_weight)
    offsets = hd.reg_head(corr, params.heads).reshape(h * w, 4)
    pos_off = offsets[pos]
    qs = (pos % w).astype(np.float64)
    ps = (pos // w).astype(np.float64)
    x = Tensor(qs) - pos_off[:, 0]
    y = Tensor(ps) - pos_off[:, 1]
    bw = pos_off[:, 0] + pos_off[:, 2]
    bh = pos_off[:, 1] + pos_off[:, 3]
    boxes = ad.stack_columns([x, y, bw, bh])
    gt = np.tile(np.asarray(sample.gt_box, dtype=np.float64), (len(pos), 1))
    l_reg = hd.giou_loss(boxes, gt)
    return l_cls, l_reg


def train_toy(train_cfg: TrainConfig, tracker_cfg: TrackerConfig, loss_csv=None):
    """Adam-train head/graph parameters on generated worlds; returns (params, history)."""
    train_cfg.validate()
    tracker_cfg.validate()
    rng = Rng(train_cfg.seed, 7)
    params = init_params(tracker_cfg, train_cfg.channels, rng)
    flat = params.flat()
    opt = ad.Adam(flat, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    picks = Rng(train_cfg.seed, 8)
    decay = train_cfg.lr_end / train_cfg.lr
    history = []
    for t in range(train_cfg.steps):
        opt.lr = train_cfg.lr * decay ** (t / max(train_cfg.steps - 1, 1))
        total = None
        cls_sum = reg_sum = 0.0
        for b in range(train_cfg.batch):
            wseed = train_cfg.world_seed_base + t * train_cfg.batch + b
            exemplar_box, frame0, sample = _training_sample(
                train_cfg, wseed, int(picks.integers(0, train_cfg.world_frames))
            )
            l_cls, l_reg = _sample_loss(tracker_cfg, params, train_cfg, exemplar_box, frame0, sample)
            loss_b = train_cfg.w_cls * l_cls + train_cfg.w_reg * l_reg
            total = loss_b if total is None else total + loss_b
            cls_sum += l_cls.item()
            reg_sum += l_reg.item()
        loss = total * (1.0 / train_cfg.batch)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"non-finite loss at step {t}")
        opt.zero_grad()
        ad.backward(loss)
        ad.adam_step(flat, opt)
        history.append((t, loss.item(), cls_sum / train_cfg.batch, reg_sum / train_cfg.batch, opt.lr))
    if loss_csv:
        iof.write_csv(loss_csv, ["step", "loss", "cls", "reg", "lr"], history)
    return params, history


def gradient_check(tracker_cfg: TrackerConfig, n_coords: int = 10, seed: int = 0,
                   grid=(12, 12), step: float = 1e-5) -> dict:
    """64-bit finite-difference check of the full training loss.

    Returns {param name: max rel err over sampled coordinates}.  Region masks
    and top-K selections depend only on the (fixed) input features, so they
    stay frozen while parameters move.
    """
    prev = ad.DEFAULT_DTYPE
    ad.set_default_dtype(np.float64)
    try:
        train_cfg = TrainConfig(grid=grid, channels=8, seed=seed)
        exemplar_box, frame0, sample = _training_sample(train_cfg, 77_000 + seed, 1)
        params = init_params(tracker_cfg, train_cfg.channels, Rng(seed, 7))
        flat = params.flat()

        def loss_fn() -> float:
            l_cls, l_reg = _sample_loss(tracker_cfg, params, train_cfg, exemplar_box, frame0, sample)
            return float((l_cls + l_reg).data)

        l_cls, l_reg = _sample_loss(tracker_cfg, params, train_cfg, exemplar_box, frame0, sample)
        ad.backward(l_cls + l_reg)
        pick = Rng(seed, 9)
        report = {}
        for name, tensor in sorted(flat.items()):
            size = tensor.data.size
            count = min(n_coords, size)
            idx = sorted(int(i) for i in pick.choice(size, size=count))
            analytic = tensor.grad_array().reshape(-1)[idx]
            fd = ad.fd_gradient_sampled(lambda _: loss_fn(), tensor.data, idx, step=step)
            report[name] = ad.max_rel_error(analytic, fd)
        return report
    finally:
        ad.set_default_dtype(prev)


# ---------------------------------------------------------------------------
# experiment suites


def eval_world_config(kind: str, seed: int) -> world.WorldConfig:
    if kind == "rigid":
        return world.rigid_config(seed)
    if kind == "deform":
        return world.deform_config(seed)
    if kind == "static":
        return world.WorldConfig(seed=seed)
    raise ContractError(f"unknown suite kind {kind!r}")


def run_suite(cfg: TrackerConfig, params: ModelParams, kind: str, seeds, work_dir: str):
    """Track + evaluate a batch of generated worlds; returns per-seed Metrics."""
    results = []
    for seed in seeds:
        wcfg = eval_world_config(kind, seed)
        manifest, samples = world.gen_sequence(wcfg)
        seq_dir = os.path.join(work_dir, f"{kind}_{seed:03d}")
        mpath = world.save_sequence(seq_dir, manifest, samples)
        loaded = iof.read_manifest(mpath)
        records = track_sequence(loaded, cfg, params)
        results.append(evaluate(records, loaded))
    return results


def mean_iou_of(results) -> float:
    return sum(m.mean_iou for m in results) / len(results)
