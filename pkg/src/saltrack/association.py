"""Saliency association: graph construction and the polynomial GCN.

Every search-grid cell is a node.  Node features stack the (optionally
saliency-gated) similarity channels with the raw search features.  Edges come
from two families: all pairs among the matched saliency positions, and the
8-neighborhood of the grid.  Edge weights are produced by a small MLP on
|v_i - v_j|, the adjacency is normalized symmetrically with self-loops, and
two polynomial graph-convolution layers turn node features into the
correlation representation consumed by the heads.

The adjacency never exists as a dense matrix; everything runs over COO
triples (rows, cols, vals) with vals differentiable.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import saliency as sal_mod
from .autodiff import ContractError, Tensor


@dataclass
class GraphConfig:
    orders: int = 2  # M, highest adjacency power
    d_edge: int = 32  # edge MLP hidden width
    d_hidden: int = 64  # first GCN layer output
    d_out: int = 64  # second GCN layer output / correlation channels
    act_hidden: str = "relu"
    act_out: str = "identity"

    def validate(self) -> None:
        if self.orders < 1:
            raise ContractError("need at least one adjacency power")


@dataclass
class EdgeMlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict:
        return {"edge.w1": self.w1, "edge.b1": self.b1, "edge.w2": self.w2, "edge.b2": self.b2}


@dataclass
class GcnLayerParams:
    thetas: list  # M tensors, each d_in x d_out
    order_w: Tensor  # M trainable scalars
    act: str = "identity"


@dataclass
class GcnParams:
    layers: list = field(default_factory=list)

    def tensors(self) -> dict:
        out = {}
        for l, layer in enumerate(self.layers):
            out[f"gcn.{l}.w"] = layer.order_w
            for m, th in enumerate(layer.thetas):
                out[f"gcn.{l}.theta{m}"] = th
        return out


@dataclass
class Adjacency:
    rows: np.ndarray
    cols: np.ndarray
    vals: Tensor
    n: int


def init_edge_mlp(rng: ad.Rng, d_in: int, d_edge: int) -> EdgeMlpParams:
    return EdgeMlpParams(
        w1=Tensor(rng.normal((d_in, d_edge), std=np.sqrt(2.0 / d_in)), requires_grad=True),
        b1=Tensor(np.zeros(d_edge, dtype=ad.DEFAULT_DTYPE), requires_grad=True),
        w2=Tensor(rng.normal((d_edge, 1), std=np.sqrt(1.0 / d_edge)), requires_grad=True),
        b2=Tensor(np.zeros(1, dtype=ad.DEFAULT_DTYPE), requires_grad=True),
    )


def init_gcn(rng: ad.Rng, d_in: int, cfg: GraphConfig) -> GcnParams:
    cfg.validate()
    dims = [(d_in, cfg.d_hidden, cfg.act_hidden), (cfg.d_hidden, cfg.d_out, cfg.act_out)]
    layers = []
    for din, dout, act in dims:
        thetas = [
            Tensor(rng.normal((din, dout), std=np.sqrt(2.0 / din)), requires_grad=True)
            for _ in range(cfg.orders)
        ]
        order_w = Tensor(np.full(cfg.orders, 1.0 / cfg.orders, dtype=ad.DEFAULT_DTYPE), requires_grad=True)
        layers.append(GcnLayerParams(thetas=thetas, order_w=order_w, act=act))
    return GcnParams(layers=layers)


def build_node_features(volume, f_s, sal=None, exemplar_hw=None) -> Tensor:
    """Node features F_g: gated similarity channels then raw search features.

    sal=None treats every exemplar cell as an equal saliency (gate 1
    everywhere); with a SaliencySet, non-selected cells contribute zero
    channels and selected ones are scaled by s / max(s).
    """
    vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    fs = f_s.data if isinstance(f_s, Tensor) else np.asarray(f_s)
    n_x = vol.shape[0]
    hs, ws, c = fs.shape
    if sal is None:
        gate = np.ones(n_x)
    else:
        gate = np.zeros(n_x)
        top = float(sal.values[0]) if len(sal.values) else 0.0
        if top <= 0.0:
            warnings.warn("all saliency scores non-positive; similarity channels zeroed")
        else:
            w_x = exemplar_hw[1] if exemplar_hw else _infer_wx(n_x)
            for (u, v), s in zip(sal.p_x, sal.values):
                gate[u * w_x + v] = s / top
    sim = vol.astype(np.float64).reshape(n_x, hs * ws).T * gate[None, :]
    f_g = np.concatenate([sim, fs.astype(np.float64).reshape(hs * ws, c)], axis=1)
    dtype = fs.dtype if fs.dtype in (np.float32, np.float64) else ad.DEFAULT_DTYPE
    return Tensor(f_g.astype(dtype))


def _infer_wx(n_x: int) -> int:
    # fallback when the caller does not pass the exemplar grid: assume square
    w = int(round(np.sqrt(n_x)))
    if w * w != n_x:
        raise ContractError(f"cannot infer exemplar grid from {n_x} cells")
    return w


@lru_cache(maxsize=8)
def _grid_edges(h_s: int, w_s: int) -> tuple:
    """All undirected king-move neighbor pairs of an h_s x w_s grid."""
    pairs = []
    for r in range(h_s):
        for c in range(w_s):
            i = r * w_s + c
            for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h_s and 0 <= cc < w_s:
                    pairs.append((i, rr * w_s + cc))
    return tuple(pairs)


def build_edge_set(p_s, h_s: int, w_s: int) -> np.ndarray:
    """Undirected edge list (E, 2) with i < j: saliency pairs plus grid neighbors."""
    nodes = sorted({p * w_s + q for p, q in p_s})
    for p, q in p_s:
        if not (0 <= p < h_s and 0 <= q < w_s):
            raise ContractError(f"saliency position {(p, q)} outside {h_s}x{w_s} grid")
    pairs = set(itertools.combinations(nodes, 2))
    pairs.update((min(a, b), max(a, b)) for a, b in _grid_edges(h_s, w_s))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def edge_weights(f_g, edges: np.ndarray, mlp: EdgeMlpParams) -> Adjacency:
    """Symmetric COO adjacency with A_ij = sigmoid(phi2(relu(phi1(|v_i - v_j|))))."""
    fg = (f_g.data if isinstance(f_g, Tensor) else np.asarray(f_g))
    n = fg.shape[0]
    if edges.size == 0:
        return Adjacency(
            rows=np.zeros(0, dtype=np.int64),
            cols=np.zeros(0, dtype=np.int64),
            vals=Tensor(np.zeros(0, dtype=fg.dtype)),
            n=n,
        )
    diff = Tensor(np.abs(fg[edges[:, 0]] - fg[edges[:, 1]]))
    hidden = ad.relu(ad.matmul(diff, mlp.w1) + mlp.b1)
    w = ad.sigmoid(ad.matmul(hidden, mlp.w2) + mlp.b2).reshape(-1)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    vals = ad.concat([w, w], axis=0)
    return Adjacency(rows=rows, cols=cols, vals=vals, n=n)


def normalize_adjacency(adj: Adjacency) -> Adjacency:
    """Self-loops plus symmetric degree normalization: D^-1/2 (A + I) D^-1/2."""
    n = adj.n
    rows = np.concatenate([adj.rows, np.arange(n, dtype=np.int64)])
    cols = np.concatenate([adj.cols, np.arange(n, dtype=np.int64)])
    ones = Tensor(np.ones(n, dtype=adj.vals.dtype))
    vals = ad.concat([adj.vals, ones], axis=0)
    deg = ad.segment_sum(vals, rows, n)
    dinv = ad.power(deg, -0.5)
    # grouping the degree factors first keeps A-hat bitwise symmetric
    normed = vals * (dinv[rows] * dinv[cols])
    return Adjacency(rows=rows, cols=cols, vals=normed, n=n)


def gcn_layer(x, adj_hat: Adjacency, layer: GcnLayerParams) -> Tensor:
    """One polynomial graph convolution: act(sum_m w_m A^m X Theta_m)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    acc = None
    propagated = x
    for m, theta in enumerate(layer.thetas):
        if propagated.shape[1] != theta.shape[0]:
            raise ContractError(
                f"GCN dims disagree: features {propagated.shape} vs theta {theta.shape}"
            )
        propagated = ad.spmm(adj_hat.rows, adj_hat.cols, adj_hat.vals, propagated, adj_hat.n)
        term = ad.matmul(propagated, theta) * layer.order_w[m]
        acc = term if acc is None else acc + term
    return ad.activate(acc, layer.act)


def correlate(f_x, f_s, sal_cfg: sal_mod.SaliencyConfig, mlp: EdgeMlpParams,
              gcn: GcnParams, gate_saliency: bool = True, return_saliencies: bool = False):
    """Full association pipeline from feature grids to the correlation map.

    gate_saliency=False treats all exemplar cells equally (gate 1, edges from
    every cell's matched position); True mines top-K saliencies first.
    """
    hx, wx = f_x.shape[0], f_x.shape[1]
    hs, ws = f_s.shape[0], f_s.shape[1]
    volume = sal_mod.build_similarity_volume(f_x, f_s, sal_cfg.eps)
    if gate_saliency:
        chosen = sal_mod.select_saliencies(volume, sal_cfg, (hx, wx))
        gate_set = chosen
    else:
        all_cfg = replace(sal_cfg, k=hx * wx)
        chosen = sal_mod.select_saliencies(volume, all_cfg, (hx, wx))
        gate_set = None
    f_g = build_node_features(volume, f_s, gate_set, (hx, wx))
    edges = build_edge_set(chosen.p_s, hs, ws)
    adj = normalize_adjacency(edge_weights(f_g, edges, mlp))
    x = f_g
    for layer in gcn.layers:
        x = gcn_layer(x, adj, layer)
    corr = x.reshape(hs, ws, x.shape[1])
    if return_saliencies:
        return corr, chosen
    return corr
