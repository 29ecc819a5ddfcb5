"""Brute-force reference implementations for cross-checking the fast paths.

Each function here recomputes a quantity by the most literal route available
(nested loops, dense matrices, union-find, supersampling) and stays fully
independent of the implementations it checks.  The ``oracle`` CLI subcommand
and the test suite both drive these.
"""

from __future__ import annotations

import numpy as np


def matmul_naive(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def conv2d_naive(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    h, w, cin = x.shape
    kh, kw, _, cout = kernels.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((h, w, cout), dtype=np.float64)
    for p in range(h):
        for q in range(w):
            for o in range(cout):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        ii, jj = p + di - ph, q + dj - pw
                        if 0 <= ii < h and 0 <= jj < w:
                            for ci in range(cin):
                                acc += float(x[ii, jj, ci]) * float(kernels[di, dj, ci, o])
                out[p, q, o] = acc
    return out


def similarity_volume_naive(f_x: np.ndarray, f_s: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    hx, wx, c = f_x.shape
    hs, ws, _ = f_s.shape
    out = np.zeros((hx * wx, hs, ws), dtype=np.float64)
    for u in range(hx):
        for v in range(wx):
            a = f_x[u, v].astype(np.float64)
            na = np.sqrt(np.sum(a * a))
            for p in range(hs):
                for q in range(ws):
                    b = f_s[p, q].astype(np.float64)
                    nb = np.sqrt(np.sum(b * b))
                    if na < eps or nb < eps:
                        val = 0.0
                    else:
                        val = float(np.dot(a, b) / (na * nb))
                    out[u * wx + v, p, q] = min(1.0, max(-1.0, val))
    return out


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, x: int, y: int) -> None:
        rx, ry = self.find(x), self.find(y)
        if rx != ry:
            self.parent[ry] = rx


def main_lobe_naive(score_map: np.ndarray) -> np.ndarray:
    """Peak's 8-connected component of the >= mean super-level set, by union-find."""
    h, w = score_map.shape
    above = score_map >= score_map.mean()
    uf = _UnionFind(h * w)
    for i in range(h):
        for j in range(w):
            if not above[i, j]:
                continue
            for di, dj in ((0, 1), (1, -1), (1, 0), (1, 1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < h and 0 <= jj < w and above[ii, jj]:
                    uf.union(i * w + j, ii * w + jj)
    peak = int(np.argmax(score_map))
    root = uf.find(peak)
    mask = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            if above[i, j] and uf.find(i * w + j) == root:
                mask[i, j] = True
    return mask


def roi_pool_supersampled(frame: np.ndarray, box, out_h: int, out_w: int, factor: int = 400) -> np.ndarray:
    """Dense cell-lookup averaging over each pooling bin of the box.

    The frame is the piecewise-constant field where cell (i, j) covers
    [j, j+1) x [i, i+1); each bin averages factor*factor midpoint samples.
    """
    x, y, w, h = box
    hf, wf, c = frame.shape
    out = np.zeros((out_h, out_w, c), dtype=np.float64)
    offs = (np.arange(factor) + 0.5) / factor
    for i in range(out_h):
        for j in range(out_w):
            y0 = y + i * h / out_h
            x0 = x + j * w / out_w
            ys = y0 + offs * (h / out_h)
            xs = x0 + offs * (w / out_w)
            rows = np.clip(ys.astype(int), 0, hf - 1)
            cols = np.clip(xs.astype(int), 0, wf - 1)
            out[i, j] = frame[np.ix_(rows, cols)].reshape(-1, c).mean(axis=0)
    return out


def roi_pool_overlap(frame: np.ndarray, box, out_h: int, out_w: int) -> np.ndarray:
    """Exact bin means by direct rectangle intersection with every frame cell."""
    x, y, w, h = (float(v) for v in box)
    hf, wf, c = frame.shape
    out = np.zeros((out_h, out_w, c), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            y0, y1 = y + i * h / out_h, y + (i + 1) * h / out_h
            x0, x1 = x + j * w / out_w, x + (j + 1) * w / out_w
            acc = np.zeros(c, dtype=np.float64)
            for r in range(hf):
                for s in range(wf):
                    oy = min(y1, r + 1.0) - max(y0, float(r))
                    ox = min(x1, s + 1.0) - max(x0, float(s))
                    if oy > 0.0 and ox > 0.0:
                        acc += oy * ox * frame[r, s].astype(np.float64)
            out[i, j] = acc / ((y1 - y0) * (x1 - x0))
    return out


def gcn_layer_dense(rows, cols, vals, x, n, thetas, order_weights, activation) -> np.ndarray:
    """Polynomial graph convolution via explicit dense matrix powers."""
    a_hat = np.zeros((n, n), dtype=np.float64)
    a_hat[rows, cols] += np.asarray(vals, dtype=np.float64)
    acc = np.zeros((n, thetas[0].shape[1]), dtype=np.float64)
    power = np.eye(n)
    for m, theta in enumerate(thetas):
        power = power @ a_hat
        acc += order_weights[m] * (power @ np.asarray(x, dtype=np.float64) @ np.asarray(theta, dtype=np.float64))
    if activation == "relu":
        return np.maximum(acc, 0.0)
    if activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-acc))
    return acc


def spectral_radius_power_iteration(rows, cols, vals, n, iters: int = 200, seed: int = 0) -> float:
    dense = np.zeros((n, n), dtype=np.float64)
    dense[rows, cols] += np.asarray(vals, dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        u = dense @ v
        norm = np.linalg.norm(u)
        if norm == 0.0:
            return 0.0
        v = u / norm
        lam = norm
    return float(lam)


def iou_naive(a, b) -> float:
    ax0, ay0, aw, ah = (float(t) for t in a)
    bx0, by0, bw, bh = (float(t) for t in b)
    ix = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    iy = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def run_all(seed: int = 0, instances: int = 50):
    """Compare the fast implementations against every oracle here.

    Returns [(suite name, passed, detail)]; imports stay local so the pure
    reference functions above can be used without pulling in the package.
    """
    from . import association as assoc
    from . import autodiff as ad
    from . import harness
    from . import saliency as sal_mod
    from .autodiff import Rng, Tensor

    results = []

    def check(name, worst, tol):
        results.append((name, worst <= tol, f"max err {worst:.3g} (tol {tol:g})"))

    rng = Rng(seed, 40)
    worst = 0.0
    for _ in range(instances):
        m, k, n = (int(v) for v in rng.integers(1, 9, (3,)))
        a = rng.uniform(-1.0, 1.0, (m, k))
        b = rng.uniform(-1.0, 1.0, (k, n))
        got = ad.matmul(Tensor(a), Tensor(b)).data
        worst = max(worst, ad.max_rel_error(got, matmul_naive(a, b)))
    check("matmul vs naive loops", worst, 1e-6)

    worst = 0.0
    for _ in range(instances):
        h, w = (int(v) for v in rng.integers(2, 9, (2,)))
        cin, cout = (int(v) for v in rng.integers(1, 5, (2,)))
        kh, kw = (int(v) * 2 + 1 for v in rng.integers(0, 2, (2,)))
        x = rng.uniform(-1.0, 1.0, (h, w, cin))
        kern = rng.uniform(-1.0, 1.0, (kh, kw, cin, cout))
        got = ad.conv2d(Tensor(x), Tensor(kern)).data
        worst = max(worst, ad.max_rel_error(got, conv2d_naive(x, kern)))
    check("conv2d vs naive loops", worst, 1e-6)

    worst = 0.0
    for _ in range(instances):
        f_x = rng.uniform(-1.0, 1.0, (3, 3, 6))
        f_s = rng.uniform(-1.0, 1.0, (7, 7, 6))
        got = sal_mod.build_similarity_volume(f_x, f_s).data
        worst = max(worst, ad.max_rel_error(got, similarity_volume_naive(f_x, f_s)))
    check("similarity volume vs naive loops", worst, 1e-6)

    ok = True
    for _ in range(instances):
        m = rng.uniform(-1.0, 1.0, (7, 9)).astype(np.float64)
        lobe = sal_mod.main_lobe(m)
        if not np.array_equal(lobe.mask, main_lobe_naive(m)):
            ok = False
    results.append(("main lobe vs union-find", ok, "mask equality"))

    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(3, 10))
        x = rng.uniform(-1.0, 1.0, (n, 4))
        orders = int(rng.integers(1, 4))
        pair_count = int(rng.integers(1, n * (n - 1) // 2 + 1))
        all_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        sel = rng.choice(len(all_pairs), size=pair_count)
        edges = np.array([all_pairs[int(s)] for s in sel], dtype=np.int64)
        w = rng.uniform(0.05, 0.95, (len(edges),)).astype(np.float64)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        vals = np.concatenate([w, w])
        adj = assoc.normalize_adjacency(
            assoc.Adjacency(rows=rows, cols=cols, vals=Tensor(vals), n=n)
        )
        thetas = [rng.uniform(-1.0, 1.0, (4, 3)).astype(np.float64) for _ in range(orders)]
        wts = rng.uniform(-1.0, 1.0, (orders,)).astype(np.float64)
        layer = assoc.GcnLayerParams(
            thetas=[Tensor(t) for t in thetas], order_w=Tensor(wts), act="relu"
        )
        got = assoc.gcn_layer(Tensor(x.astype(np.float64)), adj, layer).data
        want = gcn_layer_dense(adj.rows, adj.cols, adj.vals.data, x, n, thetas, wts, "relu")
        worst = max(worst, ad.max_rel_error(got, want))
    check("gcn layer vs dense powers", worst, 1e-5)

    worst = 0.0
    worst_ss = 0.0
    for t in range(instances):
        frame = rng.uniform(-1.0, 1.0, (12, 12, 3)).astype(np.float64)
        x = float(rng.uniform(0.0, 5.0))
        y = float(rng.uniform(0.0, 5.0))
        bw = float(rng.uniform(1.5, 6.0))
        bh = float(rng.uniform(1.5, 6.0))
        got = sal_mod.roi_pool_exemplar(frame, (x, y, bw, bh), (4, 4)).data
        want = roi_pool_overlap(frame, (x, y, bw, bh), 4, 4)
        worst = max(worst, float(np.max(np.abs(got - want))))
        if t < 10:
            approx = roi_pool_supersampled(frame, (x, y, bw, bh), 4, 4)
            worst_ss = max(worst_ss, float(np.max(np.abs(got - approx))))
    check("roi pool vs rectangle intersection", worst, 1e-9)
    check("roi pool vs supersampling", worst_ss, 1e-2)

    ok = True
    detail = ""
    for trial in range(instances):
        n_frames = int(rng.integers(2, 8))
        preds = [tuple(float(v) for v in rng.uniform(0.0, 20.0, (4,))) for _ in range(n_frames)]
        gts = [tuple(float(v) for v in rng.uniform(0.0, 20.0, (4,))) for _ in range(n_frames)]
        records = [harness.iof.TrackRecord(i + 1, p, 1.0, []) for i, p in enumerate(preds)]
        manifest = harness.iof.SequenceManifest(
            frames=["x"] * (n_frames + 1),
            exemplar_frame_index=0,
            exemplar_box=(0, 0, 2, 2),
            gt_boxes=[(0.0, 0.0, 2.0, 2.0)] + gts,
        )
        got = harness.evaluate([harness.iof.TrackRecord(0, (0, 0, 2, 2), 1.0, [])] + records, manifest)
        want = metrics_naive(preds, gts)
        if (got.mean_iou, got.success_auc, got.precision) != (
            want["mean_iou"], want["success_auc"], want["precision"]
        ):
            ok = False
            detail = f"trial {trial} disagrees"
            break
    results.append(("metrics vs independent reimplementation", ok, detail or "exact equality"))
    return results


def metrics_naive(pred_boxes, gt_boxes):
    """Independent mean IoU / success AUC / precision@2 from raw box lists."""
    ious = [iou_naive(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    errs = []
    for p, g in zip(pred_boxes, gt_boxes):
        pc = (p[0] + p[2] / 2.0, p[1] + p[3] / 2.0)
        gc = (g[0] + g[2] / 2.0, g[1] + g[3] / 2.0)
        errs.append(((pc[0] - gc[0]) ** 2 + (pc[1] - gc[1]) ** 2) ** 0.5)
    thresholds = [0.05 * t for t in range(20)]
    auc = sum(sum(1 for v in ious if v > thr) / len(ious) for thr in thresholds) / len(thresholds)
    precision = sum(1 for e in errs if e <= 2.0) / len(errs)
    return {
        "mean_iou": sum(ious) / len(ious),
        "success_auc": auc,
        "precision": precision,
        "ious": ious,
        "center_errors": errs,
    }
