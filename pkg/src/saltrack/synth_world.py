"""Procedural feature-map worlds with known targets, motion, and clutter.

A world is a sequence of h_s x w_s x c feature grids.  The target is a small
constellation of parts; each part owns a unit feature vector and is planted
additively into background noise at its current cell.  Some parts are
"duplicated": their feature also reappears at fixed background cells, in
replicas that keep the parts' relative arrangement, so holistic matching sees
convincing decoys while the distinct parts stay unambiguous.  Everything is derived from
one seed through fixed Philox streams, so sequences are bitwise reproducible.

Features mimic post-ReLU backbone activations: nonnegative and sparse.  Each
part is a pure prototype channel drawn from a per-world permutation, like a
one-hot codeword, so parts are mutually orthogonal and no fixed channel is
"the target channel" across worlds.  A background cell is a single spike on
one of the channels no part owns.  Signed dense noise would put half of every
similarity map above its mean and the main lobe would percolate across the
grid; one-sided single-channel noise keeps lobes local, the way correlation
responses of real rectified features behave.

Stream allocation for a world seed:
    1..5        static setup (features, offsets, clone cells, occlusion picks)
    100+f       background noise of frame f
    1000+f      per-part jitter applied entering frame f
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DEFAULT_DTYPE, Rng, Tensor
from . import io_formats


@dataclass
class PartSpec:
    offset: tuple  # (dx, dy) relative to the constellation center, grid units
    feature: np.ndarray  # unit c-vector
    distinct: bool  # False when the feature is cloned into the background


@dataclass
class MotionModel:
    translation: tuple = (0.0, 0.0)  # per-frame (dx, dy)
    rotation: float = 0.0  # radians per frame, about the constellation center
    jitter_std: float = 0.0  # i.i.d. per-part positional noise


@dataclass
class OcclusionSpan:
    start: int  # first occluded frame
    end: int  # one past the last occluded frame
    fraction: float  # fraction of parts zeroed while inside the span
    pool: str = "any"  # "any", or "duplicated" to only ever hide ambiguous parts


@dataclass
class WorldConfig:
    grid: tuple = (24, 24)  # (h_s, w_s)
    channels: int = 16
    n_parts: int = 6
    n_duplicated_parts: int = 2
    n_clones: int = 3  # background copies per duplicated part
    background_noise_std: float = 0.15  # noise norm per cell, relative to unit parts
    noise_blend: float = 0.35  # weight of the background texture under a planted cell
    motion: MotionModel = field(default_factory=MotionModel)
    occlusions: list = field(default_factory=list)  # [OcclusionSpan]
    n_frames: int = 12
    part_spread: float = 1.8  # max |offset| component at frame 0
    seed: int = 0

    def validate(self) -> None:
        h, w = self.grid
        if h < 12 or w < 12:
            raise ValueError(f"grid {self.grid} too small, need at least 12x12")
        if self.n_duplicated_parts > self.n_parts:
            raise ValueError("more duplicated parts than parts")
        if self.n_parts > self.channels:
            raise ValueError("each part needs its own channel")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")


@dataclass
class FrameSample:
    features: Tensor  # h_s x w_s x c
    gt_box: tuple  # (x, y, w, h)
    gt_part_positions: np.ndarray  # n_parts x 2 of float (x, y)
    occluded_part_ids: list


def plant_cell(pos) -> tuple:
    """Grid cell (row, col) that a float (x, y) position lands in."""
    x, y = float(pos[0]), float(pos[1])
    return int(np.floor(y + 0.5)), int(np.floor(x + 0.5))


def _clamp_positions(positions: np.ndarray, grid) -> np.ndarray:
    h, w = grid
    out = positions.copy()
    out[:, 0] = np.clip(out[:, 0], 1.0, w - 2.0)
    out[:, 1] = np.clip(out[:, 1], 1.0, h - 2.0)
    return out


def deform_step(positions: np.ndarray, motion: MotionModel, rng: Rng | None, bounds=None) -> np.ndarray:
    """One motion step: rigid translation+rotation about the centroid, then jitter.

    positions is n x 2 of float (x, y).  Rotation uses the standard
    counter-clockwise convention, so pi/2 maps an offset (1, 0) to (0, 1).
    When bounds=(h, w) is given the result is clamped to [1, size-2].
    """
    positions = np.asarray(positions, dtype=np.float64)
    center = positions.mean(axis=0)
    offsets = positions - center
    th = float(motion.rotation)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    moved = (center + np.asarray(motion.translation, dtype=np.float64)) + offsets @ rot.T
    if motion.jitter_std > 0.0:
        if rng is None:
            raise ValueError("jitter_std > 0 requires an rng")
        moved = moved + rng.normal(moved.shape, std=motion.jitter_std, dtype=np.float64)
    if bounds is not None:
        moved = _clamp_positions(moved, bounds)
    return moved


def _tight_box(positions: np.ndarray) -> tuple:
    x0, y0 = positions.min(axis=0)
    x1, y1 = positions.max(axis=0)
    return (float(x0 - 1.0), float(y0 - 1.0), float(x1 - x0 + 2.0), float(y1 - y0 + 2.0))


def _build_parts(cfg: WorldConfig, rng: Rng, center0: np.ndarray):
    """Parts plus the channels left over for the noise generator.

    Part i is the basis vector of the i-th channel in a per-world random
    permutation; the channels no part owns host the background noise.  When
    every channel is owned (n_parts == channels) noise falls back to the full
    range and some cells echo a part, which the caller opted into.
    """
    perm = [int(i) for i in rng.choice(cfg.channels, size=cfg.channels)]
    feats = np.zeros((cfg.n_parts, cfg.channels), dtype=np.float64)
    for i in range(cfg.n_parts):
        feats[i, perm[i]] = 1.0
    free = perm[cfg.n_parts :]
    noise_channels = sorted(free) if free else list(range(cfg.channels))
    # rejection-sample offsets until every planted frame-0 cell is unique
    for _ in range(200):
        offs = rng.uniform(-cfg.part_spread, cfg.part_spread, (cfg.n_parts, 2), dtype=np.float64)
        cells = {plant_cell(center0 + o) for o in offs}
        if len(cells) == cfg.n_parts:
            break
    else:
        raise RuntimeError("could not place parts on distinct cells")
    parts = []
    for i in range(cfg.n_parts):
        parts.append(
            PartSpec(
                offset=(float(offs[i, 0]), float(offs[i, 1])),
                feature=feats[i],
                distinct=i >= cfg.n_duplicated_parts,
            )
        )
    return parts, noise_channels


def _pick_clone_cells(cfg: WorldConfig, rng: Rng, forbidden: set, positions: np.ndarray) -> dict:
    """Fixed background cells for each duplicated part's clones.

    Clones are planted as whole-group replicas: every replica preserves the
    duplicated parts' frame-0 cell offsets, so locally it looks exactly like
    the ambiguous half of the target.  Only the distinct parts tell the true
    constellation apart from its replicas.
    """
    if cfg.n_duplicated_parts == 0:
        return {}
    h, w = cfg.grid
    dup_cells = [plant_cell(positions[pid]) for pid in range(cfg.n_duplicated_parts)]
    rel = [(r - dup_cells[0][0], c - dup_cells[0][1]) for r, c in dup_cells]
    clones = {pid: [] for pid in range(cfg.n_duplicated_parts)}
    used = set(forbidden)
    for _ in range(cfg.n_clones):
        for _try in range(500):
            r0 = int(rng.integers(1, h - 1))
            c0 = int(rng.integers(1, w - 1))
            cells = [(r0 + dr, c0 + dc) for dr, dc in rel]
            if all(1 <= r < h - 1 and 1 <= c < w - 1 and (r, c) not in used for r, c in cells):
                break
        else:
            raise RuntimeError("could not place clone replicas on free cells")
        for pid, cell in enumerate(cells):
            used.add(cell)
            clones[pid].append(cell)
    return clones


def _noise_field(cfg: WorldConfig, rng: Rng, noise_channels) -> np.ndarray:
    """One frame of background noise: per cell, one spike on a part-free channel.

    Cell norms scatter around background_noise_std.  Directions are basis
    vectors of channels no part owns, so no noise cell can impersonate a part
    and a pure part feature reads exactly zero cosine against background.
    """
    h, w = cfg.grid
    field = np.zeros((h, w, cfg.channels), dtype=np.float64)
    pick = rng.integers(0, len(noise_channels), (h, w))
    mag = cfg.background_noise_std * rng.uniform(0.6, 1.4, (h, w), dtype=np.float64)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    field[rr, cc, np.asarray(noise_channels)[pick]] = mag
    return field


def _occluded_ids(cfg: WorldConfig, rng: Rng):
    """Per-frame occluded part id lists; the subset is fixed within a span."""
    per_frame = [[] for _ in range(cfg.n_frames)]
    for span in cfg.occlusions:
        if span.pool == "duplicated":
            candidates = list(range(cfg.n_duplicated_parts))
        elif span.pool == "any":
            candidates = list(range(cfg.n_parts))
        else:
            raise ValueError(f"unknown occlusion pool {span.pool!r}")
        count = int(round(span.fraction * cfg.n_parts))
        count = min(count, len(candidates))
        ids = sorted(candidates[int(i)] for i in rng.choice(len(candidates), size=count))
        for f in range(max(0, span.start), min(cfg.n_frames, span.end)):
            per_frame[f] = sorted(set(per_frame[f]) | set(ids))
    return per_frame


def gen_sequence(cfg: WorldConfig):
    """Generate (SequenceManifest, [FrameSample]) for one world.

    The manifest's frame entries are bare file names; save_sequence writes
    the tensors and rewrites them as real paths.
    """
    cfg.validate()
    root = Rng(cfg.seed)
    h, w = cfg.grid
    center0 = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    parts, noise_channels = _build_parts(cfg, root.child(1), center0)

    positions = _clamp_positions(
        center0 + np.array([p.offset for p in parts], dtype=np.float64), cfg.grid
    )
    forbidden = {plant_cell(p) for p in positions}
    clones = _pick_clone_cells(cfg, root.child(2), forbidden, positions)
    occluded = _occluded_ids(cfg, root.child(3))

    samples, gt_boxes, warnings = [], [], []
    for f in range(cfg.n_frames):
        if f > 0:
            raw = deform_step(positions, cfg.motion, root.child(1000 + f))
            positions = _clamp_positions(raw, cfg.grid)
            if not np.allclose(raw, positions):
                warnings.append(f"frame {f}: motion clamped at grid border")
        features = _noise_field(cfg, root.child(100 + f), noise_channels)
        # planted content mostly covers the background texture at its cell:
        # attenuate the noise there first, then blend the features in
        planted = {plant_cell(positions[pid]) for pid in range(cfg.n_parts) if pid not in occluded[f]}
        planted.update(cell for cells in clones.values() for cell in cells)
        for r, c in planted:
            features[r, c] *= cfg.noise_blend
        for pid, part in enumerate(parts):
            if pid in occluded[f]:
                continue
            r, c = plant_cell(positions[pid])
            features[r, c] += part.feature
        for pid, cells in clones.items():
            for r, c in cells:
                features[r, c] += parts[pid].feature
        visible = [i for i in range(cfg.n_parts) if i not in occluded[f]]
        box_positions = positions[visible] if visible else positions
        gt_box = _tight_box(box_positions)
        gt_boxes.append(gt_box)
        samples.append(
            FrameSample(
                features=Tensor(features.astype(DEFAULT_DTYPE), requires_grad=False),
                gt_box=gt_box,
                gt_part_positions=positions.copy(),
                occluded_part_ids=list(occluded[f]),
            )
        )

    manifest = io_formats.SequenceManifest(
        frames=[f"frame_{i:03d}.tf" for i in range(cfg.n_frames)],
        exemplar_frame_index=0,
        exemplar_box=gt_boxes[0],
        gt_boxes=gt_boxes,
        meta={"seed": cfg.seed, "grid": list(cfg.grid), "channels": cfg.channels,
              "n_parts": cfg.n_parts, "warnings": warnings},
    )
    return manifest, samples


def save_sequence(out_dir, manifest: io_formats.SequenceManifest, samples) -> str:
    """Write frame tensors plus manifest.json under out_dir; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, sample in zip(manifest.frames, samples):
        path = os.path.join(out_dir, os.path.basename(name))
        io_formats.write_tensor(path, sample.features)
        paths.append(path)
    manifest.frames = paths
    mpath = os.path.join(out_dir, "manifest.json")
    io_formats.write_manifest(mpath, manifest)
    return mpath


def rigid_config(seed: int, n_frames: int = 12) -> WorldConfig:
    """Held-out evaluation world: pure translation, no jitter, no occlusion."""
    rng = Rng(seed, 11)
    dx, dy = rng.uniform(-0.9, 0.9, (2,), dtype=np.float64)
    spread = float(rng.uniform(1.2, 3.2, (), dtype=np.float64))
    return WorldConfig(
        motion=MotionModel(translation=(float(dx), float(dy))),
        n_frames=n_frames,
        part_spread=spread,
        seed=seed,
    )


def deform_config(seed: int, n_frames: int = 12) -> WorldConfig:
    """Held-out evaluation world: translation + rotation + jitter + one occlusion.

    Most parts are duplicated into background replicas here, and the
    occlusion span hides some of the duplicated ones: the decoys then carry
    as much visible evidence as the true target, and only matchers that
    weight the distinct parts hold on through the span.
    """
    rng = Rng(seed, 12)
    dx, dy = rng.uniform(-0.7, 0.7, (2,), dtype=np.float64)
    rot = float(rng.uniform(-0.12, 0.12, (), dtype=np.float64))
    spread = float(rng.uniform(1.2, 3.2, (), dtype=np.float64))
    return WorldConfig(
        n_duplicated_parts=4,
        n_clones=4,
        motion=MotionModel(translation=(float(dx), float(dy)), rotation=rot, jitter_std=0.12),
        occlusions=[OcclusionSpan(start=3, end=10, fraction=0.5, pool="duplicated")],
        n_frames=n_frames,
        part_spread=spread,
        seed=seed,
    )


def train_config(seed: int, n_frames: int = 4) -> WorldConfig:
    """Training worlds: mixed motion and duplication so heads see both regimes."""
    rng = Rng(seed, 13)
    dx, dy = rng.uniform(-1.0, 1.0, (2,), dtype=np.float64)
    rot = float(rng.uniform(-0.15, 0.15, (), dtype=np.float64))
    jit = float(rng.uniform(0.0, 0.15, (), dtype=np.float64))
    ndup = int(rng.integers(2, 5))
    spread = float(rng.uniform(1.2, 3.2, (), dtype=np.float64))
    return WorldConfig(
        n_duplicated_parts=ndup,
        motion=MotionModel(translation=(float(dx), float(dy)), rotation=rot, jitter_std=jit),
        n_frames=n_frames,
        part_spread=spread,
        seed=seed,
    )
