"""saltrack: saliency-associated correlation tracking on synthetic feature grids.

The package is numpy-only.  `autodiff` provides the tensor substrate, the
rest builds the tracker: saliency mining over cosine-similarity volumes,
graph association with a polynomial GCN, anchor-free heads with an online
correlation filter, and a harness that generates worlds, trains, tracks,
and evaluates.
"""

from .autodiff import (
    Adam,
    ContractError,
    Rng,
    ShapeError,
    Tensor,
    set_default_dtype,
)
from .io_formats import (
    FormatError,
    SequenceManifest,
    TrackRecord,
    read_manifest,
    read_tensor,
    read_track_csv,
    write_manifest,
    write_tensor,
    write_track_csv,
)
from .synth_world import (
    MotionModel,
    OcclusionSpan,
    WorldConfig,
    deform_config,
    gen_sequence,
    rigid_config,
    save_sequence,
    train_config,
)
from .saliency import (
    SaliencyConfig,
    build_similarity_volume,
    main_lobe,
    roi_pool_exemplar,
    score_map,
    select_saliencies,
)
from .association import GraphConfig, correlate, normalize_adjacency
from .heads import FilterConfig, HeadParams, cls_head, decode_box, reg_head
from .harness import (
    Metrics,
    ModelParams,
    TrackerConfig,
    TrainConfig,
    evaluate,
    gradient_check,
    init_params,
    load_params,
    run_suite,
    save_params,
    track_sequence,
    train_toy,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ContractError",
    "FilterConfig",
    "FormatError",
    "GraphConfig",
    "HeadParams",
    "Metrics",
    "ModelParams",
    "MotionModel",
    "OcclusionSpan",
    "Rng",
    "SaliencyConfig",
    "SequenceManifest",
    "ShapeError",
    "Tensor",
    "TrackRecord",
    "TrackerConfig",
    "TrainConfig",
    "WorldConfig",
    "build_similarity_volume",
    "cls_head",
    "correlate",
    "decode_box",
    "deform_config",
    "evaluate",
    "gen_sequence",
    "gradient_check",
    "init_params",
    "load_params",
    "main_lobe",
    "normalize_adjacency",
    "read_manifest",
    "read_tensor",
    "read_track_csv",
    "reg_head",
    "rigid_config",
    "roi_pool_exemplar",
    "run_suite",
    "save_params",
    "save_sequence",
    "score_map",
    "select_saliencies",
    "set_default_dtype",
    "track_sequence",
    "train_config",
    "train_toy",
    "write_manifest",
    "write_tensor",
    "write_track_csv",
]
