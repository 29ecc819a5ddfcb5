"""Command line front end.

Subcommands:
    gen       generate a synthetic sequence and write it to disk
    track     run the tracker over a written sequence, emit a track CSV
    train     train head/graph parameters on synthetic worlds
    eval      score a track CSV against a sequence's ground truth
    saliency  dump the exemplar saliency map (PGM + CSV) for a seeded world
    oracle    run every brute-force equivalence suite

Exit codes: 0 success, 1 validation/configuration error (including unknown
flags), 2 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import association as assoc
from . import harness
from . import io_formats as iof
from . import oracles
from . import saliency as sal_mod
from . import synth_world as world
from .autodiff import Rng


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_tracker_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=harness.VARIANTS, default="saot")
    p.add_argument("--k", type=int, default=48, help="saliencies kept per frame")
    p.add_argument("--alpha", type=float, default=0.5, help="concentration exponent")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="weight of the Gaussian center prior")
    p.add_argument("--sigma-g", type=float, default=2.0, help="prior std, grid units")
    p.add_argument("--beta", type=float, default=0.8, help="response fusion weight")
    p.add_argument("--gcn-orders", type=int, default=2, help="adjacency powers M")


def _tracker_config(args) -> harness.TrackerConfig:
    cfg = harness.TrackerConfig(
        variant=args.variant,
        saliency=sal_mod.SaliencyConfig(alpha=args.alpha, lam=args.lam,
                                        sigma_g=args.sigma_g, k=args.k),
        graph=assoc.GraphConfig(orders=args.gcn_orders),
        beta=args.beta,
        seed=args.seed,
    )
    cfg.validate()
    return cfg


def _manifest_path(arg: str) -> str:
    return arg if arg.endswith(".json") else os.path.join(arg, "manifest.json")


def cmd_gen(args) -> int:
    if args.preset == "train":
        wcfg = world.train_config(args.seed)
    else:
        wcfg = harness.eval_world_config(args.preset, args.seed)
    if args.frames is not None:
        wcfg = replace(wcfg, n_frames=args.frames)
    manifest, samples = world.gen_sequence(wcfg)
    mpath = world.save_sequence(args.out, manifest, samples)
    print(mpath)
    return 0


def cmd_track(args) -> int:
    mpath = _manifest_path(args.indir)
    manifest = iof.read_manifest(mpath)
    channels = iof.read_tensor_shape(manifest.frames[0])[2]
    if args.params:
        cfg, params = harness.load_params(args.params, channels)
    else:
        cfg = _tracker_config(args)
        params = harness.init_params(cfg, channels, Rng(cfg.seed, 7))
    records = harness.track_sequence(manifest, cfg, params)
    out = args.out or os.path.join(os.path.dirname(mpath), f"track_{cfg.variant}.csv")
    iof.write_track_csv(out, records)
    print(out)
    if manifest.gt_boxes is not None:
        m = harness.evaluate(records, manifest)
        print(f"mean_iou={m.mean_iou:.4f} success_auc={m.success_auc:.4f} "
              f"precision={m.precision:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _tracker_config(args)
    train_cfg = harness.TrainConfig(steps=args.steps, batch=args.batch, seed=args.seed)
    out = args.out or f"params_{cfg.variant}"
    os.makedirs(out, exist_ok=True)
    params, history = harness.train_toy(
        train_cfg, cfg, loss_csv=os.path.join(out, "loss_curve.csv"))
    path = harness.save_params(out, cfg, params)
    print(path)
    print(f"steps={len(history)} first_loss={history[0][1]:.4f} "
          f"last_loss={history[-1][1]:.4f}")
    return 0


def cmd_eval(args) -> int:
    manifest = iof.read_manifest(_manifest_path(args.indir))
    records = iof.read_track_csv(args.track)
    m = harness.evaluate(records, manifest)
    print(f"mean_iou={m.mean_iou:.6f}")
    print(f"success_auc={m.success_auc:.6f}")
    print(f"precision={m.precision:.6f}")
    if args.out:
        iof.write_csv(args.out, ["metric", "value"],
                      [("mean_iou", m.mean_iou),
                       ("success_auc", m.success_auc),
                       ("precision", m.precision)])
    return 0


def cmd_saliency(args) -> int:
    cfg = _tracker_config(args)
    wcfg = harness.eval_world_config("deform", args.seed)
    manifest, samples = world.gen_sequence(wcfg)
    f_x = sal_mod.roi_pool_exemplar(samples[0].features, manifest.exemplar_box,
                                    cfg.exemplar_hw)
    f_s = samples[min(1, len(samples) - 1)].features
    volume = sal_mod.build_similarity_volume(f_x, f_s, cfg.saliency.eps)
    smap = sal_mod.score_map(volume, cfg.saliency, cfg.exemplar_hw)
    chosen = sal_mod.select_saliencies(volume, cfg.saliency, cfg.exemplar_hw)
    out = args.out or "saliency_out"
    os.makedirs(out, exist_ok=True)
    pgm = os.path.join(out, "saliency_map.pgm")
    iof.dump_pgm(smap, pgm)
    scores_csv = os.path.join(out, "saliency_scores.csv")
    iof.write_csv(scores_csv, ["row", "col", "score"],
                  [(i, j, float(smap[i, j]))
                   for i in range(smap.shape[0]) for j in range(smap.shape[1])])
    picks_csv = os.path.join(out, "saliencies.csv")
    iof.write_csv(picks_csv, ["exemplar_row", "exemplar_col", "match_row",
                              "match_col", "score"],
                  [(px[0], px[1], ps[0], ps[1], float(v))
                   for px, ps, v in zip(chosen.p_x, chosen.p_s, chosen.values)])
    print(pgm)
    print(scores_csv)
    print(picks_csv)
    return 0


def cmd_oracle(args) -> int:
    rows = oracles.run_all(args.seed)
    all_ok = True
    for name, ok, detail in rows:
        tag = "ok" if ok else "FAIL"
        print(f"[{tag}] {name}: {detail}")
        all_ok = all_ok and ok
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saltrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=["static", "rigid", "deform", "train"],
                   default="rigid")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--out", required=True, help="sequence directory to write")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("track", help="track a written sequence")
    p.add_argument("--in", dest="indir", required=True,
                   help="sequence directory or manifest.json")
    p.add_argument("--params", default=None, help="trained parameter directory")
    p.add_argument("--out", default=None, help="track CSV path")
    _add_tracker_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", help="train parameters on synthetic worlds")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--out", default=None, help="parameter directory to write")
    _add_tracker_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a track CSV against ground truth")
    p.add_argument("--in", dest="indir", required=True,
                   help="sequence directory or manifest.json")
    p.add_argument("--track", required=True, help="track CSV to score")
    p.add_argument("--out", default=None, help="optional metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="dump a saliency map for a seeded world")
    p.add_argument("--out", default=None, help="output directory")
    _add_tracker_flags(p)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("oracle", help="run brute-force equivalence suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, iof.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc.__cause__, (OSError, iof.FormatError)) else 1
    except (OSError, iof.FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
