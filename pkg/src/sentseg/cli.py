"""Command line front end: generate data, train, segment, evaluate, check gradients.

Exit codes: 0 on success, 1 for usage, configuration, IO and format problems,
2 for numeric failures (non-finite losses, gradient checks that do not pass).
"""

import argparse
import json
import os
import sys

import numpy as np
import torch

from .data import (
    ShapeWorldSpec,
    generate,
    load_dataset,
    oracle_pair_scores,
    pair_label_map,
    pair_vocabulary,
    read_mask,
    read_pair_scores,
    write_dataset,
    write_mask,
)
from .data.shapeworld import _by_video
from .embeddings import EmbeddingConfig, EmbeddingTable, build_table
from .errors import NumericError, PipelineError, ConfigError, InputError
from .loss import grad_check, total_loss, mask_pyramid
from .metrics import aggregate, pair_eval
from .model import ModelConfig, build_model, prepare_probe_point
from .textenc import embed_sentence
from .trainer import (
    FusionConfig,
    Predictor,
    TrainConfig,
    load_checkpoint,
    pair_inference,
    save_checkpoint,
    train,
    write_loss_log,
)

_SECTIONS = ("dataset", "model", "train", "embeddings")
_DATASET_EXTRAS = ("train_count", "test_count")


def _load_config(path):
    """Read the JSON config file and split it into known sections.

    Every section is parsed for validity even when the current command does
    not use it: one file describes a whole experiment, and a typo should
    surface on the first command that reads the file, not hours later.
    """
    if path is None:
        return {name: {} for name in _SECTIONS}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    sections = {name: raw.get(name, {}) for name in _SECTIONS}
    for name, value in sections.items():
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: section {name!r} must be a JSON object")
    _dataset_spec(sections["dataset"])
    _train_config(sections["train"])
    _embed_config(sections["embeddings"], _model_config(sections["model"]))
    return sections


def _dataset_spec(section):
    """Build a ShapeWorldSpec plus per-split video counts from the dataset section."""
    section = dict(section)
    counts = {k: section.pop(k, None) for k in _DATASET_EXTRAS}
    known = set(ShapeWorldSpec.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
    spec = ShapeWorldSpec(**section)
    train_count = 16 if counts["train_count"] is None else int(counts["train_count"])
    test_count = 4 if counts["test_count"] is None else int(counts["test_count"])
    return spec, train_count, test_count


def _model_config(section):
    return ModelConfig.from_dict(section) if section else ModelConfig()


def _train_config(section):
    return TrainConfig.from_dict(section) if section else TrainConfig()


def _embed_config(section, model_cfg):
    known = set(EmbeddingConfig.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown embeddings keys: {sorted(unknown)}")
    section = dict(section)
    section.setdefault("dim", model_cfg.embed_dim)
    return EmbeddingConfig(**section)


def _write_pair_files(out_dir, spec, splits):
    vocab = pair_vocabulary(spec)
    with open(os.path.join(out_dir, "pair_vocab.json"), "w", encoding="utf-8") as fh:
        json.dump(list(vocab), fh, indent=2)
        fh.write("\n")
    for split, samples in splits.items():
        scores = {
            vid: oracle_pair_scores(group, vocab)
            for vid, group in _by_video(samples).items()
        }
        with open(os.path.join(out_dir, f"pair_scores_{split}.json"), "w", encoding="utf-8") as fh:
            json.dump(scores, fh, indent=2)
            fh.write("\n")


def cmd_gen(args):
    spec, train_count, test_count = _dataset_spec(_load_config(args.config)["dataset"])
    if args.count is not None:
        train_count, test_count = args.count, 0
    splits = {"train": generate(spec, train_count, "train")}
    if test_count > 0:
        splits["test"] = generate(spec, test_count, "test")
    write_dataset(splits, args.out, force=args.force)
    if spec.sentence_style == "shape-action":
        _write_pair_files(args.out, spec, splits)
    for split, samples in splits.items():
        print(f"{split}: {len(set(s.video_id for s in samples))} videos, {len(samples)} samples")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    sections = _load_config(args.config)
    model_cfg = _model_config(sections["model"])
    train_cfg = _train_config(sections["train"])
    embed_cfg = _embed_config(sections["embeddings"], model_cfg)
    dataset = load_dataset(args.data, args.split)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, log = train(dataset, model_cfg, train_cfg, embed_cfg, resume=resume)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")
    save_checkpoint(ckpt, ckpt_path)
    write_loss_log(log, os.path.join(args.out, "loss_log.csv"))
    if log:
        print(f"trained to iteration {ckpt.iteration}, final loss {log[-1][2]:.6f}")
    else:
        print(f"checkpoint already at iteration {ckpt.iteration}, nothing to do")
    print(f"wrote {ckpt_path}")
    return 0


def cmd_segment(args):
    predictor = Predictor(load_checkpoint(args.ckpt))
    samples = load_dataset(args.data, args.split)
    for s in samples:
        frames = s.clip.frames if predictor.stream == "appearance" else s.flow.frames
        vdir = os.path.join(args.out, s.video_id)
        os.makedirs(vdir, exist_ok=True)
        mask = predictor.segment(s.sentence, frames)
        write_mask(mask, os.path.join(vdir, f"{s.instance_id}.pgm"))
        if args.dump_responses:
            r_max = predictor.model_config.resolutions[-1]
            resp = predictor.responses(s.sentence, frames)[r_max]
            np.save(os.path.join(vdir, f"{s.instance_id}_response.npy"), resp)
    print(f"segmented {len(samples)} samples into {args.out}")
    return 0


def cmd_eval(args):
    samples = load_dataset(args.data, args.split)
    pairs = []
    for s in samples:
        pred_path = os.path.join(args.pred, s.video_id, f"{s.instance_id}.pgm")
        if not os.path.isfile(pred_path):
            raise InputError(f"missing predicted mask {pred_path}")
        pairs.append((read_mask(pred_path), s.gt_mask))
    report = aggregate(pairs)
    print(report.table())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    return 0


def cmd_eval_pairs(args):
    vocab_path = os.path.join(args.data, "pair_vocab.json")
    if not os.path.isfile(vocab_path):
        raise InputError(
            f"{vocab_path} not found; pair evaluation needs a shape-action dataset"
        )
    with open(vocab_path, "r", encoding="utf-8") as fh:
        vocab = tuple(json.load(fh))
    scores_path = args.scores or os.path.join(args.data, f"pair_scores_{args.split}.json")
    scores = read_pair_scores(scores_path)
    predictor = Predictor(load_checkpoint(args.ckpt))
    flow_predictor = Predictor(load_checkpoint(args.flow_ckpt)) if args.flow_ckpt else None
    fusion = FusionConfig(w_appearance=args.w_appearance, w_flow=args.w_flow)
    preds = []
    gts = []
    for vid, group in _by_video(load_dataset(args.data, args.split)).items():
        if vid not in scores:
            raise InputError(f"{scores_path} has no scores for video {vid}")
        preds.append(pair_inference(
            group[0].clip.frames, scores[vid], predictor, vocab,
            threshold=args.threshold,
            flow_frames=group[0].flow.frames,
            flow_predictor=flow_predictor,
            fusion=fusion,
        ))
        gts.append(pair_label_map(group, vocab))
    report = pair_eval(preds, gts, num_classes=len(vocab) + 1)
    print(report.table())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    return 0


def _gradcheck_problem(seed, eps=1e-3):
    """A small full model in float64 plus a deterministic batch for probing.

    The model is nudged to a probe point where no finite-difference window
    straddles a ReLU kink, so central differences measure the true local
    slope; see prepare_probe_point.
    """
    model_cfg = ModelConfig(
        embed_dim=6,
        l_max=6,
        resolutions=(4, 16),
        video_channels=(8, 8),
        video_kernels=((2, 3, 3), (2, 3, 3)),
        video_strides=((1, 2, 2), (2, 2, 2)),
        deconv_channels=(8,),
        seed=seed,
    )
    model = build_model(model_cfg, "appearance").double()
    table = EmbeddingTable(model_cfg.embed_dim, fallback_seed=seed)
    matrix = embed_sentence("red square moving left", table, model_cfg.l_max)
    rows = matrix.rows.double().unsqueeze(0)
    lengths = torch.tensor([matrix.length])
    rng = np.random.default_rng(seed)
    clips = torch.from_numpy(rng.random((1, 3, 2, 16, 16), dtype=np.float64))
    labels = {
        r: torch.from_numpy(rng.choice([-1.0, 1.0], size=(1, r, r)))
        for r in model_cfg.resolutions
    }
    weights = {r: 1.0 for r in model_cfg.resolutions}
    prepare_probe_point(model, rows, lengths, clips, eps=eps)

    def closure():
        return total_loss(model(rows, lengths, clips), labels, weights)

    return closure, dict(model.named_parameters())


def cmd_gradcheck(args):
    closure, params = _gradcheck_problem(args.seed, eps=args.eps)
    report = grad_check(
        closure, params,
        eps=args.eps, tol=args.tol,
        max_entries_per_block=args.max_entries,
        seed=args.seed,
    )
    for line in report.lines():
        print(line)
    if report.passed:
        print(f"PASS: all blocks within {args.tol:g}")
        return 0
    name = report.worst_block
    print(f"FAIL: block {name} off by {report.block_errors[name]:.3e} "
          f"(tolerance {args.tol:g})")
    return 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sentseg",
        description="Segment video objects referred to by short sentences.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap intra-op CPU threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic shape dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--count", type=int, default=None,
                   help="train video count (disables the test split)")
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset split")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="directory for checkpoint and loss log")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--split", default="train")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="write predicted masks for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--dump-responses", action="store_true",
                   help="also save raw response maps as .npy")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predicted masks against a split")
    p.add_argument("--pred", required=True, help="directory written by segment")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-pairs", help="evaluate fixed shape-action queries")
    p.add_argument("--ckpt", required=True, help="appearance checkpoint")
    p.add_argument("--flow-ckpt", default=None, help="optional flow checkpoint to fuse")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scores", default=None,
                   help="pair confidence JSON (defaults to the dataset's oracle scores)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--w-appearance", type=float, default=2.0)
    p.add_argument("--w-flow", type=float, default=1.0)
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_eval_pairs)

    p = sub.add_parser("gradcheck", help="compare model gradients to finite differences")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--max-entries", type=int, default=None,
                   help="probe at most this many entries per block")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (PipelineError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
