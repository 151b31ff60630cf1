"""Command-line entry point: ``geotlm <subcommand> ...``.

Exit codes: 0 on success, 1 on validation/data errors, 2 on usage errors.
"""

import argparse
import json
import logging
import os
import sys

from . import gradcheck as gc
from .data import (
    SyntheticSpec,
    Vocabulary,
    generate_synthetic,
    load_dataset,
    load_samples,
    record_features,
    record_image,
    write_synthetic,
)
from .errors import GeoTlmError
from .evaluate import format_report, load_eval_records, report_json, score
from .geo import AnchorFeatureSet, EmbeddingFieldStore, SpatioTemporalBox, build_feature_set
from .metrics import TASKS
from .model import ToyVlm, greedy_decode, load_checkpoint, save_checkpoint
from .tensorio import read_tensor, write_tensor
from .tlm import PriorBatch, TokenGrid, tlm_forward
from .train import TrainConfig, pretrain_base, stage1_train, stage2_train

log = logging.getLogger("geotlm")


class UsageError(Exception):
    pass


def _parse_box(text):
    parts = text.split(",")
    if len(parts) != 5:
        raise argparse.ArgumentTypeError("--box wants lon_min,lat_min,lon_max,lat_max,year")
    try:
        return [float(p) for p in parts[:4]] + [int(parts[4])]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _parse_grid(text):
    try:
        n, m = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError("--grid wants NxM, e.g. 8x8") from None
    return n, m


def _load_store(paths):
    files = []
    for p in paths:
        if os.path.isdir(p):
            files += sorted(os.path.join(p, n) for n in os.listdir(p) if n.endswith(".aefs"))
        else:
            files.append(p)
    if not files:
        raise ValueError(f"no .aefs files found in {paths}")
    return EmbeddingFieldStore.load(files)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def cmd_extract_anchors(args):
    box = SpatioTemporalBox.from_list(args.box)
    store = _load_store(args.store)
    fs = build_feature_set(box, args.grid[0], args.grid[1], store)
    write_tensor(args.out, fs.to_array())
    print(f"wrote {len(fs)} anchors to {args.out}")


def cmd_fuse(args):
    tokens = read_tensor(args.tokens)
    grid = TokenGrid.from_hwc(tokens)
    priors = PriorBatch.from_feature_set(AnchorFeatureSet.from_array(read_tensor(args.priors)))
    params = load_checkpoint(args.params).tlm_params
    out, _ = tlm_forward(grid, priors, params)
    write_tensor(args.out, grid.to_hwc(out))
    print(f"wrote fused tokens {tokens.shape} to {args.out}")


def cmd_gradcheck(args):
    worst = gc.run(seed=args.seed, instances=args.instances)
    for name, err in worst.items():
        print(f"{name:8s} max rel err {err:.3e}")
    top = max(worst.values())
    print(f"max relative error {top:.3e} (tolerance {gc.TOLERANCE:.0e})")
    return 0 if top < gc.TOLERANCE else 1


def cmd_gen_synthetic(args):
    spec = SyntheticSpec.from_dict(_read_json(args.spec)) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    data = generate_synthetic(spec)
    write_synthetic(data, args.out)
    print(f"wrote {len(data.d1)} stage-1, {len(data.d2)} stage-2 and "
          f"{len(data.d2_eval)} eval records to {args.out}")


def _dataset_paths(data, stage):
    if os.path.isdir(data):
        return os.path.join(data, "d1.jsonl" if stage == 1 else "d2.jsonl"), os.path.join(data, "vocab.json")
    return data, os.path.join(os.path.dirname(os.path.abspath(data)), "vocab.json")


def _train_config(path, stage):
    cfg = _read_json(path) if path else {}
    cfg = dict(cfg.get(f"stage{stage}", cfg))
    cfg["stage"] = stage
    return TrainConfig(**cfg)


def cmd_init_model(args):
    config = _train_config(args.config, 1)
    save_checkpoint(ToyVlm.init(config.model_config()), args.out)
    print(f"wrote initial model to {args.out}")


def cmd_train(args):
    config = _train_config(args.config, args.stage)
    data_path, vocab_path = _dataset_paths(args.data, args.stage)
    vocab = Vocabulary.load(vocab_path)
    _, samples = load_samples(data_path, vocab)
    loss_out = args.loss_out or args.out + ".loss.csv"
    if args.stage == 1:
        if args.init:
            model = load_checkpoint(args.init)
        else:
            base = pretrain_base(ToyVlm.init(config.model_config()), samples, config)
            model = base.model
            with open(args.out + ".base-loss.csv", "w") as fh:
                fh.write(base.loss_csv())
        result = stage1_train(model, samples, config)
    else:
        if not args.init:
            raise UsageError("train --stage 2 needs --init <stage-1 checkpoint>")
        result = stage2_train(load_checkpoint(args.init), samples, config)
    save_checkpoint(result.model, args.out)
    with open(loss_out, "w") as fh:
        fh.write(result.loss_csv())
    print(f"stage {args.stage}: {config.epochs} epochs, loss {result.losses[0]:.4f} -> "
          f"{result.losses[-1]:.4f}" if result.losses else f"stage {args.stage}: 0 epochs")
    print(f"wrote {args.out} and {loss_out}")


def cmd_predict(args):
    model = load_checkpoint(args.ckpt)
    path = os.path.join(args.data, f"{args.split}.jsonl") if os.path.isdir(args.data) else args.data
    root = os.path.dirname(os.path.abspath(path))
    vocab = Vocabulary.load(os.path.join(root, "vocab.json"))
    records = load_dataset(path)
    task_of = {"how-many": "counting", "what-scene": "classification"}
    lines = []
    for rec in records:
        if rec.instruction not in task_of:
            continue
        task = task_of[rec.instruction]
        priors = PriorBatch.from_feature_set(record_features(rec, root))
        out = greedy_decode(model, record_image(rec, root), priors, vocab.encode(rec.instruction),
                            vocab.bos, vocab.eos)
        text = vocab.decode([t for t in out if t != vocab.eos])
        gt = rec.annotations["count"] if task == "counting" else rec.annotations["scene"]
        lines.append(json.dumps({"task": task, "image_id": rec.image_id, "ground_truth": gt,
                                 "prediction_text": text}, sort_keys=True))
    with open(args.out, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} eval records to {args.out}")


def cmd_eval(args):
    classes = args.classes.split(",") if args.classes else None
    if args.iou is not None and not 0 < args.iou <= 1:
        raise UsageError("--iou must lie in (0, 1]")
    records = load_eval_records(args.records, args.task, classes)
    if not records:
        raise ValueError(f"no '{args.task}' records in {args.records}")
    metrics = score(records, args.task, iou=args.iou, classes=classes)
    text = format_report(args.task, metrics, len(records))
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    if args.json_out:
        with open(args.json_out, "w") as fh:
            fh.write(report_json(args.task, metrics, len(records)))


def build_parser():
    p = argparse.ArgumentParser(prog="geotlm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract-anchors", help="sample the embedding store on an anchor grid")
    s.add_argument("--box", type=_parse_box, required=True, help="lon_min,lat_min,lon_max,lat_max,year")
    s.add_argument("--grid", type=_parse_grid, default=(8, 8), help="NxM anchors (lon x lat)")
    s.add_argument("--store", action="append", required=True, help=".aefs file or directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_anchors)

    s = sub.add_parser("fuse", help="apply TLM to a token grid")
    s.add_argument("--tokens", required=True, help="TNSR (H, W, C)")
    s.add_argument("--priors", required=True, help="TNSR anchor table from extract-anchors")
    s.add_argument("--params", required=True, help="model checkpoint providing theta_ae")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("gradcheck", help="finite-difference check of the TLM backward pass")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("gen-synthetic", help="write a synthetic geo-determined dataset")
    s.add_argument("--spec", help="JSON SyntheticSpec (defaults if omitted)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("init-model", help="write a freshly initialized checkpoint")
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("train", help="run stage 1 or stage 2 fine-tuning")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--data", required=True, help="dataset directory or JSONL file")
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--init", help="starting checkpoint (required for stage 2)")
    s.add_argument("--out", required=True)
    s.add_argument("--loss-out", help="loss curve CSV (default <out>.loss.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="decode answers for a stage-2 split into eval records")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="d2_eval")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score eval records")
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--records", required=True)
    s.add_argument("--iou", type=float)
    s.add_argument("--classes", help="comma-separated class vocabulary")
    s.add_argument("--out", help="also write the text table here")
    s.add_argument("--json-out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except (GeoTlmError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
