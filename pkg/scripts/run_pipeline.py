"""Run the CLI pipeline end to end in a work directory.

gen-synthetic -> extract-anchors -> fuse -> train 1 -> train 2 -> predict -> eval

Usage: python3 scripts/run_pipeline.py WORKDIR [--config configs/synthetic_train.json]
"""

import argparse
import json
import os

import numpy as np

from geotlm.cli import main as cli
from geotlm.data import load_dataset
from geotlm.tensorio import write_tensor

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(HERE, "..", "configs")


def run(work, config, data_spec):
    def step(*argv):
        print("$ geotlm " + " ".join(argv))
        code = cli(list(argv))
        if code:
            raise SystemExit(code)

    data = os.path.join(work, "data")
    step("gen-synthetic", "--spec", data_spec, "--out", data)

    rec = load_dataset(os.path.join(data, "d1.jsonl"))[0]
    box = ",".join(repr(v) for v in rec.box.as_list())
    anchors = os.path.join(work, "anchors.tnsr")
    step("extract-anchors", "--box", box, "--grid", "8x8", "--store", os.path.join(data, "store"),
         "--out", anchors)

    s1 = os.path.join(work, "stage1.fgpt")
    s2 = os.path.join(work, "stage2.fgpt")
    step("train", "--stage", "1", "--data", data, "--config", config, "--out", s1)

    tokens = os.path.join(work, "tokens.tnsr")
    write_tensor(tokens, np.random.default_rng(0).normal(size=(4, 4, 32)))
    step("fuse", "--tokens", tokens, "--priors", anchors, "--params", s1,
         "--out", os.path.join(work, "fused.tnsr"))

    step("train", "--stage", "2", "--data", data, "--config", config, "--init", s1, "--out", s2)
    records = os.path.join(work, "records.jsonl")
    step("predict", "--ckpt", s2, "--data", data, "--out", records)
    step("eval", "--task", "counting", "--records", records,
         "--out", os.path.join(work, "counting.txt"), "--json-out", os.path.join(work, "counting.json"))
    with open(os.path.join(data, "synthetic_spec.json")) as fh:
        classes = ",".join(json.load(fh)["classes"])
    step("eval", "--task", "classification", "--records", records, "--classes", classes,
         "--out", os.path.join(work, "classification.txt"),
         "--json-out", os.path.join(work, "classification.json"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir")
    ap.add_argument("--config", default=os.path.join(CONFIGS, "synthetic_train.json"))
    ap.add_argument("--data-spec", default=os.path.join(CONFIGS, "synthetic_data.json"))
    args = ap.parse_args()
    os.makedirs(args.workdir, exist_ok=True)
    run(args.workdir, args.config, args.data_spec)


if __name__ == "__main__":
    main()
