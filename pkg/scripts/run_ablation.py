"""Train the full, TLM-clamped and stage-1-skipped variants and print accuracies.

Usage: python3 scripts/run_ablation.py [--seed N] [--with-sft2-tlm] [--json-out FILE]
"""

import argparse
import json

from geotlm.experiments import run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--with-sft2-tlm", action="store_true",
                    help="also train TLM jointly with LoRA in stage 2, skipping stage 1")
    ap.add_argument("--json-out")
    args = ap.parse_args()

    names = ["tlm_clamped", "stage1_skipped", "full"]
    if args.with_sft2_tlm:
        names.insert(2, "sft2_tlm")
    res = run_ablation(seed=args.seed, variants=names)
    print(f"{'variant':<16}{'eval acc':>10}{'stage-1 loss':>14}{'sec':>7}")
    for name in names:
        r = res[name]
        s1 = f"{r.stage1_losses[-1]:.4f}" if r.stage1_losses else "-"
        print(f"{name:<16}{100 * r.eval_accuracy:>9.2f}%{s1:>14}{r.seconds:>7.1f}")
    print(f"stage-1 checkpoint before stage 2: {100 * res['stage1_checkpoint']:.2f}%")
    if args.json_out:
        out = {k: (v if isinstance(v, float) or v is None else v.__dict__) for k, v in res.items()}
        with open(args.json_out, "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
