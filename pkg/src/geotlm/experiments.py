"""Seed-fixed ablation on the synthetic dataset.

Variants share one geo-blind base model:

* ``full``: stage 1 (theta_ae) then stage 2 (theta_lora)
* ``tlm_clamped``: TLM forced to identity throughout, same two stages
* ``stage1_skipped``: stage 2 directly on the base model
* ``sft2_tlm`` (opt-in): no stage 1; stage 2 updates theta_ae and theta_lora together
"""

import time
from dataclasses import dataclass, field

from .data import SyntheticSpec, generate_synthetic, synthetic_samples
from .model import ToyVlm
from .train import TrainConfig, _run, answer_accuracy, pretrain_base, stage1_train, stage2_train

# desk-scale learning rates; see configs/synthetic_train.json
DESK_STAGE1 = dict(epochs=30, learning_rate=0.2)
DESK_STAGE2 = dict(epochs=5, learning_rate=0.05)


@dataclass
class VariantResult:
    name: str
    eval_accuracy: float
    stage1_losses: list = field(default_factory=list)
    stage2_losses: list = field(default_factory=list)
    seconds: float = 0.0


def run_ablation(spec=None, stage1=None, stage2=None, seed=0, variants=None):
    """Train each variant and report held-out answer accuracy."""
    spec = spec or SyntheticSpec(seed=seed)
    data = generate_synthetic(spec)
    d1 = synthetic_samples(data, data.d1)
    d2 = synthetic_samples(data, data.d2)
    ev = synthetic_samples(data, data.d2_eval)
    c1 = TrainConfig(stage=1, seed=seed, **(stage1 or DESK_STAGE1))
    c2 = TrainConfig(stage=2, seed=seed, **(stage2 or DESK_STAGE2))
    base = pretrain_base(ToyVlm.init(c1.model_config()), d1, c1).model
    variants = variants or ("full", "tlm_clamped", "stage1_skipped")

    results = {"stage1_checkpoint": None}
    for name in variants:
        t0 = time.perf_counter()
        model = base.copy()
        s1 = []
        if name == "tlm_clamped":
            model.config.tlm_enabled = False
        if name in ("full", "tlm_clamped"):
            r1 = stage1_train(model, d1, c1)
            model, s1 = r1.model, r1.losses
            if name == "full":
                results["stage1_checkpoint"] = answer_accuracy(model, ev)
        elif name not in ("stage1_skipped", "sft2_tlm"):
            raise ValueError(f"unknown variant {name!r}")
        if name == "sft2_tlm":
            r2 = _run(model, d2, ("theta_ae", "theta_lora"), c2.epochs, c2.learning_rate,
                      c2.batch_size, c2.seed, "stage 2 + TLM")
        else:
            r2 = stage2_train(model, d2, c2)
        results[name] = VariantResult(name, answer_accuracy(r2.model, ev), s1, r2.losses,
                                      time.perf_counter() - t0)
    return results
