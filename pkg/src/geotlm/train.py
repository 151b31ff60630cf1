"""Two-stage decoupled fine-tuning with plain minibatch SGD.

Stage 1 updates only the TLM MLP (``theta_ae``) on description data. Stage 2
starts from the stage-1 weights and updates only the LoRA adapters
(``theta_lora``) on instruction/answer data, with the loss restricted to
answer tokens. Every frozen group is serialized before and after the run and
compared byte-for-byte.
"""

import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FrozenGroupMutated
from .model import GROUPS, ModelConfig, ToyVlm

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {1: dict(epochs=30, learning_rate=1e-4), 2: dict(epochs=5, learning_rate=1e-5)}


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = None
    learning_rate: float = None
    batch_size: int = 8
    lora_rank: int = 4
    lora_alpha: float = 8.0
    seed: int = 0
    # joint theta_ae + theta_lora stage 1; off by default
    stage1_train_lora: bool = False
    # language pretraining of a fresh base model (theta_llm only, geo-blind)
    base_epochs: int = 20
    base_learning_rate: float = 0.5
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        defaults = STAGE_DEFAULTS[self.stage]
        if self.epochs is None:
            self.epochs = defaults["epochs"]
        if self.learning_rate is None:
            self.learning_rate = defaults["learning_rate"]
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate >= 0 required")

    @property
    def trainable_groups(self):
        if self.stage == 1:
            return ("theta_ae", "theta_lora") if self.stage1_train_lora else ("theta_ae",)
        return ("theta_lora",)

    def model_config(self):
        kw = dict(self.model)
        kw.setdefault("lora_rank", self.lora_rank)
        kw.setdefault("lora_alpha", self.lora_alpha)
        kw.setdefault("seed", self.seed)
        return ModelConfig(**kw)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    model: ToyVlm
    losses: list  # per-epoch mean loss

    def loss_csv(self):
        buf = io.StringIO()
        buf.write("epoch,mean_loss\n")
        for i, v in enumerate(self.losses, start=1):
            buf.write(f"{i},{v!r}\n")
        return buf.getvalue()


def sgd_step(model, samples, groups, lr):
    """One averaged-gradient SGD update over ``samples``; returns mean loss."""
    total = None
    loss_sum = 0.0
    for s in samples:
        loss, grads = model.loss_and_grads(s, groups)
        loss_sum += loss
        if total is None:
            total = grads
        else:
            for g in groups:
                for n in total[g]:
                    total[g][n] = total[g][n] + grads[g][n]
    n = len(samples)
    if lr != 0:
        for g in groups:
            params = model.partition.groups[g]
            for name, grad in total[g].items():
                params[name] = params[name] - lr * (grad / n)
    return loss_sum / n


def _run(model, samples, groups, epochs, lr, batch_size, seed, label):
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    part = model.partition
    part.trainable = {g: g in groups for g in GROUPS}
    frozen = [g for g in GROUPS if g not in groups]
    before = {g: part.serialize(g) for g in frozen}

    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            batch = [samples[i] for i in order[start:start + batch_size]]
            batch_losses.append(sgd_step(model, batch, groups, lr) * len(batch))
        losses.append(float(sum(batch_losses) / len(samples)))
        log.info("%s epoch %d loss %.6f", label, epoch + 1, losses[-1])

    for g in frozen:
        if part.serialize(g) != before[g]:
            raise FrozenGroupMutated(f"frozen group {g} changed during {label}")
    part.trainable = {g: False for g in GROUPS}
    return TrainResult(model, losses)


def _check_stage(config, stage):
    if config.stage != stage:
        raise ValueError(f"stage{stage}_train needs config.stage == {stage}, got {config.stage}")


def pretrain_base(model, dataset, config):
    """Fit the language head on description text before any geo prior is seen.

    Stands in for the pretrained LLM backbone: only theta_llm moves, and with
    the TLM still at its identity initialization the model is geo-blind.
    """
    return _run(model, dataset, ("theta_llm",), config.base_epochs,
                config.base_learning_rate, config.batch_size, config.seed, "base")


def stage1_train(model, dataset, config):
    """Knowledge injection: fit theta_ae to description text."""
    _check_stage(config, 1)
    return _run(model, dataset, config.trainable_groups, config.epochs,
                config.learning_rate, config.batch_size, config.seed, "stage 1")


def stage2_train(model, dataset, config):
    """Task adaptation: fit theta_lora to answer tokens only."""
    _check_stage(config, 2)
    return _run(model, dataset, config.trainable_groups, config.epochs,
                config.learning_rate, config.batch_size, config.seed, "stage 2")


def answer_accuracy(model, samples):
    """Fraction of samples whose every unmasked target is the argmax token."""
    if not samples:
        return 0.0
    hits = 0
    for s in samples:
        pred = model.forward(s).argmax(axis=1)
        on = s.mask > 0
        hits += bool(np.all(pred[on] == s.target_ids[on]))
    return hits / len(samples)


def mean_loss(model, samples):
    return float(np.mean([model.loss_and_grads(s, ())[0] for s in samples]))
