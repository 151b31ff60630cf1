import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from geotlm.model import ModelConfig, ToyVlm, TripletSample  # noqa: E402
from geotlm.tlm import PriorBatch  # noqa: E402

TINY = dict(image_size=8, patch=4, channels=4, embed_dims=6, hidden=5, vocab=10,
            token_dims=3, lora_rank=2, lora_alpha=4.0)


def tiny_sample(rng, config, n_tokens=4, n_priors=3, answer_from=0):
    ids = rng.integers(0, config.vocab, size=n_tokens + 1)
    mask = np.zeros(n_tokens)
    mask[answer_from:] = 1.0
    return TripletSample(
        image=rng.exponential(size=(config.image_size, config.image_size)),
        priors=PriorBatch(rng.normal(size=(n_priors, config.embed_dims)),
                          rng.uniform(size=(n_priors, 2))),
        input_ids=ids[:-1], target_ids=ids[1:], mask=mask)


def randomize(model, rng, groups=("theta_ae", "theta_lora")):
    """Give zero-initialized groups nonzero values so every gradient path is live."""
    for g in groups:
        for n, a in model.partition.groups[g].items():
            model.partition.groups[g][n] = rng.normal(0.0, 0.5, size=a.shape)
    return model


@pytest.fixture
def tiny():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(**TINY)
    model = randomize(ToyVlm.init(cfg), rng)
    samples = [tiny_sample(rng, cfg, answer_from=i % 3) for i in range(6)]
    return model, samples
