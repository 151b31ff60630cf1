"""Central finite-difference check of the analytic TLM backward pass."""

from dataclasses import dataclass

import numpy as np

from .tlm import PriorBatch, TlmParams, TokenGrid, tlm_backward, tlm_forward

STEP = 1e-5
TOLERANCE = 1e-4
# elements whose true gradient is ~0 are compared on this absolute scale
REL_FLOOR = 1e-6


@dataclass
class Instance:
    grid: TokenGrid
    priors: PriorBatch
    params: TlmParams
    upstream: np.ndarray


def random_instance(rng, grid_h=2, grid_w=2, channels=3, n_priors=2, in_dims=5, hidden=6,
                    sigma=1.0, epsilon=1e-6):
    rng = np.random.default_rng(rng)
    grid = TokenGrid(rng.normal(size=(grid_h * grid_w, channels)), grid_h, grid_w)
    priors = PriorBatch(rng.normal(size=(n_priors, in_dims)), rng.uniform(size=(n_priors, 2)))
    params = TlmParams(
        w1=rng.normal(0, 0.7, size=(hidden, in_dims)),
        b1=rng.normal(0, 0.3, size=hidden),
        w2=rng.normal(0, 0.7, size=(2 * channels, hidden)),
        b2=rng.normal(0, 0.3, size=2 * channels),
        sigma=sigma,
        epsilon=epsilon,
    )
    upstream = rng.normal(size=(grid_h * grid_w, channels))
    return Instance(grid, priors, params, upstream)


def _objective(inst, **override):
    p = inst.params
    params = TlmParams(override.get("w1", p.w1), override.get("b1", p.b1),
                       override.get("w2", p.w2), override.get("b2", p.b2), p.sigma, p.epsilon)
    grid = TokenGrid(override.get("tokens", inst.grid.tokens), inst.grid.grid_h, inst.grid.grid_w)
    priors = PriorBatch(override.get("vectors", inst.priors.vectors), inst.priors.positions)
    out, _ = tlm_forward(grid, priors, params)
    return float(np.sum(out * inst.upstream))


def numeric_gradients(inst, step=STEP):
    base = {"w1": inst.params.w1, "b1": inst.params.b1, "w2": inst.params.w2,
            "b2": inst.params.b2, "tokens": inst.grid.tokens, "vectors": inst.priors.vectors}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += step
            minus[idx] -= step
            g[idx] = (_objective(inst, **{name: plus}) - _objective(inst, **{name: minus})) / (2 * step)
        grads[name] = g
    return grads


def relative_error(analytic, numeric, floor=REL_FLOOR):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_instance(inst, step=STEP):
    """Max relative error per gradient tensor for one instance."""
    _, tape = tlm_forward(inst.grid, inst.priors, inst.params)
    analytic = tlm_backward(tape, inst.upstream).as_dict()
    numeric = numeric_gradients(inst, step)
    return {k: float(relative_error(analytic[k], numeric[k]).max()) for k in numeric}


def run(seed=0, instances=20, **shape):
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(instances):
        errs = check_instance(random_instance(rng, **shape))
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
