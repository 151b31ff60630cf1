"""Token-wise linear modulation of visual tokens by sparse geo priors.

Each prior vector is mapped by a two-layer SiLU MLP to a per-channel
(gamma, beta) pair. The sparse pairs are spread over the H x W token grid with
column-normalized Gaussian weights and applied as ``x * (1 + gamma) + beta``.

All arithmetic is float64. Prior positions and sigma are constants: the
backward pass differentiates w.r.t. the MLP parameters, the tokens and the
prior vectors only.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyPriors, ShapeMismatch


@dataclass
class TokenGrid:
    """T x C tokens laid out on an H x W grid, token index ``h * W + w``."""

    tokens: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.grid_h < 1 or self.grid_w < 1:
            raise DimensionMismatch(f"grid dims must be positive, got {self.grid_h}x{self.grid_w}")
        if self.tokens.ndim != 2 or self.tokens.shape[1] < 1:
            raise DimensionMismatch(f"tokens must be (T, C) with C > 0, got {self.tokens.shape}")
        if self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise DimensionMismatch(
                f"T={self.tokens.shape[0]} does not match grid {self.grid_h}x{self.grid_w}"
            )

    @property
    def channels(self):
        return self.tokens.shape[1]

    def pi(self, h, w):
        return h * self.grid_w + w

    @classmethod
    def from_hwc(cls, array):
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 3:
            raise DimensionMismatch(f"expected (H, W, C) array, got shape {array.shape}")
        h, w, c = array.shape
        return cls(array.reshape(h * w, c), h, w)

    def to_hwc(self, tokens=None):
        tokens = self.tokens if tokens is None else tokens
        return tokens.reshape(self.grid_h, self.grid_w, -1)


@dataclass
class PriorBatch:
    vectors: np.ndarray  # (S, D)
    positions: np.ndarray  # (S, 2) rows of (y, x) in [0, 1]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionMismatch(f"vectors must be (S, D), got {self.vectors.shape}")
        if self.vectors.shape[0] == 0:
            raise EmptyPriors("a prior batch needs at least one vector")
        if self.positions.shape != (self.vectors.shape[0], 2):
            raise DimensionMismatch(
                f"positions must be ({self.vectors.shape[0]}, 2), got {self.positions.shape}"
            )
        if np.any(~np.isfinite(self.positions)) or np.any(self.positions < 0) or np.any(self.positions > 1):
            raise ValueError("prior positions must lie in [0, 1]^2")

    @classmethod
    def from_feature_set(cls, feature_set):
        return cls(feature_set.embeddings, feature_set.positions)

    def permuted(self, order):
        return PriorBatch(self.vectors[order], self.positions[order])


@dataclass
class TlmParams:
    w1: np.ndarray  # (hidden, D)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (2C, hidden); rows [:C] -> gamma, [C:] -> beta
    b2: np.ndarray  # (2C,)
    sigma: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        hidden, _ = self.w1.shape
        if self.b1.shape != (hidden,) or self.w2.ndim != 2 or self.w2.shape[1] != hidden:
            raise DimensionMismatch("inconsistent hidden width across w1/b1/w2")
        if self.w2.shape[0] % 2 or self.b2.shape != (self.w2.shape[0],):
            raise DimensionMismatch("w2/b2 must produce an even 2C output")

    @property
    def in_dims(self):
        return self.w1.shape[1]

    @property
    def hidden(self):
        return self.w1.shape[0]

    @property
    def channels(self):
        return self.w2.shape[0] // 2

    @classmethod
    def init(cls, in_dims, channels, hidden=128, rng=None, sigma=1.0, epsilon=1e-6):
        """Small random first layer; zero output layer so TLM starts as identity."""
        rng = np.random.default_rng(rng)
        w1 = rng.normal(0.0, 1.0 / np.sqrt(in_dims), size=(hidden, in_dims))
        return cls(
            w1=w1,
            b1=np.zeros(hidden),
            w2=np.zeros((2 * channels, hidden)),
            b2=np.zeros(2 * channels),
            sigma=sigma,
            epsilon=epsilon,
        )

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self):
        return TlmParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                         self.sigma, self.epsilon)


@dataclass
class ModulationField:
    gamma_hw: np.ndarray  # (HW, C)
    beta_hw: np.ndarray  # (HW, C)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free


def silu(z):
    return z * _sigmoid(z)


def silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def prior_to_modulation(priors, params):
    """Return (Gamma, Beta), each (S, C), from the prior vectors."""
    gamma, beta, _, _ = _mlp(priors.vectors, params)
    return gamma, beta


def _mlp(vectors, params):
    if vectors.shape[1] != params.in_dims:
        raise DimensionMismatch(
            f"prior vectors have D={vectors.shape[1]}, params expect {params.in_dims}"
        )
    pre = vectors @ params.w1.T + params.b1
    hid = silu(pre)
    out = hid @ params.w2.T + params.b2
    c = params.channels
    return out[:, :c], out[:, c:], pre, hid


def gaussian_weight_matrix(positions, grid_h, grid_w, sigma, epsilon):
    """S x HW matrix of Gaussian interpolation weights, column k = h * W + w.

    Priors sit at ``(y * (H - 1), x * (W - 1))`` in grid-cell units. Each column
    is divided by the sum of unnormalized weights plus ``epsilon``.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise DimensionMismatch(f"positions must be (S, 2), got {positions.shape}")
    if positions.shape[0] == 0:
        raise EmptyPriors("cannot build weights from zero priors")
    if grid_h < 1 or grid_w < 1:
        raise DimensionMismatch(f"grid dims must be positive, got {grid_h}x{grid_w}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not epsilon >= 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")

    gy = positions[:, 0] * (grid_h - 1)
    gx = positions[:, 1] * (grid_w - 1)
    hh, ww = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                         np.arange(grid_w, dtype=np.float64), indexing="ij")
    hh, ww = hh.ravel(), ww.ravel()
    d2 = (hh[None, :] - gy[:, None]) ** 2 + (ww[None, :] - gx[:, None]) ** 2
    expo = -d2 / (2.0 * sigma * sigma)
    if epsilon == 0:
        # shift-invariant at eps == 0; keeps far columns from collapsing to 0/0
        raw = np.exp(expo - expo.max(axis=0, keepdims=True))
        return raw / raw.sum(axis=0, keepdims=True)
    raw = np.exp(expo)
    return raw / (raw.sum(axis=0, keepdims=True) + epsilon)


def aggregate_modulation(weights, gamma, beta):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or gamma.shape[0] != weights.shape[0] or beta.shape != gamma.shape:
        raise DimensionMismatch(
            f"weights {weights.shape}, gamma {gamma.shape}, beta {beta.shape} disagree on S"
        )
    return ModulationField(weights.T @ gamma, weights.T @ beta)


def modulate_tokens(grid, field):
    x = grid.tokens
    if field.gamma_hw.shape != x.shape or field.beta_hw.shape != x.shape:
        raise DimensionMismatch(
            f"modulation field {field.gamma_hw.shape} does not match tokens {x.shape}"
        )
    # pi is row-major, so field row k already lines up with token k
    return x * (1.0 + field.gamma_hw) + field.beta_hw


@dataclass
class ForwardTape:
    tokens: np.ndarray
    vectors: np.ndarray
    pre: np.ndarray
    hid: np.ndarray
    weights: np.ndarray
    gamma_hw: np.ndarray
    params: TlmParams


@dataclass
class TlmGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    tokens: np.ndarray
    vectors: np.ndarray

    def as_dict(self):
        return dict(self.__dict__)


def tlm_forward(grid, priors, params):
    if grid.channels != params.channels:
        raise DimensionMismatch(f"tokens have C={grid.channels}, params produce C={params.channels}")
    gamma, beta, pre, hid = _mlp(priors.vectors, params)
    weights = gaussian_weight_matrix(priors.positions, grid.grid_h, grid.grid_w,
                                     params.sigma, params.epsilon)
    field = aggregate_modulation(weights, gamma, beta)
    out = modulate_tokens(grid, field)
    tape = ForwardTape(grid.tokens, priors.vectors, pre, hid, weights, field.gamma_hw, params)
    return out, tape


def tlm_backward(tape, upstream_grad):
    """Gradients of ``sum(upstream_grad * output)`` w.r.t. MLP params, tokens, vectors."""
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != tape.tokens.shape:
        raise ShapeMismatch(f"upstream grad {g.shape} != output {tape.tokens.shape}")
    p = tape.params
    d_tokens = g * (1.0 + tape.gamma_hw)
    d_gamma = tape.weights @ (g * tape.tokens)  # (S, C)
    d_beta = tape.weights @ g
    d_out = np.concatenate([d_gamma, d_beta], axis=1)  # (S, 2C)
    d_w2 = d_out.T @ tape.hid
    d_b2 = d_out.sum(axis=0)
    d_pre = (d_out @ p.w2) * silu_grad(tape.pre)
    d_w1 = d_pre.T @ tape.vectors
    d_b1 = d_pre.sum(axis=0)
    d_vectors = d_pre @ p.w1
    return TlmGrads(d_w1, d_b1, d_w2, d_b2, d_tokens, d_vectors)
