import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geotlm import gradcheck
from geotlm.errors import DimensionMismatch, EmptyPriors, ShapeMismatch
from geotlm.tlm import (
    ModulationField,
    PriorBatch,
    TlmParams,
    TokenGrid,
    aggregate_modulation,
    gaussian_weight_matrix,
    modulate_tokens,
    prior_to_modulation,
    tlm_backward,
    tlm_forward,
)

from oracles import (
    gaussian_weights_oracle,
    matmul_t_oracle,
    mlp_scalar,
    tlm_forward_oracle,
)


def random_case(rng, h=2, w=2, c=3, s=2, d=5, hidden=6, sigma=1.0, epsilon=1e-6):
    inst = gradcheck.random_instance(rng, h, w, c, s, d, hidden, sigma, epsilon)
    return inst.grid, inst.priors, inst.params


# --- prior_to_modulation ----------------------------------------------------

def test_zero_output_layer_gives_zero_modulation():
    rng = np.random.default_rng(0)
    params = TlmParams.init(5, 3, hidden=7, rng=rng)
    g, b = prior_to_modulation(PriorBatch(rng.normal(size=(4, 5)), rng.uniform(size=(4, 2))), params)
    assert np.all(g == 0) and np.all(b == 0) and g.shape == (4, 3)


def test_zero_input_passes_b2():
    rng = np.random.default_rng(1)
    p = TlmParams(rng.normal(size=(6, 5)), np.zeros(6), rng.normal(size=(6, 6)), np.arange(6.0))
    g, b = prior_to_modulation(PriorBatch(np.zeros((2, 5)), np.zeros((2, 2))), p)
    assert g.tolist() == [[0, 1, 2]] * 2 and b.tolist() == [[3, 4, 5]] * 2


def test_mlp_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    d, hidden, c = 4, 2, 2
    p = TlmParams(rng.normal(size=(hidden, d)), rng.normal(size=hidden),
                  rng.normal(size=(2 * c, hidden)), rng.normal(size=2 * c))
    v = rng.normal(size=(1, d))
    g, b = prior_to_modulation(PriorBatch(v, [[0.5, 0.5]]), p)
    og, ob = mlp_scalar(v[0].tolist(), p.w1.tolist(), p.b1.tolist(), p.w2.tolist(), p.b2.tolist())
    np.testing.assert_allclose(g[0], og, rtol=0, atol=1e-13)
    np.testing.assert_allclose(b[0], ob, rtol=0, atol=1e-13)


def test_mlp_dimension_mismatch():
    p = TlmParams.init(5, 3, hidden=4)
    with pytest.raises(DimensionMismatch):
        prior_to_modulation(PriorBatch(np.zeros((1, 6)), [[0, 0]]), p)


# --- gaussian_weight_matrix -------------------------------------------------

def test_single_prior_columns():
    pos = [[0.3, 0.8]]
    w = gaussian_weight_matrix(pos, 4, 5, 1.0, 1e-12)
    raw = np.array(gaussian_weights_oracle(pos, 4, 5, 1.0, 0.0))  # all ones
    assert np.all(raw == 1.0)
    # w~/(w~ + eps) is within eps/w~ of one
    assert np.all(np.abs(w - 1) < 1e-6)
    assert np.all(gaussian_weight_matrix(pos, 4, 5, 1.0, 0.0) == 1.0)


def test_symmetric_priors_split_center_evenly():
    w = gaussian_weight_matrix([[0.0, 0.0], [1.0, 1.0]], 3, 3, 1.0, 0.0)
    center = 1 * 3 + 1
    assert w[0, center] == 0.5 and w[1, center] == 0.5


def test_three_priors_on_four_by_four_match_oracle():
    rng = np.random.default_rng(4)
    pos = rng.uniform(size=(3, 2))
    w = gaussian_weight_matrix(pos, 4, 4, 1.0, 1e-12)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, rtol=0, atol=1e-6)
    oracle = np.array(gaussian_weights_oracle(pos.tolist(), 4, 4, 1.0, 1e-12))
    np.testing.assert_allclose(w, oracle, rtol=0, atol=1e-10)


def test_column_index_is_row_major():
    w = gaussian_weight_matrix([[0.0, 1.0]], 2, 3, 0.3, 0.0)  # prior at (h=0, w=2)
    raw = gaussian_weight_matrix([[0.0, 1.0], [1.0, 0.0]], 2, 3, 0.3, 0.0)
    assert w.shape == (1, 6)
    assert raw[0].argmax() == 0 * 3 + 2 and raw[1].argmax() == 1 * 3 + 0


def test_empty_priors():
    with pytest.raises(EmptyPriors):
        gaussian_weight_matrix(np.zeros((0, 2)), 2, 2, 1.0, 1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 7), st.integers(1, 7), st.floats(0.2, 4.0),
       st.sampled_from([1e-12, 1e-6, 1e-3]), st.integers(0, 2**31 - 1))
def test_column_sum_identity_and_bound(s, h, w, sigma, eps, seed):
    pos = np.random.default_rng(seed).uniform(size=(s, 2))
    wts = gaussian_weight_matrix(pos, h, w, sigma, eps)
    assert np.all(wts >= 0)
    col = wts.sum(axis=0)
    assert np.all(col <= 1.0 + 1e-15)
    # exact identity: column sum = m / (m + eps), m the unnormalized mass
    raw = np.array(gaussian_weights_oracle(pos.tolist(), h, w, sigma, 0.0))
    mass = np.exp(-np.array([[((k // w) - y * (h - 1)) ** 2 + ((k % w) - x * (w - 1)) ** 2
                              for k in range(h * w)] for y, x in pos]) / (2 * sigma ** 2)).sum(axis=0)
    np.testing.assert_allclose(col, mass / (mass + eps), rtol=1e-12)
    assert raw.shape == wts.shape
    # at eps = 0 every column is a partition of unity to rounding
    np.testing.assert_allclose(gaussian_weight_matrix(pos, h, w, sigma, 0.0).sum(axis=0), 1.0,
                               rtol=0, atol=8 * s * np.finfo(float).eps)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_locality_single_prior_peaks_at_nearest_cell(h, w, seed):
    y, x = np.random.default_rng(seed).uniform(size=2)
    wts = gaussian_weight_matrix([[y, x]], h, w, 1.0, 1e-6)
    raw = np.exp(-(((np.arange(h)[:, None] - y * (h - 1)) ** 2)
                   + ((np.arange(w)[None, :] - x * (w - 1)) ** 2)) / 2.0)
    nearest = int(np.argmax(raw.ravel()))
    assert wts[0, nearest] == wts[0].max()


def test_translation_consistency():
    # shift priors by whole cells on a bigger grid whose extra cells lie beyond the shift
    pos_small = np.array([[0.25, 0.5], [0.75, 0.0]])  # on 5x5: cell units (1,2), (3,0)
    w_small = gaussian_weight_matrix(pos_small, 5, 5, 0.8, 0.0)
    # 9x9 grid, priors moved by (+2, +2) cells -> same relative geometry on the inner 5x5
    pos_big = (pos_small * 4 + 2) / 8
    w_big = gaussian_weight_matrix(pos_big, 9, 9, 0.8, 0.0)
    inner = [(h + 2) * 9 + (w + 2) for h in range(5) for w in range(5)]
    np.testing.assert_allclose(w_big[:, inner], w_small, rtol=1e-13, atol=0)


# --- aggregate_modulation / modulate_tokens --------------------------------

def test_constant_modulation_is_reproduced():
    w = gaussian_weight_matrix([[0.1, 0.2], [0.9, 0.4], [0.5, 0.5]], 3, 4, 1.0, 0.0)
    gam = np.tile([0.1, -0.2], (3, 1))
    f = aggregate_modulation(w, gam, gam)
    np.testing.assert_allclose(f.gamma_hw, np.tile([0.1, -0.2], (12, 1)), rtol=0, atol=1e-15)


def test_single_prior_is_rank_one():
    w = gaussian_weight_matrix([[0.2, 0.7]], 3, 3, 1.0, 1e-6)
    gam = np.array([[2.0, -1.0]])
    f = aggregate_modulation(w, gam, gam)
    np.testing.assert_array_equal(f.gamma_hw, w[0][:, None] * gam[0][None, :])


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(5)
    w, g, b = rng.uniform(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    f = aggregate_modulation(w, g, b)
    np.testing.assert_allclose(f.gamma_hw, matmul_t_oracle(w.tolist(), g.tolist()), atol=1e-14)
    np.testing.assert_allclose(f.beta_hw, matmul_t_oracle(w.tolist(), b.tolist()), atol=1e-14)


def test_aggregate_mismatch():
    with pytest.raises(DimensionMismatch):
        aggregate_modulation(np.ones((2, 4)), np.ones((3, 2)), np.ones((3, 2)))


def test_modulation_identity_and_annihilation():
    rng = np.random.default_rng(6)
    grid = TokenGrid(rng.normal(size=(6, 3)), 2, 3)
    before = grid.tokens.copy()
    out = modulate_tokens(grid, ModulationField(np.zeros((6, 3)), np.zeros((6, 3))))
    assert out.tobytes() == before.tobytes()
    b = rng.normal(size=3)
    out = modulate_tokens(grid, ModulationField(-np.ones((6, 3)), np.tile(b, (6, 1))))
    assert np.all(out == b)
    assert grid.tokens.tobytes() == before.tobytes()  # input untouched


def test_modulation_scalar_oracle():
    rng = np.random.default_rng(7)
    x, g, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out = modulate_tokens(TokenGrid(x, 2, 2), ModulationField(g, b))
    for hh in range(2):
        for ww in range(2):
            t = hh * 2 + ww
            for c in range(3):
                assert out[t, c] == pytest.approx(x[t, c] * (1 + g[t, c]) + b[t, c], abs=1e-15)


def test_modulation_mismatch():
    with pytest.raises(DimensionMismatch):
        modulate_tokens(TokenGrid(np.ones((4, 3)), 2, 2), ModulationField(np.ones((4, 2)), np.ones((4, 2))))


def test_token_grid_validation():
    with pytest.raises(DimensionMismatch):
        TokenGrid(np.ones((5, 3)), 2, 2)
    with pytest.raises(DimensionMismatch):
        TokenGrid(np.ones((4, 0)), 2, 2)
    g = TokenGrid.from_hwc(np.arange(24.0).reshape(2, 3, 4))
    assert g.pi(1, 2) == 5 and g.tokens[5].tolist() == [20, 21, 22, 23]


# --- tlm_forward -------------------------------------------------------------

def test_zero_init_is_identity():
    rng = np.random.default_rng(8)
    grid = TokenGrid(rng.normal(size=(16, 32)), 4, 4)
    params = TlmParams.init(64, 32, rng=rng)
    out, _ = tlm_forward(grid, PriorBatch(rng.normal(size=(9, 64)), rng.uniform(size=(9, 2))), params)
    assert out.tobytes() == grid.tokens.tobytes()


def test_single_center_prior_touches_every_position():
    rng = np.random.default_rng(9)
    grid, priors, params = random_case(rng, h=5, w=5, s=1)
    priors = PriorBatch(priors.vectors, [[0.5, 0.5]])
    out, _ = tlm_forward(grid, priors, params)
    assert np.all(np.any(out != grid.tokens, axis=1))


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(10)
    grid, priors, params = random_case(rng, h=3, w=2, c=3, s=3, d=4, hidden=5)
    out, _ = tlm_forward(grid, priors, params)
    ref = tlm_forward_oracle(grid.tokens.tolist(), 3, 2, priors.vectors.tolist(),
                             priors.positions.tolist(), params.w1.tolist(), params.b1.tolist(),
                             params.w2.tolist(), params.b2.tolist(), params.sigma, params.epsilon)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_prior_permutation_invariance(seed, s):
    rng = np.random.default_rng(seed)
    grid, priors, params = random_case(rng, h=3, w=3, s=s)
    out, _ = tlm_forward(grid, priors, params)
    out_p, _ = tlm_forward(grid, priors.permuted(rng.permutation(s)), params)
    np.testing.assert_allclose(out_p, out, rtol=0, atol=1e-12)


def test_channel_mismatch():
    rng = np.random.default_rng(11)
    grid, priors, _ = random_case(rng)
    with pytest.raises(DimensionMismatch):
        tlm_forward(grid, priors, TlmParams.init(5, 4, hidden=6))


# --- tlm_backward ------------------------------------------------------------

def test_zero_upstream_gives_zero_grads():
    grid, priors, params = random_case(np.random.default_rng(12))
    _, tape = tlm_forward(grid, priors, params)
    for g in tlm_backward(tape, np.zeros_like(grid.tokens)).as_dict().values():
        assert np.all(g == 0)


def test_identity_path_gradient():
    rng = np.random.default_rng(13)
    grid, priors, params = random_case(rng)
    params = TlmParams(params.w1, params.b1, np.zeros_like(params.w2), np.zeros_like(params.b2))
    _, tape = tlm_forward(grid, priors, params)
    up = rng.normal(size=grid.tokens.shape)
    assert tlm_backward(tape, up).tokens.tobytes() == up.tobytes()


def test_backward_shape_mismatch():
    grid, priors, params = random_case(np.random.default_rng(14))
    _, tape = tlm_forward(grid, priors, params)
    with pytest.raises(ShapeMismatch):
        tlm_backward(tape, np.zeros((3, 3)))


def test_finite_differences_on_reference_instance():
    errs = gradcheck.check_instance(gradcheck.random_instance(np.random.default_rng(15)))
    assert set(errs) == {"w1", "b1", "w2", "b2", "tokens", "vectors"}
    assert max(errs.values()) < 1e-4, errs


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_finite_differences_random_shapes(seed, h, w, s):
    inst = gradcheck.random_instance(np.random.default_rng(seed), h, w, 2, s, 3, 4)
    assert max(gradcheck.check_instance(inst).values()) < 1e-4
