import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genomic_interpreter import autodiff as ad
from genomic_interpreter.attention import dense_attention_oracle
from genomic_interpreter.autodiff import Rng, Tape, Tensor, grad_check
from genomic_interpreter.errors import ConfigError, ContractError
from genomic_interpreter.swin import (
    Swin1dConfig, block_madds, init_swin, shifted_pass, swin1d_forward, token_merge,
)


def perturb_pattern(f, x, eps=1e-3):
    """dep[i, j] is True when output token i moves after nudging input token j.

    The nudge is a random direction: a constant shift of a token would vanish
    under layer norm.
    """
    base = f(x)
    direction = np.random.default_rng(0).normal(size=x.shape[1:])
    dep = np.zeros((base.shape[0], x.shape[0]), dtype=bool)
    for j in range(x.shape[0]):
        xp = x.copy()
        xp[j] += eps * direction
        dep[:, j] = (f(xp) != base).any(axis=1)
    return dep


def noisy_block(d, c, seed):
    rng = np.random.default_rng(seed)
    p = init_swin(d, c, Rng(seed))
    for t in list(p.mha1.named().values()) + list(p.mha2.named().values()):
        t.data[...] = t.data + 0.2 * rng.normal(size=t.shape)
    return p


def test_config_defaults_and_bounds():
    assert Swin1dConfig(8).shift == 4
    assert Swin1dConfig(5).shift == 2
    with pytest.raises(ConfigError):
        Swin1dConfig(4, shift=4)
    with pytest.raises(ConfigError):
        Swin1dConfig(4, shift=-1)


def test_alpha_must_give_integer_width():
    with pytest.raises(ConfigError):
        Swin1dConfig(4, alpha=3).out_width(4)
    assert Swin1dConfig(4, alpha=0.5).out_width(4) == 16


@pytest.mark.parametrize("d, alpha, out", [(4, 1, (8, 8)), (8, 2, (8, 8))])
def test_block_halves_tokens(d, alpha, out, rng):
    c = Swin1dConfig(4, alpha=alpha)
    y, _ = swin1d_forward(Tensor(rng.normal(size=(16, d))), init_swin(d, c, Rng(0)), c)
    assert y.shape == out


def test_odd_token_count_drops_last(rng):
    c = Swin1dConfig(4)
    p = noisy_block(4, c, 1)
    x = rng.normal(size=(9, 4))
    y, _ = swin1d_forward(Tensor(x), p, c)
    assert y.shape == (4, 8)
    # the dropped token still takes part in attention, so compare through the pipeline
    h, _ = shifted_pass(Tensor(x[None]), p.mha1, 4, 0)
    h, _ = shifted_pass(h, p.mha2, 4, 2)
    expected = token_merge(ad.getitem(h, (0, slice(0, 8))), p.merge_w, p.merge_b)
    np.testing.assert_array_equal(y.data, expected.data)


def test_too_few_tokens():
    c = Swin1dConfig(1, shift=0)
    with pytest.raises(ContractError):
        swin1d_forward(Tensor(np.ones((1, 4))), init_swin(4, c, Rng(0)), c)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 12).map(lambda h: 2 * h),
    st.sampled_from([2, 4, 6]),
    st.sampled_from([1, 2, 0.5]),
    st.integers(1, 8),
    st.sampled_from([1, 2]),
)
def test_shape_contract(n, d, alpha, k, heads):
    c = Swin1dConfig(k, alpha=alpha, heads=heads)
    x = np.random.default_rng(n + d).normal(size=(n, d))
    y, _ = swin1d_forward(Tensor(x), init_swin(d, c, Rng(n)), c)
    assert y.shape == (n // 2, int(2 * d / alpha))


def test_token_merge_identity_is_concatenation(rng):
    x = rng.normal(size=(6, 3))
    y = token_merge(Tensor(x), Tensor(np.eye(6)), Tensor(np.zeros(6)))
    np.testing.assert_array_equal(y.data, x.reshape(3, 6))


def test_token_merge_two_tokens():
    y = token_merge(Tensor(np.ones((2, 3))), Tensor(np.ones((6, 5))), Tensor(np.zeros(5)))
    assert y.shape == (1, 5)


def test_token_merge_madds_and_grad(rng):
    w, b = rng.normal(size=(8, 8)), rng.normal(size=8)
    with Tape() as tape:
        token_merge(Tensor(np.zeros((6, 4))), Tensor(w), Tensor(b))
    assert tape.madd_counter == 3 * 8 * 8
    probe = Tensor(rng.normal(size=(3, 8)))
    err = grad_check(lambda x, w_, b_: ad.tsum(token_merge(x, w_, b_) * probe), [rng.normal(size=(6, 4)), w, b])
    assert err < 1e-6


def test_token_merge_odd_rejected():
    with pytest.raises(ContractError):
        token_merge(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 4))), Tensor(np.zeros(4)))


def test_dense_window_equals_oracle_composition(rng):
    for n in (4, 6, 8):
        c = Swin1dConfig(n, shift=0)
        p = noisy_block(4, c, n)
        x = rng.normal(size=(n, 4))
        y, _ = swin1d_forward(Tensor(x), p, c)
        h = dense_attention_oracle(dense_attention_oracle(x, p.mha1), p.mha2)
        expected = h.reshape(n // 2, 8) @ p.merge_w.data + p.merge_b.data
        np.testing.assert_allclose(y.data, expected, rtol=0, atol=1e-10)


def test_shifted_pass_without_shift_is_dense_for_full_window(rng):
    c = Swin1dConfig(5, shift=0)
    p = noisy_block(4, c, 9)
    x = rng.normal(size=(5, 4))
    y, _ = shifted_pass(Tensor(x[None]), p.mha1, 5, 0)
    np.testing.assert_allclose(y.data[0], dense_attention_oracle(x, p.mha1), rtol=0, atol=1e-10)


def test_shifted_pass_keeps_token_order(rng):
    # a pure-residual sublayer must return tokens in their original positions
    c = Swin1dConfig(4, shift=3)
    p = noisy_block(4, c, 2)
    p.mha2.wo.data[...] = 0
    p.mha2.ff_out.data[...] = 0
    p.mha2.ff_out_bias.data[...] = 0
    x = rng.normal(size=(1, 8, 4))
    y, _ = shifted_pass(Tensor(x), p.mha2, 4, 3)
    np.testing.assert_array_equal(y.data, x)


def test_cross_window_dependence_with_shift():
    c = Swin1dConfig(4, shift=2)
    p = noisy_block(4, c, 3)
    x = np.random.default_rng(3).normal(size=(8, 4))
    dep = perturb_pattern(lambda z: swin1d_forward(Tensor(z), p, c)[0].data, x)
    np.testing.assert_array_equal(dep, np.ones((4, 8), dtype=bool))


def test_no_cross_window_dependence_without_shift():
    c = Swin1dConfig(4, shift=0)
    p = noisy_block(4, c, 4)
    x = np.random.default_rng(4).normal(size=(8, 4))
    dep = perturb_pattern(lambda z: swin1d_forward(Tensor(z), p, c)[0].data, x)
    expected = np.zeros((4, 8), dtype=bool)
    expected[:2, :4] = True
    expected[2:, 4:] = True
    np.testing.assert_array_equal(dep, expected)


def test_shifted_pass_receptive_field():
    # after the plain pass and the shifted pass, token i sees its own window and
    # the shifted window containing it
    c = Swin1dConfig(4, shift=2)
    p = noisy_block(4, c, 5)
    x = np.random.default_rng(5).normal(size=(8, 4))

    def two_passes(z):
        h, _ = shifted_pass(Tensor(z[None]), p.mha1, 4, 0)
        return shifted_pass(h, p.mha2, 4, 2)[0].data[0]

    dep = perturb_pattern(two_passes, x)
    plain = np.kron(np.eye(2, dtype=bool), np.ones((4, 4), dtype=bool))
    rolled = np.roll(np.roll(plain, -2, axis=0), -2, axis=1)  # windows {2..5} and {6,7,0,1}
    expected = (rolled.astype(int) @ plain.astype(int)) > 0
    np.testing.assert_array_equal(dep, expected)


def test_block_gradients(rng):
    c = Swin1dConfig(4, shift=2)
    p = noisy_block(4, c, 6)
    probe = Tensor(rng.normal(size=(3, 8)))

    def loss(x, merge_w, table):
        p.merge_w, p.mha2.rel_bias = merge_w, table
        return ad.tsum(swin1d_forward(x, p, c)[0] * probe)

    err = grad_check(loss, [rng.normal(size=(6, 4)), p.merge_w.data.copy(), p.mha2.rel_bias.data.copy()])
    assert err < 1e-4


@pytest.mark.parametrize("n, d, k, alpha, ff", [(8, 4, 4, 1, True), (13, 4, 3, 2, False), (16, 6, 16, 1, True), (10, 2, 1, 1, True)])
def test_block_madds_match_tape(n, d, k, alpha, ff):
    c = Swin1dConfig(k, alpha=alpha, ff=ff, heads=2)
    with Tape() as tape:
        swin1d_forward(Tensor(np.zeros((2, n, d))), init_swin(d, c, Rng(0)), c)
    expected = block_madds(n, d, c, batch=2)
    assert dict(tape.madds) == {k_: v for k_, v in expected.items() if v}
    assert tape.madd_counter == sum(expected.values())


def test_block_madds_formula_by_hand():
    # n=10, d=2, k=4: windows [4, 4, 2], sum L^2 = 36
    got = block_madds(10, 2, Swin1dConfig(4))
    assert got["proj"] == 2 * 4 * 10 * 4
    assert got["score"] == got["mix"] == 2 * 2 * 36
    assert got["ffn"] == 2 * 4 * 10 * 4
    assert got["merge"] == 5 * 4 * 4


def test_capture_records_both_slots(rng):
    c = Swin1dConfig(4)
    _, recs = swin1d_forward(Tensor(rng.normal(size=(10, 4))), init_swin(4, c, Rng(0)), c, capture=True, layer=3)
    assert [(r.slot, r.window, r.length) for r in recs] == [
        (1, 0, 4), (1, 1, 4), (1, 2, 2), (2, 0, 4), (2, 1, 4), (2, 2, 2)
    ]
    assert all(r.layer == 3 for r in recs)
