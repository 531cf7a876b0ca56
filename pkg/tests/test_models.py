import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from fedsim.models import (
    Batch,
    ModelParams,
    grad,
    grad_check,
    init_params,
    load_checkpoint,
    loss,
    perplexity,
    save_checkpoint,
    sgd_epoch,
    sgd_epoch_with_loss,
)


def reference_loss(params, batch):
    """Mean NLL written from scratch, independent of the package forward pass."""
    V, d = params.vocab_size, params.dim
    flat = params.values
    if params.kind == "logistic":
        W = flat[: (V + 1) * V].reshape(V + 1, V)
        b = flat[(V + 1) * V:]
        logits = W[batch.context] + b
    else:
        E = flat[: (V + 1) * d].reshape(V + 1, d)
        O = flat[(V + 1) * d: (V + 1) * d + d * V].reshape(d, V)
        b = flat[(V + 1) * d + d * V:]
        logits = E[batch.context] @ O + b
    lse = logsumexp(logits, axis=1)
    return float(np.mean(lse - logits[np.arange(len(batch)), batch.target]))


def central_differences(params, batch, eps=1e-5):
    out = np.empty(params.size)
    for i in range(params.size):
        plus, minus = params.values.copy(), params.values.copy()
        plus[i] += eps
        minus[i] -= eps
        out[i] = (reference_loss(params.replace(plus), batch) - reference_loss(params.replace(minus), batch)) / (2 * eps)
    return out


def random_case(kind, seed, V=5, d=3, pairs=12):
    rng = np.random.default_rng(seed)
    params = init_params(kind, V, d, seed)
    params = params.replace(params.values + rng.normal(0, 0.5, params.size))
    batch = Batch(rng.integers(0, V + 1, pairs), rng.integers(0, V, pairs))
    return params, batch


def zeros(kind, V, d=2):
    p = init_params(kind, V, d, 0)
    return p.replace(np.zeros(p.size))


def test_init_deterministic():
    assert init_params("bigram", 7, 3, 5) == init_params("bigram", 7, 3, 5)
    assert init_params("bigram", 7, 3, 5) != init_params("bigram", 7, 3, 6)


def test_init_bias_zero_and_layout_sizes():
    V, d = 7, 3
    p = init_params("bigram", V, d, 0)
    assert p.size == (V + 1) * d + d * V + V
    assert np.all(p.views()["bias"] == 0)
    assert init_params("logistic", V, 1, 0).size == (V + 1) * V + V


def test_init_rejects_zero_dim():
    with pytest.raises(ValueError):
        init_params("bigram", 5, 0, 0)


def test_unknown_kind():
    with pytest.raises(ValueError):
        init_params("transformer", 5, 2, 0)


def test_batch_from_utterances_prepends_bos():
    b = Batch.from_utterances([(1, 2, 3), (0,)], vocab_size=4)
    assert b.context.tolist() == [4, 1, 2, 4]
    assert b.target.tolist() == [1, 2, 3, 0]


@pytest.mark.parametrize("kind", ["logistic", "bigram"])
def test_zero_params_loss_is_ln_v(kind):
    b = Batch.from_utterances([(0, 1, 2, 3), (3, 3)], 4)
    assert loss(zeros(kind, 4), b) == pytest.approx(math.log(4), abs=1e-15)


@pytest.mark.parametrize("kind", ["logistic", "bigram"])
def test_loss_matches_reference(kind):
    params, batch = random_case(kind, 3)
    assert loss(params, batch) == pytest.approx(reference_loss(params, batch), rel=1e-12)


@pytest.mark.parametrize("kind", ["logistic", "bigram"])
def test_duplicated_batch_invariance(kind):
    params, batch = random_case(kind, 4)
    assert loss(params, batch.repeat(2)) == pytest.approx(loss(params, batch), rel=1e-14)
    np.testing.assert_allclose(grad(params, batch.repeat(2)), grad(params, batch), rtol=1e-12, atol=1e-15)


def test_non_finite_params_rejected():
    p = zeros("logistic", 4)
    bad = p.values.copy()
    bad[0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        loss(p.replace(bad), Batch.from_utterances([(1,)], 4))


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        loss(zeros("logistic", 4), [])


@pytest.mark.parametrize("kind", ["logistic", "bigram"])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(kind, seed):
    params, batch = random_case(kind, seed)
    analytic = grad(params, batch)
    numeric = central_differences(params, batch)
    floor = max(1e-3 * np.abs(analytic).max(), 1e-8)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    assert rel.max() < 1e-4


def test_gd_converges_on_two_example_toy():
    # both pairs share the BOS context, so the optimum is p = (1/2, 1/2), loss ln 2
    batch = Batch.from_utterances([(0,), (1,)], 2)
    p = init_params("logistic", 2, 1, 0)
    p = p.replace(p.values + np.array([0.3, -0.2, 0.1, 0.4, 0.5, -0.1, 0.2, 0.0]))
    for _ in range(2000):
        p = p.replace(p.values - 1.0 * grad(p, batch))
    assert np.linalg.norm(grad(p, batch)) < 1e-6
    assert loss(p, batch) == pytest.approx(math.log(2), abs=1e-10)


@pytest.mark.parametrize("kind", ["logistic", "bigram"])
def test_single_full_batch_epoch_is_one_gd_step(kind):
    params, batch = random_case(kind, 8)
    after = sgd_epoch(params, batch, 0.3, batch_size=len(batch), rng=np.random.default_rng(1))
    assert np.array_equal(after.values, params.values - 0.3 * grad(params, batch))


def test_zero_lr_leaves_params_unchanged():
    params, batch = random_case("bigram", 2)
    before = params.values.copy()
    after = sgd_epoch(params, batch, 0.0, 4, np.random.default_rng(0))
    assert np.array_equal(after.values, before)
    assert np.array_equal(params.values, before)


def test_sgd_deterministic_per_seed():
    params, batch = random_case("bigram", 6, pairs=40)
    a = sgd_epoch(params, batch, 0.1, 7, np.random.default_rng(3))
    b = sgd_epoch(params, batch, 0.1, 7, np.random.default_rng(3))
    c = sgd_epoch(params, batch, 0.1, 7, np.random.default_rng(4))
    assert a == b and a != c


def test_sgd_rejects_bad_arguments():
    params, batch = random_case("logistic", 0)
    with pytest.raises(ValueError):
        sgd_epoch(params, [], 0.1, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sgd_epoch(params, batch, -0.1, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sgd_epoch(params, batch, 0.1, 0, np.random.default_rng(0))


def test_sgd_reports_mean_minibatch_loss():
    params, batch = random_case("logistic", 1, pairs=8)
    _, value = sgd_epoch_with_loss(params, batch, 0.0, 8, np.random.default_rng(0))
    assert value == pytest.approx(loss(params, batch), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), batch_size=st.integers(1, 30))
def test_logistic_small_lr_does_not_increase_loss(seed, batch_size):
    params, batch = random_case("logistic", seed, pairs=30)
    after = sgd_epoch(params, batch, 1e-2, batch_size, np.random.default_rng(seed))
    assert loss(after, batch) <= loss(params, batch) + 1e-6


@pytest.mark.parametrize("kind", ["logistic", "bigram"])
def test_uniform_perplexity_is_vocab_size(kind):
    utts = [(0, 1, 2), (3,), (2, 2, 1, 0)]
    assert perplexity(zeros(kind, 4), utts) == pytest.approx(4.0, abs=1e-9)


def test_confident_predictor_perplexity_near_one():
    V = 4
    p = zeros("logistic", V)
    p.views()["weight"][V, 2] = 50.0  # BOS -> token 2 with logit 50
    expected = 1.0 + (V - 1) * math.exp(-50.0)
    value = perplexity(p, [(2,)])
    assert value == pytest.approx(expected, abs=1e-15)
    assert abs(value - 1.0) < 1e-6


def test_perplexity_pools_tokens():
    params, _ = random_case("bigram", 9)
    utts = [(0, 1, 2, 3), (4,)]
    from fedsim.models import total_nll

    nll_a, n_a = total_nll(params, [utts[0]])
    nll_b, n_b = total_nll(params, [utts[1]])
    assert perplexity(params, utts) == pytest.approx(math.exp((nll_a + nll_b) / (n_a + n_b)), rel=1e-13)


def test_perplexity_empty_errors():
    with pytest.raises(ValueError):
        perplexity(zeros("bigram", 4), [])


@settings(max_examples=25, deadline=None)
@given(perm_seed=st.integers(0, 1000))
def test_perplexity_order_invariant(perm_seed):
    params, _ = random_case("bigram", 1)
    utts = [(0, 1), (2, 3, 4), (1,), (4, 4, 0), (3, 2)]
    order = np.random.default_rng(perm_seed).permutation(len(utts))
    # pooled sums are order dependent in the last bits; compare with a tight relative bound
    assert perplexity(params, [utts[i] for i in order]) == pytest.approx(perplexity(params, utts), rel=1e-14)


@pytest.mark.parametrize("kind", ["logistic", "bigram"])
def test_grad_check_small_on_random_init(kind):
    params = init_params(kind, 6, 3, 2)
    batch = Batch.from_utterances([(0, 1, 2), (5, 4), (3, 3, 3)], 6)
    assert grad_check(params, batch) < 1e-4


def test_grad_check_subsample_deterministic():
    params = init_params("logistic", 100, 1, 0)  # 10,200 params > 10^4
    batch = Batch.from_utterances([(1, 2, 3), (99, 98)], 100)
    assert grad_check(params, batch, seed=4) == grad_check(params, batch, seed=4)


def test_grad_check_errors():
    params = init_params("logistic", 4, 1, 0)
    batch = Batch.from_utterances([(1,)], 4)
    with pytest.raises(ValueError):
        grad_check(params, batch, epsilon=0)
    with pytest.raises(ValueError):
        grad_check(ModelParams("logistic", 4, 1, np.array([])), batch)


@pytest.mark.parametrize("kind", ["logistic", "bigram"])
def test_checkpoint_round_trip(tmp_path, kind):
    params, _ = random_case(kind, 5)
    save_checkpoint(params, tmp_path / "m.ckpt")
    assert load_checkpoint(tmp_path / "m.ckpt") == params


def test_checkpoint_rejects_truncated(tmp_path):
    params, _ = random_case("bigram", 5)
    save_checkpoint(params, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="expected"):
        load_checkpoint(tmp_path / "m.ckpt")
