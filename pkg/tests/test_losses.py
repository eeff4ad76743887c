import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from standseg.autodiff import Tensor, softmax_channels
from standseg.autodiff.gradcheck import check_gradients
from standseg.errors import ConfigError, InputError
from standseg.losses import (
    LossParams,
    focal_tversky_from_counts,
    focal_tversky_loss,
    soft_class_counts,
    tversky_index,
)


def one_hot(labels, n):
    return (labels[:, None] == np.arange(n)[None, :, None, None]).astype(np.uint8)


def random_case(rng, n=2, c=5, s=4):
    labels = rng.integers(0, c, (n, s, s))
    logits = rng.standard_normal((n, c, s, s)) * 2
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    return p, one_hot(labels, c)


def test_params():
    p = LossParams(0.3, 1.3)
    assert p.beta == 1 - 0.3
    with pytest.raises(ConfigError):
        LossParams(0.5, 0.9).validate()


def test_counts_perfect(rng):
    _, mask = random_case(rng)
    tp, fp, fn = soft_class_counts(mask.astype(np.float64), mask).data
    assert not fp.any() and not fn.any()
    np.testing.assert_array_equal(tp, mask.sum(axis=(0, 2, 3)))


def test_counts_uniform(rng):
    _, mask = random_case(rng)
    tp = soft_class_counts(np.full(mask.shape, 0.2), mask).data[0]
    np.testing.assert_allclose(tp, mask.sum(axis=(0, 2, 3)) / 5)


def test_counts_loop_oracle(rng):
    p, mask = random_case(rng, n=2, c=3, s=3)
    got = soft_class_counts(p, mask).data
    for i in range(3):
        tp = fp = fn = 0.0
        for b in range(2):
            for r in range(3):
                for c in range(3):
                    pi, mi = p[b, i, r, c], mask[b, i, r, c]
                    tp += pi * mi
                    fp += pi * (1 - mi)
                    fn += (1 - pi) * mi
        np.testing.assert_allclose(got[:, i], [tp, fp, fn], rtol=1e-12, atol=1e-12)


def test_counts_reject_non_one_hot(rng):
    p, mask = random_case(rng)
    bad = mask.copy()
    bad[0, :, 0, 0] = 0
    with pytest.raises(InputError):
        soft_class_counts(p, bad)


def test_tversky_examples():
    assert tversky_index(3.0, 0.0, 0.0, LossParams()) == 1.0
    assert tversky_index(2.0, 1.0, 1.0, LossParams(0.5)) == pytest.approx(2 / 3)


@settings(max_examples=200)
@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(0, 1e6))
def test_tversky_half_is_dice(tp, fp, fn):
    if tp + fp + fn == 0:
        return
    ti = tversky_index(tp, fp, fn, LossParams(0.5))
    assert ti == pytest.approx(2 * tp / (2 * tp + fp + fn), rel=1e-12, abs=1e-12)


def test_focal_example():
    # one class, TI = 0.75: tp=3, fp=2, fn=0 at alpha 0.5 gives 3 / (3 + 1)
    counts = np.array([[3.0], [2.0], [0.0]])
    loss = focal_tversky_from_counts(counts, LossParams(0.5, 2.0), smooth=0.0)
    assert float(loss.data) == pytest.approx(0.5, abs=1e-15)


def test_perfect_prediction_loss(rng):
    _, mask = random_case(rng)
    for gamma in (1.0, 1.3, 3.0):
        assert float(focal_tversky_loss(mask.astype(np.float64), mask, LossParams(0.5, gamma)).data) <= 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.3, 0.7), st.floats(1.0, 3.0))
def test_loss_in_unit_interval(seed, alpha, gamma):
    p, mask = random_case(np.random.default_rng(seed))
    v = float(focal_tversky_loss(p, mask, LossParams(alpha, gamma)).data)
    assert 0.0 <= v <= 1.0


def test_gamma_one_is_mean_complement(rng):
    p, mask = random_case(rng)
    params = LossParams(0.4, 1.0)
    tp, fp, fn = soft_class_counts(p, mask).data
    ti = (tp + 1e-6) / (tp + 0.4 * fp + 0.6 * fn + 1e-6)
    assert float(focal_tversky_loss(p, mask, params).data) == pytest.approx(np.mean(1 - ti), abs=1e-12)


@pytest.mark.parametrize("gamma", [1.0, 1.3, 3.0])
@pytest.mark.parametrize("case", range(20))
def test_loss_gradients_wrt_probabilities(gamma, case):
    rng = np.random.default_rng(case)
    p, mask = random_case(rng, n=1, c=3, s=3)
    x = Tensor(p, requires_grad=True)
    alpha = float(rng.uniform(0.3, 0.7))
    errs = check_gradients(lambda: focal_tversky_loss(x, mask, LossParams(alpha, gamma)), [x])
    assert errs[0] <= 1e-4


@pytest.mark.parametrize("case", range(10))
def test_loss_gradients_through_softmax(case):
    rng = np.random.default_rng(50 + case)
    labels = rng.integers(0, 4, (2, 3, 3))
    mask = one_hot(labels, 4)
    z = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
    params = LossParams(float(rng.uniform(0.3, 0.7)), float(rng.uniform(1, 3)))
    assert check_gradients(lambda: focal_tversky_loss(softmax_channels(z), mask, params), [z])[0] <= 1e-4


def test_perfect_class_gradient_finite(rng):
    _, mask = random_case(rng)
    x = Tensor(mask.astype(np.float64), requires_grad=True)
    focal_tversky_loss(x, mask, LossParams(0.5, 3.0)).backward()
    assert np.all(np.isfinite(x.grad))
