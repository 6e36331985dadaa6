"""Backward-vs-central-difference checks for every op, plus grad_check itself.

The finite-difference comparison is the module's independent oracle: each
trial perturbs one input entry at a time and recomputes the forward pass.
Trials use fixed seeds, so the suite is deterministic; 100 random trials per
op at h = 1e-5 must stay under relative error 1e-4.
"""

import numpy as np
import pytest

from mvrd.diffcore import (
    ParameterError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy,
    dot,
    grad_check,
    kl_divergence,
    linear,
    make_parameter,
    matmul,
    mean,
    narrow,
    no_grad,
    relu,
    reshape,
    scale,
    softmax_temp,
    tensor_sum,
    transpose,
)

H = 1e-5
TOL = 1e-4
N_TRIALS = 100


def scalarize(out, seed=0):
    """Reduce an op output to a scalar with fixed random weights."""
    n = int(np.prod(out.shape)) if out.shape else 1
    w = np.random.default_rng(seed).normal(size=n)
    flat = reshape(out, (n,))
    return dot(flat, Tensor(w))


def assert_grads_match_fd(build, tensors, tol=TOL):
    for t in tensors:
        t.zero_grad()
    backward(build())
    for t in tensors:
        values = t.values.reshape(-1)
        grads = t.grad.reshape(-1)
        for i in range(values.size):
            saved = values[i]
            values[i] = saved + H
            with no_grad():
                f_plus = build().item()
            values[i] = saved - H
            with no_grad():
                f_minus = build().item()
            values[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * H)
            rel = abs(grads[i] - numeric) / max(abs(grads[i]), abs(numeric), 1e-8)
            assert rel < tol, f"entry {i}: analytic {grads[i]} vs fd {numeric}"


def trials(test_id):
    """100 deterministic rngs per op test."""
    base = abs(hash(test_id)) % (2**32)
    return [np.random.default_rng((base, k)) for k in range(N_TRIALS)]


def u(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def test_matmul_gradients():
    for rng in trials("matmul"):
        a = Tensor(u(rng, 3, 4), requires_grad=True)
        b = Tensor(u(rng, 4, 2), requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(matmul(a, b)), [a, b])


def test_matmul_batched_gradients():
    for rng in trials("matmul-batched")[:30]:
        a = Tensor(u(rng, 2, 3, 4), requires_grad=True)
        b = Tensor(u(rng, 4, 2), requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(matmul(a, b)), [a, b])


def test_linear_gradients():
    for rng in trials("linear"):
        x = Tensor(u(rng, 3, 4), requires_grad=True)
        w = Tensor(u(rng, 4, 3), requires_grad=True)
        b = Tensor(u(rng, 3), requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(linear(x, w, b)), [x, w, b])


def test_add_gradients():
    for rng in trials("add"):
        a = Tensor(u(rng, 2, 5), requires_grad=True)
        b = Tensor(u(rng, 2, 5), requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(add(a, b)), [a, b])


def test_scale_gradients():
    for rng in trials("scale"):
        x = Tensor(u(rng, 4, 3), requires_grad=True)
        c = float(rng.uniform(-3, 3))
        assert_grads_match_fd(lambda: scalarize(scale(x, c)), [x])


def test_relu_gradients():
    for rng in trials("relu"):
        # keep inputs away from the kink, where central differences are invalid
        raw = u(rng, 4, 4)
        raw = np.where(np.abs(raw) < 1e-3, raw + np.sign(raw + 0.5) * 1e-2, raw)
        x = Tensor(raw, requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(relu(x)), [x])


def test_transpose_gradients():
    for rng in trials("transpose"):
        x = Tensor(u(rng, 3, 5), requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(transpose(x)), [x])


def test_concat_gradients():
    for rng in trials("concat"):
        a = Tensor(u(rng, 2, 3), requires_grad=True)
        b = Tensor(u(rng, 2, 4), requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(concat([a, b], axis=-1)), [a, b])


def test_narrow_gradients():
    for rng in trials("narrow"):
        x = Tensor(u(rng, 3, 6), requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(narrow(x, -1, 1, 4)), [x])


def test_reshape_gradients():
    for rng in trials("reshape"):
        x = Tensor(u(rng, 2, 6), requires_grad=True)
        assert_grads_match_fd(lambda: scalarize(reshape(x, (3, 4))), [x])


def test_mean_gradients():
    for k, rng in enumerate(trials("mean")):
        x = Tensor(u(rng, 3, 4), requires_grad=True)
        axis = (None, 0, 1)[k % 3]
        assert_grads_match_fd(lambda: scalarize(mean(x, axis=axis)), [x])


def test_sum_gradients():
    for k, rng in enumerate(trials("sum")):
        x = Tensor(u(rng, 3, 4), requires_grad=True)
        axis = (None, 0, 1)[k % 3]
        assert_grads_match_fd(lambda: scalarize(tensor_sum(x, axis=axis)), [x])


def test_dot_gradients():
    for rng in trials("dot"):
        a = Tensor(u(rng, 6), requires_grad=True)
        b = Tensor(u(rng, 6), requires_grad=True)
        assert_grads_match_fd(lambda: dot(a, b), [a, b])


def test_softmax_temp_gradients():
    for rng in trials("softmax"):
        x = Tensor(u(rng, 5), requires_grad=True)
        tau = float(rng.uniform(0.3, 5.0))
        assert_grads_match_fd(lambda: scalarize(softmax_temp(x, tau)), [x])


def test_cross_entropy_gradients():
    for rng in trials("xent"):
        x = Tensor(u(rng, 4), requires_grad=True)
        y = int(rng.integers(0, 4))
        assert_grads_match_fd(lambda: cross_entropy(x, y), [x])


def test_kl_gradients_through_softmax():
    # KL inputs must stay on the simplex, so perturb pre-softmax logits
    for rng in trials("kl-q"):
        p = Tensor(u(rng, 4))  # teacher side: gradient-free
        q = Tensor(u(rng, 4), requires_grad=True)
        tau = float(rng.uniform(0.5, 4.0))
        assert_grads_match_fd(
            lambda: kl_divergence(softmax_temp(p, tau), softmax_temp(q, tau)), [q]
        )


def test_kl_gradient_flows_to_p_when_required():
    for rng in trials("kl-p"):
        p = Tensor(u(rng, 4), requires_grad=True)
        q = Tensor(u(rng, 4))
        assert_grads_match_fd(
            lambda: kl_divergence(softmax_temp(p, 1.0), softmax_temp(q, 1.0)), [p]
        )


# ---------------------------------------------------------------------------
# grad_check itself


def test_grad_check_quadratic_form():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 4))
    p = make_parameter("theta", (4, 1), "xavier_uniform", 3)

    def f():
        return reshape(matmul(matmul(transpose(p.tensor), Tensor(a)), p.tensor), ())

    report = grad_check(f, [p], h=1e-5, tol=1e-4)
    # central differences are exact for quadratics up to roundoff
    assert report.max_rel_error < 1e-8
    assert report.passed


def test_grad_check_constant_function():
    p = make_parameter("theta", (3, 1), "xavier_uniform", 8)

    def f():
        return mean(Tensor(np.array([2.0])))

    report = grad_check(f, [p], h=1e-5)
    assert report.max_rel_error == 0.0
    assert report.deterministic


def test_grad_check_flags_nondeterministic_f():
    p = make_parameter("theta", (2, 1), "xavier_uniform", 1)
    state = {"calls": 0}

    def f():
        state["calls"] += 1
        return mean(scale(p.tensor, float(state["calls"])))

    report = grad_check(f, [p], h=1e-5)
    assert not report.deterministic
    assert not report.passed


def test_grad_check_rejects_bad_step():
    p = make_parameter("theta", (2, 1), "xavier_uniform", 1)
    with pytest.raises(ParameterError):
        grad_check(lambda: mean(p.tensor), [p], h=1e-2)
    with pytest.raises(ParameterError):
        grad_check(lambda: mean(p.tensor), [p], h=1e-9)


def test_grad_check_restores_parameter_values():
    p = make_parameter("theta", (3, 2), "xavier_uniform", 4)
    before = p.tensor.values.copy()
    grad_check(lambda: mean(matmul(p.tensor, transpose(p.tensor))), [p])
    assert np.array_equal(p.tensor.values, before)
