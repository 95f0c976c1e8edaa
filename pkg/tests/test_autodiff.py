"""Tape mechanics and per-op gradient checks against central differences."""

import numpy as np
import pytest

from ranknce.autodiff import (
    NonFiniteError,
    Tape,
    add,
    add_const,
    backward,
    concat,
    conv2d,
    exp,
    fd_check,
    gather_pairs,
    gather_spatial,
    l2_normalize,
    log,
    matmul,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    softmax_ce,
    softplus,
    stack,
    sub,
    take,
    tanh,
    transpose,
    zero_diag,
)


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# forward values


def test_leaf_adopts_float64():
    tape = Tape()
    t = tape.leaf(np.array([1, 2, 3], dtype=np.int64))
    assert t.data.dtype == np.float64
    assert t.shape == (3,)


def test_elementwise_values():
    tape = Tape()
    a = tape.leaf(np.array([-1.0, 0.0, 2.0]))
    b = tape.leaf(np.array([3.0, -4.0, 0.5]))
    assert np.array_equal(add(a, b).data, [2.0, -4.0, 2.5])
    assert np.array_equal(sub(a, b).data, [-4.0, 4.0, 1.5])
    assert np.array_equal(mul(a, b).data, [-3.0, 0.0, 1.0])
    assert np.array_equal(relu(a).data, [0.0, 0.0, 2.0])
    assert np.array_equal(neg(a).data, [1.0, 0.0, -2.0])
    assert np.array_equal(scale(a, 2.0).data, [-2.0, 0.0, 4.0])
    assert np.array_equal(add_const(a, 1.0).data, [0.0, 1.0, 3.0])


def test_softplus_is_overflow_free():
    tape = Tape()
    t = tape.leaf(np.array([-1000.0, 0.0, 1000.0]))
    out = softplus(t).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(np.log(2.0), abs=1e-15)
    assert out[2] == 1000.0


def test_matmul_against_numpy():
    rng = rng_for(0)
    a_val = rng.normal(size=(4, 3))
    b_val = rng.normal(size=(3, 5))
    tape = Tape()
    out = matmul(tape.leaf(a_val), tape.leaf(b_val))
    assert np.allclose(out.data, a_val @ b_val, rtol=0, atol=0)


def test_zero_diag_structure():
    tape = Tape()
    m = tape.leaf(np.arange(9.0).reshape(3, 3) + 1.0)
    out = zero_diag(m).data
    assert np.array_equal(np.diag(out), [0.0, 0.0, 0.0])
    off = ~np.eye(3, dtype=bool)
    assert np.array_equal(out[off], m.data[off])


def test_l2_normalize_unit_rows():
    tape = Tape()
    v = tape.leaf(np.array([3.0, 4.0]))
    assert np.allclose(l2_normalize(v).data, [0.6, 0.8], atol=1e-15)
    # idempotence on an already-unit vector
    u = tape.leaf(np.array([0.6, 0.8]))
    assert np.allclose(l2_normalize(u).data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_rejects_near_zero_rows():
    tape = Tape()
    rows = tape.leaf(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError, match="1"):
        l2_normalize(rows)


def test_softmax_ce_matches_log_softmax():
    rng = rng_for(1)
    for _ in range(20):
        z = rng.normal(size=7) * 5.0
        tape = Tape()
        out = softmax_ce(tape.leaf(z), target=3)
        expected = np.log(np.exp(z).sum()) - z[3]
        assert out.data == pytest.approx(expected, rel=1e-14)


def test_softmax_ce_target_range():
    tape = Tape()
    z = tape.leaf(np.zeros(4))
    with pytest.raises(ValueError):
        softmax_ce(z, target=4)
    with pytest.raises(ValueError):
        softmax_ce(z, target=-1)


def test_gather_pairs_and_take():
    tape = Tape()
    m = tape.leaf(np.arange(12.0).reshape(3, 4))
    out = gather_pairs(m, [0, 1, 2], [3, 0, 2])
    assert np.array_equal(out.data, [3.0, 4.0, 10.0])
    v = tape.leaf(np.array([5.0, 6.0, 7.0]))
    assert take(v, 2).data == 7.0


def test_gather_spatial_flat_indexing():
    rng = rng_for(2)
    act = rng.normal(size=(3, 4, 5))
    tape = Tape()
    out = gather_spatial(tape.leaf(act), np.array([0, 7, 19]))
    flat = act.reshape(3, -1)
    assert np.array_equal(out.data, flat[:, [0, 7, 19]].T)


def test_nonfinite_forward_raises():
    tape = Tape()
    t = tape.leaf(np.array([1000.0]))
    with pytest.raises(NonFiniteError):
        exp(t)
    # log guards its domain eagerly instead of letting -inf surface
    z = tape.leaf(np.array([0.0]))
    with pytest.raises(ValueError, match="domain"):
        log(z)


def test_cross_tape_mixing_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf(np.ones(3))
    b = t2.leaf(np.ones(3))
    with pytest.raises(ValueError):
        add(a, b)


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_requires_scalar_root():
    tape = Tape()
    v = tape.leaf(np.ones(3))
    doubled = scale(v, 2.0)
    with pytest.raises(ValueError):
        backward(tape, doubled)


def test_backward_accumulates_over_fanout():
    tape = Tape()
    x = tape.leaf(np.array([2.0]))
    # x*x + x: d/dx = 2x + 1 = 5
    root = reduce_sum(add(mul(x, x), x))
    backward(tape, root)
    assert x.grad[0] == 5.0


def test_untouched_leaf_reads_zero_grad():
    tape = Tape()
    x = tape.leaf(np.ones(2))
    y = tape.leaf(np.ones(2))
    backward(tape, reduce_sum(x))
    assert np.array_equal(y.grad, np.zeros(2))


def test_backward_is_bit_deterministic():
    rng = rng_for(3)
    val = rng.normal(size=(6, 6))
    grads = []
    for _ in range(2):
        tape = Tape()
        m = tape.leaf(val.copy())
        root = reduce_mean(tanh(matmul(m, transpose(m))))
        backward(tape, root)
        grads.append(m.grad.copy())
    assert grads[0].tobytes() == grads[1].tobytes()


def test_backward_linearity_with_power_of_two_weights():
    # grad(0.5*f + 4*g) must equal 0.5*grad(f) + 4*grad(g) bit for bit.
    # Power-of-two scaling commutes with rounding and each term deposits a
    # single contribution on the leaf, so two-term accumulation commutes;
    # a leaf reused within one term would break exactness by one ulp.
    rng = rng_for(4)
    val = rng.normal(size=5)

    def f(leaf):
        return reduce_sum(tanh(leaf))

    def g(leaf):
        return reduce_mean(softplus(leaf))

    tape = Tape()
    x = tape.leaf(val.copy())
    backward(tape, add(scale(f(x), 0.5), scale(g(x), 4.0)))
    combined = x.grad.copy()

    tape = Tape()
    x = tape.leaf(val.copy())
    backward(tape, f(x))
    gf = x.grad.copy()
    tape = Tape()
    x = tape.leaf(val.copy())
    backward(tape, g(x))
    gg = x.grad.copy()
    assert np.array_equal(combined, 0.5 * gf + 4.0 * gg)


def test_gradient_survives_aliased_inputs():
    # same tensor fed to both matmul slots; numeric check catches
    # accumulation bugs that in-place writes would cause
    rng = rng_for(5)
    val = rng.normal(size=(3, 3))

    def f(leaf):
        return reduce_sum(matmul(leaf, leaf))

    assert fd_check(f, val) < 1e-8


# ---------------------------------------------------------------------------
# per-op finite differences

OP_CASES = {
    "add": lambda t, r: reduce_sum(add(t, scale(t, 2.0))),
    "sub": lambda t, r: reduce_sum(sub(scale(t, 3.0), t)),
    "mul": lambda t, r: reduce_sum(mul(t, add_const(t, 0.5))),
    "relu": lambda t, r: reduce_sum(relu(t)),
    "tanh": lambda t, r: reduce_sum(tanh(t)),
    "exp": lambda t, r: reduce_sum(exp(t)),
    "softplus": lambda t, r: reduce_sum(softplus(t)),
    "reduce_mean": lambda t, r: reduce_mean(t),
    "transpose": lambda t, r: reduce_sum(mul(transpose(t), transpose(t))),
    "reshape": lambda t, r: reduce_sum(exp(reshape(t, (t.data.size,)))),
    "take": lambda t, r: take(reshape(t, (t.data.size,)), 1),
    "softmax_ce": lambda t, r: softmax_ce(reshape(t, (t.data.size,)), target=2),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_central_differences(name):
    build = OP_CASES[name]
    for seed in range(10):
        rng = rng_for(seed)
        x = rng.normal(size=(3, 4)) * 0.8
        if name == "relu":
            # keep every coordinate away from the kink
            x = np.where(np.abs(x) < 1e-3, x + 0.1, x)
        if name == "log":
            x = np.abs(x) + 0.5
        err = fd_check(lambda t: build(t, rng), x)
        assert err < 1e-6, f"{name} seed {seed}: rel err {err:.2e}"


def test_log_gradient_on_positive_inputs():
    for seed in range(10):
        rng = rng_for(seed)
        x = np.abs(rng.normal(size=6)) + 0.5
        assert fd_check(lambda t: reduce_sum(log(t)), x) < 1e-6


def test_matmul_gradients_both_slots():
    rng = rng_for(7)
    a_val = rng.normal(size=(3, 4))
    b_val = rng.normal(size=(4, 2))

    def wrt_a(t):
        tape = t.tape
        b = tape.leaf(b_val)
        return reduce_sum(tanh(matmul(t, b)))

    def wrt_b(t):
        tape = t.tape
        a = tape.leaf(a_val)
        return reduce_sum(tanh(matmul(a, t)))

    assert fd_check(wrt_a, a_val) < 1e-6
    assert fd_check(wrt_b, b_val) < 1e-6


def test_stack_concat_gather_gradients():
    rng = rng_for(8)
    x = rng.normal(size=(2, 3))

    def via_stack(t):
        rows = [take(reshape(t, (6,)), i) for i in range(6)]
        return reduce_mean(tanh(stack(rows)))

    def via_concat(t):
        flat = reshape(t, (6,))
        return reduce_sum(softplus(concat([flat, scale(flat, 2.0)])))

    def via_pairs(t):
        return reduce_sum(exp(gather_pairs(t, [0, 1], [2, 0])))

    assert fd_check(via_stack, x) < 1e-6
    assert fd_check(via_concat, x) < 1e-6
    assert fd_check(via_pairs, x) < 1e-6


def test_zero_diag_gradient_skips_diagonal():
    tape = Tape()
    m = tape.leaf(np.ones((3, 3)))
    backward(tape, reduce_sum(zero_diag(m)))
    assert np.array_equal(m.grad, 1.0 - np.eye(3))


def test_l2_normalize_gradient():
    for seed in range(10):
        rng = rng_for(seed)
        v = rng.normal(size=8)
        v = v / np.linalg.norm(v) * (0.5 + rng.uniform())

        def f(t):
            return reduce_sum(mul(l2_normalize(t), t.tape.leaf(np.arange(8.0))))

        assert fd_check(f, v) < 1e-6


def test_conv2d_gradients_all_slots():
    rng = rng_for(9)
    x_val = rng.normal(size=(2, 5, 5))
    k_val = rng.normal(size=(3, 2, 3, 3)) * 0.5
    b_val = rng.normal(size=3)

    def wrt_x(t):
        tape = t.tape
        return reduce_sum(tanh(conv2d(t, tape.leaf(k_val), tape.leaf(b_val))))

    def wrt_k(t):
        tape = t.tape
        return reduce_sum(tanh(conv2d(tape.leaf(x_val), t, tape.leaf(b_val))))

    def wrt_b(t):
        tape = t.tape
        return reduce_sum(tanh(conv2d(tape.leaf(x_val), tape.leaf(k_val), t)))

    assert fd_check(wrt_x, x_val) < 1e-6
    assert fd_check(wrt_k, k_val) < 1e-6
    assert fd_check(wrt_b, b_val) < 1e-6


def test_gather_spatial_gradient():
    rng = rng_for(10)
    act = rng.normal(size=(2, 3, 3))
    locs = np.array([1, 4, 8])

    def f(t):
        return reduce_sum(tanh(gather_spatial(t, locs)))

    assert fd_check(f, act) < 1e-6


def test_fd_check_eps_bounds():
    with pytest.raises(ValueError):
        fd_check(lambda t: reduce_sum(t), np.ones(3), eps=1e-2)
    with pytest.raises(ValueError):
        fd_check(lambda t: reduce_sum(t), np.ones(3), eps=1e-8)
