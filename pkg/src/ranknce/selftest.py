"""Built-in oracle suite.

Every check validates an implementation against an independent
recomputation (naive loops, sort-then-truncate, central differences,
closed forms) rather than against saved outputs of the implementation
itself. `run_selftest` prints one `module.invariant: pass|FAIL` line per
check; the CLI `selftest` verb is a thin wrapper. The check functions are
importable so the test suite can rerun them at heavier seed counts.
"""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
import time

import numpy as np

from . import kernels
from .autodiff import (
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
from .features import LayerFeatures, sample_locations
from .losses import (
    ObjectiveWeights,
    gan_loss_d,
    gan_loss_g,
    multilayer_rank_nce,
    patch_nce,
    rank_nce,
    total_objective,
)
from .mi import (
    contribution_ranking_check,
    infonce_bound,
    multisample_bound,
)
from .negatives import prune, rank_topk, select_negatives, similarity_matrix
from .serialization import load_tensors, save_tensors

__all__ = ["CHECKS", "run_selftest"]


def _rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _feature_pair(rng, s=8, c=6, normalize=True):
    fake = rng.normal(size=(s, c))
    real = rng.normal(size=(s, c))
    if normalize:
        fake /= np.linalg.norm(fake, axis=1, keepdims=True)
        real /= np.linalg.norm(real, axis=1, keepdims=True)
    return fake, real


# ---------------------------------------------------------------------------
# autodiff


def check_autodiff_gradients(seeds=5, tol=1e-6):
    """Central-difference agreement for every registered op."""
    cases = {
        "add": lambda t: reduce_sum(add(t, scale(t, 0.5))),
        "add_bias": lambda t: reduce_sum(add(reshape(t, (3, 4)), t.tape.leaf(np.arange(4.0)))),
        "sub": lambda t: reduce_sum(sub(t, scale(t, 2.0))),
        "mul": lambda t: reduce_sum(mul(t, add_const(t, 1.5))),
        "scale": lambda t: reduce_sum(scale(t, -2.5)),
        "add_const": lambda t: reduce_sum(add_const(t, 3.0)),
        "neg": lambda t: reduce_sum(neg(t)),
        "relu": lambda t: reduce_sum(relu(t)),
        "tanh": lambda t: reduce_sum(tanh(t)),
        "log": lambda t: reduce_sum(log(exp(t))),
        "exp": lambda t: reduce_sum(exp(t)),
        "softplus": lambda t: reduce_sum(softplus(t)),
        "matmul": lambda t: reduce_sum(matmul(reshape(t, (3, 4)), transpose(reshape(t, (3, 4))))),
        "transpose": lambda t: reduce_sum(transpose(reshape(t, (3, 4)))),
        "reshape": lambda t: reduce_sum(reshape(t, (4, 3))),
        "reduce_mean": lambda t: reduce_mean(t),
        "reduce_sum": lambda t: reduce_sum(t),
        "take": lambda t: take(reshape(t, (12,)), 5),
        "gather_pairs": lambda t: reduce_sum(
            gather_pairs(reshape(t, (3, 4)), [0, 1, 2], [3, 0, 2])
        ),
        "zero_diag": lambda t: reduce_sum(zero_diag(matmul(reshape(t, (3, 4)), transpose(reshape(t, (3, 4)))))),
        "l2_normalize": lambda t: reduce_sum(l2_normalize(reshape(t, (3, 4)))),
        "softmax_ce": lambda t: softmax_ce(reshape(t, (12,)), 2),
        "stack_concat": lambda t: reduce_sum(
            concat([reshape(t, (12,)), stack([take(reshape(t, (12,)), 0), take(reshape(t, (12,)), 1)])])
        ),
        "gather_spatial": lambda t: reduce_sum(
            gather_spatial(reshape(t, (3, 2, 2)), [0, 3, 1])
        ),
    }
    for seed in range(seeds):
        rng = _rng(1000 + seed)
        for name, f in cases.items():
            x = rng.normal(size=12)
            if name == "relu":
                # keep clear of the kink: central differences step by eps
                x = np.where(np.abs(x) < 1e-3, x + 2e-3, x)
            err = fd_check(f, x, eps=1e-5)
            assert err <= tol, f"op {name}: fd error {err:.3e} > {tol}"
    # conv2d against each parameter separately
    for seed in range(seeds):
        rng = _rng(2000 + seed)
        x0 = rng.normal(size=(2, 5, 5))
        k0 = rng.normal(size=(3, 2, 3, 3))
        b0 = rng.normal(size=3)

        def wrt_x(t):
            tape = t.tape
            return reduce_sum(conv2d(t, tape.leaf(k0), tape.leaf(b0)))

        def wrt_k(t):
            tape = t.tape
            return reduce_sum(conv2d(tape.leaf(x0), t, tape.leaf(b0)))

        def wrt_b(t):
            tape = t.tape
            return reduce_sum(conv2d(tape.leaf(x0), tape.leaf(k0), t))

        for name, f, v in (("conv2d/x", wrt_x, x0), ("conv2d/kernel", wrt_k, k0), ("conv2d/bias", wrt_b, b0)):
            err = fd_check(f, v, eps=1e-5)
            assert err <= tol, f"{name}: fd error {err:.3e} > {tol}"


def check_autodiff_determinism():
    """Identical seeds give bit-identical forwards and gradients."""

    def run():
        rng = _rng(7)
        tape = Tape()
        x = tape.leaf(rng.normal(size=(4, 4)))
        y = tape.leaf(rng.normal(size=(4, 4)))
        out = reduce_mean(tanh(matmul(add(x, y), transpose(mul(x, y)))))
        backward(tape, out)
        return out.data.copy(), x.grad.copy(), y.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v), "repeated run differs bitwise"


def check_autodiff_linearity():
    """grad(a*f + b*g) == a*grad(f) + b*grad(g), exact for power-of-two a, b.

    Exactness needs each term to deposit a single gradient contribution on
    the leaf: power-of-two scaling commutes with every rounding step and
    two-term accumulation is order independent. A leaf feeding one term
    through several paths would reintroduce association-order rounding.
    """
    rng = _rng(11)
    x0 = rng.normal(size=6)
    a_coef, b_coef = 2.0, 0.25

    def grad_of(fn):
        tape = Tape()
        x = tape.leaf(x0.copy())
        backward(tape, fn(x))
        return x.grad

    f = lambda x: reduce_sum(softplus(x))
    g = lambda x: reduce_mean(tanh(x))
    combined = grad_of(lambda x: add(scale(f(x), a_coef), scale(g(x), b_coef)))
    split = a_coef * grad_of(f) + b_coef * grad_of(g)
    assert np.array_equal(combined, split), "backward is not linear in the root"


# ---------------------------------------------------------------------------
# kernels


def _naive_conv_forward(x, kernel, bias):
    cin, h, w = x.shape
    cout = kernel.shape[0]
    out = np.zeros((cout, h, w))
    for co in range(cout):
        for i in range(h):
            for j in range(w):
                acc = bias[co]
                for ci in range(cin):
                    for ky in range(3):
                        for kx in range(3):
                            yy, xx = i + ky - 1, j + kx - 1
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += x[ci, yy, xx] * kernel[co, ci, ky, kx]
                out[co, i, j] = acc
    return out


def check_kernels_conv_oracle(seeds=3, tol=1e-12):
    """Backend forward equals a straight seven-loop recomputation."""
    for seed in range(seeds):
        rng = _rng(300 + seed)
        x = rng.normal(size=(2, 6, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = kernels.conv2d_forward(x, k, b)
        want = _naive_conv_forward(x, k, b)
        diff = np.abs(got - want).max()
        assert diff <= tol, f"conv forward deviates from loop oracle by {diff:.3e}"


def check_kernels_backend_consistency(tol=1e-12):
    """Compiled and numpy backends agree when both are importable."""
    from .kernels import _conv_np

    try:
        from .kernels import _conv_cy
    except ImportError:
        return  # numpy-only build: nothing to cross-check
    rng = _rng(17)
    x = rng.normal(size=(3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    g = rng.normal(size=(4, 7, 6))
    fa = _conv_np.conv2d_forward(x, k, b)
    fb = _conv_cy.conv2d_forward(x, k, b)
    assert np.abs(fa - fb).max() <= tol, "backend forward mismatch"
    for ga, gb in zip(_conv_np.conv2d_backward(x, k, g), _conv_cy.conv2d_backward(x, k, g)):
        assert np.abs(ga - gb).max() <= tol, "backend backward mismatch"


# ---------------------------------------------------------------------------
# serialization


def check_serialization_roundtrip():
    rng = _rng(23)
    payload = {
        "w": rng.normal(size=(3, 2, 3, 3)),
        "b": rng.normal(size=3),
        "scalar": np.asarray(rng.normal()),
    }
    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "t.tns")
        save_tensors(path, payload)
        loaded = load_tensors(path)
    assert set(loaded) == set(payload), "name set changed in round trip"
    for name, arr in payload.items():
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], arr), f"{name} not bit-identical"


# ---------------------------------------------------------------------------
# features


def _toy_bound(seed=0, tap_layers=(1, 2)):
    from .toy.nets import ToyNets

    nets = ToyNets(in_channels=1, tap_layers=tap_layers, seed_init=seed)
    tape = Tape()
    return nets, nets.bind(tape)


def check_features_location_coupling():
    """Source and translation stacks must report the same locations."""
    nets, bound = _toy_bound(3)
    rng = _rng(31)
    img = rng.uniform(-1, 1, size=(1, 16, 16))
    x = bound.lift(img)
    generated, acts = bound.generate(x)
    taps = bound.tap_activations(acts)
    gen_taps = bound.tap_activations(bound.encode_image(generated))
    locations = [sample_locations(t.shape[1], t.shape[2], 8, rng) for t in taps]
    real_stack = bound.project_taps(taps, locations, True)
    fake_stack = bound.project_taps(gen_taps, locations, True)
    for rl, fl in zip(real_stack, fake_stack):
        assert np.array_equal(rl.locations, fl.locations), "location sets diverged"


def check_features_gradient_reach(max_tries=20, tol=1e-6):
    """Perturbing an encoder weight moves the selection loss; fd agrees.

    Retries seeds until relu pre-activations and selection margins are
    comfortably away from their decision boundaries (central differences
    otherwise measure the kink, not the derivative).
    """
    from .toy.nets import ToyNets

    weights = ObjectiveWeights(k=3, theta=-math.inf)
    for attempt in range(max_tries):
        nets = ToyNets(in_channels=1, tap_layers=(1,), seed_init=50 + attempt)
        rng = _rng(60 + attempt)
        img = rng.uniform(-1, 1, size=(1, 8, 8))
        locs = sample_locations(8, 8, 6, rng)

        # build the graph manually so the leaf under test is the weight
        def f(w_leaf):
            tape = w_leaf.tape
            leaves = {n: tape.leaf(a) for n, a in nets.params.items() if n != "enc1_w"}
            x = tape.leaf(img)
            a1 = relu(conv2d(x, w_leaf, leaves["enc1_b"]))
            a2 = relu(conv2d(a1, leaves["enc2_w"], leaves["enc2_b"]))
            h = relu(conv2d(a2, leaves["dec1_w"], leaves["dec1_b"]))
            gen = tanh(conv2d(h, leaves["dec2_w"], leaves["dec2_b"]))
            g1 = relu(conv2d(gen, w_leaf, leaves["enc1_b"]))
            rows_r = gather_spatial(a1, locs)
            rows_f = gather_spatial(g1, locs)
            head = lambda rows: l2_normalize(
                add(
                    matmul(relu(add(matmul(rows, leaves["head1_w1"]), leaves["head1_b1"])), leaves["head1_w2"]),
                    leaves["head1_b2"],
                )
            )
            real = head(rows_r)
            fake = head(rows_f)
            positives, negset = select_negatives(fake, real, weights.theta, weights.k)
            terms = [rank_nce(take(positives, row.query), row, weights.tau).root for row in negset]
            return reduce_mean(stack(terms))

        if _pipeline_margins_ok(nets, img, locs, weights):
            err = fd_check(f, nets.params["enc1_w"], eps=1e-6)
            assert err <= tol, f"pipeline fd error {err:.3e} > {tol}"
            tape2 = Tape()
            w2 = tape2.leaf(nets.params["enc1_w"])
            out = f(w2)
            backward(tape2, out)
            assert np.abs(w2.grad).max() > 0.0, "encoder weight detached from the loss"
            return
    raise AssertionError("no seed cleared the margin screens")


def _pipeline_margins_ok(nets, img, locs, weights, kink_margin=5e-5, sel_margin=1e-4):
    """True when no relu preactivation or selection boundary sits closer to
    its decision point than the screening margins."""
    p = nets.params
    pre1 = kernels.conv2d_forward(img, p["enc1_w"], p["enc1_b"])
    a1 = np.where(pre1 > 0, pre1, 0.0)
    pre2 = kernels.conv2d_forward(a1, p["enc2_w"], p["enc2_b"])
    a2 = np.where(pre2 > 0, pre2, 0.0)
    pre3 = kernels.conv2d_forward(a2, p["dec1_w"], p["dec1_b"])
    h = np.where(pre3 > 0, pre3, 0.0)
    gen = np.tanh(kernels.conv2d_forward(h, p["dec2_w"], p["dec2_b"]))
    pre4 = kernels.conv2d_forward(gen, p["enc1_w"], p["enc1_b"])
    g1 = np.where(pre4 > 0, pre4, 0.0)

    def head(rows):
        hid_pre = rows @ p["head1_w1"] + p["head1_b1"]
        hid = np.where(hid_pre > 0, hid_pre, 0.0)
        out = hid @ p["head1_w2"] + p["head1_b2"]
        return out / np.linalg.norm(out, axis=1, keepdims=True), hid_pre

    rows_r = a1.reshape(a1.shape[0], -1)[:, locs].T
    rows_f = g1.reshape(g1.shape[0], -1)[:, locs].T
    real, hid_r = head(rows_r)
    fake, hid_f = head(rows_f)
    for pre in (pre1, pre2, pre3, pre4, hid_r, hid_f):
        if np.abs(pre).min() < kink_margin:
            return False
    sims = fake @ real.T
    s = sims.shape[0]
    off = sims[~np.eye(s, dtype=bool)].reshape(s, s - 1)
    for i in range(s):
        vals = np.sort(off[i])[::-1]
        k = min(weights.k, vals.size)
        if k < vals.size and vals[k - 1] - vals[k] < sel_margin:
            return False
        if np.isfinite(weights.theta) and np.abs(off[i] - weights.theta).min() < sel_margin:
            return False
    return True


# ---------------------------------------------------------------------------
# negatives


def _topk_oracle(values, eligible, k):
    """Sort every eligible candidate, truncate: the quadratic reference."""
    picked = []
    cand = [(float(values[j]), j) for j in range(values.shape[0]) if eligible[j]]
    cand.sort(key=lambda t: (-t[0], t[1]))
    for v, j in cand[:k]:
        picked.append(j)
    return picked


def check_negatives_topk_oracle(rows=200, tol_rows=0):
    """rank_topk equals sort-all-truncate on random rows plus engineered ties."""
    mismatches = 0
    for seed in range(rows):
        rng = _rng(5000 + seed)
        s = int(rng.integers(3, 10))
        fake, real = _feature_pair(rng, s=s, c=5)
        if seed % 3 == 0:
            real[1] = real[0]  # duplicated candidate rows force exact score ties
        tape = Tape()
        sim = prune(similarity_matrix(tape.leaf(fake), tape.leaf(real)), -math.inf)
        k = int(rng.integers(1, s))
        negset = rank_topk(sim, k)
        for row in negset:
            want = _topk_oracle(sim.scores.data[row.query], sim.eligible[row.query], k)
            if list(row.indices) != want:
                mismatches += 1
    assert mismatches <= tol_rows, f"{mismatches} rows disagree with the sort oracle"


def check_negatives_anti_leak(seeds=50):
    for seed in range(seeds):
        rng = _rng(6000 + seed)
        fake, real = _feature_pair(rng)
        tape = Tape()
        _, negset = select_negatives(tape.leaf(fake), tape.leaf(real), -math.inf, 3)
        for row in negset:
            assert row.query not in row.indices, "positive leaked into its own negatives"


def check_negatives_monotone_pruning(seeds=30):
    for seed in range(seeds):
        rng = _rng(7000 + seed)
        fake, real = _feature_pair(rng)
        tape = Tape()
        sim = similarity_matrix(tape.leaf(fake), tape.leaf(real))
        t1, t2 = sorted(rng.uniform(-1, 1, size=2))
        lo = prune(sim, t1)
        hi = prune(sim, t2)
        assert not np.any(hi.eligible & ~lo.eligible), "raising theta added a survivor"


def check_negatives_scale_stability(seeds=20):
    """Selected index sets survive rescaling by powers of two (exact in fp)."""
    for seed in range(seeds):
        rng = _rng(8000 + seed)
        fake, real = _feature_pair(rng)
        for c in (0.5, 2.0, 1024.0):
            tape = Tape()
            _, base = select_negatives(tape.leaf(fake), tape.leaf(real), -math.inf, 3)
            tape2 = Tape()
            _, scaled = select_negatives(
                tape2.leaf(fake * c), tape2.leaf(real), -math.inf, 3
            )
            for r0, r1 in zip(base, scaled):
                assert np.array_equal(r0.indices, r1.indices), f"selection moved under x{c}"


# ---------------------------------------------------------------------------
# losses


def check_losses_reduction_identity(pairs=200, tol=1e-12):
    """theta=-inf, K=S-1 ranked loss equals the plain (N+1)-way loss."""
    worst = 0.0
    for seed in range(pairs):
        rng = _rng(9000 + seed)
        s = int(rng.integers(3, 9))
        fake, real = _feature_pair(rng, s=s, c=6)
        tape = Tape()
        positives, negset = select_negatives(
            tape.leaf(fake), tape.leaf(real), -math.inf, s - 1
        )
        for row in negset:
            ranked = rank_nce(take(positives, row.query), row, 0.07).value
            sims = fake[row.query] @ real.T
            negs = np.delete(sims, row.query)
            tape2 = Tape()
            plain = patch_nce(
                tape2.leaf(np.asarray(sims[row.query])), tape2.leaf(negs), 0.07
            ).value
            worst = max(worst, abs(ranked - plain))
    assert worst <= tol, f"reduction identity off by {worst:.3e}"


def check_losses_closed_forms(tol=1e-12):
    """Uniform logits give ln(k+1); zero logits give 2 ln 2 and ln 2."""
    for k in (1, 3, 5, 25):
        tape = Tape()
        value = patch_nce(tape.leaf(np.asarray(0.0)), tape.leaf(np.zeros(k)), 0.07).value
        assert abs(value - math.log(k + 1)) <= tol, f"uniform case k={k}: {value}"
    tape = Tape()
    zeros = tape.leaf(np.zeros(4))
    d_val = gan_loss_d(zeros, zeros, "non-saturating").value
    g_val = gan_loss_g(zeros, "non-saturating").value
    assert abs(d_val - 2 * math.log(2)) <= tol, f"zero-logit d loss {d_val}"
    assert abs(g_val - math.log(2)) <= tol, f"zero-logit g loss {g_val}"


def check_losses_monotonicity(seeds=30):
    """Raising the positive lowers the loss; raising a negative raises it.

    Scores are drawn from [-1, 1] (the normalized-feature range): with a
    wider spread the softmax weight of a low negative underflows float64
    and the strict inequality degenerates into a tie.
    """
    for seed in range(seeds):
        rng = _rng(11000 + seed)
        pos = float(rng.uniform(-1, 1))
        negs = rng.uniform(-1, 1, size=5)

        def value(p, n):
            tape = Tape()
            return patch_nce(tape.leaf(np.asarray(p)), tape.leaf(n), 0.07).value

        base = value(pos, negs)
        assert value(pos + 0.1, negs) < base, "positive bump failed to lower the loss"
        bumped = negs.copy()
        bumped[2] += 0.1
        assert value(pos, bumped) > base, "negative bump failed to raise the loss"


def check_losses_tau_scale(seeds=20):
    """Scaling similarities and tau by the same power of two is a no-op."""
    for seed in range(12000, 12000 + seeds):
        rng = _rng(seed)
        pos = np.asarray(rng.normal())
        negs = rng.normal(size=6)
        for c in (0.5, 2.0, 8.0):
            tape = Tape()
            a = patch_nce(tape.leaf(pos), tape.leaf(negs), 0.07).value
            tape2 = Tape()
            b = patch_nce(tape2.leaf(pos * c), tape2.leaf(negs * c), 0.07 * c).value
            assert a == b, f"tau scale violated at c={c}: {a} vs {b}"


def check_losses_gradient_suite(seeds=10, tol=1e-6):
    """fd agreement for the composite losses, selection flips screened out."""
    checked = 0
    for seed in range(13000, 13000 + seeds * 4):
        if checked >= seeds:
            break
        rng = _rng(seed)
        fake, real = _feature_pair(rng, s=6, c=5)
        _, real_b = _feature_pair(rng, s=6, c=5)
        if not _selection_margins_ok(fake, real, k=3, theta=0.0):
            continue
        if not _selection_margins_ok(fake, real_b, k=3, theta=0.0):
            continue
        checked += 1

        def ranked_loss(t):
            tape = t.tape
            f = reshape(t, (6, 5))
            positives, negset = select_negatives(f, tape.leaf(real), 0.0, 3, on_empty="all-candidates")
            terms = [rank_nce(take(positives, row.query), row, 0.07).root for row in negset]
            return reduce_mean(stack(terms))

        err = fd_check(ranked_loss, fake.reshape(-1), eps=1e-6)
        assert err <= tol, f"ranked loss fd error {err:.3e}"

        frozen_negs = rng.normal(size=4)

        def plain_loss(t):
            tape = t.tape
            return patch_nce(take(reshape(t, (6 * 5,)), 0), tape.leaf(frozen_negs), 0.07).root

        err = fd_check(plain_loss, fake.reshape(-1), eps=1e-6)
        assert err <= tol, f"plain loss fd error {err:.3e}"

        def d_loss(t):
            tape = t.tape
            return gan_loss_d(reshape(t, (30,)), tape.leaf(real.reshape(-1)), "non-saturating").root

        err = fd_check(d_loss, fake.reshape(-1), eps=1e-5)
        assert err <= tol, f"gan d fd error {err:.3e}"

        def g_loss(t):
            return gan_loss_g(reshape(t, (30,)), "non-saturating").root

        err = fd_check(g_loss, fake.reshape(-1), eps=1e-5)
        assert err <= tol, f"gan g fd error {err:.3e}"

        # layered aggregation: the same fake features contrasted against two
        # different real matrices, one per tap layer
        locs = np.arange(6)
        reals = (real, real_b)
        weights = ObjectiveWeights(k=3, theta=0.0)

        def layered_loss(t):
            f = reshape(t, (6, 5))
            real_stack = [
                LayerFeatures(li + 1, locs, t.tape.leaf(reals[li]), False)
                for li in range(2)
            ]
            fake_stack = [LayerFeatures(li + 1, locs, f, False) for li in range(2)]
            return multilayer_rank_nce(real_stack, fake_stack, weights).root

        err = fd_check(layered_loss, fake.reshape(-1), eps=1e-6)
        assert err <= tol, f"layered loss fd error {err:.3e}"

    assert checked == seeds, f"margin screens left {checked}/{seeds} seeds"
    _combined_objective_gradient(seeds, tol)


def _combined_objective_gradient(seeds, tol):
    """fd agreement for the combined objective through a feature head.

    Differentiating with respect to the first head's hidden bias keeps
    every convolution activation constant, so the only decision boundaries
    that can flip under the fd step are the head relus, the row norms, and
    the negative selection - all screened numerically before checking.
    """
    from .toy.nets import BoundNets, ToyNets

    weights = ObjectiveWeights(k=2, theta=0.0)
    s_loc = 4
    checked = 0
    for seed in range(14000, 14000 + seeds * 6):
        if checked >= seeds:
            break
        nets = ToyNets(in_channels=1, tap_layers=(1,), seed_init=seed)
        rng = _rng(seed)
        x_img = rng.uniform(-1, 1, size=(1, 6, 6))
        y_img = rng.uniform(-1, 1, size=(1, 6, 6))
        twin = _rng(seed + 7)
        locs_x = sample_locations(6, 6, s_loc, twin)
        locs_y = sample_locations(6, 6, s_loc, twin)

        p = nets.params
        rel = lambda a: np.maximum(a, 0.0)

        def tap_rows(img, locs):
            act = rel(kernels.conv2d_forward(img, p["enc1_w"], p["enc1_b"]))
            return act.reshape(act.shape[0], -1)[:, locs].T

        def head_z(rows):
            pre = rows @ p["head1_w1"] + p["head1_b1"]
            out = rel(pre) @ p["head1_w2"] + p["head1_b2"]
            norms = np.linalg.norm(out, axis=1)
            return pre, norms, out / norms[:, None]

        ok = True
        for src, gen, locs in (
            (x_img, nets.generate_array(x_img), locs_x),
            (y_img, nets.generate_array(y_img), locs_y),
        ):
            pre_r, norm_r, z_real = head_z(tap_rows(src, locs))
            pre_f, norm_f, z_fake = head_z(tap_rows(gen, locs))
            if min(np.abs(pre_r).min(), np.abs(pre_f).min()) < 1e-4:
                ok = False
            if min(norm_r.min(), norm_f.min()) < 1e-3:
                ok = False
            if not _selection_margins_ok(z_fake, z_real, weights.k, weights.theta):
                ok = False
        if not ok:
            continue
        checked += 1

        def objective(t):
            bound = BoundNets(nets, t.tape)
            bound.leaves["head1_b1"] = t
            term = total_objective(
                [x_img], [y_img], bound, weights, _rng(seed + 7),
                s_per_layer=s_loc,
            )
            return term.root

        err = fd_check(objective, p["head1_b1"], eps=1e-6)
        assert err <= tol, f"combined objective fd error {err:.3e}"
    assert checked == seeds, f"margin screens left {checked}/{seeds} seeds"


def _selection_margins_ok(fake, real, k, theta, margin=1e-4):
    """Reject feature draws whose top-K boundary or theta crossing is too
    close to flip under a finite-difference step."""
    sims = fake @ real.T
    s = sims.shape[0]
    for i in range(s):
        row = np.delete(sims[i], i)
        surv = np.sort(row[row > theta])[::-1]
        if surv.size == 0:
            return False
        if np.abs(row - theta).min() < margin:
            return False
        if k < surv.size and surv[k - 1] - surv[k] < margin:
            return False
    return True


# ---------------------------------------------------------------------------
# mi


def check_mi_loss_bound_identity(seeds=50, tol=1e-12):
    """The mean contrastive loss is exactly the negated bound estimate."""
    for seed in range(14000, 14000 + seeds):
        rng = _rng(seed)
        q = int(rng.integers(2, 8))
        n = int(rng.integers(1, 8))
        positives = rng.normal(size=q)
        negatives = rng.normal(size=(q, n))
        losses = []
        for i in range(q):
            tape = Tape()
            losses.append(
                patch_nce(tape.leaf(np.asarray(positives[i])), tape.leaf(negatives[i]), 0.07).value
            )
        bound = infonce_bound(positives, negatives, 0.07)
        assert abs(-np.mean(losses) - bound) <= tol, "loss/bound identity broken"


def check_mi_multisample_cap(seeds=40):
    """The multi-sample bound never exceeds ln(N+1), and approaches it only
    when the diagonal dominates."""
    for seed in range(15000, 15000 + seeds):
        rng = _rng(seed)
        m = int(rng.integers(2, 10))
        pairing = rng.normal(size=(m, m))
        cap = math.log(m)
        assert multisample_bound(pairing, 0.07) <= cap + 1e-12, "bound exceeded ln(N+1)"
    dominant = np.full((6, 6), -5.0)
    np.fill_diagonal(dominant, 5.0)
    val = multisample_bound(dominant, 0.07)
    assert abs(val - math.log(6)) < 1e-6, f"dominant diagonal should saturate: {val}"


def check_mi_ranking_equivalence(rows=200):
    """Similarity order and conditional-probability order agree exactly."""
    for seed in range(16000, 16000 + rows):
        rng = _rng(seed)
        n = int(rng.integers(2, 12))
        negs = rng.normal(size=n)
        if seed % 4 == 0:
            negs[1] = negs[0]  # engineered tie
        ok, report = contribution_ranking_check(float(rng.normal()), negs)
        assert ok, f"ranking mismatch: {report}"


# ---------------------------------------------------------------------------
# toy


_STRIPES_SHA256 = "3719aed3b21f6a1f5a7dcaaa7414d470c42eb63d81a7ebaabe22b93f8c175114"
_CHECKER_SHA256 = "7b28af5369efabf0db408c57310d8f6b1bdd87966c2d7a2caf9a9c61306d5334"


def check_toy_data_fixture():
    """Noise-free render matches the frozen first-generation fixture."""
    from .toy.config import DomainSpec
    from .toy.data import make_dataset

    xs, ys = make_dataset(
        DomainSpec(kind="stripes", noise=0.0), DomainSpec(kind="checker", noise=0.0), 4, 4, 123
    )
    assert hashlib.sha256(xs.tobytes()).hexdigest() == _STRIPES_SHA256, "stripes fixture drifted"
    assert hashlib.sha256(ys.tobytes()).hexdigest() == _CHECKER_SHA256, "checker fixture drifted"


def check_toy_data_disjoint_seeds():
    from .toy.config import DomainSpec
    from .toy.data import make_dataset

    spec_x, spec_y = DomainSpec(kind="stripes"), DomainSpec(kind="checker")
    a1, b1 = make_dataset(spec_x, spec_y, 16, 16, 0)
    a2, b2 = make_dataset(spec_x, spec_y, 16, 16, 1)
    clashes = sum(np.array_equal(x, y) for x in a1 for y in a2)
    clashes += sum(np.array_equal(x, y) for x in b1 for y in b2)
    assert clashes == 0, f"{clashes} pixel-identical pairs across seeds"


def check_toy_mmd_oracle(tol=1e-12):
    from .toy.metrics import mmd_metric, rbf_bandwidth

    rng = _rng(42)
    a = rng.normal(size=(6, 1, 4, 4))
    # identical multisets cancel exactly
    assert abs(mmd_metric(a, a.copy())) < tol, "identical sets did not cancel"
    # naive double-loop recomputation
    b = rng.normal(size=(6, 1, 4, 4))
    af, bf = a.reshape(6, -1), b.reshape(6, -1)
    h = rbf_bandwidth(af, bf)
    acc = 0.0
    for i in range(6):
        for j in range(6):
            if i == j:
                continue
            kxx = math.exp(-np.sum((af[i] - af[j]) ** 2) / (2 * h * h))
            kyy = math.exp(-np.sum((bf[i] - bf[j]) ** 2) / (2 * h * h))
            kxy = math.exp(-np.sum((af[i] - bf[j]) ** 2) / (2 * h * h))
            kyx = math.exp(-np.sum((af[j] - bf[i]) ** 2) / (2 * h * h))
            acc += kxx + kyy - kxy - kyx
    want = max(acc / (6 * 5), 0.0)
    got = mmd_metric(a, b)
    assert abs(got - want) < 1e-10, f"mmd {got} vs oracle {want}"
    # disjoint constant sets: hand kernel arithmetic
    zeros = np.zeros((4, 1, 3, 3))
    ones = np.ones((4, 1, 3, 3))
    got = mmd_metric(zeros, ones)
    h = rbf_bandwidth(zeros.reshape(4, -1), ones.reshape(4, -1))
    want = 2.0 * (1.0 - math.exp(-9.0 / (2 * h * h)))
    assert got > 0, "disjoint constant sets must score positive"
    assert abs(got - want) < 1e-12, f"constant-set value {got} vs {want}"


def check_toy_structure_oracle(tol=1e-12):
    from .toy.metrics import structure_score

    rng = _rng(43)
    x = rng.normal(size=(1, 8, 8))
    assert abs(structure_score(x, x.copy()) - 1.0) <= tol
    assert abs(structure_score(x, -x) + 1.0) <= tol
    y = rng.normal(size=(1, 8, 8))
    # straight-line recomputation with an independent correlation formula
    lap = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

    def filt(img):
        padded = np.pad(img[0], 1)
        out = np.zeros((8, 8))
        for i in range(8):
            for j in range(8):
                out[i, j] = float((padded[i : i + 3, j : j + 3] * lap).sum())
        return out.reshape(-1)

    fx, fy = filt(x), filt(y)
    want = float(np.corrcoef(fx, fy)[0, 1])
    got = structure_score(x, y)
    assert abs(got - want) < 1e-10, f"structure {got} vs oracle {want}"
    flat = np.zeros((1, 8, 8))
    try:
        structure_score(flat, y)
    except ValueError:
        pass
    else:
        raise AssertionError("zero-variance input must raise")


def _tiny_config(**overrides):
    from .toy.config import DomainSpec, TrainConfig

    base = dict(
        epochs=2,
        batch=2,
        n_train=4,
        n_eval=4,
        s_per_layer=8,
        domain_x=DomainSpec(kind="stripes"),
        domain_y=DomainSpec(kind="checker"),
    )
    base.update(overrides)
    return TrainConfig(**base)


def check_toy_train_determinism():
    from .toy.train import train

    def run_csv():
        history = train(_tiny_config())
        with tempfile.TemporaryDirectory() as td:
            path = os.path.join(td, "h.csv")
            history.write_csv(path)
            with open(path, "rb") as fh:
                return fh.read()

    assert run_csv() == run_csv(), "two identical runs produced different histories"


def check_toy_abort_on_nonfinite():
    from .toy.nets import ToyNets
    from .toy.train import TrainingAborted, train

    config = _tiny_config()
    nets = ToyNets(in_channels=1, tap_layers=config.tap_layers, seed_init=config.seed_init)
    poisoned = {n: a.copy() for n, a in nets.params.items()}
    poisoned["enc1_w"][0, 0, 0, 0] = np.inf
    try:
        train(config, initial_params=poisoned)
    except TrainingAborted as err:
        assert "x_batch" in err.payload, "abort dump lacks the offending batch"
    else:
        raise AssertionError("non-finite weights must abort training")


def check_toy_runtime_budget():
    """One default-sized epoch, extrapolated, stays under the 10-minute cap."""
    from .toy.train import train

    config = _tiny_config(epochs=1, batch=4, n_train=32, n_eval=16, s_per_layer=16)
    start = time.perf_counter()
    train(config)
    per_epoch = time.perf_counter() - start
    projected = per_epoch * 200
    assert projected < 600.0, f"projected default run {projected:.0f}s exceeds 600s"


# ---------------------------------------------------------------------------
# cli


def check_cli_idempotent():
    from .cli import run

    with tempfile.TemporaryDirectory() as td:
        cfg = os.path.join(td, "cfg.txt")
        with open(cfg, "w", encoding="utf-8") as fh:
            fh.write("epochs = 2\nbatch = 2\nn_train = 4\nn_eval = 4\ns_per_layer = 8\n")
        outs = []
        for name in ("a", "b"):
            out = os.path.join(td, name)
            status = run(["train", "--config", cfg, "--out", out, "--no-timestamp"])
            assert status == 0, "train command failed"
            blob = b""
            for fn in sorted(os.listdir(out)):
                with open(os.path.join(out, fn), "rb") as fh:
                    blob += fn.encode() + fh.read()
            outs.append(blob)
        assert outs[0] == outs[1], "identical invocations differ byte-wise"


CHECKS = [
    ("tensor_autodiff.gradient-central-difference", check_autodiff_gradients),
    ("tensor_autodiff.determinism", check_autodiff_determinism),
    ("tensor_autodiff.backward-linearity", check_autodiff_linearity),
    ("tensor_autodiff.conv-loop-oracle", check_kernels_conv_oracle),
    ("tensor_autodiff.backend-consistency", check_kernels_backend_consistency),
    ("tensor_autodiff.container-round-trip", check_serialization_roundtrip),
    ("patch_features.location-coupling", check_features_location_coupling),
    ("patch_features.gradient-reach", check_features_gradient_reach),
    ("negative_selection.topk-oracle", check_negatives_topk_oracle),
    ("negative_selection.anti-leak", check_negatives_anti_leak),
    ("negative_selection.monotone-pruning", check_negatives_monotone_pruning),
    ("negative_selection.scale-stability", check_negatives_scale_stability),
    ("contrastive_losses.reduction-identity", check_losses_reduction_identity),
    ("contrastive_losses.closed-forms", check_losses_closed_forms),
    ("contrastive_losses.monotonicity", check_losses_monotonicity),
    ("contrastive_losses.tau-scale", check_losses_tau_scale),
    ("contrastive_losses.gradient-suite", check_losses_gradient_suite),
    ("mi_estimators.loss-bound-identity", check_mi_loss_bound_identity),
    ("mi_estimators.multisample-cap", check_mi_multisample_cap),
    ("mi_estimators.ranking-equivalence", check_mi_ranking_equivalence),
    ("toy_i2i.data-fixture", check_toy_data_fixture),
    ("toy_i2i.data-disjoint-seeds", check_toy_data_disjoint_seeds),
    ("toy_i2i.mmd-oracle", check_toy_mmd_oracle),
    ("toy_i2i.structure-oracle", check_toy_structure_oracle),
    ("toy_i2i.train-determinism", check_toy_train_determinism),
    ("toy_i2i.abort-on-nonfinite", check_toy_abort_on_nonfinite),
    ("toy_i2i.runtime-budget", check_toy_runtime_budget),
    ("cli_harness.idempotent-outputs", check_cli_idempotent),
]


def run_selftest(echo=print):
    """Run every check; returns True iff all pass."""
    all_ok = True
    for name, fn in CHECKS:
        try:
            fn()
        except AssertionError as err:
            all_ok = False
            echo(f"{name}: FAIL ({err})")
        except Exception as err:  # noqa: BLE001 - a crash is a failing check
            all_ok = False
            echo(f"{name}: FAIL ({type(err).__name__}: {err})")
        else:
            echo(f"{name}: pass")
    return all_ok
