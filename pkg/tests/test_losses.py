"""Contrastive and adversarial loss values, identities, and composition."""

import io

import numpy as np
import pytest

from ranknce.autodiff import Tape, backward, fd_check, stack, take
from ranknce.losses import (
    ObjectiveWeights,
    gan_loss_d,
    gan_loss_g,
    multilayer_rank_nce,
    patch_nce,
    rank_nce,
    total_objective,
    write_breakdown_header,
    write_breakdown_rows,
)
from ranknce.negatives import select_negatives
from ranknce.features import LayerFeatures, FeatureStack
from ranknce.toy.nets import ToyNets

LN2 = float(np.log(2.0))


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def nce_of(pos_val, neg_vals, tau):
    tape = Tape()
    pos = tape.leaf(np.asarray(float(pos_val)))
    negs = tape.leaf(np.asarray(neg_vals, dtype=np.float64))
    return patch_nce(pos, negs, tau)


# ---------------------------------------------------------------------------
# patch_nce / rank_nce


@pytest.mark.parametrize("k", [1, 3, 5, 25])
def test_uniform_logits_give_log_k_plus_one(k):
    for c in (0.0, 0.7, -2.0):
        term = nce_of(c, np.full(k, c), tau=0.07)
        assert abs(term.value - np.log(k + 1)) < 1e-12


def test_patch_nce_log_sum_exp_oracle():
    rng = rng_for(0)
    for _ in range(100):
        pos = float(rng.uniform(-1, 1))
        negs = rng.uniform(-1, 1, size=int(rng.integers(1, 9)))
        tau = float(rng.uniform(0.05, 1.0))
        z = np.concatenate([[pos], negs]) / tau
        want = np.log(np.exp(z - z.max()).sum()) + z.max() - z[0]
        assert abs(nce_of(pos, negs, tau).value - want) < 1e-12


def test_patch_nce_handles_extreme_logits():
    # tau=0.07 maps similarity 60 to logit ~857; naive exp would overflow
    term = nce_of(60.0, np.array([-60.0, 59.9]), tau=0.07)
    assert np.isfinite(term.value) and term.value > 0.0


def test_patch_nce_validation():
    with pytest.raises(ValueError):
        nce_of(0.0, np.zeros(3), tau=0.0)
    with pytest.raises(ValueError):
        nce_of(0.0, np.zeros(0), tau=0.07)


def test_rank_nce_equals_patch_nce_on_selected_row():
    rng = rng_for(1)
    for _ in range(50):
        fake = rng.normal(size=(6, 4))
        real = rng.normal(size=(6, 4))
        tape = Tape()
        positives, negset = select_negatives(
            tape.leaf(fake), tape.leaf(real), -np.inf, 5
        )
        sims = fake @ real.T
        for row in negset:
            got = rank_nce(take(positives, row.query), row, 0.07).value
            want = nce_of(
                sims[row.query, row.query], sims[row.query, row.indices], 0.07
            ).value
            assert abs(got - want) < 1e-12


def test_monotonicity_in_scores():
    # raising a negative raises the loss; raising the positive lowers it.
    # draws stay in [-1, 1]: the normalized-feature range, where even the
    # weakest negative keeps a representable softmax weight
    rng = rng_for(2)
    for _ in range(50):
        pos = float(rng.uniform(-1, 1))
        negs = rng.uniform(-1, 1, size=5)
        base = nce_of(pos, negs, 0.07).value
        bumped = negs.copy()
        bumped[int(rng.integers(5))] += 0.1
        assert nce_of(pos, bumped, 0.07).value > base
        assert nce_of(pos + 0.1, negs, 0.07).value < base


def test_temperature_scale_invariance_is_exact():
    # dividing similarities by c and tau by c gives identical logits;
    # power-of-two c keeps the arithmetic bit-identical
    rng = rng_for(3)
    for c in (0.5, 2.0, 8.0):
        pos = float(rng.uniform(-1, 1))
        negs = rng.uniform(-1, 1, size=6)
        assert nce_of(pos, negs, 0.07).value == nce_of(pos / c, negs / c, 0.07 / c).value


def test_nce_gradient_spot_check():
    rng = rng_for(4)
    for seed in range(10):
        vals = rng_for(seed).uniform(-1, 1, size=7)

        def f(t):
            negs = stack([take(t, i) for i in range(1, 7)])
            return patch_nce(take(t, 0), negs, 0.07).root

        assert fd_check(f, vals) < 1e-6


# ---------------------------------------------------------------------------
# adversarial terms


def logits(tape, vals):
    return tape.leaf(np.asarray(vals, dtype=np.float64))


def test_gan_zero_logit_closed_forms():
    tape = Tape()
    zeros = logits(tape, np.zeros(4))
    assert abs(gan_loss_d(zeros, zeros).value - 2 * LN2) < 1e-12
    assert abs(gan_loss_g(zeros).value - LN2) < 1e-12
    assert abs(gan_loss_g(zeros, "minimax-literal").value - (-LN2)) < 1e-12
    assert abs(gan_loss_d(zeros, zeros, "least-squares").value - 0.5) < 1e-12
    assert abs(gan_loss_g(zeros, "least-squares").value - 0.5) < 1e-12


def test_gan_d_breakdown_sums_to_value():
    rng = rng_for(5)
    tape = Tape()
    term = gan_loss_d(logits(tape, rng.normal(size=6)), logits(tape, rng.normal(size=6)))
    assert abs(term.breakdown["real"] + term.breakdown["fake"] - term.value) < 1e-9


def test_gan_loss_direction():
    # a discriminator that scores real high and fake low beats the coin flip
    tape = Tape()
    good = gan_loss_d(logits(tape, np.full(4, 3.0)), logits(tape, np.full(4, -3.0)))
    assert good.value < 2 * LN2
    confident_fake = gan_loss_g(logits(tape, np.full(4, 3.0)))
    assert confident_fake.value < LN2


def test_gan_validation():
    tape = Tape()
    z = logits(tape, np.zeros(3))
    with pytest.raises(ValueError):
        gan_loss_d(z, z, variant="wasserstein")
    with pytest.raises(ValueError):
        gan_loss_g(logits(tape, np.zeros((2, 2))))
    with pytest.raises(ValueError):
        gan_loss_g(logits(tape, np.zeros(0)))


def test_gan_gradients():
    rng = rng_for(6)
    vals = rng.normal(size=5)

    def d_wrt_real(t):
        return gan_loss_d(t, t.tape.leaf(rng_for(0).normal(size=5))).root

    def g_wrt_fake(t):
        return gan_loss_g(t).root

    assert fd_check(d_wrt_real, vals) < 1e-6
    assert fd_check(g_wrt_fake, vals) < 1e-6


# ---------------------------------------------------------------------------
# multilayer composition


def two_layer_stacks(seed, s=6, c=4):
    rng = rng_for(seed)
    tape = Tape()
    layers_r, layers_f = [], []
    for layer in (1, 2):
        locs = np.sort(rng.choice(64, size=s, replace=False))
        real = rng.uniform(-1, 1, size=(s, c))
        fake = rng.uniform(-1, 1, size=(s, c))
        layers_r.append(LayerFeatures(layer, locs, tape.leaf(real), False))
        layers_f.append(LayerFeatures(layer, locs, tape.leaf(fake), False))
    return FeatureStack(layers_r), FeatureStack(layers_f), tape


def test_multilayer_breakdown_sums_to_value():
    real, fake, _ = two_layer_stacks(0)
    w = ObjectiveWeights(theta=-np.inf, k=3)
    term = multilayer_rank_nce(real, fake, w)
    assert abs(sum(term.breakdown.values()) - term.value) < 1e-9
    assert set(term.breakdown) == {"layer_1", "layer_2"}


def test_multilayer_sum_vs_mean_aggregation():
    # 4 queries per layer: mean * 4 must equal sum bit for bit
    real, fake, _ = two_layer_stacks(1, s=4)
    w = ObjectiveWeights(theta=-np.inf, k=3)
    mean_term = multilayer_rank_nce(real, fake, w, aggregation="mean")
    sum_term = multilayer_rank_nce(real, fake, w, aggregation="sum")
    assert sum_term.value == mean_term.value * 4.0


def test_multilayer_location_mismatch_rejected():
    real, fake, _ = two_layer_stacks(2)
    fake.layers[1].locations = fake.layers[1].locations.copy() + 1
    with pytest.raises(ValueError, match="location"):
        multilayer_rank_nce(real, fake, ObjectiveWeights(theta=-np.inf))


def test_multilayer_per_query_detail():
    real, fake, _ = two_layer_stacks(3, s=5)
    w = ObjectiveWeights(theta=-np.inf, k=4)
    term = multilayer_rank_nce(real, fake, w)
    per_query = term.components["per_query"]
    assert set(per_query) == {1, 2}
    assert per_query[1].shape == (5,)
    assert abs(per_query[1].mean() - term.breakdown["layer_1"]) < 1e-12


# ---------------------------------------------------------------------------
# total objective


def toy_setup(seed=0):
    nets = ToyNets(in_channels=1, tap_layers=(1, 2), seed_init=seed)
    tape = Tape()
    return nets, nets.bind(tape), tape


def batches(seed, n=2):
    rng = rng_for(seed)
    xs = [rng.uniform(-1, 1, size=(1, 8, 8)) for _ in range(n)]
    ys = [rng.uniform(-1, 1, size=(1, 8, 8)) for _ in range(n)]
    return xs, ys


def test_total_objective_breakdown_and_weighting():
    nets, bound, tape = toy_setup()
    xs, ys = batches(1)
    w = ObjectiveWeights(lambda_gan=1.0, lambda_x=2.0, lambda_y=0.5, theta=-np.inf)
    term = total_objective(xs, ys, bound, w, rng_for(2), s_per_layer=6)
    assert set(term.breakdown) == {"gan", "nce_x", "nce_y"}
    assert abs(sum(term.breakdown.values()) - term.value) < 1e-9
    # power-of-two lambdas make the weighted/raw relation exact
    assert term.breakdown["nce_x"] == 2.0 * term.components["nce_x"]
    assert term.breakdown["nce_y"] == 0.5 * term.components["nce_y"]
    assert term.components["gan_g"] == term.breakdown["gan"]
    assert set(term.components["nce_x_layers"]) == {"layer_1", "layer_2"}


def test_total_objective_skips_zero_weight_terms():
    nets, bound, tape = toy_setup()
    xs, ys = batches(3)
    w = ObjectiveWeights(lambda_gan=1.0, lambda_x=0.0, lambda_y=0.0)
    term = total_objective(xs, ys, bound, w, rng_for(4), s_per_layer=6)
    assert set(term.breakdown) == {"gan"}
    assert "nce_x" not in term.components


def test_total_objective_all_zero_weights_still_steps():
    nets, bound, tape = toy_setup()
    xs, ys = batches(5)
    w = ObjectiveWeights(lambda_gan=0.0, lambda_x=0.0, lambda_y=0.0)
    term = total_objective(xs, ys, bound, w, rng_for(6), s_per_layer=6)
    assert term.value == 0.0
    backward(tape, term.root)  # constant root: backward must still succeed
    grads = bound.grads(["enc1_w"])
    assert np.array_equal(grads["enc1_w"], np.zeros_like(nets.params["enc1_w"]))


def test_total_objective_gradients_reach_generator():
    nets, bound, tape = toy_setup(seed=1)
    xs, ys = batches(7)
    w = ObjectiveWeights(theta=-np.inf)
    term = total_objective(xs, ys, bound, w, rng_for(8), s_per_layer=6)
    backward(tape, term.root)
    grads = bound.grads(nets.generator_param_names())
    nonzero = [name for name, g in grads.items() if np.any(g != 0.0)]
    assert "enc1_w" in nonzero and "dec2_w" in nonzero
    assert any(name.startswith("head") for name in nonzero)


def test_total_objective_validation():
    nets, bound, tape = toy_setup()
    xs, ys = batches(9)
    w = ObjectiveWeights()
    with pytest.raises(ValueError, match="unknown options"):
        total_objective(xs, ys, bound, w, rng_for(0), batch_size=4)
    with pytest.raises(ValueError, match="empty batch"):
        total_objective([], ys, bound, w, rng_for(0))


def test_breakdown_csv_stream_multilayer():
    real_stack, fake_stack, tape = two_layer_stacks(3)
    w = ObjectiveWeights(k=3, theta=-np.inf)
    term = multilayer_rank_nce(real_stack, fake_stack, w)
    buf = io.StringIO()
    write_breakdown_header(buf)
    write_breakdown_rows(buf, 7, term)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,term,layer,value"
    assert len(lines) == 3  # one row per tap layer
    for line, layer in zip(lines[1:], (1, 2)):
        step, name, lay, value = line.split(",")
        assert (step, name, lay) == ("7", "nce", str(layer))
        assert float(value) == term.breakdown[f"layer_{layer}"]


def test_breakdown_csv_stream_total_objective():
    nets, bound, tape = toy_setup()
    xs, ys = batches(4)
    w = ObjectiveWeights(theta=-np.inf)
    term = total_objective(xs, ys, bound, w, rng_for(5), s_per_layer=6)
    buf = io.StringIO()
    write_breakdown_header(buf)
    write_breakdown_rows(buf, 0, term)
    write_breakdown_rows(buf, 1, term)  # appending: second step reuses handle
    lines = buf.getvalue().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    steps = {r[0] for r in rows}
    assert steps == {"0", "1"}
    step0 = [r for r in rows if r[0] == "0"]
    aggregate = {r[1] for r in step0 if r[2] == ""}
    assert aggregate == {"gan", "nce_x", "nce_y"}
    layered = {(r[1], r[2]) for r in step0 if r[2] != ""}
    assert layered == {
        ("nce_x", "1"), ("nce_x", "2"), ("nce_y", "1"), ("nce_y", "2"),
    }
    by_key = {(r[1], r[2]): float(r[3]) for r in step0}
    assert by_key[("gan", "")] == term.breakdown["gan"]
    assert by_key[("nce_x", "1")] == term.components["nce_x_layers"]["layer_1"]
