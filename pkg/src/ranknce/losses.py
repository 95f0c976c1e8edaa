"""Training objectives: patchwise NCE, its ranked variant, adversarial
losses, multi-layer aggregation, and the combined generator objective.

All losses are built from tape ops, so analytic gradients come for free and
every formula is overflow-safe (softmax terms go through log-sum-exp, the
adversarial terms through softplus in logit space).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    add_const,
    concat,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    softmax_ce,
    softplus,
    stack,
    take,
)
from .features import sample_locations
from .negatives import select_negatives
from .serialization import format_float

__all__ = [
    "ObjectiveWeights",
    "LossTerm",
    "GAN_VARIANTS",
    "BREAKDOWN_COLUMNS",
    "patch_nce",
    "rank_nce",
    "multilayer_rank_nce",
    "gan_loss_d",
    "gan_loss_g",
    "total_objective",
    "write_breakdown_header",
    "write_breakdown_rows",
]

GAN_VARIANTS = ("non-saturating", "minimax-literal", "least-squares")


@dataclass
class ObjectiveWeights:
    """Scalar knobs of the total objective.

    tau is the softmax temperature (similarities are divided by it inside
    the exponent), k the negative budget per query, theta the pruning
    threshold.
    """

    lambda_gan: float = 1.0
    lambda_x: float = 1.0
    lambda_y: float = 1.0
    tau: float = 0.07
    k: int = 5
    theta: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("ObjectiveWeights: tau must be > 0")
        if self.k < 1:
            raise ValueError("ObjectiveWeights: k must be >= 1")
        if min(self.lambda_gan, self.lambda_x, self.lambda_y) < 0:
            raise ValueError("ObjectiveWeights: lambdas must be >= 0")


@dataclass
class LossTerm:
    """Scalar loss with its tape root and an additive breakdown.

    When breakdown is populated its values sum to `value` (up to 1e-9);
    `components` carries unweighted per-term and per-layer detail for
    logging and is not part of that invariant.
    """

    value: float
    root: Tensor
    breakdown: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)


def _nce_from_logit_parts(positive, negative_vec, tau):
    pos = positive
    if pos.data.shape == ():
        pos = reshape(pos, (1,))
    elif pos.data.shape != (1,):
        raise ValueError("positive must be a scalar")
    logits = scale(concat([pos, negative_vec]), 1.0 / tau)
    return softmax_ce(logits, 0)


def patch_nce(positive, negatives, tau):
    """(N+1)-way classification loss of a positive against N negatives.

    -log( e^{s+/tau} / (e^{s+/tau} + sum_n e^{s_n/tau}) ), via log-sum-exp.
    """
    if tau <= 0:
        raise ValueError("patch_nce: tau must be > 0")
    if negatives.data.ndim != 1 or negatives.data.shape[0] == 0:
        raise ValueError("patch_nce: negatives must be a nonempty vector")
    root = _nce_from_logit_parts(positive, negatives, tau)
    return LossTerm(float(root.data), root)


def rank_nce(positive, row, tau):
    """patch_nce restricted to one query's selected negative scores."""
    if tau <= 0:
        raise ValueError("rank_nce: tau must be > 0")
    if row.k_effective == 0:
        raise ValueError("rank_nce: empty negative row")
    root = _nce_from_logit_parts(positive, row.score_tensor, tau)
    return LossTerm(float(root.data), root)


def multilayer_rank_nce(
    real_stack, fake_stack, weights, aggregation="mean", on_empty="error"
):
    """Ranked NCE across tap layers: per-layer reduction over queries, then
    a sum over layers.

    aggregation "mean" averages queries within a layer (loss magnitude
    independent of the sample count); "sum" keeps the literal double sum.
    Both stacks must share locations per layer - the positives are defined
    by positional correspondence.
    """
    if len(real_stack) != len(fake_stack):
        raise ValueError("multilayer_rank_nce: layer count mismatch")
    if aggregation not in ("mean", "sum"):
        raise ValueError("multilayer_rank_nce: aggregation must be 'mean' or 'sum'")
    layer_roots = []
    breakdown = {}
    per_query = {}
    for real_lf, fake_lf in zip(real_stack, fake_stack):
        if not np.array_equal(real_lf.locations, fake_lf.locations):
            raise ValueError(
                f"multilayer_rank_nce: layer {real_lf.layer} location mismatch "
                "between real and generated stacks"
            )
        positives, negset = select_negatives(
            fake_lf.features, real_lf.features, weights.theta, weights.k, on_empty
        )
        rows = [
            rank_nce(take(positives, row.query), row, weights.tau).root
            for row in negset
        ]
        vec = stack(rows)
        layer_root = reduce_mean(vec) if aggregation == "mean" else reduce_sum(vec)
        layer_roots.append(layer_root)
        breakdown[f"layer_{real_lf.layer}"] = float(layer_root.data)
        per_query[real_lf.layer] = vec.data.copy()
    root = layer_roots[0]
    for lr in layer_roots[1:]:
        root = add(root, lr)
    return LossTerm(
        float(root.data), root, breakdown, {"per_query": per_query}
    )


def _mean_softplus(t):
    return reduce_mean(softplus(t))


def gan_loss_d(d_real, d_fake, variant="non-saturating"):
    """Discriminator loss on raw logit batches.

    Saturating and non-saturating generator variants share the standard
    -mean log sig(d_real) - mean log(1 - sig(d_fake)), built from softplus;
    "least-squares" uses 0.5 mean (d_real - 1)^2 + 0.5 mean d_fake^2.
    """
    if variant not in GAN_VARIANTS:
        raise ValueError(f"gan_loss_d: unknown variant {variant!r}")
    for t in (d_real, d_fake):
        if t.data.ndim != 1 or t.data.shape[0] == 0:
            raise ValueError("gan_loss_d: logits must be nonempty vectors")
    if variant == "least-squares":
        real_term = scale(reduce_mean(mul(add_const(d_real, -1.0), add_const(d_real, -1.0))), 0.5)
        fake_term = scale(reduce_mean(mul(d_fake, d_fake)), 0.5)
    else:
        real_term = _mean_softplus(neg(d_real))
        fake_term = _mean_softplus(d_fake)
    root = add(real_term, fake_term)
    return LossTerm(
        float(root.data),
        root,
        {"real": float(real_term.data), "fake": float(fake_term.data)},
    )


def gan_loss_g(d_fake, variant="non-saturating"):
    """Generator adversarial loss on fake logits.

    Default is the non-saturating -mean log sig(d_fake); "minimax-literal"
    keeps mean log(1 - sig(d_fake)) (negative-valued, stalls easily) and
    "least-squares" uses 0.5 mean (d_fake - 1)^2.
    """
    if variant not in GAN_VARIANTS:
        raise ValueError(f"gan_loss_g: unknown variant {variant!r}")
    if d_fake.data.ndim != 1 or d_fake.data.shape[0] == 0:
        raise ValueError("gan_loss_g: logits must be a nonempty vector")
    if variant == "non-saturating":
        root = _mean_softplus(neg(d_fake))
    elif variant == "minimax-literal":
        root = neg(_mean_softplus(d_fake))
    else:
        shifted = add_const(d_fake, -1.0)
        root = scale(reduce_mean(mul(shifted, shifted)), 0.5)
    return LossTerm(float(root.data), root)


def _contrastive_term(bound, source_acts, generated, weights, rng, opts):
    """Ranked NCE between a source image's features and its translation's."""
    taps = bound.tap_activations(source_acts)
    gen_taps = bound.tap_activations(bound.encode_image(generated))
    locations = [
        sample_locations(t.shape[1], t.shape[2], opts["s_per_layer"], rng)
        for t in taps
    ]
    real_stack = bound.project_taps(taps, locations, opts["normalize_features"])
    fake_stack = bound.project_taps(gen_taps, locations, opts["normalize_features"])
    return multilayer_rank_nce(
        real_stack, fake_stack, weights,
        aggregation=opts["aggregation"], on_empty=opts["on_empty"],
    )


def total_objective(x_batch, y_batch, bound, weights, rng, **options):
    """Generator-side total: adversarial term plus both ranked NCE terms.

    The X term contrasts each source image with its translation; the Y term
    feeds target images through the generator and contrasts them against
    themselves (identity preservation). Terms with a zero weight are
    skipped. `bound` is a tape-bound network set (see the toy nets module).
    """
    opts = {
        "s_per_layer": 16,
        "normalize_features": True,
        "aggregation": "mean",
        "gan_variant": "non-saturating",
        "on_empty": "error",
    }
    unknown = set(options) - set(opts)
    if unknown:
        raise ValueError(f"total_objective: unknown options {sorted(unknown)}")
    opts.update(options)
    if len(x_batch) == 0 or len(y_batch) == 0:
        raise ValueError("total_objective: empty batch")

    fake_logits = []
    nce_x_roots = []
    nce_y_roots = []
    layer_sums_x: dict = {}
    layer_sums_y: dict = {}
    for img in x_batch:
        x = bound.lift(img)
        generated, acts = bound.generate(x)
        fake_logits.append(bound.discriminate(generated))
        if weights.lambda_x > 0:
            term = _contrastive_term(bound, acts, generated, weights, rng, opts)
            nce_x_roots.append(term.root)
            for name, v in term.breakdown.items():
                layer_sums_x[name] = layer_sums_x.get(name, 0.0) + v
    if weights.lambda_y > 0:
        for img in y_batch:
            y = bound.lift(img)
            identity, acts = bound.generate(y)
            term = _contrastive_term(bound, acts, identity, weights, rng, opts)
            nce_y_roots.append(term.root)
            for name, v in term.breakdown.items():
                layer_sums_y[name] = layer_sums_y.get(name, 0.0) + v

    gan_term = gan_loss_g(stack(fake_logits), opts["gan_variant"])
    parts = []
    breakdown = {}
    components = {"gan_g": gan_term.value}
    if weights.lambda_gan > 0:
        part = scale(gan_term.root, weights.lambda_gan)
        parts.append(part)
        breakdown["gan"] = float(part.data)
    if nce_x_roots:
        mean_x = reduce_mean(stack(nce_x_roots))
        part = scale(mean_x, weights.lambda_x)
        parts.append(part)
        breakdown["nce_x"] = float(part.data)
        components["nce_x"] = float(mean_x.data)
        components["nce_x_layers"] = {
            k: v / len(nce_x_roots) for k, v in layer_sums_x.items()
        }
    if nce_y_roots:
        mean_y = reduce_mean(stack(nce_y_roots))
        part = scale(mean_y, weights.lambda_y)
        parts.append(part)
        breakdown["nce_y"] = float(part.data)
        components["nce_y"] = float(mean_y.data)
        components["nce_y_layers"] = {
            k: v / len(nce_y_roots) for k, v in layer_sums_y.items()
        }
    if not parts:
        # all lambdas zero: keep a constant-zero root so training still steps
        parts = [scale(gan_term.root, 0.0)]
    root = parts[0]
    for p in parts[1:]:
        root = add(root, p)
    return LossTerm(float(root.data), root, breakdown, components)


BREAKDOWN_COLUMNS = ("step", "term", "layer", "value")


def write_breakdown_header(fh):
    fh.write(",".join(BREAKDOWN_COLUMNS) + "\n")


def write_breakdown_rows(fh, step, loss):
    """Stream one step's LossTerm as `step,term,layer,value` CSV rows.

    Aggregate entries (gan, nce_x, ...) leave the layer cell empty;
    per-layer detail rows fill it, either from breakdown keys of the form
    layer_N (a bare multilayer term) or from components entries ending in
    _layers (a combined objective). Rows append, so an epoch loop can call
    this once per step against a single open handle.
    """
    rows = []
    for key, value in loss.breakdown.items():
        if key.startswith("layer_"):
            rows.append((key[len("layer_"):], "nce", value))
        else:
            rows.append(("", key, value))
    for key, detail in loss.components.items():
        if key.endswith("_layers") and isinstance(detail, dict):
            term = key[: -len("_layers")]
            for lkey, value in sorted(detail.items()):
                rows.append((lkey[len("layer_"):], term, value))
    for layer, term, value in rows:
        fh.write(f"{step},{term},{layer},{format_float(value)}\n")
