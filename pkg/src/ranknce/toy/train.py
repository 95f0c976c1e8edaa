"""The alternating training loop.

One epoch = a pass over the training sets in shuffled order; each step does
one discriminator update on detached translations, then one generator
update through the full objective. Metrics and an MI probe are logged per
epoch. Every source of randomness is pinned to one of the three seeds, so
a config maps to a bit-identical RunHistory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import NonFiniteError, Tape, backward, stack
from ..losses import gan_loss_d, total_objective
from ..features import sample_locations
from ..mi import conditional_probs, infonce_bound, multisample_bound
from ..serialization import format_float
from .data import make_dataset
from .metrics import mmd_metric, structure_score
from .nets import ToyNets

__all__ = ["RunHistory", "TrainingAborted", "train", "HISTORY_COLUMNS", "MI_COLUMNS"]

HISTORY_COLUMNS = (
    "epoch",
    "gan_d",
    "gan_g",
    "nce_x",
    "nce_y",
    "total",
    "mi_bound",
    "mi_bound_offset",
    "mmd",
    "structure",
)

# wire format of the MI diagnostics CSV; the first two identify the probe
MI_COLUMNS = (
    "step",
    "layer",
    "bound_eq5",
    "bound_eq5_offset",
    "bound_eq6",
    "max_neg_p",
    "mean_neg_p",
)
_MI_KEYS = ("step", "layer", "bound_single", "bound_single_offset", "bound_multi", "max_neg_p", "mean_neg_p")


class TrainingAborted(RuntimeError):
    """Raised when a non-finite value surfaces during training.

    Carries a diagnostic payload (offending batch, and the per-layer
    similarity matrices when they are still computable) for post-mortem
    dumping to the tensor container format.
    """

    def __init__(self, message, epoch, step, phase, payload):
        super().__init__(f"{message} (epoch {epoch}, step {step}, {phase} phase)")
        self.epoch = epoch
        self.step = step
        self.phase = phase
        self.payload = payload


@dataclass
class RunHistory:
    """Per-epoch metric log plus the final weights."""

    rows: list = field(default_factory=list)
    mi_rows: list = field(default_factory=list)
    final_params: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(HISTORY_COLUMNS) + "\n")
            for row in self.rows:
                cells = [str(row["epoch"])]
                cells += [format_float(row[c]) for c in HISTORY_COLUMNS[1:]]
                fh.write(",".join(cells) + "\n")

    def write_mi_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(MI_COLUMNS) + "\n")
            for row in self.mi_rows:
                cells = [str(row["step"]), str(row["layer"])]
                cells += [format_float(row[k]) for k in _MI_KEYS[2:]]
                fh.write(",".join(cells) + "\n")

    def column(self, name):
        return np.array([row[name] for row in self.rows], dtype=np.float64)


class _Adam:
    """Adam over a fixed-order subset of the parameter dict."""

    def __init__(self, names, beta1, beta2, eps):
        self.names = list(names)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: None for n in self.names}
        self.v = {n: None for n in self.names}

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name in self.names:
            g = grads[name]
            if self.m[name] is None:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + self.eps)


def lr_at(epoch, config):
    """Constant for the first half of the epochs, then linear decay.

    The factor stays strictly positive through the last epoch so Adam never
    receives a zero step size.
    """
    half = (config.epochs + 1) // 2
    if epoch < half:
        return config.lr
    span = config.epochs - half + 1
    return config.lr * (1.0 - (epoch - half + 1) / span)


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def _mi_probe(nets, image, tau, s_per_layer, rng):
    """Bound estimates on one image's (source, translation) feature pairs.

    Uses every non-matching location as a negative, independent of the
    configured k/theta: the probe measures MI content, not the training
    loss. Returns one record per tap layer.
    """
    tape = Tape()
    bound_nets = nets.bind(tape)
    x = bound_nets.lift(image)
    generated, acts = bound_nets.generate(x)
    taps = bound_nets.tap_activations(acts)
    gen_taps = bound_nets.tap_activations(bound_nets.encode_image(generated))
    locations = [
        sample_locations(t.shape[1], t.shape[2], min(s_per_layer, t.shape[1] * t.shape[2]), rng)
        for t in taps
    ]
    real_stack = bound_nets.project_taps(taps, locations, True)
    fake_stack = bound_nets.project_taps(gen_taps, locations, True)
    records = []
    for layer_id, real_lf, fake_lf in zip(nets.spec.tap_layers, real_stack, fake_stack):
        pairing = fake_lf.features.data @ real_lf.features.data.T
        s = pairing.shape[0]
        positives = np.diag(pairing).copy()
        off = pairing[~np.eye(s, dtype=bool)].reshape(s, s - 1)
        probs = conditional_probs(positives, off, tau)
        records.append(
            {
                "layer": int(layer_id),
                "bound_single": infonce_bound(positives, off, tau),
                "bound_single_offset": infonce_bound(positives, off, tau, with_offset=True),
                "bound_multi": multisample_bound(pairing, tau),
                "max_neg_p": float(probs[:, 1:].max()),
                "mean_neg_p": float(probs[:, 1:].mean()),
            }
        )
    return records


def _similarity_snapshot(nets, image, s_per_layer, rng):
    """Best-effort per-layer similarity matrices for the abort dump."""
    out = {}
    try:
        tape = Tape()
        bound_nets = nets.bind(tape)
        x = bound_nets.lift(image)
        generated, acts = bound_nets.generate(x)
        taps = bound_nets.tap_activations(acts)
        gen_taps = bound_nets.tap_activations(bound_nets.encode_image(generated))
        locations = [
            sample_locations(t.shape[1], t.shape[2], min(s_per_layer, t.shape[1] * t.shape[2]), rng)
            for t in taps
        ]
        real_stack = bound_nets.project_taps(taps, locations, True)
        fake_stack = bound_nets.project_taps(gen_taps, locations, True)
        for layer_id, real_lf, fake_lf in zip(nets.spec.tap_layers, real_stack, fake_stack):
            out[f"similarity_layer{layer_id}"] = fake_lf.features.data @ real_lf.features.data.T
    except Exception:
        pass
    return out


def _mean(values):
    return float(np.mean(values)) if values else 0.0


def train(config, initial_params=None, progress=None):
    """Run the full loop; returns a RunHistory with final weights attached.

    initial_params, when given, replaces the seeded init (checkpoint
    resume). progress, when given, is called with (epoch, row) after each
    epoch. Raises TrainingAborted on any non-finite value.
    """
    xs, ys = make_dataset(config.domain_x, config.domain_y, config.n_train, config.n_train, config.seed_data)
    xs_eval, ys_eval = make_dataset(
        config.domain_x, config.domain_y, config.n_eval, config.n_eval, (config.seed_data, 1)
    )
    nets = ToyNets(
        in_channels=config.domain_x.channels,
        tap_layers=config.tap_layers,
        seed_init=config.seed_init,
    )
    if initial_params is not None:
        for name in nets.params:
            if name not in initial_params:
                raise ValueError(f"initial_params missing {name!r}")
        nets.params = {name: np.asarray(initial_params[name], dtype=np.float64) for name in nets.params}

    seq = np.random.SeedSequence(config.seed_sample)
    child_train, child_probe = seq.spawn(2)
    rng_sample = np.random.Generator(np.random.PCG64(child_train))
    probe_children = child_probe.spawn(config.epochs)

    adam_g = _Adam(nets.generator_param_names(), config.beta1, config.beta2, config.adam_eps)
    adam_d = _Adam(nets.discriminator_param_names(), config.beta1, config.beta2, config.adam_eps)
    weights = config.weights
    history = RunHistory()

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        x_parts = _batches(config.n_train, config.batch, rng_sample)
        y_parts = _batches(config.n_train, config.batch, rng_sample)
        gan_d_vals, gan_g_vals, nce_x_vals, nce_y_vals, totals = [], [], [], [], []
        for step, (xi, yi) in enumerate(zip(x_parts, y_parts)):
            x_batch = [xs[i] for i in xi]
            y_batch = [ys[i] for i in yi]
            phase = "discriminator"
            try:
                if weights.lambda_gan > 0:
                    translated = [nets.generate_array(x) for x in x_batch]
                    tape = Tape()
                    bound_nets = nets.bind(tape)
                    d_real = stack([bound_nets.discriminate(bound_nets.lift(y)) for y in y_batch])
                    d_fake = stack([bound_nets.discriminate(bound_nets.lift(g)) for g in translated])
                    term = gan_loss_d(d_real, d_fake, config.gan_variant)
                    backward(tape, term.root)
                    adam_d.step(nets.params, bound_nets.grads(adam_d.names), lr)
                    gan_d_vals.append(term.value)

                phase = "generator"
                tape = Tape()
                bound_nets = nets.bind(tape)
                term = total_objective(
                    x_batch,
                    y_batch,
                    bound_nets,
                    weights,
                    rng_sample,
                    s_per_layer=config.s_per_layer,
                    normalize_features=config.normalize_features,
                    aggregation=config.aggregation,
                    gan_variant=config.gan_variant,
                    on_empty=config.on_empty_rows,
                )
                backward(tape, term.root)
                adam_g.step(nets.params, bound_nets.grads(adam_g.names), lr)
            except (NonFiniteError, ValueError) as err:
                # NonFiniteError: a NaN/Inf surfaced in an op. ValueError:
                # a degenerate feature row reached normalization. Either
                # way training stops with the offending batch attached.
                payload = {
                    "x_batch": np.stack(x_batch),
                    "y_batch": np.stack(y_batch),
                }
                payload.update(
                    _similarity_snapshot(
                        nets, x_batch[0], config.s_per_layer,
                        np.random.Generator(np.random.PCG64(0)),
                    )
                )
                raise TrainingAborted(str(err), epoch, step, phase, payload) from err
            gan_g_vals.append(term.components.get("gan_g", 0.0))
            nce_x_vals.append(term.breakdown.get("nce_x", 0.0))
            nce_y_vals.append(term.breakdown.get("nce_y", 0.0))
            totals.append(term.value)

        translated_eval = [nets.generate_array(x) for x in xs_eval]
        mmd = mmd_metric(np.stack(translated_eval), ys_eval)
        scores = []
        for x, g in zip(xs_eval, translated_eval):
            try:
                scores.append(structure_score(x, g))
            except ValueError:
                scores.append(0.0)  # collapsed output: no structure to speak of
        probe_rng = np.random.Generator(np.random.PCG64(probe_children[epoch]))
        probe = _mi_probe(nets, xs_eval[0], weights.tau, config.s_per_layer, probe_rng)
        for record in probe:
            history.mi_rows.append({"step": epoch, **record})

        row = {
            "epoch": epoch,
            "gan_d": _mean(gan_d_vals),
            "gan_g": _mean(gan_g_vals),
            "nce_x": _mean(nce_x_vals),
            "nce_y": _mean(nce_y_vals),
            "total": _mean(totals),
            "mi_bound": _mean([r["bound_single"] for r in probe]),
            "mi_bound_offset": _mean([r["bound_single_offset"] for r in probe]),
            "mmd": mmd,
            "structure": _mean(scores),
        }
        bad = [k for k, v in row.items() if not np.isfinite(v)]
        if bad:
            raise TrainingAborted(
                f"non-finite metrics {bad}", epoch, -1, "evaluation",
                {"x_eval": np.asarray(xs_eval), "y_eval": np.asarray(ys_eval)},
            )
        history.rows.append(row)
        if progress is not None:
            progress(epoch, row)

    history.final_params = {name: arr.copy() for name, arr in nets.params.items()}
    return history
