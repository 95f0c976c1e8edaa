"""Command-line entry point.

Verbs: train, ablate-k, ablate-layers, mi-diagnose, dump-similarity,
selftest. Every artifact-emitting verb takes --config/--out plus seed and
hyperparameter overrides, and writes plain CSV/JSON; pass --no-timestamp
to make outputs byte-reproducible for diffing.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__, kernels
from .features import sample_locations, write_features_csv
from .losses import ObjectiveWeights
from .negatives import prune, rank_topk, similarity_matrix, write_similarity_csv
from .serialization import format_float, save_tensors
from .toy.config import TrainConfig, load_config, write_config
from .toy.data import make_dataset
from .toy.nets import ToyNets
from .toy.train import TrainingAborted, train
from .autodiff import Tape

__all__ = ["main", "run"]


def _add_common_flags(sub, needs_out=True):
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--out", required=needs_out, help="output directory")
    sub.add_argument("--seed-data", type=int, default=None)
    sub.add_argument("--seed-init", type=int, default=None)
    sub.add_argument("--seed-sample", type=int, default=None)
    sub.add_argument("--k", type=int, default=None, help="negatives kept per query")
    sub.add_argument("--theta", type=float, default=None, help="pruning threshold")
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument(
        "--no-timestamp",
        action="store_true",
        help="omit the timestamp from run metadata (byte-stable outputs)",
    )
    sub.add_argument("--verbose", action="store_true", help="per-epoch progress on stderr")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ranknce",
        description="Ranked-negative contrastive translation experiments",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="verb", required=True)

    _add_common_flags(subs.add_parser("train", help="one training run"))

    ab = subs.add_parser("ablate-k", help="stability sweep over K")
    _add_common_flags(ab)
    ab.add_argument(
        "--k-values",
        default="3,5,25,all",
        help="comma list of K arms; 'all' disables pruning and keeps every negative",
    )
    ab.add_argument(
        "--seeds",
        default="0",
        help="comma list of base seeds; each is used for all three seed roles",
    )

    al = subs.add_parser("ablate-layers", help="solo vs multi-layer comparison")
    _add_common_flags(al)
    al.add_argument(
        "--layer-sets",
        default="1;2;1,2",
        help="semicolon-separated tap-layer sets, e.g. '1;2;1,2'",
    )

    _add_common_flags(subs.add_parser("mi-diagnose", help="per-epoch information bounds"))

    ds = subs.add_parser("dump-similarity", help="similarity/selection snapshot")
    _add_common_flags(ds)
    ds.add_argument("--checkpoint", help="tensor container with trained weights")

    subs.add_parser("selftest", help="run the oracle and invariant suite")
    return parser


def _resolve_config(args):
    config = load_config(args.config) if args.config else TrainConfig()
    weights = config.weights
    if args.k is not None or args.theta is not None:
        kw = asdict(weights)
        if args.k is not None:
            kw["k"] = args.k
        if args.theta is not None:
            kw["theta"] = args.theta
        weights = ObjectiveWeights(**kw)
    updates = {"weights": weights}
    if args.seed_data is not None:
        updates["seed_data"] = args.seed_data
    if args.seed_init is not None:
        updates["seed_init"] = args.seed_init
    if args.seed_sample is not None:
        updates["seed_sample"] = args.seed_sample
    if args.epochs is not None:
        updates["epochs"] = args.epochs
    return replace(config, **updates)


def _prepare_out(args):
    os.makedirs(args.out, exist_ok=True)
    probe = os.path.join(args.out, ".write-probe")
    with open(probe, "w", encoding="utf-8") as fh:
        fh.write("")
    os.remove(probe)
    return args.out


def _write_meta(out, verb, args, extra=None):
    meta = {
        "command": verb,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    if not args.no_timestamp:
        meta["timestamp"] = datetime.now(timezone.utc).isoformat()
    if extra:
        meta.update(extra)
    with open(os.path.join(out, "meta.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _progress(args):
    if not args.verbose:
        return None

    def report(epoch, row):
        print(f"epoch {epoch}: mmd={row['mmd']:.4f} structure={row['structure']:.4f}", file=sys.stderr)

    return report


def _final_window(values, fraction=0.2):
    n = max(1, math.ceil(len(values) * fraction))
    return np.asarray(values[-n:], dtype=np.float64)


def _cmd_train(args):
    config = _resolve_config(args)
    out = _prepare_out(args)
    history = train(config, progress=_progress(args))
    history.write_csv(os.path.join(out, "history.csv"))
    save_tensors(os.path.join(out, "checkpoint.tns"), history.final_params)
    write_config(config, os.path.join(out, "config.txt"))
    _write_meta(out, "train", args, {"epochs": config.epochs})
    return 0


def _arm_config(config, label):
    """Config for one K arm; 'all' keeps every candidate (no pruning)."""
    kw = asdict(config.weights)
    if label == "all":
        kw["k"] = config.s_per_layer - 1
        kw["theta"] = -math.inf
    else:
        kw["k"] = int(label)
    return replace(config, weights=ObjectiveWeights(**kw))


def _cmd_ablate_k(args):
    config = _resolve_config(args)
    out = _prepare_out(args)
    labels = [part.strip() for part in args.k_values.split(",") if part.strip()]
    seeds = [int(part) for part in args.seeds.split(",") if part.strip()]
    if not labels or not seeds:
        raise ValueError("ablate-k: need at least one K value and one seed")
    mmd_series = {}
    var_rows = []
    for seed in seeds:
        seeded = replace(config, seed_data=seed, seed_init=seed, seed_sample=seed)
        for label in labels:
            arm = _arm_config(seeded, label)
            history = train(arm, progress=_progress(args))
            col = f"k{label}" if len(seeds) == 1 else f"k{label}_s{seed}"
            mmd = history.column("mmd")
            mmd_series[col] = mmd
            window = _final_window(mmd)
            var_rows.append(
                {
                    "seed": seed,
                    "k": label,
                    "mmd_var_final": float(np.var(window)),
                    "mmd_mean_final": float(np.mean(window)),
                }
            )
    epochs = len(next(iter(mmd_series.values())))
    with open(os.path.join(out, "stability.csv"), "w", encoding="utf-8", newline="\n") as fh:
        cols = list(mmd_series)
        fh.write(",".join(["epoch"] + cols) + "\n")
        for e in range(epochs):
            cells = [str(e)] + [format_float(mmd_series[c][e]) for c in cols]
            fh.write(",".join(cells) + "\n")
    with open(os.path.join(out, "variance.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("seed,k,mmd_var_final,mmd_mean_final\n")
        for row in var_rows:
            fh.write(
                f"{row['seed']},{row['k']},{format_float(row['mmd_var_final'])},{format_float(row['mmd_mean_final'])}\n"
            )
    _write_meta(out, "ablate-k", args, {"k_values": labels, "seeds": seeds})
    return 0


def _cmd_ablate_layers(args):
    config = _resolve_config(args)
    out = _prepare_out(args)
    sets = []
    for part in args.layer_sets.split(";"):
        part = part.strip()
        if part:
            sets.append(tuple(int(x) for x in part.split(",")))
    if not sets:
        raise ValueError("ablate-layers: need at least one layer set")
    history_cols = {}
    rows = []
    for layer_set in sets:
        arm = replace(config, tap_layers=layer_set)
        history = train(arm, progress=_progress(args))
        label = "layers_" + "_".join(str(x) for x in layer_set)
        mmd = history.column("mmd")
        structure = history.column("structure")
        history_cols[label] = mmd
        rows.append(
            {
                "arm": label,
                "tap_layers": ";".join(str(x) for x in layer_set),
                "mmd_final": float(mmd[-1]),
                "mmd_mean_final": float(np.mean(_final_window(mmd))),
                "structure_final": float(structure[-1]),
                "structure_mean_final": float(np.mean(_final_window(structure))),
            }
        )
    with open(os.path.join(out, "layers.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("arm,tap_layers,mmd_final,mmd_mean_final,structure_final,structure_mean_final\n")
        for row in rows:
            fh.write(
                ",".join(
                    [
                        row["arm"],
                        row["tap_layers"],
                        format_float(row["mmd_final"]),
                        format_float(row["mmd_mean_final"]),
                        format_float(row["structure_final"]),
                        format_float(row["structure_mean_final"]),
                    ]
                )
                + "\n"
            )
    epochs = len(next(iter(history_cols.values())))
    with open(os.path.join(out, "layers_history.csv"), "w", encoding="utf-8", newline="\n") as fh:
        cols = list(history_cols)
        fh.write(",".join(["epoch"] + cols) + "\n")
        for e in range(epochs):
            fh.write(",".join([str(e)] + [format_float(history_cols[c][e]) for c in cols]) + "\n")
    _write_meta(out, "ablate-layers", args, {"layer_sets": [list(s) for s in sets]})
    return 0


def _cmd_mi_diagnose(args):
    config = _resolve_config(args)
    out = _prepare_out(args)
    history = train(config, progress=_progress(args))
    history.write_mi_csv(os.path.join(out, "mi.csv"))
    write_config(config, os.path.join(out, "config.txt"))
    _write_meta(out, "mi-diagnose", args, {"epochs": config.epochs})
    return 0


def _cmd_dump_similarity(args):
    config = _resolve_config(args)
    out = _prepare_out(args)
    nets = ToyNets(
        in_channels=config.domain_x.channels,
        tap_layers=config.tap_layers,
        seed_init=config.seed_init,
    )
    if args.checkpoint:
        nets.load_state(args.checkpoint)
    xs_eval, _ = make_dataset(
        config.domain_x, config.domain_y, config.n_eval, config.n_eval, (config.seed_data, 1)
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed_sample)))
    tape = Tape()
    bound = nets.bind(tape)
    x = bound.lift(xs_eval[0])
    generated, acts = bound.generate(x)
    taps = bound.tap_activations(acts)
    gen_taps = bound.tap_activations(bound.encode_image(generated))
    locations = [
        sample_locations(t.shape[1], t.shape[2], min(config.s_per_layer, t.shape[1] * t.shape[2]), rng)
        for t in taps
    ]
    real_stack = bound.project_taps(taps, locations, config.normalize_features)
    fake_stack = bound.project_taps(gen_taps, locations, config.normalize_features)
    for layer_id, real_lf, fake_lf in zip(config.tap_layers, real_stack, fake_stack):
        sim = prune(similarity_matrix(fake_lf.features, real_lf.features), config.weights.theta)
        negset = rank_topk(sim, config.weights.k, on_empty=config.on_empty_rows)
        write_similarity_csv(sim, negset, os.path.join(out, f"similarity_layer{layer_id}.csv"))
    write_features_csv(real_stack, os.path.join(out, "features_source.csv"))
    write_features_csv(fake_stack, os.path.join(out, "features_translated.csv"))
    _write_meta(out, "dump-similarity", args, {"checkpoint": args.checkpoint or ""})
    return 0


def _cmd_selftest(_args):
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


_COMMANDS = {
    "train": _cmd_train,
    "ablate-k": _cmd_ablate_k,
    "ablate-layers": _cmd_ablate_layers,
    "mi-diagnose": _cmd_mi_diagnose,
    "dump-similarity": _cmd_dump_similarity,
    "selftest": _cmd_selftest,
}


def run(argv=None):
    """Parse argv and execute; returns the process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.verb](args)
    except TrainingAborted as err:
        out = getattr(args, "out", None)
        if out:
            try:
                os.makedirs(out, exist_ok=True)
                save_tensors(os.path.join(out, "abort_dump.tns"), err.payload)
                print(f"diagnostic dump written to {out}/abort_dump.tns", file=sys.stderr)
            except OSError:
                pass
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
