"""Per-layer patch feature extraction.

An encoder (a stack of 3x3 conv + relu stages) is run over an image, a set
of spatial locations is sampled per tap layer, and the activations at those
locations are pushed through a small per-layer projection head. The same
locations must be used for a source image and its translation within one
step; that pairing is what defines the positives downstream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    conv2d,
    gather_spatial,
    l2_normalize,
    matmul,
    relu,
)
from .serialization import format_float

__all__ = [
    "EncoderSpec",
    "LayerFeatures",
    "FeatureStack",
    "encode",
    "sample_locations",
    "project",
    "write_features_csv",
]


@dataclass(frozen=True)
class EncoderSpec:
    """Channel plan of the conv encoder plus which stage outputs are tapped.

    Tap layers are 1-based stage indices, strictly increasing.
    """

    in_channels: int = 1
    stage_channels: tuple = (8, 16)
    tap_layers: tuple = (1, 2)

    def __post_init__(self):
        if not self.stage_channels:
            raise ValueError("EncoderSpec: at least one stage required")
        if not self.tap_layers:
            raise ValueError("EncoderSpec: tap_layers must be nonempty")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ValueError("EncoderSpec: tap_layers must be strictly increasing")
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > len(self.stage_channels):
            raise ValueError("EncoderSpec: tap layer outside encoder depth")

    def tap_channels(self):
        return tuple(self.stage_channels[l - 1] for l in self.tap_layers)


@dataclass
class LayerFeatures:
    layer: int
    locations: np.ndarray
    features: Tensor
    normalized: bool

    def __post_init__(self):
        if len(np.unique(self.locations)) != len(self.locations):
            raise ValueError("LayerFeatures: locations must be distinct")


@dataclass
class FeatureStack:
    layers: list

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def locations(self):
        return [lf.locations for lf in self.layers]


def encode(image, spec, stage_params):
    """Run the conv+relu stages; returns every stage output, taps included.

    stage_params is a sequence of (kernel, bias) leaf tensors matching the
    spec's channel plan. All outputs stay on the image's tape.
    """
    if image.data.ndim != 3 or image.shape[0] != spec.in_channels:
        raise ValueError(
            f"encode: image shape {image.shape} does not match spec "
            f"({spec.in_channels} input channels)"
        )
    if len(stage_params) != len(spec.stage_channels):
        raise ValueError("encode: one (kernel, bias) pair per stage required")
    acts = []
    h = image
    for stage, (kernel, bias) in enumerate(stage_params):
        if kernel.shape[0] != spec.stage_channels[stage]:
            raise ValueError(f"encode: stage {stage + 1} channel mismatch")
        h = relu(conv2d(h, kernel, bias))
        acts.append(h)
    return acts


def sample_locations(height, width, count, rng):
    """Sample `count` distinct flat spatial indices, ascending order.

    Uniform without replacement from the given rng stream; deterministic
    given the stream state.
    """
    total = int(height) * int(width)
    count = int(count)
    if count < 1:
        raise ValueError("sample_locations: count must be >= 1")
    if count > total:
        raise ValueError(
            f"sample_locations: requested {count} of {total} available positions"
        )
    picked = rng.choice(total, size=count, replace=False)
    return np.sort(picked).astype(np.int64)


def project(activations, locations, heads, normalize=True):
    """Project tapped activations at sampled locations through the heads.

    activations / locations / heads line up per tap layer; each head is
    ((w1, b1), (w2, b2)) leaf tensors forming a two-layer perceptron with a
    relu between. Rows are L2-normalized when `normalize` is set. Returns a
    FeatureStack; gradients flow into both the encoder and the heads.
    """
    if not (len(activations) == len(locations) == len(heads)):
        raise ValueError("project: per-layer inputs must align")
    layers = []
    for idx, (act, locs, head) in enumerate(zip(activations, locations, heads)):
        (w1, b1), (w2, b2) = head
        if w1.shape[0] != act.shape[0]:
            raise ValueError(
                f"project: head {idx} expects {w1.shape[0]} channels, activation has {act.shape[0]}"
            )
        rows = gather_spatial(act, locs)
        hidden = relu(add(matmul(rows, w1), b1))
        feats = add(matmul(hidden, w2), b2)
        if normalize:
            feats = l2_normalize(feats)
        layers.append(LayerFeatures(idx + 1, np.asarray(locs, dtype=np.int64), feats, normalize))
    return FeatureStack(layers)


def write_features_csv(stack, path):
    """Dump a feature stack as rows of `layer,location,c0..cC`."""
    width = max(lf.features.shape[1] for lf in stack)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "location"] + [f"c{i}" for i in range(width)])
        for lf in stack:
            for loc, row in zip(lf.locations, lf.features.data):
                writer.writerow([lf.layer, int(loc)] + [format_float(v) for v in row])
