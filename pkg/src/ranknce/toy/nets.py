"""Tiny conv nets for the translation testbed.

Generator = 2-stage conv encoder (shared with feature extraction) plus a
2-stage conv decoder ending in tanh. Discriminator = 3 conv stages and a
global mean logit. All convs are 3x3, stride 1, padding 1, so extents never
change. Parameters live in a flat name -> float64 array dict; `bind` puts
them on a tape for one forward/backward pass.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..autodiff import conv2d, reduce_mean, relu, tanh
from ..features import EncoderSpec, encode, project
from ..serialization import load_tensors, save_tensors

__all__ = ["ToyNets", "BoundNets"]

ENC_CHANNELS = (8, 16)
DEC_CHANNELS = (8, 1)
DISC_CHANNELS = (8, 16, 1)
HEAD_HIDDEN = 32
HEAD_DIM = 32


def _conv_shapes(in_ch, out_chs):
    shapes = []
    prev = in_ch
    for out in out_chs:
        shapes.append(((out, prev, 3, 3), (out,)))
        prev = out
    return shapes


class ToyNets:
    """Parameter store with seeded init and tape binding."""

    def __init__(self, in_channels=1, tap_layers=(1, 2), seed_init=0):
        self.spec = EncoderSpec(
            in_channels=in_channels,
            stage_channels=ENC_CHANNELS,
            tap_layers=tuple(tap_layers),
        )
        self._shapes = self._parameter_shapes(in_channels)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_init)))
        self.params = {}
        for name, shape in self._shapes:
            if name.endswith("_b1") or name.endswith("_b2"):
                # small nonzero head biases: a dead patch (all-relu-zero
                # activation vector) then projects to a nonzero "null token"
                # instead of a zero row that normalization must reject
                self.params[name] = rng.normal(0.0, 1e-2, size=shape)
            elif name.endswith("_b"):
                self.params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])
                # relu layers get the doubled variance; output layers do not
                gain = 1.0 if name in ("dec2_w", "disc3_w") or name.endswith("_w2") else 2.0
                std = np.sqrt(gain / fan_in)
                self.params[name] = rng.normal(0.0, std, size=shape)

    def _parameter_shapes(self, in_channels):
        shapes = []
        for i, (wshape, bshape) in enumerate(_conv_shapes(in_channels, ENC_CHANNELS), 1):
            shapes += [(f"enc{i}_w", wshape), (f"enc{i}_b", bshape)]
        for i, (wshape, bshape) in enumerate(_conv_shapes(ENC_CHANNELS[-1], DEC_CHANNELS), 1):
            shapes += [(f"dec{i}_w", wshape), (f"dec{i}_b", bshape)]
        for i, (wshape, bshape) in enumerate(_conv_shapes(in_channels, DISC_CHANNELS), 1):
            shapes += [(f"disc{i}_w", wshape), (f"disc{i}_b", bshape)]
        for layer, c in zip(self.spec.tap_layers, self.spec.tap_channels()):
            shapes += [
                (f"head{layer}_w1", (c, HEAD_HIDDEN)),
                (f"head{layer}_b1", (HEAD_HIDDEN,)),
                (f"head{layer}_w2", (HEAD_HIDDEN, HEAD_DIM)),
                (f"head{layer}_b2", (HEAD_DIM,)),
            ]
        return shapes

    def generator_param_names(self):
        """Parameters the generator step updates: encoder, decoder, heads."""
        return [n for n, _ in self._shapes if not n.startswith("disc")]

    def discriminator_param_names(self):
        return [n for n, _ in self._shapes if n.startswith("disc")]

    def bind(self, tape):
        return BoundNets(self, tape)

    # -- numpy-only forward paths (identical arithmetic, no tape) --

    def generate_array(self, image):
        h = np.asarray(image, dtype=np.float64)
        for i in range(1, len(ENC_CHANNELS) + 1):
            h = kernels.conv2d_forward(h, self.params[f"enc{i}_w"], self.params[f"enc{i}_b"])
            h = np.where(h > 0.0, h, 0.0)
        h = kernels.conv2d_forward(h, self.params["dec1_w"], self.params["dec1_b"])
        h = np.where(h > 0.0, h, 0.0)
        h = kernels.conv2d_forward(h, self.params["dec2_w"], self.params["dec2_b"])
        return np.tanh(h)

    def save(self, path):
        save_tensors(path, self.params)

    def load_state(self, path):
        loaded = load_tensors(path)
        for name, shape in self._shapes:
            if name not in loaded:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if loaded[name].shape != tuple(shape):
                raise ValueError(
                    f"checkpoint parameter {name!r} has shape {loaded[name].shape}, expected {tuple(shape)}"
                )
        self.params = {name: loaded[name] for name, _ in self._shapes}


class BoundNets:
    """One tape's view of the parameters, exposing the forward passes the
    objective needs. Leaves are created in fixed name order so node ids,
    and therefore backward order, are identical across steps."""

    def __init__(self, nets, tape):
        self.nets = nets
        self.spec = nets.spec
        self.tape = tape
        self.leaves = {name: tape.leaf(arr, name) for name, arr in nets.params.items()}

    def lift(self, image):
        return self.tape.leaf(image, "image")

    def _stage_params(self, prefix, count):
        return [
            (self.leaves[f"{prefix}{i}_w"], self.leaves[f"{prefix}{i}_b"])
            for i in range(1, count + 1)
        ]

    def generate(self, x):
        acts = encode(x, self.spec, self._stage_params("enc", len(ENC_CHANNELS)))
        h = relu(conv2d(acts[-1], self.leaves["dec1_w"], self.leaves["dec1_b"]))
        out = tanh(conv2d(h, self.leaves["dec2_w"], self.leaves["dec2_b"]))
        return out, acts

    def encode_image(self, image):
        return encode(image, self.spec, self._stage_params("enc", len(ENC_CHANNELS)))

    def tap_activations(self, acts):
        return [acts[layer - 1] for layer in self.spec.tap_layers]

    def project_taps(self, taps, locations, normalize=True):
        heads = [
            (
                (self.leaves[f"head{layer}_w1"], self.leaves[f"head{layer}_b1"]),
                (self.leaves[f"head{layer}_w2"], self.leaves[f"head{layer}_b2"]),
            )
            for layer in self.spec.tap_layers
        ]
        return project(taps, locations, heads, normalize)

    def discriminate(self, image):
        h = image
        for i in range(1, len(DISC_CHANNELS)):
            h = relu(conv2d(h, self.leaves[f"disc{i}_w"], self.leaves[f"disc{i}_b"]))
        last = len(DISC_CHANNELS)
        logit_map = conv2d(h, self.leaves[f"disc{last}_w"], self.leaves[f"disc{last}_b"])
        return reduce_mean(logit_map)

    def grads(self, names=None):
        """Gradient arrays after backward(); zero for untouched leaves."""
        if names is None:
            names = self.leaves.keys()
        return {name: self.leaves[name].grad for name in names}
