"""Network assembly: the initial encoder-decoder saliency network and the
recurrent attentional refinement network.

The encoder shrinks an image to a spatially compact code by strided
convolutions; the decoder grows the code back to a raw (pre-sigmoid)
saliency map through unpool + convolution blocks, each 5x5 convolution
followed by a capacity-adding 1x1 convolution. The refinement network
re-uses the same encoder/decoder shapes inside a two-layer recurrent loop
that attends to one window per iteration and accumulates decoded patches
into the running map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import attention as at
from . import nn
from . import tensor as T
from .errors import ArgumentError, ShapeError
from .tensor import Tensor

DEFAULT_ITERATIONS = 9


@dataclass(frozen=True)
class Preset:
    """Shape constants tying the encoder, decoder, and recurrent state
    together: the first recurrent state shares the code's channel count and
    spatial size so the decoder can consume either."""

    name: str
    input_size: int
    encoder: tuple          # (c_in, c_out, kernel, stride, pad) per layer
    decoder: tuple          # (c_in, c_mid, c_out) per unpool+conv block
    code_channels: int
    code_size: int
    map_size: int
    state_dim: int
    loc_hidden: int
    in_channels: int = 3


_PRESETS = {
    "paper": Preset(
        name="paper", input_size=224,
        encoder=((3, 64, 5, 2, 2), (64, 128, 3, 2, 1), (128, 256, 3, 2, 1),
                 (256, 256, 3, 2, 1), (256, 256, 3, 2, 1)),
        decoder=((256, 128, 128), (128, 64, 64), (64, 32, 1)),
        code_channels=256, code_size=7, map_size=56,
        state_dim=512, loc_hidden=256),
    "toy": Preset(
        name="toy", input_size=64,
        encoder=((3, 16, 5, 2, 2), (16, 24, 3, 2, 1), (24, 32, 3, 2, 1),
                 (32, 32, 3, 2, 1)),
        decoder=((32, 24, 24), (24, 16, 16), (16, 8, 1)),
        code_channels=32, code_size=4, map_size=32,
        state_dim=64, loc_hidden=32),
    "tiny": Preset(
        name="tiny", input_size=16,
        encoder=((3, 8, 3, 2, 1), (8, 8, 3, 2, 1)),
        decoder=((8, 8, 8), (8, 4, 1)),
        code_channels=8, code_size=4, map_size=16,
        state_dim=16, loc_hidden=8),
}


def preset(name: str) -> Preset:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ArgumentError(f"unknown preset {name!r}; have {sorted(_PRESETS)}") from None


def _bn(c: int) -> nn.BatchNormParams:
    return nn.BatchNormParams(
        gamma=T.full([c], 1.0, requires_grad=True),
        beta=T.zeros([c], requires_grad=True),
        running_mean=T.zeros([c]),
        running_var=T.full([c], 1.0))


class ConvLayer:
    """conv -> optional batchnorm -> optional ReLU."""

    def __init__(self, c_in, c_out, kernel, stride, pad, rng,
                 norm: bool = True, act: bool = True):
        self.conv = nn.Conv2dParams(
            weights=T.he_normal([c_out, c_in, kernel, kernel],
                                c_in * kernel * kernel, rng, requires_grad=True),
            bias=T.zeros([c_out], requires_grad=True),
            stride=stride, padding=pad)
        self.norm = _bn(c_out) if norm else None
        self.act = act

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        x = nn.conv2d(x, self.conv)
        if self.norm is not None:
            x = nn.batchnorm(x, self.norm, mode)
        if self.act:
            x = T.relu(x)
        return x

    def tensors(self, trainable_only: bool):
        yield "w", self.conv.weights
        yield "b", self.conv.bias
        if self.norm is not None:
            yield "gamma", self.norm.gamma
            yield "beta", self.norm.beta
            if not trainable_only:
                yield "rmean", self.norm.running_mean
                yield "rvar", self.norm.running_var


class UnpoolLayer:
    def __init__(self, k: int = 2):
        self.k = k

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return nn.unpool(x, self.k)

    def tensors(self, trainable_only: bool):
        return iter(())


class Stack:
    """A named sequence of layers with flat tensor naming."""

    def __init__(self, layers: list):
        self.layers = layers

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        for layer in self.layers:
            x = layer(x, mode)
        return x

    def tensors(self, trainable_only: bool = True):
        for i, layer in enumerate(self.layers):
            for key, t in layer.tensors(trainable_only):
                yield f"{i}.{key}", t


def build_encoder(p: Preset, rng) -> Stack:
    return Stack([ConvLayer(ci, co, k, s, pd, rng) for ci, co, k, s, pd in p.encoder])


def build_decoder(p: Preset, rng) -> Stack:
    layers = []
    last = len(p.decoder) - 1
    for i, (c_in, c_mid, c_out) in enumerate(p.decoder):
        final = i == last
        layers.append(UnpoolLayer(2))
        layers.append(ConvLayer(c_in, c_mid, 5, 1, 2, rng))
        # 1x1 capacity layer; the very last one emits raw logits bare
        layers.append(ConvLayer(c_mid, c_out, 1, 1, 0, rng,
                                norm=not final, act=not final))
    return Stack(layers)


def _as_image_batch(images: Tensor, p: Preset):
    data_ndim = images.ndim
    if data_ndim == 3:
        x, squeezed = T.reshape(images, (1,) + images.shape), True
    elif data_ndim == 4:
        x, squeezed = images, False
    else:
        raise ShapeError(f"expected [3,H,W] or [B,3,H,W], got {images.shape}")
    expect = (p.in_channels, p.input_size, p.input_size)
    if x.shape[1:] != expect:
        raise ShapeError(f"preset {p.name!r} expects image shape {expect}, got {x.shape[1:]}")
    return x, squeezed


class InitialNet:
    """Single-pass saliency network: encode the whole image, decode a raw
    map, squash with a sigmoid."""

    def __init__(self, p: Preset, rng: np.random.Generator):
        self.preset = p
        self.encoder = build_encoder(p, rng)
        self.decoder = build_decoder(p, rng)

    def forward_raw(self, images: Tensor, mode: str = "infer") -> Tensor:
        x, squeezed = _as_image_batch(images, self.preset)
        r = self.decoder(self.encoder(x, mode), mode)
        if squeezed:
            r = T.reshape(r, r.shape[1:])
        return r

    def initial_saliency(self, images: Tensor, mode: str = "infer"):
        """Raw map and its sigmoid-normalized form."""
        r0 = self.forward_raw(images, mode)
        return r0, T.sigmoid(r0)

    def tensors(self, trainable_only: bool = True):
        for key, t in self.encoder.tensors(trainable_only):
            yield f"enc.{key}", t
        for key, t in self.decoder.tensors(trainable_only):
            yield f"dec.{key}", t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors(trainable_only=True))

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.tensors(trainable_only=False))


@dataclass
class RefinementTrace:
    """Per-iteration record of a refinement rollout. Entry 0 is the
    whole-image observation; later entries hold the attended window, the
    sampled patch, the written-back delta, and the running raw map."""

    windows: list = field(default_factory=list)    # [B,3] arrays
    patches: list = field(default_factory=list)    # [B,3,H,W] or None
    deltas: list = field(default_factory=list)     # [B,1,M,M] or None
    maps: list = field(default_factory=list)       # [B,1,M,M]
    raw_final: Optional[Tensor] = None             # graph-attached final map

    def __len__(self):
        return len(self.maps)


class RefineNet:
    """Recurrent attentional refinement: a context encoder for iteration 0,
    a shared window encoder/decoder, a convolutional first recurrent layer,
    a fully-connected second recurrent layer, and a two-layer localization
    regressor feeding the attention constraint mapping."""

    def __init__(self, p: Preset, rng: np.random.Generator,
                 n_iterations: int = DEFAULT_ITERATIONS):
        if n_iterations < 1:
            raise ArgumentError("need at least the whole-image iteration")
        self.preset = p
        self.n_iterations = n_iterations
        c, s, d = p.code_channels, p.code_size, p.state_dim
        self.context = build_encoder(p, rng)
        self.encoder = build_encoder(p, rng)
        self.decoder = build_decoder(p, rng)
        self.w1_i = nn.Conv2dParams(
            T.he_normal([c, c, 3, 3], c * 9, rng, requires_grad=True),
            bias=T.zeros([c], requires_grad=True), stride=1, padding=1)
        self.w1_r = nn.Conv2dParams(
            T.he_normal([c, c, 3, 3], c * 9, rng, requires_grad=True),
            bias=None, stride=1, padding=1)
        flat = c * s * s
        self.w2_i = nn.LinearParams(
            T.he_normal([d, flat], flat, rng, requires_grad=True),
            bias=T.zeros([d], requires_grad=True))
        self.w2_r = nn.LinearParams(
            T.he_normal([d, d], d, rng, requires_grad=True), bias=None)
        self.loc1 = nn.LinearParams(
            T.he_normal([p.loc_hidden, d], d, rng, requires_grad=True),
            bias=T.zeros([p.loc_hidden], requires_grad=True))
        self.loc2 = nn.LinearParams(
            T.he_normal([3, p.loc_hidden], p.loc_hidden, rng, requires_grad=True),
            bias=T.zeros([3], requires_grad=True))

    # -- one step of each recurrence ------------------------------------

    def conv_recurrent_step(self, z: Tensor, h1_prev: Optional[Tensor]) -> Tensor:
        pre = nn.conv2d(z, self.w1_i)
        if h1_prev is not None:
            pre = T.add(pre, nn.conv2d(h1_prev, self.w1_r))
        return T.relu(pre)

    def fc_recurrent_step(self, h1: Tensor, h2_prev: Optional[Tensor]) -> Tensor:
        b = h1.shape[0]
        flat = T.reshape(h1, (b, h1.size // b))
        pre = nn.linear(flat, self.w2_i)
        if h2_prev is not None:
            pre = T.add(pre, nn.linear(h2_prev, self.w2_r))
        return T.relu(pre)

    def localize(self, h2: Tensor) -> Tensor:
        raw = nn.linear(T.relu(nn.linear(h2, self.loc1)), self.loc2)
        return at.constrain_attention(raw)

    def init_state(self, images: Tensor, mode: str = "infer"):
        """Whole-image observation: run the context encoder through both
        recurrences with zero previous state, then pick the first window."""
        z = self.context(images, mode)
        h1 = self.conv_recurrent_step(z, None)
        h2 = self.fc_recurrent_step(h1, None)
        return (h1, h2), self.localize(h2)

    def attend(self, images: Tensor, tau: Tensor) -> Tensor:
        size = self.preset.input_size
        return at.st(images, tau, size, size)

    def refine_step(self, r_prev: Tensor, h1: Tensor, tau: Tensor, mode: str = "infer"):
        """Decode the current state into a patch, write it back through the
        inverse transformer, and add it inside the window only."""
        patch = self.decoder(h1, mode)
        m = self.preset.map_size
        delta = at.st_inverse(patch, tau, m, m)
        support = at.inverse_support(tau, m, m, m, m)[:, None, :, :]
        return T.masked_add(r_prev, delta, support), delta

    def run_refinement(self, images: Tensor, r0: Tensor, n: Optional[int] = None,
                       mode: str = "infer"):
        """Full rollout: iteration 0 observes the whole image; each later
        iteration attends, encodes, updates both recurrent states, and
        accumulates a refinement delta. Returns the final sigmoid map and
        the per-iteration trace."""
        n = self.n_iterations if n is None else n
        if n < 1:
            raise ArgumentError("refinement needs n >= 1")
        x, squeezed = _as_image_batch(images, self.preset)
        b = x.shape[0]
        m = self.preset.map_size
        r = T.reshape(r0, (1,) + r0.shape) if r0.ndim == 3 else r0
        if r.shape != (b, 1, m, m):
            raise ShapeError(f"running map must be [B,1,{m},{m}], got {r0.shape}")

        trace = RefinementTrace()
        (h1, h2), tau = self.init_state(x, mode)
        trace.windows.append(np.tile([1.0, 0.0, 0.0], (b, 1)))
        trace.patches.append(None)
        trace.deltas.append(None)
        trace.maps.append(r.data.copy())

        for _ in range(1, n):
            patch_in = self.attend(x, tau)
            z = self.encoder(patch_in, mode)
            h1 = self.conv_recurrent_step(z, h1)
            r, delta = self.refine_step(r, h1, tau, mode)
            h2 = self.fc_recurrent_step(h1, h2)
            trace.windows.append(tau.data.copy())
            trace.patches.append(patch_in.data.copy())
            trace.deltas.append(delta.data.copy())
            trace.maps.append(r.data.copy())
            tau = self.localize(h2)

        trace.raw_final = r
        s_refined = T.sigmoid(r)
        if squeezed:
            s_refined = T.reshape(s_refined, s_refined.shape[1:])
        return s_refined, trace

    # -- parameter plumbing ----------------------------------------------

    def load_decoder_from(self, other: InitialNet):
        """Adopt the trained initial decoder's weights (copied, not shared)."""
        mine = dict(self.decoder.tensors(trainable_only=False))
        theirs = dict(other.decoder.tensors(trainable_only=False))
        if mine.keys() != theirs.keys():
            raise ShapeError("decoder architectures differ; cannot transfer weights")
        for key, t in mine.items():
            if t.shape != theirs[key].shape:
                raise ShapeError(f"decoder tensor {key} shape mismatch")
            t.data = theirs[key].data.copy()

    def tensors(self, trainable_only: bool = True):
        for key, t in self.context.tensors(trainable_only):
            yield f"ctx.{key}", t
        for key, t in self.encoder.tensors(trainable_only):
            yield f"enc.{key}", t
        for key, t in self.decoder.tensors(trainable_only):
            yield f"dec.{key}", t
        yield "rec1.wi", self.w1_i.weights
        yield "rec1.b", self.w1_i.bias
        yield "rec1.wr", self.w1_r.weights
        yield "rec2.wi", self.w2_i.weights
        yield "rec2.b", self.w2_i.bias
        yield "rec2.wr", self.w2_r.weights
        yield "loc.w1", self.loc1.weights
        yield "loc.b1", self.loc1.bias
        yield "loc.w2", self.loc2.weights
        yield "loc.b2", self.loc2.bias

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors(trainable_only=True))

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.tensors(trainable_only=False))


def refinement_loss(r_final: Tensor, target) -> Tensor:
    """Binary cross-entropy of the final map against a binary groundtruth,
    computed in logit space for stability."""
    return nn.bce_with_logits(r_final, target)


def saliency_loss(s_map: Tensor, target) -> Tensor:
    """Probability-space BCE for already-normalized maps."""
    return nn.bce_loss(s_map, target)
