"""A small permutation-equivariant set network with hand-written backprop.

All weights live in one flat float64 vector so that optimizers, checkpoints
and finite-difference checks work on a single array.  Layers hold views into
that vector and accumulate gradients into a matching flat gradient buffer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class SiLU:
    def forward(self, x):
        self.x = x
        self.s = _sigmoid(x)
        return x * self.s

    def backward(self, dy):
        s = self.s
        return dy * (s + self.x * s * (1.0 - s))


class Tanh:
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, dy):
        return dy * (1.0 - self.y**2)


ACTIVATIONS = {"silu": SiLU, "tanh": Tanh}


class Linear:
    """y = x W + b on the last axis; W and b are views into the flat buffers."""

    def __init__(self, n_in, n_out, params, grads, offset):
        self.n_in, self.n_out = n_in, n_out
        nw = n_in * n_out
        self.W = params[offset:offset + nw].reshape(n_in, n_out)
        self.b = params[offset + nw:offset + nw + n_out]
        self.dW = grads[offset:offset + nw].reshape(n_in, n_out)
        self.db = grads[offset + nw:offset + nw + n_out]

    @staticmethod
    def size(n_in, n_out):
        return n_in * n_out + n_out

    def forward(self, x):
        self.x = x
        return x @ self.W + self.b

    def backward(self, dy):
        x2 = self.x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.dW += x2.T @ dy2
        self.db += dy2.sum(axis=0)
        return dy @ self.W.T


class MLP:
    """Linear layers with an activation between them (none after the last)."""

    def __init__(self, widths, params, grads, offset, activation="silu"):
        self.layers: List = []
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(Linear(a, b, params, grads, offset))
            offset += Linear.size(a, b)
            if k < len(widths) - 2:
                self.layers.append(ACTIVATIONS[activation]())
        self.end = offset

    @staticmethod
    def size(widths):
        return sum(Linear.size(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def linears(self):
        return [l for l in self.layers if isinstance(l, Linear)]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def time_embedding(t, dim: int, T: float = 1.0) -> np.ndarray:
    """Sinusoidal features of t/T at geometrically spaced frequencies; shape (..., dim)."""
    t = np.asarray(t, dtype=float)[..., None] / T
    half = dim // 2
    freqs = math.pi * np.exp(np.linspace(0.0, math.log(64.0), half))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass(frozen=True)
class NetArch:
    in_dim: int
    out_dim: int
    hidden: int = 64
    depth: int = 2
    temb_dim: int = 16
    activation: str = "silu"

    def to_dict(self):
        return asdict(self)


class SetNet:
    """Per-point encoder, mean-pooled context, per-point decoder.

    encoder:  [feat_i, temb] -> h_i
    context:  c = mean_i h_i
    decoder:  [h_i, c, temb] -> out_i

    Weights are shared across points, so permuting the input points permutes
    the output rows identically.
    """

    def __init__(self, arch: NetArch, params: np.ndarray):
        self.arch = arch
        H, E = arch.hidden, arch.temb_dim
        self.enc_widths = [arch.in_dim + E] + [H] * arch.depth
        self.dec_widths = [2 * H + E] + [H] * (arch.depth - 1) + [arch.out_dim]
        if params.size != self.n_params(arch):
            raise ValueError(f"expected {self.n_params(arch)} parameters, got {params.size}")
        self.params = params
        self.grads = np.zeros_like(params)
        self.enc = MLP(self.enc_widths, params, self.grads, 0, arch.activation)
        self.enc_act = ACTIVATIONS[arch.activation]()
        self.dec = MLP(self.dec_widths, params, self.grads, self.enc.end, arch.activation)

    @staticmethod
    def n_params(arch: NetArch) -> int:
        H, E = arch.hidden, arch.temb_dim
        enc = [arch.in_dim + E] + [H] * arch.depth
        dec = [2 * H + E] + [H] * (arch.depth - 1) + [arch.out_dim]
        return MLP.size(enc) + MLP.size(dec)

    @classmethod
    def init_params(cls, arch: NetArch, rng: np.random.Generator) -> np.ndarray:
        params = np.zeros(cls.n_params(arch))
        net = cls(arch, params)
        lins = net.enc.linears() + net.dec.linears()
        for lin in lins[:-1]:
            lin.W[...] = rng.standard_normal(lin.W.shape) * math.sqrt(2.0 / lin.n_in)
        # last layer starts at zero so the initial network output vanishes
        return params

    def forward(self, feats, temb):
        """feats: (B, m, F); temb: (B, E).  Returns (B, m, out_dim)."""
        B, m, _ = feats.shape
        te = np.broadcast_to(temb[:, None, :], (B, m, temb.shape[-1]))
        h = self.enc_act.forward(self.enc.forward(np.concatenate([feats, te], axis=-1)))
        # summing sorted values makes the pooled context independent of point order, bit for bit
        c = np.sort(h, axis=1).sum(axis=1, keepdims=True) / m
        self._m = m
        dec_in = np.concatenate([h, np.broadcast_to(c, h.shape), te], axis=-1)
        return self.dec.forward(dec_in)

    def backward(self, dout):
        """Accumulate parameter gradients; returns nothing (inputs are data)."""
        H = self.arch.hidden
        d_in = self.dec.backward(dout)
        dh = d_in[..., :H] + d_in[..., H:2 * H].sum(axis=1, keepdims=True) / self._m
        self.enc.backward(self.enc_act.backward(dh))

    def zero_grad(self):
        self.grads[...] = 0.0
