"""Trainable building blocks: dense layers, recurrent cells, attention.

Every layer registers its parameters in a shared ParamStore under a
dotted name prefix at construction time, so creation order (and with it
seeded initialization and checkpoint layout) is fixed by the order the
model builds its layers.

Initialization: weights are Glorot-uniform, ``U(+-sqrt(6/(fan_in+fan_out)))``;
biases start at zero except the LSTM forget-gate bias, which starts at 1
so early training does not flush cell state.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError, DimensionError

LAYER_NORM_EPS = 1e-5


def glorot_uniform(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


_ACTIVATIONS = {
    None: lambda x: x,
    "linear": lambda x: x,
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}


class DenseLayer:
    """Affine map ``x @ W.T + b`` with an optional activation.

    ``W`` has shape [out_dim x in_dim]; inputs may carry leading batch
    or sequence axes.
    """

    def __init__(self, store, name, in_dim, out_dim, rng, activation=None):
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation '{activation}'")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.W = store.create(f"{name}.W", glorot_uniform(rng, out_dim, in_dim))
        self.b = store.create(f"{name}.b", np.zeros(out_dim))

    def forward(self, x):
        x = ad.as_node(x)
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"dense layer expects last dim {self.in_dim}, got {x.shape}"
            )
        out = ad.matmul(x, _transpose_2d(self.W)) + self.b
        return _ACTIVATIONS[self.activation](out)


def _transpose_2d(w):
    return ad.transpose(w, (1, 0))


def _swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ad.transpose(x, axes)


class GruCell:
    """Gated recurrent unit step.

    Convention: z and r gates read [x; h]; the candidate reads
    [x; r*h]; the new state is (1-z)*candidate + z*h. With all
    parameters zero the state halves each step.
    """

    def __init__(self, store, name, in_dim, q, rng):
        self.in_dim = in_dim
        self.q = q
        joint = in_dim + q
        self.W_z = store.create(f"{name}.W_z", glorot_uniform(rng, q, joint))
        self.b_z = store.create(f"{name}.b_z", np.zeros(q))
        self.W_r = store.create(f"{name}.W_r", glorot_uniform(rng, q, joint))
        self.b_r = store.create(f"{name}.b_r", np.zeros(q))
        self.W_h = store.create(f"{name}.W_h", glorot_uniform(rng, q, joint))
        self.b_h = store.create(f"{name}.b_h", np.zeros(q))

    def step(self, x, h):
        x, h = ad.as_node(x), ad.as_node(h)
        xh = ad.concat([x, h], axis=-1)
        z = ad.sigmoid(ad.matmul(xh, _transpose_2d(self.W_z)) + self.b_z)
        r = ad.sigmoid(ad.matmul(xh, _transpose_2d(self.W_r)) + self.b_r)
        xrh = ad.concat([x, r * h], axis=-1)
        candidate = ad.tanh(ad.matmul(xrh, _transpose_2d(self.W_h)) + self.b_h)
        return (1.0 - z) * candidate + z * h


class LstmCell:
    """Standard LSTM step: c' = f*c + i*tanh(...), h' = o*tanh(c')."""

    def __init__(self, store, name, in_dim, q, rng):
        self.in_dim = in_dim
        self.q = q
        joint = in_dim + q
        self.W_i = store.create(f"{name}.W_i", glorot_uniform(rng, q, joint))
        self.b_i = store.create(f"{name}.b_i", np.zeros(q))
        self.W_f = store.create(f"{name}.W_f", glorot_uniform(rng, q, joint))
        self.b_f = store.create(f"{name}.b_f", np.ones(q))
        self.W_o = store.create(f"{name}.W_o", glorot_uniform(rng, q, joint))
        self.b_o = store.create(f"{name}.b_o", np.zeros(q))
        self.W_c = store.create(f"{name}.W_c", glorot_uniform(rng, q, joint))
        self.b_c = store.create(f"{name}.b_c", np.zeros(q))

    def step(self, x, h, c):
        x, h, c = ad.as_node(x), ad.as_node(h), ad.as_node(c)
        xh = ad.concat([x, h], axis=-1)
        i = ad.sigmoid(ad.matmul(xh, _transpose_2d(self.W_i)) + self.b_i)
        f = ad.sigmoid(ad.matmul(xh, _transpose_2d(self.W_f)) + self.b_f)
        o = ad.sigmoid(ad.matmul(xh, _transpose_2d(self.W_o)) + self.b_o)
        candidate = ad.tanh(ad.matmul(xh, _transpose_2d(self.W_c)) + self.b_c)
        c_next = f * c + i * candidate
        h_next = o * ad.tanh(c_next)
        return h_next, c_next


def layer_norm(x, scale, shift, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = ad.as_node(x)
    mu = ad.mean_axis(x, -1, keepdims=True)
    centered = x - mu
    var = ad.mean_axis(centered * centered, -1, keepdims=True)
    inv = ad.power(var + eps, -0.5)
    return centered * inv * scale + shift


class AttentionBlock:
    """Pre-norm transformer block: self-attention then feed-forward.

    Scores are scaled by 1/sqrt(q/heads). The feed-forward pair keeps
    hidden width q so the whole block is sized by one knob. No masking:
    the full history window is visible.
    """

    def __init__(self, store, name, q, heads, rng):
        if q % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide q ({q})")
        self.q = q
        self.heads = heads
        self.head_dim = q // heads
        self.W_q = []
        self.W_k = []
        self.W_v = []
        for h in range(heads):
            self.W_q.append(store.create(f"{name}.h{h}.W_q",
                                         glorot_uniform(rng, self.head_dim, q)))
            self.W_k.append(store.create(f"{name}.h{h}.W_k",
                                         glorot_uniform(rng, self.head_dim, q)))
            self.W_v.append(store.create(f"{name}.h{h}.W_v",
                                         glorot_uniform(rng, self.head_dim, q)))
        self.W_o = store.create(f"{name}.W_o", glorot_uniform(rng, q, q))
        self.ln1_scale = store.create(f"{name}.ln1.scale", np.ones(q))
        self.ln1_shift = store.create(f"{name}.ln1.shift", np.zeros(q))
        self.ln2_scale = store.create(f"{name}.ln2.scale", np.ones(q))
        self.ln2_shift = store.create(f"{name}.ln2.shift", np.zeros(q))
        self.ff1 = DenseLayer(store, f"{name}.ff1", q, q, rng, activation="relu")
        self.ff2 = DenseLayer(store, f"{name}.ff2", q, q, rng, activation=None)

    def forward(self, seq, return_weights=False):
        """Apply the block to ``seq`` of shape [len x q] or [batch x len x q]."""
        seq = ad.as_node(seq)
        if seq.shape[-1] != self.q:
            raise DimensionError(
                f"attention block expects last dim {self.q}, got {seq.shape}"
            )
        normed = layer_norm(seq, self.ln1_scale, self.ln1_shift)
        scale = 1.0 / np.sqrt(self.head_dim)
        contexts = []
        weights = []
        for h in range(self.heads):
            q_h = ad.matmul(normed, _transpose_2d(self.W_q[h]))
            k_h = ad.matmul(normed, _transpose_2d(self.W_k[h]))
            v_h = ad.matmul(normed, _transpose_2d(self.W_v[h]))
            scores = ad.matmul(q_h, _swap_last(k_h)) * scale
            attn = ad.softmax(scores, axis=-1)
            weights.append(attn)
            contexts.append(ad.matmul(attn, v_h))
        context = ad.concat(contexts, axis=seq.ndim - 1)
        attended = seq + ad.matmul(context, _transpose_2d(self.W_o))
        normed2 = layer_norm(attended, self.ln2_scale, self.ln2_shift)
        out = attended + self.ff2.forward(self.ff1.forward(normed2))
        if return_weights:
            return out, weights
        return out


def positional_encoding(length, dim):
    """Sinusoidal position table [length x dim]; row 0 is [0,1,0,1,...]."""
    if length < 1 or dim < 1:
        raise ConfigError("positional_encoding needs positive length and dim")
    positions = np.arange(length, dtype=ad.DTYPE)[:, None]
    pair = np.arange(0, dim, 2, dtype=ad.DTYPE)
    rates = 1.0 / np.power(10000.0, pair / dim)
    table = np.zeros((length, dim), dtype=ad.DTYPE)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, : table[:, 1::2].shape[1]]
    return table
