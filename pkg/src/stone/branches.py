"""Branch encoders: sensor-history window in, coefficient vector out.

Four interchangeable encoders map a history window [batch x K x N] to
coefficients [batch x q]. Hidden widths equal q throughout so each
encoder is sized by the single latent-dimension knob; depth counts
hidden layers (dense layers, stacked recurrent layers, or attention
blocks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .layers import (
    AttentionBlock,
    DenseLayer,
    GruCell,
    LstmCell,
    positional_encoding,
)

BRANCH_KINDS = ("fcn", "gru", "lstm", "transformer")


@dataclass(frozen=True)
class BranchConfig:
    kind: str
    n_sensors: int
    k_hist: int
    q: int = 128
    depth: int = 3
    heads: int = 8

    def validate(self):
        if self.kind not in BRANCH_KINDS:
            raise ConfigError(
                f"unknown branch kind '{self.kind}'; expected one of {BRANCH_KINDS}"
            )
        for field in ("n_sensors", "k_hist", "q", "depth"):
            if int(getattr(self, field)) < 1:
                raise ConfigError(f"branch {field} must be >= 1")
        if self.kind == "transformer":
            if self.heads < 1:
                raise ConfigError("transformer heads must be >= 1")
            if self.q % self.heads != 0:
                raise ConfigError(
                    f"heads ({self.heads}) must divide q ({self.q})"
                )
        return self


class _Branch:
    """Common input contract for all encoders."""

    def __init__(self, cfg):
        self.cfg = cfg

    def _check_input(self, u):
        expected = (self.cfg.k_hist, self.cfg.n_sensors)
        if u.ndim != 3 or u.shape[1:] != expected:
            raise DimensionError(
                f"branch expects input [batch x {expected[0]} x {expected[1]}], "
                f"got {u.shape}"
            )


class FcnBranch(_Branch):
    """Flatten the window, then depth relu layers of width q, then linear."""

    def __init__(self, cfg, store, rng):
        super().__init__(cfg)
        flat = cfg.k_hist * cfg.n_sensors
        self.hidden = []
        in_dim = flat
        for i in range(cfg.depth):
            self.hidden.append(
                DenseLayer(store, f"branch.fc{i}", in_dim, cfg.q, rng,
                           activation="relu")
            )
            in_dim = cfg.q
        self.out = DenseLayer(store, "branch.out", cfg.q, cfg.q, rng)

    def encode(self, u):
        u = ad.as_node(u)
        self._check_input(u)
        h = ad.reshape(u, (u.shape[0], self.cfg.k_hist * self.cfg.n_sensors))
        for layer in self.hidden:
            h = layer.forward(h)
        return self.out.forward(h)


class _RecurrentBranch(_Branch):
    """Shared driver for stacked recurrent encoders."""

    def __init__(self, cfg, store, rng, cell_type):
        super().__init__(cfg)
        self.cells = []
        in_dim = cfg.n_sensors
        for i in range(cfg.depth):
            self.cells.append(cell_type(store, f"branch.layer{i}", in_dim,
                                        cfg.q, rng))
            in_dim = cfg.q
        self.out = DenseLayer(store, "branch.out", cfg.q, cfg.q, rng)

    def encode(self, u):
        u = ad.as_node(u)
        self._check_input(u)
        batch = u.shape[0]
        states = [self._initial_state(batch) for _ in self.cells]
        for t in range(self.cfg.k_hist):
            x = ad.index_axis(u, 1, t)
            for i, cell in enumerate(self.cells):
                states[i] = self._advance(cell, x, states[i])
                x = self._hidden_of(states[i])
        return self.out.forward(self._hidden_of(states[-1]))


class GruBranch(_RecurrentBranch):
    def __init__(self, cfg, store, rng):
        super().__init__(cfg, store, rng, GruCell)

    def _initial_state(self, batch):
        return ad.Node(np.zeros((batch, self.cfg.q)))

    def _advance(self, cell, x, state):
        return cell.step(x, state)

    def _hidden_of(self, state):
        return state


class LstmBranch(_RecurrentBranch):
    def __init__(self, cfg, store, rng):
        super().__init__(cfg, store, rng, LstmCell)

    def _initial_state(self, batch):
        return (ad.Node(np.zeros((batch, self.cfg.q))),
                ad.Node(np.zeros((batch, self.cfg.q))))

    def _advance(self, cell, x, state):
        return cell.step(x, state[0], state[1])

    def _hidden_of(self, state):
        return state[0]


class TransformerBranch(_Branch):
    """Embed per step, add positions, attend, mean-pool over time."""

    def __init__(self, cfg, store, rng):
        super().__init__(cfg)
        self.embed = DenseLayer(store, "branch.embed", cfg.n_sensors, cfg.q, rng)
        self.blocks = [
            AttentionBlock(store, f"branch.block{i}", cfg.q, cfg.heads, rng)
            for i in range(cfg.depth)
        ]
        self.out = DenseLayer(store, "branch.out", cfg.q, cfg.q, rng)
        self.positions = positional_encoding(cfg.k_hist, cfg.q)

    def encode(self, u):
        u = ad.as_node(u)
        self._check_input(u)
        h = self.embed.forward(u) + self.positions
        for block in self.blocks:
            h = block.forward(h)
        pooled = ad.mean_axis(h, 1)
        return self.out.forward(pooled)


_BUILDERS = {
    "fcn": FcnBranch,
    "gru": GruBranch,
    "lstm": LstmBranch,
    "transformer": TransformerBranch,
}


def build_branch(cfg, store, rng):
    """Construct the encoder named by ``cfg.kind``; params land in ``store``."""
    cfg.validate()
    return _BUILDERS[cfg.kind](cfg, store, rng)
