"""The operator itself: coefficients x basis -> full future field.

``forward`` evaluates, for every batch row, query point r, output
channel j, and future lead k:

    y[b, r, j, k] = sum_i coeffs[b, i] * basis[r, i, j, k] + beta[j]

The sum is executed as one reshaped matrix product
[batch x q] @ [q x (P*p*K_fut)], so producing the whole horizon costs
one pass; no lead is fed back into the model. The vanilla single-lead
path is the same computation with K_fut = p = 1.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .branches import BranchConfig, build_branch
from .errors import ConfigError, ContractError, DimensionError
from .trunk import TrunkConfig, TrunkDecoder

__all__ = [
    "StoneModel",
    "build_model",
    "contract",
    "contract_values",
    "masked_lead_recomputation",
]


def contract(coeffs, basis, beta):
    """Graph-mode contraction; see module docstring for the formula."""
    coeffs, basis, beta = ad.as_node(coeffs), ad.as_node(basis), ad.as_node(beta)
    _check_contract_shapes(coeffs.shape, basis.shape, beta.shape)
    p_dim, k_fut = basis.shape[2], basis.shape[3]
    points = basis.shape[0]
    by_coeff = ad.transpose(basis, (1, 0, 2, 3))
    flat = ad.reshape(by_coeff, (basis.shape[1], points * p_dim * k_fut))
    mixed = ad.matmul(coeffs, flat)
    stacked = ad.reshape(mixed, (coeffs.shape[0], points, p_dim, k_fut))
    return stacked + ad.reshape(beta, (p_dim, 1))


def contract_values(coeffs, basis, beta):
    """Array-mode twin of ``contract``: same operations, same order.

    Kept step-for-step identical to the graph path so the two produce
    bit-identical floats; the lead-masking check below depends on that.
    """
    coeffs = np.asarray(coeffs, dtype=ad.DTYPE)
    basis = np.asarray(basis, dtype=ad.DTYPE)
    beta = np.asarray(beta, dtype=ad.DTYPE)
    _check_contract_shapes(coeffs.shape, basis.shape, beta.shape)
    p_dim, k_fut = basis.shape[2], basis.shape[3]
    points = basis.shape[0]
    flat = basis.transpose(1, 0, 2, 3).reshape(basis.shape[1],
                                               points * p_dim * k_fut)
    mixed = coeffs @ flat
    stacked = mixed.reshape(coeffs.shape[0], points, p_dim, k_fut)
    return stacked + beta.reshape(p_dim, 1)


def _check_contract_shapes(coeff_shape, basis_shape, beta_shape):
    if len(coeff_shape) != 2:
        raise DimensionError(f"coefficients must be [batch x q], got {coeff_shape}")
    if len(basis_shape) != 4:
        raise DimensionError(
            f"basis must be [P x q x p x K_fut], got {basis_shape}"
        )
    if coeff_shape[1] != basis_shape[1]:
        raise ConfigError(
            f"latent dimension mismatch: coefficients have q={coeff_shape[1]}, "
            f"basis has q={basis_shape[1]}"
        )
    if beta_shape != (basis_shape[2],):
        raise DimensionError(
            f"channel bias must have shape [{basis_shape[2]}], got {beta_shape}"
        )


def masked_lead_recomputation(coeffs_value, basis_value, beta_value, lead):
    """Recompute the field at one lead by zeroing every other lead's basis.

    Runs the identical contraction on an identically shaped basis, so
    the selected lead's numbers are bit-for-bit what the full pass
    produced: evidence that lead k never depends on emitting the others.
    """
    basis_value = np.asarray(basis_value, dtype=ad.DTYPE)
    if not 0 <= lead < basis_value.shape[3]:
        raise ContractError(
            f"lead {lead} out of range for K_fut={basis_value.shape[3]}"
        )
    masked = np.zeros_like(basis_value)
    masked[:, :, :, lead] = basis_value[:, :, :, lead]
    full = contract_values(coeffs_value, masked, beta_value)
    return full[:, :, :, lead]


class StoneModel:
    """Branch, trunk, and channel bias bound to one parameter store.

    ``norm_stats`` (set by the training pipeline) records the dataset
    statistics the model was trained under; forecasts use them to map
    back to physical units, and checkpoints carry them.
    """

    def __init__(self, branch_cfg, trunk_cfg, store, branch, trunk, beta):
        self.branch_cfg = branch_cfg
        self.trunk_cfg = trunk_cfg
        self.store = store
        self.branch = branch
        self.trunk = trunk
        self.beta = beta
        self.norm_stats = None

    @property
    def k_hist(self):
        return self.branch_cfg.k_hist

    @property
    def k_fut(self):
        return self.trunk_cfg.k_fut

    def forward(self, u_hist, coords):
        """Full forecast in normalized units: [batch x P x p x K_fut]."""
        coeffs = self.branch.encode(u_hist)
        basis = self.trunk.decode(coords)
        return contract(coeffs, basis, self.beta)

    def forward_parts(self, u_hist, coords):
        """Expose (coefficients, basis) for structural checks."""
        return self.branch.encode(u_hist), self.trunk.decode(coords)

    def forward_vanilla(self, u_snapshot, coords):
        """Single-snapshot, single-lead path: y[b, r] = sum_i b_i t_i + beta.

        Requires a model configured with k_hist = 1, K_fut = 1, p = 1;
        it is exactly ``forward`` on that configuration, reshaped.
        """
        if (self.branch_cfg.k_hist, self.trunk_cfg.k_fut, self.trunk_cfg.p) != (1, 1, 1):
            raise ConfigError(
                "vanilla path requires k_hist=1, k_fut=1, p=1; got "
                f"k_hist={self.branch_cfg.k_hist}, k_fut={self.trunk_cfg.k_fut}, "
                f"p={self.trunk_cfg.p}"
            )
        u_snapshot = ad.as_node(u_snapshot)
        if u_snapshot.ndim != 2:
            raise DimensionError(
                f"vanilla path expects [batch x N], got {u_snapshot.shape}"
            )
        u = ad.reshape(u_snapshot, (u_snapshot.shape[0], 1, u_snapshot.shape[1]))
        out = self.forward(u, coords)
        return ad.reshape(out, (out.shape[0], out.shape[1]))

    def forecast_single_pass(self, window, coords):
        """One normalized history window -> physical field [P x p x K_fut].

        The window must already be normalized with the model's stats
        (the CLI does this from the checkpoint); the output is mapped
        back to physical units with the same stats.
        """
        window = np.asarray(window, dtype=ad.DTYPE)
        if window.ndim != 2 or window.shape[0] != self.k_hist:
            raise ContractError(
                f"forecast window must be [{self.k_hist} x "
                f"{self.branch_cfg.n_sensors}], got {window.shape}"
            )
        if self.norm_stats is None:
            raise ConfigError("model has no normalization stats; train or load first")
        out = self.forward(window[None, :, :], coords)
        return self.norm_stats.invert_target(out.value[0])

    def parameter_count(self):
        return self.store.n_scalars()


def build_model(branch_cfg, trunk_cfg, seed):
    """Create a model with seed-deterministic Glorot initialization.

    Parameter creation order is fixed (branch, then trunk, then the
    channel bias), so one seed always yields one bit pattern.
    """
    branch_cfg.validate()
    trunk_cfg.validate()
    if branch_cfg.q != trunk_cfg.q:
        raise ConfigError(
            f"branch q={branch_cfg.q} and trunk q={trunk_cfg.q} must match"
        )
    store = ad.ParamStore()
    rng = np.random.default_rng(seed)
    branch = build_branch(branch_cfg, store, rng)
    trunk = TrunkDecoder(trunk_cfg, store, rng)
    beta = store.create("beta", np.zeros(trunk_cfg.p))
    return StoneModel(branch_cfg, trunk_cfg, store, branch, trunk, beta)
