"""Block-masked per-node MLPs and the two SCM transforms built on them.

A MaskedBlockMLP is an additive-model building block: the hidden layers are
d*m wide, every unit is owned by exactly one of the d nodes (contiguous
groups of m), and weights may only connect units of the same node. Output i
is therefore a function of input i alone.

Two compositions are used:

- noise -> latent: z = f4((I - A^T)^-1 f3(eps))
- causal layer:    z_hat_i = g2_i(sum_j w[j, i] * g1_j(z_j)), i.e.
                   g2(A^T g1(z)) with one scalar embedding per node
"""

import torch
import torch.nn.functional as F
from torch import nn

from gcvamd.errors import SingularSystemError

__all__ = ["MaskedBlockMLP", "NoiseToLatent", "CausalLayerGAE", "lz_loss"]


class MaskedBlockMLP(nn.Module):
    """Three dense layers (d -> d*m -> d*m -> d), ELU/ELU/linear, block-masked.

    Masked weights are stored as exact zeros, contribute nothing to the
    forward pass (the effective weight is weight * mask), and stay pinned at
    zero as long as apply_masks() is called after each optimizer step.
    """

    def __init__(self, d, hidden_multiplier=4, dtype=torch.float64, generator=None,
                 init_gain=1.0):
        super().__init__()
        if d < 1 or hidden_multiplier < 1:
            raise ValueError("d and hidden_multiplier must be positive")
        self.d = d
        self.m = hidden_multiplier
        dm = d * hidden_multiplier
        node_of_hidden = torch.arange(dm) // hidden_multiplier
        node_of_io = torch.arange(d)
        masks = [
            (node_of_hidden[:, None] == node_of_io[None, :]).to(dtype),
            (node_of_hidden[:, None] == node_of_hidden[None, :]).to(dtype),
            (node_of_io[:, None] == node_of_hidden[None, :]).to(dtype),
        ]
        fan_in_block = [1, hidden_multiplier, hidden_multiplier]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for k, mask in enumerate(masks):
            self.register_buffer(f"mask{k}", mask)
            w = torch.empty(mask.shape, dtype=dtype)
            w.uniform_(-0.5, 0.5, generator=generator)
            w = w * (init_gain / fan_in_block[k] ** 0.5) * mask
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(mask.shape[0], dtype=dtype)))

    def _masks(self):
        return (self.mask0, self.mask1, self.mask2)

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ValueError(f"expected last dimension {self.d}, got {x.shape[-1]}")
        for k, mask in enumerate(self._masks()):
            x = F.linear(x, self.weights[k] * mask, self.biases[k])
            if k < 2:
                x = F.elu(x)
        return x

    @torch.no_grad()
    def apply_masks(self):
        """Re-pin masked positions to exact zero after an optimizer step."""
        for k, mask in enumerate(self._masks()):
            self.weights[k].mul_(mask)

    @torch.no_grad()
    def set_unit_weights(self):
        """All in-block weights 1, biases 0. Test hook for hand-propagated oracles."""
        for k, mask in enumerate(self._masks()):
            self.weights[k].copy_(mask)
            self.biases[k].zero_()


class NoiseToLatent(nn.Module):
    """z = f4((I - A^T)^-1 f3(eps)) with two independent masked blocks."""

    def __init__(self, d, hidden_multiplier=4, dtype=torch.float64, generator=None):
        super().__init__()
        self.d = d
        self.f3 = MaskedBlockMLP(d, hidden_multiplier, dtype=dtype, generator=generator)
        self.f4 = MaskedBlockMLP(d, hidden_multiplier, dtype=dtype, generator=generator)

    def forward(self, eps, adjacency):
        f = self.f3(eps)
        system = torch.eye(self.d, dtype=f.dtype) - adjacency.T
        if torch.abs(torch.linalg.det(system)) < 1e-12:
            raise SingularSystemError(
                "(I - A^T) is singular; A contains a cycle with unit weight product"
            )
        y = torch.linalg.solve(system, f.T).T
        return self.f4(y)


class CausalLayerGAE(nn.Module):
    """Graph-autoencoder causal layer: z_hat = g2(A^T g1(z)).

    g1 embeds each node to one scalar, A^T mixes embeddings across parents
    (component j of the mixed vector is sum_i w[i, j] * g1(z)[i]), and g2
    maps the mixed values back per node.
    """

    def __init__(self, d, hidden_multiplier=4, dtype=torch.float64, generator=None,
                 init_gain=1.0):
        super().__init__()
        self.d = d
        self.g1 = MaskedBlockMLP(d, hidden_multiplier, dtype=dtype, generator=generator,
                                 init_gain=init_gain)
        self.g2 = MaskedBlockMLP(d, hidden_multiplier, dtype=dtype, generator=generator,
                                 init_gain=init_gain)

    def forward(self, z, adjacency):
        return self.g2(self.g1(z) @ adjacency)


def lz_loss(layer, adjacency, z_batch):
    """Sum over samples of ||z - g2(A^T g1(z))||^2 (no noise term)."""
    if z_batch.ndim != 2 or z_batch.shape[0] == 0:
        raise ValueError("z_batch must be a nonempty N x d matrix")
    residual = z_batch - layer(z_batch, adjacency)
    return residual.square().sum()
