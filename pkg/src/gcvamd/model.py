"""The assembled network: conv encoder, noise -> latent, causal layer, decoder.

Image tensors cross the public API as N x H x W x C in [0, 1]; channel-first
layout is internal. All randomness is drawn from caller-supplied generators.
"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from gcvamd.errors import ConfigError
from gcvamd.graph import WeightedAdjacency
from gcvamd.layers import CausalLayerGAE, MaskedBlockMLP, NoiseToLatent, lz_loss

__all__ = [
    "ConvNetConfig",
    "LossWeights",
    "LatentBatch",
    "LossComponents",
    "GcvamdModel",
    "reparameterize",
    "total_loss",
    "dag_penalty",
]

BCE_CLAMP = 1e-7

# Latent traversal candidate sets per factor index.
TRAVERSAL_SETS = {
    0: (-0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2),
    1: (-0.1, -0.05, -0.025, 0.0, 0.025, 0.05, 0.15),
    2: (-0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.3),
}


def _conv_out(size, kernel, stride):
    return (size - kernel) // stride + 1


@dataclass(frozen=True)
class ConvNetConfig:
    """Geometry of the conv encoder/decoder pair.

    Valid padding throughout; the transposed decoder chain must invert the
    encoder chain exactly (output_padding < stride picks up remainders from
    the floor division). Construction fails loudly on inconsistent geometry.
    """

    height: int = 224
    width: int = 224
    channels: int = 3
    conv_specs: tuple = ((16, 5, 3), (16, 4, 2), (32, 4, 2))
    dense_widths: tuple = (256, 64)
    latent_dim: int = 3

    def __post_init__(self):
        chain_h, chain_w = [self.height], [self.width]
        for filters, kernel, stride in self.conv_specs:
            h = _conv_out(chain_h[-1], kernel, stride)
            w = _conv_out(chain_w[-1], kernel, stride)
            if h < 1 or w < 1:
                raise ConfigError(
                    f"conv ({filters}, {kernel}x{kernel}, stride {stride}) collapses "
                    f"a {chain_h[-1]}x{chain_w[-1]} map below 1x1"
                )
            chain_h.append(h)
            chain_w.append(w)
        out_pads = []
        for k in range(len(self.conv_specs), 0, -1):
            _, kernel, stride = self.conv_specs[k - 1]
            for chain in (chain_h, chain_w):
                pad = chain[k - 1] - ((chain[k] - 1) * stride + kernel)
                if not 0 <= pad < stride:
                    raise ConfigError(
                        f"transposed conv cannot restore {chain[k]} -> {chain[k - 1]} "
                        f"with kernel {kernel}, stride {stride} (needs output padding {pad})"
                    )
            out_pads.append(chain_h[k - 1] - ((chain_h[k] - 1) * stride + kernel))
        object.__setattr__(self, "_chain_h", tuple(chain_h))
        object.__setattr__(self, "_chain_w", tuple(chain_w))
        object.__setattr__(self, "_out_pads", tuple(out_pads))

    @property
    def encoder_chain(self):
        return self._chain_h

    @property
    def decoder_chain(self):
        return tuple(reversed(self._chain_h))

    @property
    def flat_size(self):
        return self.conv_specs[-1][0] * self._chain_h[-1] * self._chain_w[-1]

    @property
    def output_paddings(self):
        """Per transposed-conv stage, innermost first."""
        return self._out_pads

    @classmethod
    def paper(cls, latent_dim=3):
        return cls(latent_dim=latent_dim)

    @classmethod
    def reduced(cls, latent_dim=3):
        """64x64 desk-scale geometry with the published layer kinds."""
        return cls(height=64, width=64, latent_dim=latent_dim)

    @classmethod
    def tiny(cls, latent_dim=3, channels=1):
        """16x16 gradient-check geometry, same layer kinds, smaller widths."""
        return cls(
            height=16,
            width=16,
            channels=channels,
            conv_specs=((8, 3, 2), (8, 3, 2), (16, 3, 1)),
            dense_widths=(32, 16),
            latent_dim=latent_dim,
        )


@dataclass(frozen=True)
class LossWeights:
    """Multipliers (omega, beta, gamma, nu) of the composite objective."""

    omega: float = 1.0
    beta: float = 0.3
    gamma: float = 0.3
    nu: float = 0.1

    def __post_init__(self):
        for name in ("omega", "beta", "gamma", "nu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LatentBatch:
    mu: torch.Tensor
    logvar: torch.Tensor
    eps: torch.Tensor
    z: torch.Tensor
    z_hat: torch.Tensor


@dataclass
class LossComponents:
    bce: torch.Tensor
    eps_pen: torch.Tensor
    h: torch.Tensor
    l_z: torch.Tensor
    l_u: torch.Tensor
    l_zu: torch.Tensor

    def as_floats(self):
        return {
            f.name: float(getattr(self, f.name).detach()) for f in fields(self)
        }


def reparameterize(mu, logvar, generator):
    """mu + exp(logvar / 2) * eta with eta ~ N(0, I) from the given generator."""
    eta = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eta


def dag_penalty(adjacency):
    """Differentiable tr(e^(A o A)) - d (numpy twin: graph.acyclicity_h)."""
    d = adjacency.shape[0]
    return torch.linalg.matrix_exp(adjacency * adjacency).diagonal().sum() - d


def total_loss(components, weights, dual):
    """omega*bce + eps_pen + alpha*h + rho/2*h^2 + beta*l_z + gamma*l_u + nu*l_zu."""
    c, w = components, weights
    return (
        w.omega * c.bce
        + c.eps_pen
        + dual.alpha * c.h
        + 0.5 * dual.rho * c.h * c.h
        + w.beta * c.l_z
        + w.gamma * c.l_u
        + w.nu * c.l_zu
    )


class ConvEncoder(nn.Module):
    def __init__(self, cfg, dtype):
        super().__init__()
        self.cfg = cfg
        convs = []
        in_ch = cfg.channels
        for filters, kernel, stride in cfg.conv_specs:
            convs.append(nn.Conv2d(in_ch, filters, kernel, stride, dtype=dtype))
            in_ch = filters
        self.convs = nn.ModuleList(convs)
        dense = []
        widths = (cfg.flat_size,) + tuple(cfg.dense_widths) + (2 * cfg.latent_dim,)
        for a, b in zip(widths[:-1], widths[1:]):
            dense.append(nn.Linear(a, b, dtype=dtype))
        self.dense = nn.ModuleList(dense)

    def forward(self, x):
        for conv in self.convs:
            x = F.silu(conv(x))
        x = x.flatten(1)
        for lin in self.dense[:-1]:
            x = F.elu(lin(x))
        x = self.dense[-1](x)
        d = self.cfg.latent_dim
        return x[:, :d], x[:, d:]


class ConvDecoder(nn.Module):
    def __init__(self, cfg, dtype):
        super().__init__()
        self.cfg = cfg
        widths = (cfg.latent_dim,) + tuple(reversed(cfg.dense_widths)) + (cfg.flat_size,)
        self.dense = nn.ModuleList(
            nn.Linear(a, b, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])
        )
        deconvs = []
        channels = [cfg.channels] + [spec[0] for spec in cfg.conv_specs]
        for k, pad in zip(range(len(cfg.conv_specs), 0, -1), cfg.output_paddings):
            _, kernel, stride = cfg.conv_specs[k - 1]
            deconvs.append(
                nn.ConvTranspose2d(
                    channels[k], channels[k - 1], kernel, stride,
                    output_padding=pad, dtype=dtype,
                )
            )
        self.deconvs = nn.ModuleList(deconvs)

    def forward(self, z):
        x = z
        for lin in self.dense:
            x = F.elu(lin(x))
        side_h = self.cfg.encoder_chain[-1]
        side_w = self.cfg._chain_w[-1]
        x = x.view(-1, self.cfg.conv_specs[-1][0], side_h, side_w)
        for deconv in self.deconvs[:-1]:
            x = F.silu(deconv(x))
        return torch.sigmoid(self.deconvs[-1](x))


@torch.no_grad()
def _init_dense_and_conv(module, generator, dtype):
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            k = sub.weight.shape[1] * (
                sub.weight.shape[2] * sub.weight.shape[3]
                if sub.weight.ndim == 4
                else 1
            )
            bound = 1.0 / k**0.5
            fresh = torch.empty(sub.weight.shape, dtype=dtype)
            fresh.uniform_(-bound, bound, generator=generator)
            sub.weight.copy_(fresh)
            if sub.bias is not None:
                sub.bias.zero_()


class GcvamdModel(nn.Module):
    """Encoder, reparameterization, noise -> latent, causal layer, decoder.

    The adjacency A is a learnable d x d parameter whose diagonal is
    hard-masked; every use goes through :meth:`adjacency`, so the diagonal
    receives no gradient and self-loops can never form.
    """

    checkpoint_kind = "gcvamd"

    def __init__(
        self,
        config=None,
        d=3,
        hidden_multiplier=4,
        scale_labels=True,
        dtype=torch.float64,
        generator=None,
    ):
        super().__init__()
        self.config = config if config is not None else ConvNetConfig.reduced(latent_dim=d)
        if self.config.latent_dim != d:
            raise ConfigError(
                f"config latent_dim {self.config.latent_dim} != model d {d}"
            )
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        self.d = d
        self.hidden_multiplier = hidden_multiplier
        self.scale_labels = scale_labels
        self.dtype = dtype
        self.encoder = ConvEncoder(self.config, dtype)
        self.decoder = ConvDecoder(self.config, dtype)
        _init_dense_and_conv(self.encoder, generator, dtype)
        _init_dense_and_conv(self.decoder, generator, dtype)
        self.noise_to_latent = NoiseToLatent(d, hidden_multiplier, dtype, generator)
        self.causal_layer = CausalLayerGAE(d, hidden_multiplier, dtype, generator)
        self.A = nn.Parameter(torch.zeros(d, d, dtype=dtype))
        self.register_buffer("offdiag", 1.0 - torch.eye(d, dtype=dtype))
        scale = torch.ones(d, dtype=dtype)
        if scale_labels and d == 3:
            scale[2] = 3.0  # severity runs 0..3; bring it onto [0, 1]
        self.register_buffer("label_scale", scale)

    # -- plumbing ---------------------------------------------------------

    def checkpoint_init(self):
        return {
            "config": asdict(self.config),
            "d": self.d,
            "hidden_multiplier": self.hidden_multiplier,
            "scale_labels": self.scale_labels,
            "dtype": str(self.dtype).replace("torch.", ""),
        }

    @classmethod
    def from_checkpoint_init(cls, init):
        cfg = dict(init["config"])
        cfg["conv_specs"] = tuple(tuple(s) for s in cfg["conv_specs"])
        cfg["dense_widths"] = tuple(cfg["dense_widths"])
        return cls(
            config=ConvNetConfig(**cfg),
            d=init["d"],
            hidden_multiplier=init["hidden_multiplier"],
            scale_labels=init["scale_labels"],
            dtype=getattr(torch, init["dtype"]),
        )

    def adjacency(self):
        return self.A * self.offdiag

    def weighted_adjacency(self):
        return WeightedAdjacency(self.d, self.adjacency().detach().cpu().numpy())

    def images_to_tensor(self, images):
        if isinstance(images, torch.Tensor):
            x = images.to(self.dtype)
        else:
            x = torch.as_tensor(np.asarray(images), dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        want = (self.config.height, self.config.width, self.config.channels)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ValueError(f"expected images N x {want}, got {tuple(x.shape)}")
        return x

    def labels_to_tensor(self, u):
        t = torch.as_tensor(np.asarray(u), dtype=self.dtype)
        if t.ndim != 2 or t.shape[1] != self.d:
            raise ValueError(f"expected labels N x {self.d}, got {tuple(t.shape)}")
        return t / self.label_scale

    def _eta(self, shape, generator, eta):
        if eta is not None:
            return torch.as_tensor(eta, dtype=self.dtype).reshape(shape)
        if generator is None:
            raise ValueError("either a generator or an explicit eta is required")
        return torch.randn(shape, generator=generator, dtype=self.dtype)

    # -- forward paths ----------------------------------------------------

    def encode(self, images):
        x = self.images_to_tensor(images).permute(0, 3, 1, 2)
        return self.encoder(x)

    def forward(self, images, generator=None, eta=None):
        mu, logvar = self.encode(images)
        eta = self._eta(mu.shape, generator, eta)
        eps = mu + torch.exp(0.5 * logvar) * eta
        a = self.adjacency()
        z = self.noise_to_latent(eps, a)
        z_hat = self.causal_layer(z, a) + eps
        recon = self.decoder(z_hat).permute(0, 2, 3, 1)
        return recon, LatentBatch(mu=mu, logvar=logvar, eps=eps, z=z, z_hat=z_hat)

    def loss_components(self, images, u, generator=None, eta=None):
        """All terms of the composite objective, batch-mean normalized."""
        x = self.images_to_tensor(images)
        u = self.labels_to_tensor(u)
        recon, lat = self.forward(x, generator=generator, eta=eta)
        if u.shape[0] != x.shape[0]:
            raise ValueError("labels and images disagree on batch size")
        n = x.shape[0]
        p = recon.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
        bce = -(x * torch.log(p) + (1.0 - x) * torch.log1p(-p)).mean()
        eps_pen = 0.5 * lat.eps.square().sum(dim=1).mean()
        a = self.adjacency()
        h = dag_penalty(a)
        l_z = lz_loss(self.causal_layer, a, lat.z) / n
        l_u = (u - u @ a).square().sum(dim=1).mean()
        l_zu = (lat.z - u).square().mean()
        return LossComponents(bce=bce, eps_pen=eps_pen, h=h, l_z=l_z, l_u=l_u, l_zu=l_zu)

    # -- generation -------------------------------------------------------

    def intervene(self, images, index, value, generator=None, eta=None):
        """do(z_index = value): clamp, propagate to descendants, decode.

        The intervened coordinate holds its value in the decoded code;
        children respond through the causal layer.
        """
        if not 0 <= index < self.d:
            raise ValueError(f"index {index} out of range for d={self.d}")
        mu, logvar = self.encode(images)
        eta = self._eta(mu.shape, generator, eta)
        eps = mu + torch.exp(0.5 * logvar) * eta
        a = self.adjacency()
        z = self.noise_to_latent(eps, a)
        z = z.clone()
        z[:, index] = value
        z_hat = self.causal_layer(z, a) + eps
        z_hat = z_hat.clone()
        z_hat[:, index] = value
        return self.decoder(z_hat).permute(0, 2, 3, 1), z_hat

    def traverse(self, image, index, values=None, generator=None):
        """One decoded image per clamp value, sharing the same noise draw."""
        if values is None:
            values = TRAVERSAL_SETS.get(index)
        if values is None or len(values) == 0:
            raise ValueError("values must be a nonempty sequence")
        x = self.images_to_tensor(image)
        eta = self._eta((x.shape[0], self.d), generator, None)
        frames = []
        for v in values:
            out, _ = self.intervene(x, index, float(v), eta=eta)
            frames.append(out.detach())
        return frames
