"""Two-phase DAG-constrained training, tabular graph autoencoder, Adam.

Each epoch is one full-batch step: the adjacency and causal-layer weights
descend on the second objective (L2), the remaining structure descends on
the first (L1) computed after that update with the same noise draw, and the
dual variables advance from the post-update constraint value. Plain gradient
descent throughout; Adam exists only for the downstream networks.
"""

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from gcvamd.errors import TrainingDivergedError
from gcvamd.graph import AugLagState, WeightedAdjacency, auglag_update
from gcvamd.layers import CausalLayerGAE
from gcvamd.model import LossWeights, dag_penalty, total_loss
from gcvamd.seeding import torch_generator

__all__ = [
    "PhaseConfig",
    "EpochRecord",
    "TrainHistory",
    "default_schedule",
    "train_step",
    "train_gcvamd",
    "GaeTabularConfig",
    "train_gae_tabular",
    "AdamState",
    "init_adam_state",
    "adam_step",
]

DIVERGENCE_LIMIT = 1e6

HISTORY_HEADER = ("epoch", "L1", "L2", "bce_eps", "l_z", "l_u", "l_zu", "h", "alpha", "rho")


@dataclass(frozen=True)
class PhaseConfig:
    """Epoch count, the two loss-weight sets, and per-group learning rates.

    Zero learning rates are permitted (they freeze a group, which the tests
    use to isolate updates); negative ones are not.
    """

    epochs: int
    l1_weights: LossWeights
    l2_weights: LossWeights
    lr_adjacency: float
    lr_gae: float
    lr_rest: float

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr_adjacency", "lr_gae", "lr_rest"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def default_schedule():
    """The published two-phase schedule: 150 + 100 epochs.

    Both phases share L1 weights (1, 0.3, 0.3, 0.1); phase two raises the
    latent-supervision weight of L2 to 0.3 and doubles the adjacency rate.
    """
    l1 = LossWeights(omega=1.0, beta=0.3, gamma=0.3, nu=0.1)
    phase1 = PhaseConfig(
        epochs=150,
        l1_weights=l1,
        l2_weights=LossWeights(omega=0.3, beta=2.0, gamma=0.5, nu=0.1),
        lr_adjacency=2e-2,
        lr_gae=3e-3,
        lr_rest=2e-3,
    )
    phase2 = PhaseConfig(
        epochs=100,
        l1_weights=l1,
        l2_weights=LossWeights(omega=0.3, beta=2.0, gamma=0.5, nu=0.3),
        lr_adjacency=4e-2,
        lr_gae=3e-3,
        lr_rest=2e-3,
    )
    return phase1, phase2


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    L1: float
    L2: float
    bce_eps: float
    l_z: float
    l_u: float
    l_zu: float
    h: float
    alpha: float
    rho: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, record):
        self.records.append(record)

    def extend(self, other):
        self.records.extend(other.records)

    def to_csv_text(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for r in self.records:
            writer.writerow([r.epoch] + [repr(getattr(r, k)) for k in HISTORY_HEADER[1:]])
        return buf.getvalue()

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def load_csv(cls, path):
        with open(path) as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != HISTORY_HEADER:
            raise ValueError(f"unexpected history header: {rows[:1]}")
        records = [
            EpochRecord(int(row[0]), *(float(v) for v in row[1:])) for row in rows[1:]
        ]
        return cls(records=records)


def causal_group(model):
    """Adjacency plus causal-layer (g1, g2) parameters, updated with L2."""
    return [model.A] + list(model.causal_layer.parameters())


def rest_group(model):
    """Encoder, decoder, f3, f4 parameters, updated with L1."""
    return (
        list(model.encoder.parameters())
        + list(model.decoder.parameters())
        + list(model.noise_to_latent.parameters())
    )


def _check_components(comps):
    for name, value in comps.as_floats().items():
        if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
            raise TrainingDivergedError(name, value)


def _check_grads(grads, group_name):
    for g in grads:
        if g is not None and not torch.all(torch.isfinite(g)):
            raise TrainingDivergedError(f"gradient of {group_name} group")


def train_step(model, images, u, phase, dual, generator):
    """One full-batch epoch; mutates the model, returns (dual', record).

    Both objectives share the noise sample drawn here. The L2 gradient step
    lands first (adjacency at lr_adjacency, g1/g2 at lr_gae); L1 is then
    re-evaluated under the updated causal layer and moves everything else at
    lr_rest. Masks and the adjacency diagonal are re-pinned after each step,
    and the dual state advances from the post-update constraint value.
    """
    eta = torch.randn((images.shape[0], model.d), generator=generator, dtype=model.dtype)

    comps2 = model.loss_components(images, u, eta=eta)
    _check_components(comps2)
    loss2 = total_loss(comps2, phase.l2_weights, dual)
    causal = causal_group(model)
    grads2 = torch.autograd.grad(loss2, causal)
    _check_grads(grads2, "adjacency/GAE")
    with torch.no_grad():
        model.A -= phase.lr_adjacency * grads2[0]
        model.A *= model.offdiag
        for p, g in zip(causal[1:], grads2[1:]):
            p -= phase.lr_gae * g
    model.causal_layer.g1.apply_masks()
    model.causal_layer.g2.apply_masks()

    comps1 = model.loss_components(images, u, eta=eta)
    _check_components(comps1)
    loss1 = total_loss(comps1, phase.l1_weights, dual)
    rest = rest_group(model)
    grads1 = torch.autograd.grad(loss1, rest)
    _check_grads(grads1, "encoder/decoder/f3/f4")
    with torch.no_grad():
        for p, g in zip(rest, grads1):
            p -= phase.lr_rest * g
    model.noise_to_latent.f3.apply_masks()
    model.noise_to_latent.f4.apply_masks()

    values = comps1.as_floats()
    h_new = values["h"]  # A did not move in the second step
    new_dual = auglag_update(dual, h_new)
    record = EpochRecord(
        epoch=0,
        L1=float(loss1.detach()),
        L2=float(loss2.detach()),
        bce_eps=values["bce"] + values["eps_pen"],
        l_z=values["l_z"],
        l_u=values["l_u"],
        l_zu=values["l_zu"],
        h=h_new,
        alpha=new_dual.alpha,
        rho=new_dual.rho,
    )
    return new_dual, record


def phase_at(phases, epoch):
    """Phase config governing the given zero-based global epoch."""
    start = 0
    for p in phases:
        if epoch < start + p.epochs:
            return p
        start += p.epochs
    raise IndexError(f"epoch {epoch} beyond schedule of {start} epochs")


def phase_index_at(phases, epoch):
    start = 0
    for k, p in enumerate(phases):
        if epoch < start + p.epochs:
            return k
        start += p.epochs
    return len(phases)


def train_gcvamd(model, bundle, phases, seed=0, dual=None, start_epoch=0, on_epoch=None):
    """Run the phases over a full-batch dataset; returns (history, dual).

    The per-epoch noise generator is derived from (seed, epoch), so a run
    resumed from a checkpoint cursor is bit-identical to an uninterrupted
    one. ``on_epoch(global_epoch, model, dual, record)`` fires after each
    epoch when given.
    """
    images = model.images_to_tensor(bundle.images)
    labels = np.asarray(bundle.labels, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("dataset is empty")
    if dual is None:
        dual = AugLagState()
    total = sum(p.epochs for p in phases)
    history = TrainHistory()
    for epoch in range(start_epoch, total):
        phase = phase_at(phases, epoch)
        generator = torch_generator(seed, "reparam", epoch)
        dual, record = train_step(model, images, labels, phase, dual, generator)
        record = replace(record, epoch=epoch + 1)
        history.append(record)
        if on_epoch is not None:
            on_epoch(epoch, model, dual, record)
    return history, dual


# -- standalone tabular graph autoencoder ----------------------------------


@dataclass(frozen=True)
class GaeTabularConfig:
    """The adjacency gets its own, larger rate (as in the two-phase model
    schedule); lambda1 must stay below the initial reconstruction gradient
    scale or the L1 pull pins A at its zero start."""

    lambda1: float = 1e-3
    epochs: int = 1000
    lr: float = 5e-3
    lr_adjacency: float = 2e-2
    hidden_multiplier: int = 4
    dual: AugLagState = field(default_factory=AugLagState)
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if self.epochs < 0 or self.lr <= 0 or self.lr_adjacency <= 0:
            raise ValueError("epochs must be >= 0 and learning rates > 0")


def train_gae_tabular(x, config=None):
    """Fit adjacency + causal layer to tabular data by penalized descent.

    Objective: (1/n) sum ||x - g2(A^T g1(x))||^2 + lambda * ||A||_1
    + alpha * h(A) + rho/2 * h(A)^2, with the L1 subgradient taken as 0 at 0
    and dual updates after every epoch. Returns (WeightedAdjacency, history).
    """
    if config is None:
        config = GaeTabularConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValueError("x must be a finite n x d matrix")
    n, d = x.shape
    if n < d:
        raise ValueError(f"need at least d={d} samples, got {n}")
    generator = torch_generator(config.seed, "gae-tabular")
    layer = CausalLayerGAE(d, config.hidden_multiplier, torch.float64, generator)
    a = torch.zeros(d, d, dtype=torch.float64, requires_grad=True)
    offdiag = 1.0 - torch.eye(d, dtype=torch.float64)
    data = torch.from_numpy(x)
    dual = config.dual
    history = []
    params = [a] + list(layer.parameters())
    for epoch in range(config.epochs):
        a_eff = a * offdiag
        recon = (data - layer(data, a_eff)).square().sum() / n
        h = dag_penalty(a_eff)
        smooth = recon + dual.alpha * h + 0.5 * dual.rho * h * h
        obj = float((smooth + config.lambda1 * a_eff.abs().sum()).detach())
        if not np.isfinite(obj) or obj > DIVERGENCE_LIMIT:
            raise TrainingDivergedError("gae objective", obj)
        grads = torch.autograd.grad(smooth, params)
        with torch.no_grad():
            # L1 handled as a clamped subgradient: sign(0) = 0, and entries
            # whose L1 step would cross zero stop exactly at zero.
            stepped = a - config.lr_adjacency * (grads[0] + config.lambda1 * torch.sign(a))
            stepped[(a != 0) & (torch.sign(stepped) != torch.sign(a))] = 0.0
            a.copy_(stepped * offdiag)
            for p, g in zip(params[1:], grads[1:]):
                p -= config.lr * g
        layer.g1.apply_masks()
        layer.g2.apply_masks()
        h_post = float(dag_penalty(a * offdiag).detach())
        dual = auglag_update(dual, h_post)
        history.append(
            {
                "epoch": epoch + 1,
                "objective": obj,
                "recon": float(recon.detach()),
                "h": h_post,
                "alpha": dual.alpha,
                "rho": dual.rho,
            }
        )
    return WeightedAdjacency(d, (a * offdiag).detach().numpy()), history


# -- Adam (used by the downstream networks only) ----------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def init_adam_state(params):
    return AdamState(
        m=[torch.zeros_like(p) for p in params],
        v=[torch.zeros_like(p) for p in params],
        t=0,
    )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps_hat=1e-8):
    """Bias-corrected Adam; returns (new_params, new_state) without mutation."""
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m2 = beta1 * m + (1.0 - beta1) * g
        v2 = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m2 / (1.0 - beta1**t)
        v_hat = v2 / (1.0 - beta2**t)
        new_params.append(p - lr * m_hat / (v_hat.sqrt() + eps_hat))
        new_m.append(m2)
        new_v.append(v2)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


@torch.no_grad()
def apply_adam(params, grads, state, lr, beta1=0.9, beta2=0.999, eps_hat=1e-8):
    """In-place adam_step over module parameters; returns the new state."""
    new_values, new_state = adam_step(
        [p.detach() for p in params], grads, state, lr, beta1, beta2, eps_hat
    )
    for p, value in zip(params, new_values):
        p.copy_(value)
    return new_state
