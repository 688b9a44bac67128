"""Reconstruction losses, the Adam optimizer and the epoch loop.

Losses divide the batch sum by the batch size N so calibrated thresholds
do not depend on how volumes were batched; at inference (N = 1) a score
is therefore the plain sum over voxels. Training consumes healthy
volumes only — an anomalous sample in the training set is the one
assumption the whole method rests on, so it raises instead of being
silently accepted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation, DimensionError, NumericError
from .preprocess import Volume

_SHUFFLE_STREAM = 21
_EPS_STREAM = 22


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults follow the training recipe
    (batch size 16, learning rate 1e-4, 100 epochs, Adam defaults,
    KL weight 1)."""

    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    lambda_kl: float = 1.0
    seed: int = 7
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lambda_kl < 0:
            raise ConfigError(f"lambda_kl must be >= 0, got {self.lambda_kl}")
        if self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")


def l1_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Sum of |x - x_hat| over all voxels, divided by the batch size.

    The subgradient of |.| is the sign, zero at ties.
    """
    if x.shape != x_hat.shape:
        raise DimensionError(f"l1_loss: shapes {x.shape} and {x_hat.shape} differ")
    n = x.shape[0]
    return ad.scale(ad.sum_all(ad.absolute(ad.sub(x, x_hat))), 1.0 / n)


def l2_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Sum of (x - x_hat)^2 over all voxels, divided by the batch size."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"l2_loss: shapes {x.shape} and {x_hat.shape} differ")
    n = x.shape[0]
    return ad.scale(ad.sum_all(ad.square(ad.sub(x, x_hat))), 1.0 / n)


def vae_loss(
    x: Tensor, x_hat: Tensor, mu: Tensor, logvar: Tensor, lambda_kl: float = 1.0
) -> tuple[Tensor, Tensor, Tensor]:
    """Reconstruction term plus weighted KL term.

    Returns ``(total, recon, kl)`` where ``total = recon + lambda_kl * kl``.
    """
    recon = l1_loss(x, x_hat)
    kl = models.kl_divergence(mu, logvar)
    total = ad.add(recon, ad.scale(kl, lambda_kl)) if lambda_kl != 0.0 else recon
    return total, recon, kl


@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One Adam update with bias correction.

    Moments update as ``m <- b1*m + (1-b1)*g`` and ``v <- b2*v + (1-b2)*g^2``;
    parameters move by ``-lr * m_hat / (sqrt(v_hat) + eps)``. Parameter
    tensors receive fresh arrays (graphs recorded earlier stay valid).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    for g in grads:
        if g is None or not np.isfinite(g).all():
            raise NumericError("adam_step: non-finite or missing gradient; training aborted")
    state.t += 1
    t = state.t
    correct1 = 1.0 - config.beta1**t
    correct2 = 1.0 - config.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * (g * g)
        m_hat = state.m[i] / correct1
        v_hat = state.v[i] / correct2
        p.data = (p.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(
            p.dtype, copy=False
        )


@dataclass
class EpochStats:
    """Per-epoch mean losses (per volume), emitted as the loss history."""

    epoch: int
    recon: float
    kl: float
    total: float


def _stack_batch(volumes: Sequence[Volume], dims: tuple[int, int, int]) -> Tensor:
    for v in volumes:
        if v.dims != dims:
            raise ConfigError(f"volume {v.subject!r} has dims {v.dims}, model expects {dims}")
    return Tensor(np.stack([v.data for v in volumes])[:, None, :, :, :])


def fit(
    params,
    dataset: Sequence[Volume],
    config: TrainConfig,
) -> list[EpochStats]:
    """Fit a cAE or VAE to healthy volumes; returns the loss history.

    Fully deterministic for a given seed: initialization, the per-epoch
    shuffle and the VAE noise draws all derive from it. The last,
    possibly smaller batch of an epoch is kept. Gradients are checked for
    finiteness every step and training aborts on violation.
    """
    if not dataset:
        raise ContractViolation("fit: the training set is empty")
    for v in dataset:
        if v.label != "normal":
            raise ContractViolation(
                f"fit: volume {v.subject!r} is labelled {v.label!r}; "
                f"training data must contain only healthy volumes"
            )
    is_vae = params.kind == "vae"
    tensors = params.tensors()
    state = AdamState.for_params(tensors)
    shuffle_rng = np.random.default_rng([config.seed, _SHUFFLE_STREAM])
    eps_rng = np.random.default_rng([config.seed, _EPS_STREAM])
    dims = params.arch.input_dims

    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(dataset))
        recon_sum = kl_sum = 0.0
        seen = 0
        for start in range(0, len(dataset), config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            x = _stack_batch(batch, dims)
            if is_vae:
                eps = Tensor(
                    eps_rng.standard_normal((len(batch), params.arch.latent_dim)).astype(np.float32)
                )
                x_hat, mu, logvar = models.vae_forward(params, x, eps)
                total, recon, kl = vae_loss(x, x_hat, mu, logvar, config.lambda_kl)
            else:
                x_hat, _ = models.cae_forward(params, x)
                total = recon = l1_loss(x, x_hat)
                kl = None
            ad.zero_grad(tensors)
            ad.backward(total)
            adam_step(tensors, [p.grad for p in tensors], state, config)
            recon_sum += recon.item() * len(batch)
            kl_sum += (kl.item() if kl is not None else 0.0) * len(batch)
            seen += len(batch)
        recon_mean = recon_sum / seen
        kl_mean = kl_sum / seen
        history.append(
            EpochStats(
                epoch=epoch,
                recon=recon_mean,
                kl=kl_mean,
                total=recon_mean + config.lambda_kl * kl_mean if is_vae else recon_mean,
            )
        )
    return history
