"""The two 3-D autoencoders: a deterministic cAE and a VAE.

Both share the same convolutional trunk: every encoder stage halves the
spatial extent with a stride-2 convolution (kernel 3, padding 1) followed
by ReLU, and a dense layer maps the flattened feature map to the latent
vector. The decoder mirrors it: a dense layer restores the bottleneck
feature map, each block applies a convolution (kernel 3, padding 1),
doubles the extent with trilinear upsampling and applies ReLU, and a
final 1-channel convolution with a sigmoid keeps reconstructions inside
(0, 1). The VAE replaces the single dense head with a mean head and a
log-variance head and samples the latent via the reparameterization
``z = mu + exp(logvar / 2) * eps``.

Configurations are fully serializable so a reduced desk-scale setup
(e.g. 16³ input, 32-dimensional latent) runs the identical code path as
the full 64³ / 512 configuration.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod, sqrt

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

_INIT_STREAM = {"cae": 11, "vae": 12}


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters shared by both models.

    ``channels`` lists the encoder stage widths; its length is the stage
    count, so the input dims must be divisible by ``2 ** len(channels)``.
    """

    input_dims: tuple[int, int, int] = (64, 64, 64)
    latent_dim: int = 512
    channels: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        if len(self.input_dims) != 3 or any(d < 1 for d in self.input_dims):
            raise ConfigError(f"input_dims must be three positive integers, got {self.input_dims}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be positive integers, got {self.channels}")
        factor = 2 ** self.stage_count
        for d in self.input_dims:
            if d % factor:
                raise ConfigError(
                    f"input dim {d} is not divisible by 2^{self.stage_count} "
                    f"(one halving per encoder stage)"
                )

    @property
    def stage_count(self) -> int:
        return len(self.channels)

    @property
    def bottleneck_dims(self) -> tuple[int, int, int]:
        factor = 2 ** self.stage_count
        return tuple(d // factor for d in self.input_dims)

    @property
    def flat_features(self) -> int:
        return self.channels[-1] * prod(self.bottleneck_dims)

    @property
    def decoder_channels(self) -> tuple[tuple[int, int], ...]:
        """(in, out) channel pairs for the decoder blocks.

        The reversed encoder schedule, with the last block keeping the
        first encoder width so the output head always sees it.
        """
        rev = list(reversed(self.channels)) + [self.channels[0]]
        return tuple((rev[i], rev[i + 1]) for i in range(self.stage_count))

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "latent_dim": self.latent_dim,
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            input_dims=tuple(d["input_dims"]),
            latent_dim=int(d["latent_dim"]),
            channels=tuple(d["channels"]),
        )


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    limit = sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class _ParamsBase:
    """Common storage: named tensors in a fixed, documented order."""

    kind = ""
    arch: ArchConfig

    def __init__(self):
        self._names: list[str] = []
        self._tensors: list[Tensor] = []

    def _register(self, name: str, t: Tensor) -> Tensor:
        self._names.append(name)
        self._tensors.append(t)
        return t

    def named_params(self) -> list[tuple[str, Tensor]]:
        return list(zip(self._names, self._tensors))

    def tensors(self) -> list[Tensor]:
        return list(self._tensors)

    def param_count(self) -> int:
        return sum(t.size for t in self._tensors)

    def _build_decoder(self, arch: ArchConfig, rng: np.random.Generator):
        flat = arch.flat_features
        self.dec_fc_w = self._register("dec.fc.w", _uniform(rng, (flat, arch.latent_dim), arch.latent_dim))
        self.dec_fc_b = self._register("dec.fc.b", _zeros(flat))
        self.dec_w = []
        self.dec_b = []
        for i, (cin, cout) in enumerate(arch.decoder_channels):
            self.dec_w.append(self._register(f"dec.conv{i}.w", _uniform(rng, (cout, cin, 3, 3, 3), cin * 27)))
            self.dec_b.append(self._register(f"dec.conv{i}.b", _zeros(cout)))
        cout_last = arch.decoder_channels[-1][1]
        self.out_w = self._register("dec.out.w", _uniform(rng, (1, cout_last, 3, 3, 3), cout_last * 27))
        self.out_b = self._register("dec.out.b", _zeros(1))

    def _build_encoder_trunk(self, arch: ArchConfig, rng: np.random.Generator):
        self.enc_w = []
        self.enc_b = []
        cin = 1
        for i, cout in enumerate(arch.channels):
            self.enc_w.append(self._register(f"enc.conv{i}.w", _uniform(rng, (cout, cin, 3, 3, 3), cin * 27)))
            self.enc_b.append(self._register(f"enc.conv{i}.b", _zeros(cout)))
            cin = cout


class CAEParams(_ParamsBase):
    """Learnable state of the deterministic convolutional autoencoder."""

    kind = "cae"

    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, _INIT_STREAM[self.kind]])
        self._build_encoder_trunk(arch, rng)
        flat = arch.flat_features
        self.enc_fc_w = self._register("enc.fc.w", _uniform(rng, (arch.latent_dim, flat), flat))
        self.enc_fc_b = self._register("enc.fc.b", _zeros(arch.latent_dim))
        self._build_decoder(arch, rng)


class VAEParams(_ParamsBase):
    """Learnable state of the variational autoencoder.

    The encoder trunk matches the cAE; the dense bottleneck is split into
    a mean head and a log-variance head of identical output size.
    """

    kind = "vae"

    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, _INIT_STREAM[self.kind]])
        self._build_encoder_trunk(arch, rng)
        flat = arch.flat_features
        self.mu_w = self._register("enc.mu.w", _uniform(rng, (arch.latent_dim, flat), flat))
        self.mu_b = self._register("enc.mu.b", _zeros(arch.latent_dim))
        self.logvar_w = self._register("enc.logvar.w", _uniform(rng, (arch.latent_dim, flat), flat))
        self.logvar_b = self._register("enc.logvar.b", _zeros(arch.latent_dim))
        self._build_decoder(arch, rng)


def _check_input(params: _ParamsBase, x: Tensor) -> None:
    dims = params.arch.input_dims
    if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != dims:
        raise ConfigError(
            f"model expects input of shape [N, 1, {dims[0]}, {dims[1]}, {dims[2]}], got {x.shape}"
        )


def _encode_trunk(params: _ParamsBase, x: Tensor) -> Tensor:
    h = x
    for w, b in zip(params.enc_w, params.enc_b):
        h = ad.relu(ad.conv3d(h, w, b, stride=2, padding=1))
    return ad.flatten(h)


def _decode(params: _ParamsBase, z: Tensor) -> Tensor:
    arch = params.arch
    h = ad.relu(ad.linear(z, params.dec_fc_w, params.dec_fc_b))
    h = ad.reshape(h, (z.shape[0], arch.channels[-1], *arch.bottleneck_dims))
    for w, b in zip(params.dec_w, params.dec_b):
        h = ad.relu(ad.trilinear_upsample(ad.conv3d(h, w, b, stride=1, padding=1), 2))
    return ad.sigmoid(ad.conv3d(h, params.out_w, params.out_b, stride=1, padding=1))


def cae_forward(params: CAEParams, x: Tensor) -> tuple[Tensor, Tensor]:
    """Encode, bottleneck and decode; returns ``(x_hat, z)``.

    ``x_hat`` has exactly the shape of ``x`` and lies in (0, 1) thanks to
    the sigmoid output head; ``z`` is the bottleneck activation.
    """
    _check_input(params, x)
    z = ad.linear(_encode_trunk(params, x), params.enc_fc_w, params.enc_fc_b)
    return _decode(params, z), z


def vae_encode(params: VAEParams, x: Tensor) -> tuple[Tensor, Tensor]:
    """Project ``x`` to the posterior parameters ``(mu, logvar)``."""
    _check_input(params, x)
    h = _encode_trunk(params, x)
    mu = ad.linear(h, params.mu_w, params.mu_b)
    logvar = ad.linear(h, params.logvar_w, params.logvar_b)
    return mu, logvar


def reparameterize(mu: Tensor, logvar: Tensor, eps: Tensor) -> Tensor:
    """Sample ``z = mu + exp(logvar / 2) * eps``.

    ``eps`` is injected by the caller (standard normal draws during
    training, zeros for deterministic inference), which keeps the sample
    differentiable with respect to ``mu`` and ``logvar``.
    """
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise DimensionError(
            f"reparameterize: mu {mu.shape}, logvar {logvar.shape} and eps {eps.shape} must agree"
        )
    return ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), eps))


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL divergence of N(mu, exp(logvar)) from the standard normal prior.

    Summed over latent dimensions and averaged over the batch:
    ``-1/(2N) * sum(1 + logvar - mu^2 - exp(logvar))``. Non-negative up
    to numerical slack, and exactly zero at ``mu = logvar = 0``.
    """
    if mu.shape != logvar.shape:
        raise DimensionError(f"kl_divergence: mu {mu.shape} and logvar {logvar.shape} must agree")
    n = mu.shape[0]
    inner = ad.sub(ad.add_scalar(logvar, 1.0), ad.add(ad.square(mu), ad.exp(logvar)))
    return ad.scale(ad.sum_all(inner), -0.5 / n)


def vae_forward(params: VAEParams, x: Tensor, eps: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Full VAE pass: encode, reparameterize, decode.

    Returns ``(x_hat, mu, logvar)``. With ``eps = 0`` the pass is the
    deterministic mean path used at inference time.
    """
    mu, logvar = vae_encode(params, x)
    z = reparameterize(mu, logvar, eps)
    return _decode(params, z), mu, logvar
