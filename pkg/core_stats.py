"""
Feature-statistics primitives - channel statistics, instance normalization,
AdaIN, PIN, cosine distance, statistics mixing and Gaussian perturbation.

All functions are pure: they never mutate their inputs and hold no state,
so they can be called concurrently from worker threads.

Shapes:
- feature maps are [C, H, W] or batched [B, C, H, W]
- StyleStats vectors are [C] or, for batched features, [B, C]
"""

import math
from dataclasses import dataclass

import torch

from errors import ValidationError

DEFAULT_EPS = 1e-5

# snr_db sentinel meaning "leave the statistics untouched"
NO_NOISE = math.inf


@dataclass(frozen=True)
class StyleStats:
    """Per-channel (mu, sigma) pair - the style carried by a low-level feature map"""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValidationError(f"mu shape {tuple(self.mu.shape)} != sigma shape {tuple(self.sigma.shape)}")
        if self.mu.dim() not in (1, 2) or self.mu.shape[-1] < 1:
            raise ValidationError(f"style statistics must be [C] or [B, C], got {tuple(self.mu.shape)}")

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]

    @property
    def sigma_nonpositive_count(self) -> int:
        return int((self.sigma <= 0).sum().item())

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.mu).all() and torch.isfinite(self.sigma).all())


def validate_feature(f: torch.Tensor) -> None:
    if not isinstance(f, torch.Tensor):
        raise ValidationError(f"feature map must be a tensor, got {type(f).__name__}")
    if f.dim() not in (3, 4):
        raise ValidationError(f"feature map must be [C, H, W] or [B, C, H, W], got {tuple(f.shape)}")
    if any(size < 1 for size in f.shape):
        raise ValidationError(f"feature map has an empty dimension: {tuple(f.shape)}")
    if not torch.isfinite(f).all():
        raise ValidationError("feature map contains NaN or Inf values")


def _validate_eps(eps: float) -> None:
    if not eps > 0:
        raise ValidationError(f"eps must be positive, got {eps}")


def _expand(stats_vector: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """Broadcast a [C] or [B, C] vector against a [C, H, W] / [B, C, H, W] map"""
    return stats_vector.to(f.dtype)[..., None, None]


def _check_channels(f: torch.Tensor, params: StyleStats) -> None:
    channel_dim = 0 if f.dim() == 3 else 1
    if params.channels != f.shape[channel_dim]:
        raise ValidationError(f"style has {params.channels} channels but feature map has {f.shape[channel_dim]}")
    if params.mu.dim() == 2:
        if f.dim() != 4 or params.mu.shape[0] != f.shape[0]:
            raise ValidationError(
                f"batched style {tuple(params.mu.shape)} does not match feature batch {tuple(f.shape)}"
            )


def channel_stats(f: torch.Tensor, eps: float = DEFAULT_EPS) -> StyleStats:
    """
    Per-channel spatial mean and standard deviation.

    Population variance, eps inside the square root. Batched maps give
    per-instance statistics of shape [B, C].
    """
    validate_feature(f)
    _validate_eps(eps)
    mu = f.mean(dim=(-2, -1))
    var = f.var(dim=(-2, -1), unbiased=False)
    return StyleStats(mu, torch.sqrt(var + eps))


def _stats_unchecked(f: torch.Tensor, eps: float):
    mu = f.mean(dim=(-2, -1))
    sigma = torch.sqrt(f.var(dim=(-2, -1), unbiased=False) + eps)
    return mu, sigma


def instance_norm(f: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    validate_feature(f)
    _validate_eps(eps)
    mu, sigma = _stats_unchecked(f, eps)
    return (f - _expand(mu, f)) / _expand(sigma, f)


def _restyle(f: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor, eps: float) -> torch.Tensor:
    src_mu, src_sigma = _stats_unchecked(f, eps)
    normalized = (f - _expand(src_mu, f)) / _expand(src_sigma, f)
    return _expand(sigma, f) * normalized + _expand(mu, f)


def adain(f: torch.Tensor, target: StyleStats, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Re-statistics f so that every channel carries target's (mu, sigma)"""
    validate_feature(f)
    _validate_eps(eps)
    _check_channels(f, target)
    if not target.is_finite():
        raise ValidationError("target style contains NaN or Inf values")
    return _restyle(f, target.mu, target.sigma, eps)


def pin_apply(f: torch.Tensor, params: StyleStats, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """
    PIN: the AdaIN formula with (mu, sigma) as free, optimizable variables.

    Differentiable with respect to params.mu and params.sigma; the mining
    loop calls this once per iteration, so only cheap shape checks run here.
    The feature map itself is validated once by the caller.
    """
    if f.dim() not in (3, 4):
        raise ValidationError(f"feature map must be [C, H, W] or [B, C, H, W], got {tuple(f.shape)}")
    _validate_eps(eps)
    _check_channels(f, params)
    return _restyle(f, params.mu, params.sigma, eps)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    1 - cos(a, b) over the last dimension; result in [0, 2].

    Accepts [D] vectors or [B, D] batches (broadcasting a [D] target against
    a batch is allowed). Differentiable.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ValidationError(f"embedding widths differ: {a.shape[-1]} vs {b.shape[-1]}")
    norm_a = torch.linalg.vector_norm(a, dim=-1)
    norm_b = torch.linalg.vector_norm(b, dim=-1)
    if bool((norm_a == 0).any()) or bool((norm_b == 0).any()):
        raise ValidationError("cosine distance is undefined for a zero-norm embedding")
    b = b.to(a.dtype)
    cosine = (a * b).sum(dim=-1) / (norm_a * norm_b.to(a.dtype))
    return (1 - cosine).clamp(0.0, 2.0)


def mix_stats(src: StyleStats, trg: StyleStats, alpha: torch.Tensor) -> StyleStats:
    """Per-channel convex combination: alpha * trg + (1 - alpha) * src"""
    if src.mu.shape != trg.mu.shape:
        raise ValidationError(f"cannot mix styles of shape {tuple(src.mu.shape)} and {tuple(trg.mu.shape)}")
    alpha = torch.as_tensor(alpha, dtype=src.mu.dtype)
    if alpha.shape[-1] != src.channels:
        raise ValidationError(f"alpha has {alpha.shape[-1]} entries, expected {src.channels}")
    if not bool(((alpha >= 0) & (alpha <= 1)).all()):
        raise ValidationError("mixing weights must lie in [0, 1]")
    trg_mu, trg_sigma = trg.mu.to(src.mu.dtype), trg.sigma.to(src.mu.dtype)
    return StyleStats(
        alpha * trg_mu + (1 - alpha) * src.mu,
        alpha * trg_sigma + (1 - alpha) * src.sigma,
    )


def gaussian_perturb_stats(s: StyleStats, snr_db: float, rng_seed: int) -> StyleStats:
    """
    Add zero-mean Gaussian noise to mu and sigma at a given signal-to-noise ratio.

    Signal power is the mean square of the concatenated (mu, sigma) vector
    (per instance when batched); noise variance = power / 10 ** (snr_db / 10).
    snr_db == NO_NOISE returns s unchanged.
    """
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValidationError(f"snr_db must be finite or the no-noise sentinel, got {snr_db}")
    if not s.is_finite():
        raise ValidationError("style statistics contain NaN or Inf values")
    if snr_db == NO_NOISE:
        return s

    signal = torch.cat([s.mu, s.sigma], dim=-1)
    power = signal.pow(2).mean(dim=-1, keepdim=True)
    noise_std = torch.sqrt(power / (10.0 ** (snr_db / 10.0)))

    generator = torch.Generator().manual_seed(int(rng_seed))
    noise = torch.randn(signal.shape, generator=generator, dtype=signal.dtype) * noise_std
    noisy = signal + noise
    c = s.channels
    return StyleStats(noisy[..., :c].contiguous(), noisy[..., c:].contiguous())


def empirical_snr_db(clean: StyleStats, noisy_draws: list) -> float:
    """SNR actually realised by a collection of perturbed copies of clean"""
    signal = torch.cat([clean.mu, clean.sigma], dim=-1)
    power = signal.pow(2).mean()
    noise_power = torch.stack(
        [(torch.cat([d.mu, d.sigma], dim=-1) - signal).pow(2).mean() for d in noisy_draws]
    ).mean()
    return float(10.0 * torch.log10(power / noise_power))
