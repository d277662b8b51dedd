"""Training objectives for the generator, reconstruction and virtual-codec networks.

All losses take ``torch`` tensors shaped ``(..., H, W)`` and return a scalar
tensor averaged over pixels (and over any leading batch dimensions), so they
can be back-propagated directly.  The composite losses return a
:class:`LossValue` holding the differentiable total and its named terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .imaging import ImageFormatError, SsimConfig, ssim_map, upsample_linear

__all__ = [
    "LossConfig",
    "LossValue",
    "ssim_loss",
    "distance_loss",
    "content_loss",
    "gradient_difference_loss",
    "beta_for_qf",
    "mdgn_loss",
    "mdrn_loss",
    "mdvcn_loss",
]

# the 8-neighbourhood offsets (dy, dx)
NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


@dataclass(frozen=True)
class LossConfig:
    kappa1: float = 5e-3
    kappa2: float = 5e-2
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def __post_init__(self):
        if not 0 < self.kappa1 < self.kappa2:
            raise ValueError("need 0 < kappa1 < kappa2")


@dataclass
class LossValue:
    total: torch.Tensor
    terms: dict[str, torch.Tensor]

    def as_dict(self) -> dict[str, float]:
        """Flat name -> float map for logs."""
        out = {name: float(v.detach()) for name, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def _check(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ImageFormatError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def ssim_loss(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Negative mean SSIM."""
    _check(x, y)
    return -ssim_map(x, y, cfg).mean()


def distance_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Negative mean L1 distance; minimising it pushes descriptions apart."""
    _check(a, b)
    return -(a - b).abs().mean()


def content_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check(x, y)
    # torch.abs uses subgradient 0 at the kink
    return (x - y).abs().mean()


def gradient_difference_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the summed L1 mismatch of 8-neighbour differences.

    Border pixels only count the neighbours that exist.
    """
    _check(x, y)
    h, w = x.shape[-2:]
    d = x - y  # grad_s X - grad_s Y == grad_s (X - Y)
    total = d.new_zeros(d.shape[:-2])
    for dy, dx in NEIGHBOURS:
        ys, ye = max(0, -dy), h - max(0, dy)
        xs, xe = max(0, -dx), w - max(0, dx)
        if ye <= ys or xe <= xs:
            continue
        centre = d[..., ys:ye, xs:xe]
        other = d[..., ys + dy : ye + dy, xs + dx : xe + dx]
        total = total + (centre - other).abs().sum(dim=(-2, -1))
    return (total / (h * w)).mean()


def beta_for_qf(qf: int, cfg: LossConfig = LossConfig()) -> float:
    """Weight of the distance term for JPEG quality ``qf``."""
    if qf < 1:
        raise ValueError(f"quality factor must be >= 1, got {qf}")
    return min(max(0.2 / qf, cfg.kappa1), cfg.kappa2)


def _reconstruction_terms(prefix: str, target: torch.Tensor, out: torch.Tensor) -> dict:
    return {
        f"content_{prefix}": content_loss(target, out),
        f"gd_{prefix}": gradient_difference_loss(target, out),
    }


def _sum_terms(terms: dict[str, torch.Tensor]) -> torch.Tensor:
    total = None
    for v in terms.values():
        total = v if total is None else total + v
    return total


def mdgn_loss(
    a: torch.Tensor,
    b: torch.Tensor,
    image: torch.Tensor,
    qf: int,
    cfg: LossConfig = LossConfig(),
    beta: float | None = None,
) -> LossValue:
    """Generator objective: SSIM of each up-sampled description to the source
    plus the beta-weighted distance between the two descriptions.

    ``beta`` overrides the quality-factor schedule when given.
    """
    _check(a, b)
    if tuple(image.shape[-2:]) != (2 * a.shape[-2], 2 * a.shape[-1]):
        raise ImageFormatError(
            f"descriptions {tuple(a.shape[-2:])} are not half of image {tuple(image.shape[-2:])}"
        )
    if beta is None:
        beta = beta_for_qf(qf, cfg)
    ua = upsample_linear(a, clamp=False)
    ub = upsample_linear(b, clamp=False)
    terms = {
        "ssim_a": ssim_loss(ua, image, cfg.ssim),
        "ssim_b": ssim_loss(ub, image, cfg.ssim),
        "distance": beta * distance_loss(a, b),
    }
    return LossValue(_sum_terms(terms), terms)


def mdrn_loss(
    image: torch.Tensor, out_a: torch.Tensor, out_b: torch.Tensor, out_c: torch.Tensor
) -> LossValue:
    """Content plus gradient-difference loss of both side and the central
    reconstruction against the source."""
    terms = {}
    for prefix, out in (("a", out_a), ("b", out_b), ("c", out_c)):
        terms.update(_reconstruction_terms(prefix, image, out))
    return LossValue(_sum_terms(terms), terms)


def mdvcn_loss(targets, virtuals) -> LossValue:
    """Virtual-codec mimicry loss.

    ``targets`` are the reconstruction network outputs (side A, side B,
    central); they are detached so no gradient reaches them.
    """
    terms = {}
    for prefix, target, out in zip(("a", "b", "c"), targets, virtuals):
        terms.update(_reconstruction_terms(prefix, target.detach(), out))
    return LossValue(_sum_terms(terms), terms)
