"""View generators: expert transformations, latent-space search (W-search),
latent-space Gaussian perturbation (W-perturb), the one-step sign-gradient
variant, and the epsilon calibration used to pick the search radius.

W-search decodes candidate latents through the generator, embeds them with
the contrastive encoder, and gradient-descends the latents until the decoded
views sit at radius ``epsilon1`` from the anchor embedding while staying
mutually spread by at least ``epsilon2`` (hinge, weight ``lam``). Both the
encoder and generator arguments accept either a
:class:`~latentviews.modelzoo.DifferentiableMap` or a plain callable, so
analytic oracles (identity maps on R^2) can exercise the same code path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .modelzoo import DifferentiableMap, encode, evaluate, generate

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Expert transformations
# ---------------------------------------------------------------------------

@dataclass
class TransformConfig:
    # full-strength crop floor is gentler than ImageNet-scale SimCLR's 0.08:
    # toy blobs occupy a bounded region and harsher crops degenerate to
    # background-only views
    crop_scale_range: tuple[float, float] = (0.4, 1.0)
    flip_probability: float = 0.5
    color_jitter_strength: float = 0.4
    strength_preset: str = "full"

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise ValueError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        if self.color_jitter_strength < 0:
            raise ValueError("color_jitter_strength must be non-negative")
        if self.strength_preset not in ("full", "weak"):
            raise ValueError(f"unknown strength preset {self.strength_preset!r}")

    @classmethod
    def full(cls) -> "TransformConfig":
        return cls()

    @classmethod
    def weak(cls) -> "TransformConfig":
        # Crop range for "weak" is a design choice; only crop + flip survive.
        return cls(crop_scale_range=(0.8, 1.0), flip_probability=0.5,
                   color_jitter_strength=0.0, strength_preset="weak")

    @classmethod
    def identity(cls) -> "TransformConfig":
        return cls(crop_scale_range=(1.0, 1.0), flip_probability=0.0,
                   color_jitter_strength=0.0, strength_preset="weak")


def expert_transform(x: torch.Tensor, cfg: TransformConfig,
                     rng: np.random.Generator) -> torch.Tensor:
    """Random-resized-crop -> horizontal flip -> color jitter.

    Deterministic given the rng stream; output keeps the input shape and the
    [0, 1] value range. Crops are square-aspect, so a (1, 1) scale range with
    zero flip/jitter is the exact identity.
    """
    c, h, w = x.shape
    scale = float(rng.uniform(*cfg.crop_scale_range))
    side_h = max(1, round(h * scale ** 0.5))
    side_w = max(1, round(w * scale ** 0.5))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    out = x[:, top:top + side_h, left:left + side_w]
    if out.shape[-2:] != (h, w):
        out = F.interpolate(out.unsqueeze(0), size=(h, w), mode="bilinear",
                            align_corners=False).squeeze(0)

    if cfg.flip_probability > 0 and rng.random() < cfg.flip_probability:
        out = out.flip(-1)

    s = cfg.color_jitter_strength
    if s > 0:
        brightness = torch.as_tensor(rng.uniform(max(0.0, 1 - s), 1 + s, size=c),
                                     dtype=x.dtype).view(c, 1, 1)
        contrast = torch.as_tensor(rng.uniform(max(0.0, 1 - s), 1 + s, size=c),
                                   dtype=x.dtype).view(c, 1, 1)
        mean = out.mean(dim=(-2, -1), keepdim=True)
        out = ((out - mean) * contrast + mean) * brightness
        if cfg.strength_preset == "full" and rng.random() < 0.2:
            out = out[rng.permutation(c).tolist()]
        out = out.clamp(0.0, 1.0)
    return out


def per_sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic rng stream keyed by (seed, epoch, anchor id, slot, ...)."""
    return np.random.default_rng(np.random.SeedSequence((seed, *stream)))


# ---------------------------------------------------------------------------
# W-search
# ---------------------------------------------------------------------------

def squared_residual(eps: float, d: torch.Tensor) -> torch.Tensor:
    """Default boundary penalty: (d - eps)^2, smooth and symmetric around eps."""
    return (d - eps) ** 2


@dataclass
class WSearchConfig:
    epsilon1: float = 0.3
    epsilon2: float = 0.5
    lam: float = 0.01
    n_views: int = 8
    steps: int = 200
    step_size: float = 0.05
    init_policy: str = "inverted_anchor_plus_noise"
    # Tighter than strictly needed so the converged boundary radius resolves
    # well inside the 1e-3 oracle tolerance.
    tol: float = 1e-9
    init_noise_scale: float = 0.01
    pairwise_space: str = "z"
    penalty: Optional[Callable] = None

    def __post_init__(self):
        if self.epsilon1 <= 0:
            raise ValueError("epsilon1 must be positive")
        if self.epsilon2 < 0 or self.lam < 0:
            raise ValueError("epsilon2 and lam must be non-negative")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.init_policy not in ("inverted_anchor_plus_noise", "random"):
            raise ValueError(f"unknown init policy {self.init_policy!r}")
        if self.pairwise_space not in ("z", "w"):
            raise ValueError("pairwise_space must be 'z' or 'w'")
        if self.epsilon2 < self.epsilon1:
            logger.info("epsilon2=%.3g < epsilon1=%.3g; the usual rule of thumb is epsilon2 >= epsilon1",
                        self.epsilon2, self.epsilon1)


def stable_norm(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2 norm with an epsilon inside the sqrt so the gradient exists at 0."""
    return torch.sqrt((v ** 2).sum(dim=dim) + 1e-12)


def _as_embed(f):
    if isinstance(f, DifferentiableMap):
        return lambda imgs: encode(f, imgs)
    return f


def _as_decode(g):
    if isinstance(g, DifferentiableMap):
        return lambda ws: generate(g, ws)
    return g


def _as_invert(e):
    if isinstance(e, DifferentiableMap):
        return lambda x: evaluate(e, x)
    return e


def mean_pairwise_distance(points: torch.Tensor) -> torch.Tensor:
    """Mean of the n(n-1)/2 pairwise L2 distances between rows."""
    n = points.shape[0]
    if n < 2:
        return points.new_zeros(())
    dists = [stable_norm(points[k] - points[l]) for k in range(n) for l in range(k + 1, n)]
    return torch.stack(dists).mean()


def w_search_objective(ws: torch.Tensor, anchor_embedding: torch.Tensor,
                       embed_decode: Callable, cfg: WSearchConfig) -> torch.Tensor:
    """Boundary-plus-uniformity objective over a stack of n latent rows:

    (1/n) sum_k penalty(eps1, ||embed(decode(w_k)) - z0||) + lam * (eps2 - dbar)^+
    """
    zs = embed_decode(ws)
    penalty = cfg.penalty or squared_residual
    dists = stable_norm(zs - anchor_embedding.unsqueeze(0), dim=-1)
    objective = penalty(cfg.epsilon1, dists).mean()
    if cfg.lam > 0 and ws.shape[0] >= 2:
        spread_points = zs if cfg.pairwise_space == "z" else ws
        dbar = mean_pairwise_distance(spread_points)
        objective = objective + cfg.lam * torch.clamp(cfg.epsilon2 - dbar, min=0.0)
    return objective


def _init_latents(x0, g, invert, cfg, rng, dtype):
    if cfg.init_policy == "random":
        if isinstance(g, DifferentiableMap):
            latent_dim = g.input_shape[0]
        elif invert is not None:
            latent_dim = invert(x0).reshape(-1).shape[0]
        else:
            raise ValueError("random init needs a DifferentiableMap generator or an inverter")
        w0 = rng.standard_normal((cfg.n_views, latent_dim))
    else:
        if invert is None:
            raise ValueError("inverted_anchor_plus_noise init needs the inverter e")
        base = invert(x0).detach().cpu().numpy().reshape(-1)
        noise = rng.normal(0.0, cfg.init_noise_scale * cfg.epsilon1,
                           (cfg.n_views, base.shape[0]))
        w0 = base[None, :] + noise
    return torch.as_tensor(w0, dtype=dtype)


def w_search(x0: torch.Tensor, f, g, e, cfg: WSearchConfig,
             rng: np.random.Generator) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Gradient-descend n latents so their decoded embeddings sit on the
    epsilon1 sphere around the anchor embedding. ``x0`` is a single
    (unbatched) anchor. Returns [(latent, image)] of length n.
    """
    embed, decode = _as_embed(f), _as_decode(g)
    invert = None if e is None else _as_invert(e)
    anchor_embedding = embed(x0).detach()
    ws = _init_latents(x0, g, invert, cfg, rng, x0.dtype).requires_grad_(True)

    prev = None
    for step in range(cfg.steps):
        obj = w_search_objective(ws, anchor_embedding, embed_decode=lambda t: embed(decode(t)),
                                 cfg=cfg)
        if not torch.isfinite(obj):
            raise RuntimeError(f"w_search objective became non-finite at iteration {step}")
        # plain gradient descent, taken w.r.t. the latents only so the maps'
        # .grad buffers stay untouched
        (grad,) = torch.autograd.grad(obj, ws)
        with torch.no_grad():
            ws -= cfg.step_size * grad
        cur = float(obj.detach())
        if prev is not None and abs(prev - cur) < cfg.tol:
            break
        prev = cur

    ws = ws.detach()
    with torch.no_grad():
        images = decode(ws)
    return [(ws[k].clone(), images[k].clone()) for k in range(cfg.n_views)]


# ---------------------------------------------------------------------------
# W-perturb
# ---------------------------------------------------------------------------

@dataclass
class PerturbConfig:
    sigma: float = 0.2
    count: int = 8

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.count < 1:
            raise ValueError("count must be >= 1")


def sample_perturbations(rng: np.random.Generator, count: int, dim: int,
                         sigma: float) -> np.ndarray:
    """i.i.d. Gaussian latent offsets, std sigma per coordinate."""
    return rng.normal(0.0, sigma, size=(count, dim))


def w_perturb_with_latents(x: torch.Tensor, g, e, cfg: PerturbConfig,
                           rng: np.random.Generator):
    """(latents, images) for g(e(x) + w_p), w_p ~ N(0, sigma I)."""
    decode, invert = _as_decode(g), _as_invert(e)
    w0 = invert(x).detach().reshape(-1)
    offsets = torch.as_tensor(sample_perturbations(rng, cfg.count, w0.shape[0], cfg.sigma),
                              dtype=w0.dtype)
    latents = w0.unsqueeze(0) + offsets
    images = decode(latents).detach()
    return latents, images


def w_perturb(x: torch.Tensor, g, e, cfg: PerturbConfig,
              rng: np.random.Generator) -> list[torch.Tensor]:
    """Decoded Gaussian perturbations of the anchor's inverted latent."""
    _, images = w_perturb_with_latents(x, g, e, cfg, rng)
    return [images[k] for k in range(cfg.count)]


# ---------------------------------------------------------------------------
# Online one-step variant
# ---------------------------------------------------------------------------

def sign_gradient_step(objective: Callable, w: torch.Tensor, step: float) -> torch.Tensor:
    """w - step * sign(grad objective(w)); sign(0) = 0 leaves coordinates put."""
    w_t = w.detach().clone().requires_grad_(True)
    value = objective(w_t)
    (grad,) = torch.autograd.grad(value, w_t)
    return (w.detach() - step * torch.sign(grad)).detach()


def w_search_online_1step(x0: torch.Tensor, f, g, w_init: torch.Tensor,
                          epsilon1: float, step_size: float,
                          penalty: Optional[Callable] = None) -> torch.Tensor:
    """Single fast-sign-gradient step on the boundary objective.

    Kept as an ablation: with the encoder updating every batch this variant
    underperforms plain expert views, but it is cheap enough to run online.
    """
    embed, decode = _as_embed(f), _as_decode(g)
    anchor_embedding = embed(x0).detach()
    pen = penalty or squared_residual

    def objective(w):
        z = embed(decode(w.unsqueeze(0)))[0]
        return pen(epsilon1, stable_norm(z - anchor_embedding))

    return sign_gradient_step(objective, w_init, step_size)


# ---------------------------------------------------------------------------
# Epsilon calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibratedEpsilon:
    epsilon1: float
    epsilon2: float


def calibrate_epsilon(f, images: torch.Tensor, cfg: TransformConfig,
                      rng: np.random.Generator, space: str = "z", e=None,
                      eps2_offset: float = 0.2) -> CalibratedEpsilon:
    """Average distance between anchors and their expert-transformed views.

    ``space="z"`` measures in the encoder's embedding space (default),
    ``space="w"`` in the generator latent space via the inverter ``e``.
    epsilon2 is seeded at epsilon1 + ``eps2_offset``.
    """
    if len(images) == 0:
        raise ValueError("calibrate_epsilon needs a non-empty image sample")
    if space not in ("z", "w"):
        raise ValueError("space must be 'z' or 'w'")
    if space == "w" and e is None:
        raise ValueError("W-space calibration needs the inverter e")

    def represent(x):
        if space == "z":
            return encode(f, x) if isinstance(f, DifferentiableMap) else f(x)
        return evaluate(e, x) if isinstance(e, DifferentiableMap) else e(x)

    dists = []
    with torch.no_grad():
        for x in images:
            t_x = expert_transform(x, cfg, rng)
            dists.append(float(stable_norm(represent(x) - represent(t_x))))
    eps1 = float(np.mean(dists))
    return CalibratedEpsilon(epsilon1=eps1, epsilon2=eps1 + eps2_offset)
