"""In-domain inversion of the toy generator.

The inverter ``e`` is trained so that ``g(e(x))`` reconstructs real images,
guided by a pixel L2 term, a perceptual-feature L2 term, and an adversarial
term through a briefly pretrained (then frozen) discriminator. Afterwards,
per-image latents are refined by gradient descent on the same objective,
warm-started at ``e(x)``; the refined result is what the view generators
consume as "the" inversion of an image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .modelzoo import DifferentiableMap, evaluate


def _call(m, x):
    """Apply a DifferentiableMap (with shape checks) or a plain callable."""
    return evaluate(m, x) if isinstance(m, DifferentiableMap) else m(x)


@dataclass
class InversionConfig:
    lambda_vgg: float = 0.1
    lambda_adv: float = 0.01
    activation: str = "softplus"
    encoder_steps: int = 400
    encoder_lr: float = 1e-3
    encoder_batch: int = 32
    eval_every: int = 50
    latent_opt_steps: int = 200
    latent_step_size: float = 0.02
    disc_steps: int = 150
    disc_lr: float = 1e-3
    disc_batch: int = 32

    def __post_init__(self):
        if self.lambda_vgg < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")
        if self.activation != "softplus":
            raise ValueError(f"unsupported activation {self.activation!r}")


def _l2_rows(v: torch.Tensor) -> torch.Tensor:
    """Per-sample L2 norm of flattened residuals, gradient-safe at zero."""
    return torch.sqrt((v.flatten(1) ** 2).sum(dim=1) + 1e-12)


def _reconstruction_terms(x: torch.Tensor, recon: torch.Tensor, d, h,
                          cfg: InversionConfig) -> torch.Tensor:
    """Pixel + perceptual + adversarial terms, mean over the batch."""
    pixel = _l2_rows(x - recon)
    if not torch.isfinite(pixel).all():
        raise RuntimeError("inversion loss: pixel term is non-finite")
    total = pixel
    if cfg.lambda_vgg > 0:
        if h is None:
            raise ValueError("lambda_vgg > 0 requires the perceptual net h")
        perceptual = _l2_rows(_call(h, x) - _call(h, recon))
        if not torch.isfinite(perceptual).all():
            raise RuntimeError("inversion loss: perceptual term is non-finite")
        total = total + cfg.lambda_vgg * perceptual
    if cfg.lambda_adv > 0:
        if d is None:
            raise ValueError("lambda_adv > 0 requires the discriminator d")
        logit = _call(d, recon).reshape(-1)
        adversarial = -cfg.lambda_adv * F.softplus(-logit)
        if not torch.isfinite(adversarial).all():
            raise RuntimeError("inversion loss: adversarial term is non-finite")
        total = total + adversarial
    return total.mean()


def inversion_loss(x: torch.Tensor, e, g, d, h, cfg: InversionConfig) -> torch.Tensor:
    """||x - g(e(x))||_2 + lambda_vgg ||h(x) - h(g(e(x)))||_2
    - lambda_adv softplus(-d_logit(g(e(x)))), averaged over the batch."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    recon = _call(g, _call(e, x))
    return _reconstruction_terms(x, recon, d, h, cfg)


def latent_objective(x: torch.Tensor, w: torch.Tensor, g, d, h,
                     cfg: InversionConfig) -> torch.Tensor:
    """Same objective as inversion_loss but as a function of the latent."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if w.dim() == 1:
        w = w.unsqueeze(0)
    recon = _call(g, w)
    return _reconstruction_terms(x, recon, d, h, cfg)


def pretrain_discriminator(d, g, real_images: torch.Tensor, cfg: InversionConfig,
                           seed: int = 0, latent_sampler=None) -> dict:
    """Short real-vs-generated schedule for d, frozen afterwards."""
    rng = np.random.default_rng(seed)
    latent_dim = g.input_shape[0]
    opt = torch.optim.Adam(d.parameters(), lr=cfg.disc_lr)
    losses = []
    for _ in range(cfg.disc_steps):
        idx = rng.choice(len(real_images), size=min(cfg.disc_batch, len(real_images)),
                         replace=False)
        real = real_images[np.sort(idx)]
        if latent_sampler is not None:
            w = latent_sampler(rng, len(real))
        else:
            w = torch.as_tensor(rng.standard_normal((len(real), latent_dim)),
                                dtype=real.dtype)
        with torch.no_grad():
            fake = evaluate(g, w)
        logits = torch.cat([evaluate(d, real), evaluate(d, fake)]).reshape(-1)
        labels = torch.cat([torch.ones(len(real)), torch.zeros(len(fake))]).to(logits.dtype)
        loss = F.binary_cross_entropy_with_logits(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    for p in d.parameters():
        p.requires_grad_(False)
    return {"losses": losses, "final": losses[-1] if losses else None}


def train_inverter(train_images: torch.Tensor, val_images: torch.Tensor,
                   e, g, d, h, cfg: InversionConfig, seed: int = 0) -> dict:
    """Train e to minimize the inversion loss; aborts on divergence.

    Returns a history dict with the held-out loss curve; the final held-out
    loss must come out below the initial one for a healthy run.
    """
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(e.parameters(), lr=cfg.encoder_lr)

    def val_loss() -> float:
        with torch.no_grad():
            return float(inversion_loss(val_images, e, g, d, h, cfg))

    initial = val_loss()
    curve = [initial]
    bad_evals = 0
    for step in range(cfg.encoder_steps):
        idx = rng.choice(len(train_images), size=min(cfg.encoder_batch, len(train_images)),
                         replace=False)
        batch = train_images[np.sort(idx)]
        loss = inversion_loss(batch, e, g, d, h, cfg)
        if not torch.isfinite(loss):
            raise RuntimeError(f"inverter training loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % cfg.eval_every == 0:
            v = val_loss()
            curve.append(v)
            bad_evals = bad_evals + 1 if v > 10.0 * abs(initial) else 0
            if bad_evals >= 3:
                raise RuntimeError(
                    f"inverter training diverged: held-out loss {v:.4g} over 10x initial "
                    f"for 3 consecutive evals (step {step})")
    final = val_loss()
    curve.append(final)
    return {
        "initial_val": initial,
        "final_val": final,
        "val_curve": curve,
        "lambda_vgg": cfg.lambda_vgg,
        "lambda_adv": cfg.lambda_adv,
        "encoder_steps": cfg.encoder_steps,
        "seed": seed,
    }


def optimize_latent(x: torch.Tensor, e, g, d, h, cfg: InversionConfig) -> torch.Tensor:
    """Per-image latent refinement from the warm start w = e(x).

    Plain gradient descent with best-iterate tracking, so the returned latent
    never scores worse than the warm start.
    """
    with torch.no_grad():
        w0 = _call(e, x).detach().reshape(-1)
    if cfg.latent_opt_steps == 0:
        return w0
    w = w0.clone().requires_grad_(True)
    opt = torch.optim.SGD([w], lr=cfg.latent_step_size)
    with torch.no_grad():
        best_loss = float(latent_objective(x, w0, g, d, h, cfg))
    best_w = w0.clone()
    for step in range(cfg.latent_opt_steps):
        loss = latent_objective(x, w, g, d, h, cfg)
        opt.zero_grad()
        loss.backward()
        if not torch.isfinite(w.grad).all():
            raise RuntimeError(f"optimize_latent: non-finite gradient at step {step}")
        opt.step()
        with torch.no_grad():
            cur = float(latent_objective(x, w, g, d, h, cfg))
        if cur < best_loss:
            best_loss = cur
            best_w = w.detach().clone()
    return best_w
