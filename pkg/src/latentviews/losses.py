"""Contrastive objectives: SimCLR, two-set InfoNCE, the alignment term, the
three multiview (A2) variants, SimSiam, and A2-SimSiam.

All losses are pure functions of a :class:`~latentviews.batching.MultiviewBatch`
whose embeddings are unit-norm rows. Dot products therefore equal cosine
similarities. Losses sum over anchor rows (the 2N expert views) unless
``reduction="mean"`` is requested; SimSiam follows its usual per-anchor mean.

Log-sum-exp denominators are evaluated with ``torch.logsumexp`` which
subtracts the row maximum internally, so large ``1/tau`` scales are safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .batching import MultiviewBatch

VARIANTS = ("simclr", "infonce", "a2_simclr", "a2_infonce", "a2_full", "simsiam", "a2_simsiam")

_NORM_TOL = 1e-6


@dataclass
class LossConfig:
    tau: float = 0.5
    alpha: float = 0.5
    variant: str = "simclr"
    include_generated_negatives: bool = False
    reduction: str = "sum"
    # D in the A2-SimSiam alignment term; True = negative cosine (the
    # canonical SimSiam distance). False uses raw cosine, which repels the
    # generated views instead of aligning them.
    simsiam_negative_cosine: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.alpha < 0:
            raise ValueError(f"alignment weight must be non-negative, got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


def _embeddings(batch: MultiviewBatch, check_norm: bool) -> torch.Tensor:
    z = batch.embeddings
    if z is None:
        raise ValueError("batch has no embeddings; run the encoder first")
    if check_norm:
        norms = z.detach().norm(dim=-1)
        worst = (norms - 1.0).abs().max().item()
        if worst > _NORM_TOL:
            raise ValueError(f"embeddings are not unit-norm (max deviation {worst:.3g})")
    return z


def _require_empty_k(batch: MultiviewBatch, name: str) -> None:
    if batch.index_map.size != batch.index_map.n_expert:
        raise ValueError(f"{name} expects a two-view batch without generated views")


def _require_generated(batch: MultiviewBatch, name: str) -> None:
    if batch.index_map.size == batch.index_map.n_expert:
        raise ValueError(f"{name} expects a batch with appended generated views")


def _reduce(total: torch.Tensor, n_anchor_rows: int, reduction: str) -> torch.Tensor:
    return total / n_anchor_rows if reduction == "mean" else total


def _nt_xent_terms(z: torch.Tensor, partner_idx: torch.Tensor, den_mask: torch.Tensor,
                   tau: float) -> torch.Tensor:
    """Per-anchor -log( exp(z_i . z_j / tau) / sum_{a in den} exp(z_i . z_a / tau) ).

    ``den_mask[i, a]`` marks the rows of the denominator for anchor row i.
    """
    logits = (z[: len(partner_idx)] @ z.T) / tau
    den = logits.masked_fill(~den_mask, float("-inf")).logsumexp(dim=1)
    pos = logits[torch.arange(len(partner_idx)), partner_idx]
    return den - pos


def simclr_loss(batch: MultiviewBatch, cfg: LossConfig, check_norm: bool = True) -> torch.Tensor:
    """SimCLR NT-Xent: every view anchors, denominator over all other views."""
    _require_empty_k(batch, "simclr_loss")
    z = _embeddings(batch, check_norm)
    n = batch.index_map.size
    partner = torch.as_tensor(batch.index_map.partner, dtype=torch.long)
    den_mask = ~torch.eye(n, dtype=torch.bool)
    terms = _nt_xent_terms(z, partner, den_mask, cfg.tau)
    return _reduce(terms.sum(), n, cfg.reduction)


def infonce_two_set(batch: MultiviewBatch, cfg: LossConfig, check_norm: bool = True) -> torch.Tensor:
    """Symmetric InfoNCE: anchors in one view set contrast only against the other."""
    _require_empty_k(batch, "infonce_two_set")
    z = _embeddings(batch, check_norm)
    n = batch.index_map.n_anchors
    partner = torch.as_tensor(batch.index_map.partner, dtype=torch.long)
    den_mask = torch.zeros(2 * n, 2 * n, dtype=torch.bool)
    den_mask[:n, n:] = True   # I1 anchors vs I2
    den_mask[n:, :n] = True   # I2 anchors vs I1
    terms = _nt_xent_terms(z, partner, den_mask, cfg.tau)
    return _reduce(terms.sum(), 2 * n, cfg.reduction)


def align_term(batch: MultiviewBatch, cfg: LossConfig, check_norm: bool = True) -> torch.Tensor:
    """Alignment pull between each expert anchor and its generated views:
    sum_i (alpha / |k(i)|) sum_{p in k(i)} z_i . z_p / tau."""
    z = _embeddings(batch, check_norm)
    imap = batch.index_map
    total = z.new_zeros(())
    for i in imap.expert_indices():
        k = imap.generated[i]
        if not k:
            raise ValueError(f"align_term: anchor row {i} has no generated views")
        pos = torch.stack([(z[i] * z[p]).sum() for p in k])
        total = total + (cfg.alpha / len(k)) * pos.sum() / cfg.tau
    return _reduce(total, imap.n_expert, cfg.reduction)


def _base_den_mask(imap, include_generated: bool) -> torch.Tensor:
    """Denominator mask for the base CL term of the A2 losses (anchor rows =
    2N expert views)."""
    n, base, size = imap.n_anchors, imap.n_expert, imap.size
    width = size if include_generated else base
    mask = torch.zeros(base, size, dtype=torch.bool)
    mask[:, :width] = True
    mask[torch.arange(base), torch.arange(base)] = False
    return mask


def _infonce_den_mask(imap, include_generated: bool) -> torch.Tensor:
    n, base, size = imap.n_anchors, imap.n_expert, imap.size
    mask = torch.zeros(base, size, dtype=torch.bool)
    mask[:n, n:base] = True
    mask[n:base, :n] = True
    if include_generated:
        mask[:, base:] = True
    return mask


def a2_loss(batch: MultiviewBatch, cfg: LossConfig, check_norm: bool = True) -> torch.Tensor:
    """Multiview losses. A2-SimCLR and A2-InfoNCE subtract the alignment term
    from their base loss; A2-full folds generated views in as extra positives
    with the denominator running over the enlarged index set."""
    if cfg.variant == "a2_simclr":
        _require_generated(batch, "a2_loss[a2_simclr]")
        return _a2_difference(batch, cfg, check_norm, _base_den_mask)
    if cfg.variant == "a2_infonce":
        _require_generated(batch, "a2_loss[a2_infonce]")
        return _a2_difference(batch, cfg, check_norm, _infonce_den_mask)
    if cfg.variant == "a2_full":
        return _a2_full(batch, cfg, check_norm)
    raise ValueError(f"a2_loss cannot dispatch variant {cfg.variant!r}")


def _a2_difference(batch, cfg, check_norm, mask_fn):
    z = _embeddings(batch, check_norm)
    imap = batch.index_map
    partner = torch.as_tensor(imap.partner[: imap.n_expert], dtype=torch.long)
    terms = _nt_xent_terms(z, partner, mask_fn(imap, cfg.include_generated_negatives), cfg.tau)
    base = _reduce(terms.sum(), imap.n_expert, cfg.reduction)
    if cfg.alpha == 0.0:
        return base
    return base - align_term(batch, cfg, check_norm=False)


def a2_simclr_single_log(batch: MultiviewBatch, cfg: LossConfig,
                         check_norm: bool = True) -> torch.Tensor:
    """A2-SimCLR in its single-log form: the alignment sum moves into the
    numerator exponent. Algebraically identical to the difference form."""
    _require_generated(batch, "a2_simclr_single_log")
    z = _embeddings(batch, check_norm)
    imap = batch.index_map
    base = imap.n_expert
    logits = (z[:base] @ z.T) / cfg.tau
    den_mask = _base_den_mask(imap, cfg.include_generated_negatives)
    den = logits.masked_fill(~den_mask, float("-inf")).logsumexp(dim=1)
    total = z.new_zeros(())
    for i in range(base):
        k = imap.generated[i]
        align = (cfg.alpha / len(k)) * sum((z[i] * z[p]).sum() for p in k) / cfg.tau
        pos = logits[i, int(imap.partner[i])]
        total = total + (den[i] - (pos + align))
    return _reduce(total, base, cfg.reduction)


def _a2_full(batch, cfg, check_norm):
    z = _embeddings(batch, check_norm)
    imap = batch.index_map
    base, size = imap.n_expert, imap.size
    logits = (z[:base] @ z.T) / cfg.tau
    den_mask = torch.ones(base, size, dtype=torch.bool)
    den_mask[torch.arange(base), torch.arange(base)] = False
    den = logits.masked_fill(~den_mask, float("-inf")).logsumexp(dim=1)
    total = z.new_zeros(())
    for i in range(base):
        positives = imap.positives(i)
        per_pos = torch.stack([den[i] - logits[i, p] for p in positives])
        total = total + per_pos.mean()
    return _reduce(total, base, cfg.reduction)


def negative_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """-cos(a, b) rowwise; the SimSiam distance."""
    return -F.cosine_similarity(a, b, dim=-1)


def simsiam_loss(batch: MultiviewBatch, predictor, check_norm: bool = True) -> torch.Tensor:
    """Symmetric stop-gradient loss, averaged over anchors:
    (D(pred(z1), stop(z2)) + D(pred(z2), stop(z1))) / 2 with D = -cosine."""
    _require_empty_k(batch, "simsiam_loss")
    z = _embeddings(batch, check_norm)
    n = batch.index_map.n_anchors
    if tuple(predictor.output_shape) != (z.shape[-1],):
        raise ValueError(
            f"predictor output {predictor.output_shape} does not match embedding dim {z.shape[-1]}")
    z1, z2 = z[:n], z[n:]
    p1, p2 = predictor(z1), predictor(z2)
    d1 = negative_cosine(p1, z2.detach())
    d2 = negative_cosine(p2, z1.detach())
    return 0.5 * d1.mean() + 0.5 * d2.mean()


def a2_simsiam_loss(batch: MultiviewBatch, predictor, cfg: LossConfig,
                    check_norm: bool = True) -> torch.Tensor:
    """SimSiam plus a stop-gradient alignment term for the generated views:
    sum_i (alpha / |k(i)|) sum_{p in k(i)} D(pred(z_p), stop(z_i))."""
    _require_generated(batch, "a2_simsiam_loss")
    z = _embeddings(batch, check_norm)
    base_loss = simsiam_loss(batch.expert_subbatch(), predictor, check_norm=False)
    if cfg.alpha == 0.0:
        return base_loss
    imap = batch.index_map
    sign = -1.0 if cfg.simsiam_negative_cosine else 1.0
    total = z.new_zeros(())
    for i in imap.expert_indices():
        k = imap.generated[i]
        if not k:
            raise ValueError(f"a2_simsiam_loss: anchor row {i} has no generated views")
        preds = predictor(torch.stack([z[p] for p in k]))
        target = z[i].detach().unsqueeze(0).expand_as(preds)
        d = sign * F.cosine_similarity(preds, target, dim=-1)
        total = total + (cfg.alpha / len(k)) * d.sum()
    if cfg.reduction == "mean":
        total = total / imap.n_expert
    return base_loss + total


def compute_loss(batch: MultiviewBatch, cfg: LossConfig, predictor=None,
                 check_norm: bool = True) -> torch.Tensor:
    """Dispatch on cfg.variant; the trainer-facing entry point."""
    if cfg.variant == "simclr":
        return simclr_loss(batch, cfg, check_norm)
    if cfg.variant == "infonce":
        return infonce_two_set(batch, cfg, check_norm)
    if cfg.variant in ("a2_simclr", "a2_infonce", "a2_full"):
        return a2_loss(batch, cfg, check_norm)
    if cfg.variant == "simsiam":
        if predictor is None:
            raise ValueError("simsiam requires a predictor")
        return simsiam_loss(batch, predictor, check_norm)
    if cfg.variant == "a2_simsiam":
        if predictor is None:
            raise ValueError("a2_simsiam requires a predictor")
        return a2_simsiam_loss(batch, predictor, cfg, check_norm)
    raise ValueError(f"unknown loss variant {cfg.variant!r}")
