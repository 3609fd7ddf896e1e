"""Evaluation protocol: linear probe, k-NN accuracy, and a Donsker-Varadhan
mutual-information estimator (MINE).

The probe and k-NN run on frozen embeddings; both expose an embeddings-level
core (used directly by tests and oracles) plus an encoder-level wrapper.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .modelzoo import encode

logger = logging.getLogger(__name__)


@dataclass
class MineConfig:
    hidden: int = 128
    steps: int = 2000
    batch: int = 256
    lr: float = 5e-4
    ema_decay: float = 0.01
    eval_fraction: float = 0.2
    eval_every: int = 100
    eval_shuffles: int = 4
    smooth_last: int = 5
    divergence_bound: float = 20.0


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    k: int = 5
    mine: MineConfig = field(default_factory=MineConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def embed_images(encoder, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Unit embeddings of an image stack, computed in no-grad chunks."""
    out = []
    with torch.no_grad():
        for lo in range(0, len(images), batch_size):
            out.append(encode(encoder, images[lo:lo + batch_size]))
    return torch.cat(out)


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

def linear_probe_embeddings(train_z, train_y, test_z, test_y,
                            cfg: ProbeConfig | None = None, seed: int = 0) -> float:
    """Train one linear layer on fixed embeddings; top-1 test accuracy.

    Embeddings are standardized per dimension with train-split statistics
    first: contrastive encoders can concentrate all samples in a tiny cone,
    where class information survives at a scale SGD on raw features never
    reaches.
    """
    cfg = cfg or ProbeConfig()
    train_z = torch.as_tensor(train_z)
    test_z = torch.as_tensor(test_z, dtype=train_z.dtype)
    train_y = torch.as_tensor(np.asarray(train_y), dtype=torch.long)
    test_y = torch.as_tensor(np.asarray(test_y), dtype=torch.long)
    classes = int(train_y.max()) + 1
    if len(torch.unique(train_y)) < 2:
        raise ValueError("linear probe needs at least two classes in the training set")

    mu = train_z.mean(dim=0)
    sd = train_z.std(dim=0).clamp_min(1e-6)
    train_z = (train_z - mu) / sd
    test_z = (test_z - mu) / sd

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        head = nn.Linear(train_z.shape[1], classes).to(train_z.dtype)
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed)
    n = len(train_z)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = loss_fn(head(train_z[idx]), train_y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        pred = head(test_z).argmax(dim=1)
    return float((pred == test_y).double().mean())


def linear_probe(encoder, train_images, train_y, test_images, test_y,
                 cfg: ProbeConfig | None = None, seed: int = 0) -> float:
    """Freeze the backbone, embed both splits, probe. Never mutates the encoder."""
    train_z = embed_images(encoder, train_images)
    test_z = embed_images(encoder, test_images)
    return linear_probe_embeddings(train_z, train_y, test_z, test_y, cfg, seed)


# ---------------------------------------------------------------------------
# k-NN
# ---------------------------------------------------------------------------

def knn_accuracy(train_z, train_y, test_z, test_y, k: int = 5) -> float:
    """Majority vote among the k nearest training embeddings by cosine distance.

    Embeddings are expected unit-norm, so cosine distance is 1 - dot. Equal
    distances order by training index (stable sort); a vote tie goes to the
    class whose member has the smallest training index among the k neighbors.
    """
    train_z = np.asarray(torch.as_tensor(train_z).detach().cpu(), dtype=np.float64)
    test_z = np.asarray(torch.as_tensor(test_z).detach().cpu(), dtype=np.float64)
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    if len(train_z) == 0:
        raise ValueError("k-NN needs a non-empty training set")
    if k > len(train_z):
        raise ValueError(f"k={k} exceeds training set size {len(train_z)}")

    dists = 1.0 - test_z @ train_z.T
    correct = 0
    for row, true_label in zip(dists, test_y):
        neighbors = np.argsort(row, kind="stable")[:k]
        votes: dict[int, int] = {}
        first_index: dict[int, int] = {}
        for idx in neighbors:
            label = int(train_y[idx])
            votes[label] = votes.get(label, 0) + 1
            first_index.setdefault(label, int(idx))
            first_index[label] = min(first_index[label], int(idx))
        best = max(votes.items(), key=lambda kv: (kv[1], -first_index[kv[0]]))
        correct += int(best[0] == int(true_label))
    return correct / len(test_y)


def knn_eval(encoder, train_images, train_y, test_images, test_y, k: int = 5) -> float:
    train_z = embed_images(encoder, train_images)
    test_z = embed_images(encoder, test_images)
    return knn_accuracy(train_z, train_y, test_z, test_y, k)


# ---------------------------------------------------------------------------
# MINE
# ---------------------------------------------------------------------------

class _Critic(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, u, v):
        return self.net(torch.cat([u, v], dim=1)).squeeze(-1)


def _dv_bound(critic, u, v, rng) -> float:
    perm = torch.as_tensor(rng.permutation(len(v)))
    with torch.no_grad():
        t_joint = critic(u, v)
        t_marg = critic(u, v[perm])
        return float(t_joint.mean() - torch.logsumexp(t_marg, dim=0) + np.log(len(t_marg)))


def mine_estimate(u, v, cfg: MineConfig | None = None, seed: int = 0) -> float:
    """Donsker-Varadhan lower bound on I(u; v), in nats.

    The critic trains on a split of the pairs with the moving-average
    correction on the log-partition gradient; the reported value is the mean
    of the last few held-out bound evaluations, clamped at zero. Marginal
    samples come from in-batch shuffling of v.
    """
    cfg = cfg or MineConfig()
    u = np.asarray(u, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if u.ndim == 1:
        u = u[:, None]
    if v.ndim == 1:
        v = v[:, None]
    if len(u) != len(v):
        raise ValueError("u and v must pair up")
    if len(u) < 1000:
        raise ValueError(f"mine_estimate needs at least 1000 pairs, got {len(u)}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(u))
    n_eval = max(1, int(len(u) * cfg.eval_fraction))
    eval_idx, train_idx = order[:n_eval], order[n_eval:]
    u_t, v_t = torch.from_numpy(u), torch.from_numpy(v)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        critic = _Critic(u.shape[1] + v.shape[1], cfg.hidden)
    opt = torch.optim.Adam(critic.parameters(), lr=cfg.lr)

    ema = None
    eval_bounds: list[float] = []
    for step in range(cfg.steps):
        idx = rng.choice(train_idx, size=min(cfg.batch, len(train_idx)), replace=False)
        bu, bv = u_t[idx], v_t[idx]
        perm = torch.as_tensor(rng.permutation(len(idx)))
        t_joint = critic(bu, bv)
        t_marg = critic(bu, bv[perm])
        mean_exp = t_marg.exp().mean()
        batch_mean = float(mean_exp.detach())
        ema = batch_mean if ema is None else \
            (1.0 - cfg.ema_decay) * ema + cfg.ema_decay * batch_mean
        loss = -(t_joint.mean() - mean_exp / ema)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float((t_joint.mean() - mean_exp.log()).detach())
        if value > cfg.divergence_bound:
            raise RuntimeError(
                f"MINE critic diverged: bound {value:.2f} nats at step {step}")
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            bounds = [_dv_bound(critic, u_t[eval_idx], v_t[eval_idx], rng)
                      for _ in range(cfg.eval_shuffles)]
            eval_bounds.append(float(np.mean(bounds)))

    smoothed = float(np.mean(eval_bounds[-cfg.smooth_last:]))
    return max(0.0, smoothed)
