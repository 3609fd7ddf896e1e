import numpy as np
import pytest
import torch

from latentviews.batching import MultiviewBatch, append_generated, build_two_view, layout_anchor_ids


def rand_unit_rows(rng: np.random.Generator, n: int, k: int) -> torch.Tensor:
    z = rng.standard_normal((n, k))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return torch.as_tensor(z, dtype=torch.float64)


def make_batch(rng: np.random.Generator, n_anchors: int, views_per_anchor: int = 0,
               dim: int = 8) -> MultiviewBatch:
    """Random unit-embedding batch in the standard layout."""
    imap = build_two_view(n_anchors)
    if views_per_anchor:
        imap = append_generated(imap, views_per_anchor)
    return MultiviewBatch(
        index_map=imap,
        anchor_ids=layout_anchor_ids(np.arange(n_anchors), views_per_anchor),
        embeddings=rand_unit_rows(rng, imap.size, dim),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
