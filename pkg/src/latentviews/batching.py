"""Index bookkeeping for two-view and multiview contrastive batches.

A batch of N anchors yields 2N expert views laid out as
``[view1 of anchor 0..N-1, view2 of anchor 0..N-1]`` so view ``i`` pairs with
``i + N (mod 2N)``. Generated views, when appended, occupy rows
``2N + a*m + t`` for anchor ``a`` and view slot ``t``; they are positives of
both expert views of their anchor but never anchor a loss row themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class IndexMap:
    """Partner/positive/complement bookkeeping over a view batch.

    ``partner[i]`` is j(i) for expert rows and -1 for generated rows;
    ``generated[i]`` lists k(i). The index set I is ``range(size)``.
    """

    n_anchors: int
    size: int
    partner: np.ndarray
    generated: tuple[tuple[int, ...], ...]

    @property
    def n_expert(self) -> int:
        return 2 * self.n_anchors

    @property
    def views_per_anchor(self) -> int:
        return (self.size - self.n_expert) // self.n_anchors if self.n_anchors else 0

    def expert_indices(self) -> range:
        return range(self.n_expert)

    def generated_indices(self) -> range:
        return range(self.n_expert, self.size)

    def complement(self, i: int) -> list[int]:
        """A(i): every index except i."""
        return [a for a in range(self.size) if a != i]

    def positives(self, i: int) -> list[int]:
        """P(i) = {j(i)} union k(i)."""
        pos = [] if self.partner[i] < 0 else [int(self.partner[i])]
        return pos + list(self.generated[i])

    def anchor_of_view(self, i: int) -> int:
        """Dataset-slot index (0..N-1) owning view row i."""
        if i < self.n_expert:
            return i % self.n_anchors
        return (i - self.n_expert) // self.views_per_anchor

    def validate(self) -> None:
        if self.partner.shape != (self.size,):
            raise ValueError("partner array size mismatch")
        for i in range(self.n_expert):
            j = int(self.partner[i])
            if not (0 <= j < self.n_expert) or int(self.partner[j]) != i or j == i:
                raise ValueError(f"partner map is not an involution at {i}")
        for i in range(self.size):
            if i in self.positives(i):
                raise ValueError(f"view {i} is its own positive")
            for p in self.generated[i]:
                if not (self.n_expert <= p < self.size):
                    raise ValueError(f"k({i}) points outside the generated block")


def build_two_view(batch_size: int) -> IndexMap:
    """Two expert views per anchor, paired i <-> i+N; no generated views."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 (no negatives exist otherwise), got {batch_size}")
    n = batch_size
    partner = np.concatenate([np.arange(n) + n, np.arange(n)]).astype(np.int64)
    generated = tuple(() for _ in range(2 * n))
    return IndexMap(n_anchors=n, size=2 * n, partner=partner, generated=generated)


def append_generated(index_map: IndexMap, views_per_anchor: int) -> IndexMap:
    """Append ``views_per_anchor`` generated-view rows per anchor.

    Both expert views of anchor a point to the same appended rows via k(i);
    appended rows have no partner and no k of their own.
    """
    if views_per_anchor < 1:
        raise ValueError(f"views_per_anchor must be >= 1, got {views_per_anchor}")
    if index_map.size != index_map.n_expert:
        raise ValueError("index map already has generated views")
    n, m = index_map.n_anchors, views_per_anchor
    base = index_map.n_expert
    size = base + n * m
    partner = np.concatenate([index_map.partner[:base], -np.ones(n * m, dtype=np.int64)])
    generated: list[tuple[int, ...]] = []
    for i in range(base):
        a = i % n
        generated.append(tuple(base + a * m + t for t in range(m)))
    generated.extend(() for _ in range(n * m))
    return IndexMap(n_anchors=n, size=size, partner=partner, generated=tuple(generated))


@dataclass
class MultiviewBatch:
    """Views plus embeddings plus the index map that relates them.

    ``anchor_ids[i]`` is the dataset id of the anchor that produced view i;
    rows sharing an id are exactly the mutual positives. ``embeddings`` may be
    None until an encoder has run.
    """

    index_map: IndexMap
    anchor_ids: np.ndarray
    views: torch.Tensor | None = None
    embeddings: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.anchor_ids = np.asarray(self.anchor_ids)
        if self.anchor_ids.shape != (self.index_map.size,):
            raise ValueError("anchor_ids length must equal the number of views")
        if self.views is not None and len(self.views) != self.index_map.size:
            raise ValueError("views length must equal the number of views")
        if self.embeddings is not None and len(self.embeddings) != self.index_map.size:
            raise ValueError("embeddings length must equal the number of views")

    @property
    def n_anchors(self) -> int:
        return self.index_map.n_anchors

    def expert_subbatch(self) -> "MultiviewBatch":
        """The 2N expert rows as a standalone two-view batch."""
        base = self.index_map.n_expert
        sub = build_two_view(self.index_map.n_anchors)
        return MultiviewBatch(
            index_map=sub,
            anchor_ids=self.anchor_ids[:base],
            views=None if self.views is None else self.views[:base],
            embeddings=None if self.embeddings is None else self.embeddings[:base],
        )


def layout_anchor_ids(anchor_ids, views_per_anchor: int = 0) -> np.ndarray:
    """Anchor-id row labels for the standard batch layout."""
    ids = np.asarray(anchor_ids)
    expert = np.concatenate([ids, ids])
    if views_per_anchor == 0:
        return expert
    return np.concatenate([expert, np.repeat(ids, views_per_anchor)])
