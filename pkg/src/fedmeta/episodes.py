"""Labeled datasets and N-way K-shot episode sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Batch
from .rng import as_generator


class EpisodeError(ValueError):
    """Dataset cannot support the requested episode or split."""


@dataclass
class LabeledDataset:
    """Examples stored column-wise.

    ``ids`` give every example a stable identity so that disjointness of
    splits, partitions and support/query sets can be checked exactly.
    ``tags`` are free-form strings per example (modality, source, ...).
    """

    inputs: np.ndarray
    labels: np.ndarray
    tags: tuple[tuple[str, ...], ...] = ()
    ids: np.ndarray | None = None
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.inputs.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels length must equal number of examples")
        if not self.tags:
            self.tags = ((),) * n
        self.tags = tuple(tuple(t) for t in self.tags)
        if len(self.tags) != n:
            raise ValueError("tags length must equal number of examples")
        self.ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,) or len(np.unique(self.ids)) != n:
            raise ValueError("ids must be unique, one per example")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.inputs[idx], self.labels[idx], tuple(self.tags[i] for i in idx),
            self.ids[idx], dict(self.label_names),
        )

    def where(self, predicate) -> LabeledDataset:
        """Keep examples for which ``predicate(label, tags)`` is true."""
        keep = [i for i in range(len(self)) if predicate(int(self.labels[i]), self.tags[i])]
        return self.subset(keep)

    def tag_values(self, prefix: str) -> list[str]:
        """Distinct values of tags written as ``prefix:value``."""
        head = prefix + ":"
        return sorted({t[len(head):] for tags in self.tags for t in tags if t.startswith(head)})

    def with_tag(self, prefix: str, value: str) -> LabeledDataset:
        tag = f"{prefix}:{value}"
        return self.where(lambda _, tags: tag in tags)

    @staticmethod
    def concat(parts: list[LabeledDataset]) -> LabeledDataset:
        names = {}
        for p in parts:
            names.update(p.label_names)
        return LabeledDataset(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
            tuple(t for p in parts for t in p.tags),
            np.concatenate([p.ids for p in parts]),
            names,
        )


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 2
    k_shot: int = 5
    q_query: int = 5

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError("n_way must be at least 2")
        if self.k_shot < 1 or self.q_query < 1:
            raise ValueError("k_shot and q_query must be positive")

    @property
    def per_class(self) -> int:
        return self.k_shot + self.q_query


@dataclass
class Episode:
    support: Batch
    query: Batch
    class_map: dict[int, int]


def split_train_test(dataset: LabeledDataset, ratio: float, seed) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split; each class sends round(ratio * count) to the first part.

    Both parts keep at least one example of every class.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    rng = as_generator(seed)
    first, second = [], []
    for c in dataset.classes():
        idx = dataset.class_indices(c)
        if len(idx) < 2:
            raise EpisodeError(f"class {c} has fewer than 2 examples")
        n_first = min(max(int(np.floor(ratio * len(idx) + 0.5)), 1), len(idx) - 1)
        perm = rng.permutation(idx)
        first.extend(perm[:n_first])
        second.extend(perm[n_first:])
    return dataset.subset(np.sort(first)), dataset.subset(np.sort(second))


def eligible_classes(dataset: LabeledDataset, spec: EpisodeSpec) -> list[int]:
    labels, counts = np.unique(dataset.labels, return_counts=True)
    return [int(c) for c, n in zip(labels, counts) if n >= spec.per_class]


def sample_episode(dataset: LabeledDataset, spec: EpisodeSpec, seed) -> Episode:
    """Draw N classes, then K + Q examples per class, without replacement.

    Episode labels follow the order in which classes were drawn.
    """
    rng = as_generator(seed)
    pool = eligible_classes(dataset, spec)
    if len(pool) < spec.n_way:
        raise EpisodeError(
            f"need {spec.n_way} classes with >= {spec.per_class} examples, found {len(pool)}"
        )
    chosen = rng.choice(np.asarray(pool), size=spec.n_way, replace=False)
    sup, qry = [], []
    for c in chosen:
        picked = rng.choice(dataset.class_indices(c), size=spec.per_class, replace=False)
        sup.append(picked[:spec.k_shot])
        qry.append(picked[spec.k_shot:])
    sup_idx, qry_idx = np.concatenate(sup), np.concatenate(qry)
    episode_labels = np.arange(spec.n_way)
    return Episode(
        support=Batch(dataset.inputs[sup_idx], np.repeat(episode_labels, spec.k_shot), dataset.ids[sup_idx]),
        query=Batch(dataset.inputs[qry_idx], np.repeat(episode_labels, spec.q_query), dataset.ids[qry_idx]),
        class_map={int(c): i for i, c in enumerate(chosen)},
    )
