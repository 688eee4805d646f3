"""Synthetic tasks, CSV ingestion, Dirichlet label-skew partitioning and evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import ModelParams, forward

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError(f"{features.shape[0]} rows but {labels.shape[0]} labels")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx: np.ndarray) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def present_classes(self) -> np.ndarray:
        """Boolean flag per class: at least one example present."""
        return self.class_counts() > 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset
    # row indices into the pool this client was carved from, per split
    indices: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def class_ratios(self) -> np.ndarray:
        counts = self.train.class_counts().astype(np.float64)
        total = counts.sum()
        return counts / total if total > 0 else counts

    @property
    def size(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)

    @property
    def is_empty(self) -> bool:
        return self.size == 0


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 10
    dirichlet_alpha: float = 0.9
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    shared_test: bool = False
    # share of the pool held out as the common test set when shared_test is on
    shared_test_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.num_clients < 2:
            raise ValueError(f"num_clients must be >= 2, got {self.num_clients}")
        if not self.dirichlet_alpha > 0:
            raise ValueError(f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        ratios = tuple(float(r) for r in self.split_ratios)
        if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split_ratios must be three non-negative reals summing to 1, got {self.split_ratios}")
        object.__setattr__(self, "split_ratios", ratios)
        if not 0 < self.shared_test_fraction < 1:
            raise ValueError(f"shared_test_fraction must lie in (0, 1), got {self.shared_test_fraction}")


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total` closest to proportions * total.

    Leftover units go to the largest fractional parts, lowest index first on ties.
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _class_directions(num_classes: int, input_dim: int, rng: np.random.Generator) -> np.ndarray:
    if input_dim < 63 and num_classes > 2**input_dim:
        raise ValueError(
            f"cannot place {num_classes} distinct class directions in {input_dim} dimensions"
        )
    seen: set[bytes] = set()
    dirs = []
    while len(dirs) < num_classes:
        v = rng.choice([-1.0, 1.0], size=input_dim)
        key = v.tobytes()
        if key in seen:
            continue
        seen.add(key)
        dirs.append(v / np.sqrt(input_dim))
    return np.array(dirs)


def generate_synthetic(
    num_classes: int,
    input_dim: int,
    examples_per_class: int,
    class_separation: float,
    noise_sd: float,
    seed: int,
) -> LabeledDataset:
    """Balanced Gaussian blobs centred on distinct scaled hypercube directions."""
    if num_classes < 1 or input_dim < 1 or examples_per_class < 1:
        raise ValueError("num_classes, input_dim and examples_per_class must be positive")
    if not noise_sd > 0:
        raise ValueError(f"noise_sd must be positive, got {noise_sd}")
    rng = np.random.default_rng(seed)
    centres = class_separation * _class_directions(num_classes, input_dim, rng)
    labels = np.repeat(np.arange(num_classes), examples_per_class)
    noise = rng.normal(0.0, noise_sd, size=(labels.shape[0], input_dim))
    return LabeledDataset(centres[labels] + noise, labels, num_classes)


def _split_counts(n: int, ratios: Sequence[float]) -> np.ndarray:
    if n == 0:
        return np.zeros(3, dtype=np.int64)
    return largest_remainder(np.asarray(ratios), n)


def dirichlet_partition(ds: LabeledDataset, cfg: PartitionConfig, seed: int) -> list[ClientDataset]:
    """Label-skewed partition: per class, Dirichlet(alpha) proportions over clients."""
    if len(ds) == 0:
        raise ValueError("cannot partition an empty dataset")
    rng = np.random.default_rng(seed)
    n_clients = cfg.num_clients
    alloc: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        props = rng.dirichlet(np.full(n_clients, cfg.dirichlet_alpha))
        if not np.all(np.isfinite(props)) or props.sum() <= 0:
            # tiny alpha can underflow every component; fall back to a one-hot draw
            props = np.zeros(n_clients)
            props[rng.integers(n_clients)] = 1.0
        counts = largest_remainder(props, members.size)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(n_clients):
            alloc[k].append(members[bounds[k] : bounds[k + 1]])

    clients = []
    for k in range(n_clients):
        rows = np.concatenate(alloc[k]) if alloc[k] else np.zeros(0, dtype=np.int64)
        rows = rng.permutation(np.sort(rows))
        counts = _split_counts(rows.size, cfg.split_ratios)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        idx = {s: rows[bounds[i] : bounds[i + 1]] for i, s in enumerate(SPLITS)}
        client = ClientDataset(
            client_id=k,
            train=ds.subset(idx["train"]),
            validation=ds.subset(idx["validation"]),
            test=ds.subset(idx["test"]),
            indices=idx,
        )
        if client.is_empty:
            logger.warning("client %d received no examples", k)
        clients.append(client)
    return clients


def holdout_split(ds: LabeledDataset, fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset, np.ndarray, np.ndarray]:
    """Seeded random (pool, holdout) split; also returns the row indices of each."""
    rng = np.random.default_rng(seed)
    rows = rng.permutation(len(ds))
    n_hold = int(round(fraction * len(ds)))
    hold, pool = np.sort(rows[:n_hold]), np.sort(rows[n_hold:])
    return ds.subset(pool), ds.subset(hold), pool, hold


def write_partition_manifest(clients: Sequence[ClientDataset], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "split", "row_index"])
        for client in clients:
            for split in SPLITS:
                for row in client.indices.get(split, ()):
                    w.writerow([client.client_id, split, int(row)])


class CsvFormatError(ValueError):
    pass


def load_csv(
    path,
    label_column: str,
    standardize: bool = False,
    feature_columns: Optional[Sequence[str]] = None,
) -> LabeledDataset:
    """Read a headed CSV: every non-label column (or `feature_columns`) is a numeric feature."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty, expected a header row") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise CsvFormatError(f"{path}: label column {label_column!r} not found in header {header}")
        label_idx = header.index(label_column)
        if feature_columns is None:
            feat_idx = [i for i in range(len(header)) if i != label_idx]
        else:
            missing = [c for c in feature_columns if c not in header]
            if missing:
                raise CsvFormatError(f"{path}: feature columns not found: {missing}")
            feat_idx = [header.index(c) for c in feature_columns]

        rows, raw_labels = [], []
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise CsvFormatError(
                    f"{path}: line {line_no} has {len(record)} fields, header has {len(header)}"
                )
            values = []
            for i in feat_idx:
                cell = record[i].strip()
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: line {line_no}, column {header[i]!r}: cannot parse {cell!r} as a number"
                    ) from None
            rows.append(values)
            raw_labels.append(record[label_idx].strip())

    if not raw_labels:
        raise CsvFormatError(f"{path}: no data rows")
    codes: dict[str, int] = {}
    labels = np.array([codes.setdefault(lab, len(codes)) for lab in raw_labels], dtype=np.int64)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_idx))
    if standardize:
        features = standardize_columns(features)
    return LabeledDataset(features, labels, len(codes))


def standardize_columns(features: np.ndarray) -> np.ndarray:
    """Zero mean, unit population variance per column; constant columns become zero."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    centred = features - mu
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, centred / safe, 0.0)


def predict(model: ModelParams, features: np.ndarray) -> np.ndarray:
    # argmax breaks ties toward the lowest class index
    return np.argmax(forward(model, features), axis=1)


def evaluate_accuracy(model: ModelParams, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, ds.features) == ds.labels))


def per_class_accuracy(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Accuracy per class; NaN for classes with no examples."""
    acc = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            acc[c] = float(np.mean(predictions[mask] == c))
    return acc


def weighted_accuracy_from_predictions(
    predictions: np.ndarray, shared_test: LabeledDataset, class_ratios: np.ndarray
) -> float:
    ratios = np.asarray(class_ratios, dtype=np.float64)
    acc = per_class_accuracy(predictions, shared_test.labels, shared_test.num_classes)
    missing = [c for c in range(ratios.shape[0]) if ratios[c] > 0 and np.isnan(acc[c])]
    if missing:
        raise ValueError(f"classes {missing} have nonzero ratio but no shared-test examples")
    return float(sum(ratios[c] * acc[c] for c in range(ratios.shape[0]) if ratios[c] > 0))


def weighted_shared_test_accuracy(model: ModelParams, shared_test: LabeledDataset, class_ratios: np.ndarray) -> float:
    """Per-class accuracy on a shared test set, weighted by a client's class ratios."""
    return weighted_accuracy_from_predictions(predict(model, shared_test.features), shared_test, class_ratios)
