"""Round loop: sample clients, train locally from the current global model, aggregate."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .aggregation import AggregationPolicy, ClientUpdate, aggregate
from .data import ClientDataset, LabeledDataset, evaluate_accuracy
from .model import Batch, CrossEntropyLoss, Loss, ModelParams, ModelSpec, _check_batch, check_layouts, init_model
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

REGIMES = ("cross_silo", "cross_device")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 2
    local_lr: float = 0.1
    batch_size: int = 16
    regime: str = "cross_silo"
    sample_size: Optional[int] = None  # cross_device only; None means all clients
    policy: AggregationPolicy = field(default_factory=AggregationPolicy)
    seed: int = 0
    workers: int = 1
    eval_every: int = 0  # 0 disables per-round evaluation

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs and batch_size must be positive")
        if not self.local_lr > 0:
            raise ValueError(f"local_lr must be positive, got {self.local_lr}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.sample_size is not None and self.sample_size < 1:
            raise ValueError("sample_size must be positive")
        if self.workers < 1 or self.eval_every < 0:
            raise ValueError("workers must be >= 1 and eval_every >= 0")

    def participants_per_round(self, num_clients: int) -> int:
        if self.regime == "cross_silo" or self.sample_size is None:
            return num_clients
        if self.sample_size > num_clients:
            raise ValueError(f"sample_size {self.sample_size} exceeds {num_clients} clients")
        return self.sample_size


@dataclass
class RoundLog:
    round: int
    participant_ids: list[int]
    skipped_ids: list[int] = field(default_factory=list)  # sampled but holding no training data
    pre_acc: dict[int, float] = field(default_factory=dict)
    post_acc: dict[int, float] = field(default_factory=dict)


def _apply_mask(g: np.ndarray, freeze_mask: Optional[np.ndarray]) -> np.ndarray:
    if freeze_mask is None:
        return g
    return np.where(freeze_mask, 0.0, g)


def local_train(
    start: ModelParams,
    train: LabeledDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    loss_fn: Optional[Loss] = None,
    freeze_mask: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> ModelParams:
    """Mini-batch SGD for `epochs` passes with a fresh shuffle per epoch.

    Frozen coordinates (mask True) never move. An empty training set returns
    `start` unchanged and logs a warning.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(train) == 0:
        logger.warning("local_train called with an empty training set; returning the start model")
        return start
    if freeze_mask is not None:
        freeze_mask = np.asarray(freeze_mask, dtype=bool)
        if freeze_mask.shape != start.values.shape:
            raise ValueError("freeze_mask length does not match the model")
    loss_fn = loss_fn or CrossEntropyLoss()
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = start.spec
    # validate once; the inner loop works on raw arrays
    x, y = _check_batch(spec, Batch(train.features, train.labels))
    values = start.values.copy()
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            _, g = loss_fn._evaluate(spec, values, x[idx], y[idx], True)
            values = values - lr * _apply_mask(g, freeze_mask)
    return start.with_values(values)


def sample_clients(num_clients: int, m: int, round_t: int, seed: int) -> list[int]:
    if not 1 <= m <= num_clients:
        raise ValueError(f"cannot sample {m} of {num_clients} clients")
    if m == num_clients:
        return list(range(num_clients))
    rng = derive_rng(seed, "sample", round_t)
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


UpdateHook = Callable[[int, ClientUpdate, ModelParams], ClientUpdate]


def scaling_attack(attacker_ids: Sequence[int], factor: float, mode: str = "model") -> UpdateHook:
    """Hook that makes `attacker_ids` send scaled updates.

    mode="model" sends factor * P (the submitted weights themselves are
    scaled); mode="delta" sends G + factor * (P - G).
    """
    if mode not in ("model", "delta"):
        raise ValueError("mode must be 'model' or 'delta'")
    attackers = frozenset(attacker_ids)

    def hook(round_t: int, update: ClientUpdate, global_prev: ModelParams) -> ClientUpdate:
        if update.client_id not in attackers:
            return update
        if mode == "model":
            forged = factor * update.params.values
        else:
            forged = global_prev.values + factor * (update.params.values - global_prev.values)
        return ClientUpdate(update.client_id, update.params.with_values(forged))

    return hook


def _evaluate_clients(model: ModelParams, clients: Sequence[ClientDataset]) -> dict[int, float]:
    return {c.client_id: evaluate_accuracy(model, c.test) for c in clients if len(c.test)}


def run_federated_training(
    cfg: FederationConfig,
    clients: Sequence[ClientDataset],
    init: ModelParams,
    update_hook: Optional[UpdateHook] = None,
) -> tuple[ModelParams, list[RoundLog]]:
    if not clients:
        raise ValueError("no clients")
    by_id = {c.client_id: c for c in clients}
    ids = sorted(by_id)
    m = cfg.participants_per_round(len(ids))
    global_model = init
    logs: list[RoundLog] = []
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    def train_one(args):
        cid, round_t, start = args
        rng = derive_rng(cfg.seed, "local", round_t, cid)
        params = local_train(start, by_id[cid].train, cfg.local_epochs, cfg.local_lr, cfg.batch_size, rng=rng)
        return ClientUpdate(cid, params)

    try:
        for t in range(1, cfg.rounds + 1):
            chosen = [ids[i] for i in sample_clients(len(ids), m, t, cfg.seed)]
            active = [cid for cid in chosen if len(by_id[cid].train) > 0]
            log = RoundLog(t, chosen, skipped_ids=[cid for cid in chosen if cid not in active])
            evaluate = cfg.eval_every and t % cfg.eval_every == 0
            if evaluate:
                log.pre_acc = _evaluate_clients(global_model, clients)
            if active:
                jobs = [(cid, t, global_model) for cid in active]
                updates = list(pool.map(train_one, jobs)) if pool else [train_one(j) for j in jobs]
                if update_hook is not None:
                    updates = [update_hook(t, u, global_model) for u in updates]
                global_model = aggregate(cfg.policy, global_model, updates, derive_rng(cfg.seed, "server-noise", t))
            else:
                logger.warning("round %d: no participant has training data; keeping the previous model", t)
            if evaluate:
                log.post_acc = _evaluate_clients(global_model, clients)
            logs.append(log)
    finally:
        if pool:
            pool.shutdown()
    check_layouts(init, global_model)
    return global_model, logs


def write_round_logs(logs: Sequence[RoundLog], path) -> None:
    """CSV with columns round, client_id, pre_acc, post_acc (blank when not evaluated)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client_id", "pre_acc", "post_acc"])
        for log in logs:
            ids = sorted(set(log.participant_ids) | set(log.pre_acc) | set(log.post_acc))
            for cid in ids:
                pre, post = log.pre_acc.get(cid), log.post_acc.get(cid)
                w.writerow([log.round, cid, "" if pre is None else repr(pre), "" if post is None else repr(post)])


def train_local_baseline(
    client: ClientDataset, spec: ModelSpec, epochs: int, lr: float, batch_size: int, seed: int
) -> ModelParams:
    """A model trained from scratch on one client's data only (also the MoE domain expert)."""
    if len(client.train) == 0:
        raise ValueError(f"client {client.client_id} has no training data")
    init = init_model(spec, derive_seed(seed, "baseline-init"))
    return local_train(init, client.train, epochs, lr, batch_size, rng=derive_rng(seed, "baseline-train"))
