"""End-to-end experiment: data, local baselines, federated scenarios, the personalization grid."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..data import (
    ClientDataset,
    LabeledDataset,
    dirichlet_partition,
    evaluate_accuracy,
    generate_synthetic,
    holdout_split,
    load_csv,
    weighted_shared_test_accuracy,
)
from ..federation import RoundLog, run_federated_training, train_local_baseline
from ..model import ModelParams, ModelSpec, init_model
from ..personalization import PersonalizedPredictor, evaluate_predictor, personalize_client
from ..seeding import derive_rng, derive_seed
from .config import ExperimentConfig
from .report import MetricsRecord, MetricsTable

logger = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    pass


@dataclass
class PreparedData:
    spec: ModelSpec
    clients: list[ClientDataset]
    shared_test: Optional[LabeledDataset]
    pool_rows: np.ndarray  # client split indices point into these dataset rows
    holdout_rows: np.ndarray


@dataclass
class ExperimentResult:
    table: MetricsTable
    data: PreparedData
    evaluated_ids: list[int]
    baselines: dict[int, ModelParams]
    global_models: dict[str, ModelParams]
    round_logs: dict[str, list[RoundLog]]
    predictors: dict[tuple[str, int, int], PersonalizedPredictor] = field(default_factory=dict)


def _load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.data
    if d.source == "csv":
        return load_csv(d.csv_path, d.label_column, standardize=d.standardize, feature_columns=d.feature_columns)
    return generate_synthetic(
        d.num_classes, d.input_dim, d.examples_per_class, d.class_separation, d.noise_sd, derive_seed(cfg.seed, "data")
    )


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    ds = _load_dataset(cfg)
    spec = ModelSpec(ds.input_dim, cfg.model.hidden_dim, ds.num_classes)
    part = cfg.partition
    if part.shared_test:
        pool, shared, pool_rows, hold_rows = holdout_split(ds, part.shared_test_fraction, derive_seed(cfg.seed, "holdout"))
    else:
        pool, shared = ds, None
        pool_rows, hold_rows = np.arange(len(ds)), np.arange(0)
    clients = dirichlet_partition(pool, part, derive_seed(cfg.seed, "partition"))
    return PreparedData(spec, clients, shared, pool_rows, hold_rows)


def partition_manifest_rows(data: PreparedData) -> list[tuple[int, str, int]]:
    """(client_id, split, original row index); shared-test rows use client_id -1."""
    rows = []
    for c in data.clients:
        for split in ("train", "validation", "test"):
            rows.extend((c.client_id, split, int(data.pool_rows[i])) for i in c.indices.get(split, ()))
    rows.extend((-1, "shared_test", int(i)) for i in data.holdout_rows)
    return rows


def evaluation_clients(cfg: ExperimentConfig, data: PreparedData) -> list[int]:
    shared = data.shared_test is not None
    eligible = [c.client_id for c in data.clients if len(c.train) > 0 and (shared or len(c.test) > 0)]
    skipped = sorted({c.client_id for c in data.clients} - set(eligible))
    if skipped:
        logger.warning("clients %s lack train or test data and are not evaluated", skipped)
    if not eligible:
        raise ExperimentError("no client has both training and test data")
    k = cfg.personalization.eval_clients
    if k is not None and k < len(eligible):
        rng = derive_rng(cfg.seed, "eval-clients")
        eligible = sorted(int(i) for i in rng.choice(eligible, size=k, replace=False))
    return eligible


def _model_accuracy(model: ModelParams, client: ClientDataset, shared: Optional[LabeledDataset]) -> float:
    if shared is not None:
        return weighted_shared_test_accuracy(model, shared, client.class_ratios)
    return evaluate_accuracy(model, client.test)


def _context(fn, where: str):
    def wrapped(*args):
        try:
            return fn(*args)
        except ExperimentError:
            raise
        except Exception as e:
            raise ExperimentError(f"{where(*args)}: {type(e).__name__}: {e}") from e

    return wrapped


def run_experiment_detailed(cfg: ExperimentConfig, keep_predictors: bool = False) -> ExperimentResult:
    data = prepare_data(cfg)
    by_id = {c.client_id: c for c in data.clients}
    eval_ids = evaluation_clients(cfg, data)
    fed, pers = cfg.federation, cfg.personalization
    lr = fed.local_lr
    baseline_lr = pers.baseline_lr if pers.baseline_lr is not None else lr
    shared = data.shared_test
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    run = pool.map if pool else map

    def baseline(cid: int) -> ModelParams:
        seed = derive_seed(cfg.seed, "baseline", cid)
        return train_local_baseline(by_id[cid], data.spec, pers.baseline_epochs, baseline_lr, fed.batch_size, seed)

    def personalize(job):
        scenario, row, cid = job
        pred = personalize_client(
            pers.plan(row),
            global_models[scenario],
            by_id[cid],
            data.spec,
            derive_seed(cfg.seed, "personalize", scenario, row, cid),
            local_lr=lr,
            batch_size=fed.batch_size,
            expert_epochs=pers.baseline_epochs,
            domain_expert=baselines[cid],
        )
        return pred, evaluate_predictor(pred, by_id[cid], shared)

    try:
        baselines = dict(
            zip(eval_ids, run(_context(baseline, lambda cid: f"approach=local client={cid}"), eval_ids))
        )
        init = init_model(data.spec, derive_seed(cfg.seed, "init"))
        global_models, logs = {}, {}
        for scenario in fed.enabled_scenarios():
            fcfg = fed.federation_config(scenario, derive_seed(cfg.seed, "federation"), cfg.workers)
            try:
                global_models[scenario], logs[scenario] = run_federated_training(fcfg, data.clients, init)
            except Exception as e:
                raise ExperimentError(f"scenario={scenario} approach=fl: {type(e).__name__}: {e}") from e

        records = []
        for scenario in global_models:
            for cid in eval_ids:
                client = by_id[cid]
                records.append(MetricsRecord(scenario, "local", cid, _model_accuracy(baselines[cid], client, shared)))
                records.append(MetricsRecord(scenario, "fl", cid, _model_accuracy(global_models[scenario], client, shared)))
        jobs = [(s, row, cid) for s in global_models for row in pers.rows for cid in eval_ids]
        where = lambda job: f"scenario={job[0]} approach=row{job[1]} client={job[2]}"  # noqa: E731
        predictors = {}
        for job, (pred, acc) in zip(jobs, run(_context(personalize, where), jobs)):
            records.append(MetricsRecord(job[0], f"row{job[1]}", job[2], acc))
            if keep_predictors:
                predictors[job] = pred
    finally:
        if pool:
            pool.shutdown()
    return ExperimentResult(MetricsTable(records), data, eval_ids, baselines, global_models, logs, predictors)


def run_experiment(cfg: ExperimentConfig) -> MetricsTable:
    return run_experiment_detailed(cfg).table
