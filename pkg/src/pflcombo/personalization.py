"""Personalization of a trained global model: FT, freeze-base FT, EWC, KD, MoE and their combinations."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data import ClientDataset, LabeledDataset, weighted_accuracy_from_predictions
from .federation import local_train, train_local_baseline
from .model import (
    CrossEntropyLoss,
    Loss,
    ModelParams,
    ModelSpec,
    _backward,
    _forward_values,
    _one_hot,
    check_layouts,
    forward,
    log_softmax,
    per_example_grads,
    softmax,
)
from .seeding import derive_rng

logger = logging.getLogger(__name__)

LOSS_VARIANTS = ("plain", "kd", "mtl")
DEFAULT_MOE_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class PersonalizationPlan:
    use_ft: bool = False
    use_fb: bool = False
    loss_variant: str = "plain"
    use_moe: bool = False
    ft_epochs: int = 5
    ft_lr: Optional[float] = None  # None: reuse the federated local_lr
    lam: float = 1.0
    kd_alpha: float = 0.5
    kd_temperature: float = 2.0
    kd_scale_on_kl: bool = False
    moe_alpha: Union[float, str] = "tuned"
    moe_grid: tuple[float, ...] = DEFAULT_MOE_GRID
    fisher_samples: int = 200

    def __post_init__(self) -> None:
        if self.use_ft and self.use_fb:
            raise ValueError("FT and FB are mutually exclusive")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.loss_variant != "plain" and not (self.use_ft or self.use_fb):
            raise ValueError("KD and MTL modify the finetuning loss and need FT or FB")
        if not (self.use_ft or self.use_fb or self.use_moe):
            raise ValueError("a plan needs at least one of FT, FB or MoE")
        if self.ft_epochs < 1 or self.fisher_samples < 1:
            raise ValueError("ft_epochs and fisher_samples must be positive")
        if self.ft_lr is not None and not self.ft_lr > 0:
            raise ValueError("ft_lr must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= self.kd_alpha <= 1 or not self.kd_temperature > 0:
            raise ValueError("kd_alpha must lie in [0, 1] and kd_temperature be positive")
        if isinstance(self.moe_alpha, str):
            if self.moe_alpha != "tuned":
                raise ValueError("moe_alpha must be a number in [0, 1] or 'tuned'")
        elif not 0 <= self.moe_alpha <= 1:
            raise ValueError("moe_alpha must lie in [0, 1]")
        grid = tuple(float(a) for a in self.moe_grid)
        if any(not 0 <= a <= 1 for a in grid) or 0.0 not in grid or 1.0 not in grid:
            raise ValueError("moe_grid must lie in [0, 1] and contain both 0 and 1")
        object.__setattr__(self, "moe_grid", grid)

    @property
    def flags(self) -> tuple[bool, bool, bool, bool, bool]:
        """(FT, FB, KD, MTL, MoE) check marks."""
        return (
            self.use_ft,
            self.use_fb,
            self.loss_variant == "kd",
            self.loss_variant == "mtl",
            self.use_moe,
        )

    @property
    def row(self) -> int:
        return COMBINATION_FLAGS.index(self.flags) + 1

    @property
    def label(self) -> str:
        names = [n for n, on in zip(("FT", "FB", "KD", "MTL", "MoE"), self.flags) if on]
        return " + ".join(["FL", *names])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["moe_grid"] = list(self.moe_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PersonalizationPlan:
        d = dict(d)
        if "moe_grid" in d:
            d["moe_grid"] = tuple(d["moe_grid"])
        return cls(**d)


# (FT, FB, KD, MTL, MoE) for combination rows 1..13
COMBINATION_FLAGS: tuple[tuple[bool, bool, bool, bool, bool], ...] = (
    (True, False, False, False, False),
    (True, False, True, False, False),
    (True, False, False, True, False),
    (False, True, False, False, False),
    (False, True, True, False, False),
    (False, True, False, True, False),
    (False, False, False, False, True),
    (True, False, False, False, True),
    (True, False, True, False, True),
    (True, False, False, True, True),
    (False, True, False, False, True),
    (False, True, True, False, True),
    (False, True, False, True, True),
)


def plan_for_row(row: int, **hyperparams) -> PersonalizationPlan:
    if not 1 <= row <= len(COMBINATION_FLAGS):
        raise ValueError(f"combination row must be in 1..{len(COMBINATION_FLAGS)}, got {row}")
    ft, fb, kd, mtl, moe = COMBINATION_FLAGS[row - 1]
    variant = "kd" if kd else "mtl" if mtl else "plain"
    return PersonalizationPlan(use_ft=ft, use_fb=fb, loss_variant=variant, use_moe=moe, **hyperparams)


def enumerate_combinations(**hyperparams) -> list[PersonalizationPlan]:
    return [plan_for_row(r, **hyperparams) for r in range(1, len(COMBINATION_FLAGS) + 1)]


def freeze_mask_for_fb(spec: ModelSpec) -> tuple[np.ndarray, bool]:
    """Mask (True = frozen) keeping only the output layer trainable.

    Returns (mask, degenerate); for models without a hidden layer there is no
    base to freeze, the mask is all False and `degenerate` is True.
    """
    mask = np.zeros(spec.parameter_count, dtype=bool)
    if spec.hidden_dim == 0:
        return mask, True
    for name, offset, n in spec.layout:
        if not name.startswith("out."):
            mask[offset : offset + n] = True
    return mask, False


@dataclass(frozen=True, eq=False)
class FisherDiag:
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("Fisher diagonal entries must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def estimate_fisher_diag(
    model: ModelParams, data: LabeledDataset, fisher_samples: int, rng: np.random.Generator
) -> FisherDiag:
    """Empirical diagonal Fisher: mean squared per-example grad of log p(y|x)."""
    if len(data) == 0:
        raise ValueError("cannot estimate Fisher information on an empty dataset")
    n = len(data)
    idx = np.arange(n) if fisher_samples >= n else np.sort(rng.choice(n, size=fisher_samples, replace=False))
    x, y = data.features[idx], data.labels[idx]
    p = softmax(forward(model, x))
    # d(-log p_y)/dlogits = p - onehot; the sign vanishes when squared
    g = per_example_grads(model, x, p - _one_hot(y, model.spec.num_classes))
    return FisherDiag(np.mean(g**2, axis=0))


class EWCLoss(Loss):
    """Cross-entropy plus sum_i (lam/2) F_i (A_i - anchor_i)^2."""

    def __init__(self, anchor: ModelParams, fisher: FisherDiag, lam: float):
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        if fisher.values.shape != anchor.values.shape:
            raise ValueError("Fisher diagonal does not match the anchor layout")
        self.anchor = anchor.values.copy()
        self.fisher = fisher.values.copy()
        self.spec = anchor.spec
        self.lam = float(lam)
        self._ce = CrossEntropyLoss()

    def _evaluate(self, spec, values, x, y, need_grad):
        if spec != self.spec:
            raise ValueError(f"layout mismatch: {spec} vs anchor {self.spec}")
        ce, g = self._ce._evaluate(spec, values, x, y, need_grad)
        diff = values - self.anchor.astype(values.dtype)
        fisher = self.fisher.astype(values.dtype)
        loss = ce + 0.5 * self.lam * np.sum(fisher * diff**2)
        if not need_grad:
            return loss, None
        return loss, g + self.lam * fisher * diff


class KDLoss(Loss):
    """alpha K^2 CE(A) + (1 - alpha) KL(softmax(T/K) || softmax(A/K)), batch-averaged.

    The teacher's parameters are copied at construction so later changes to
    the caller's model cannot leak into training. With `scale_on_kl` the K^2
    factor multiplies the KL term instead of the cross-entropy term.
    """

    def __init__(self, teacher: ModelParams, alpha: float, temperature: float, scale_on_kl: bool = False):
        if not 0 <= alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.teacher = ModelParams(teacher.spec, teacher.values.copy())
        self.alpha = float(alpha)
        self.temperature = float(temperature)
        self.scale_on_kl = scale_on_kl
        self._ce = CrossEntropyLoss()

    @property
    def weights(self) -> tuple[float, float]:
        k2 = self.temperature**2
        if self.scale_on_kl:
            return self.alpha, (1 - self.alpha) * k2
        return self.alpha * k2, 1 - self.alpha

    def _evaluate(self, spec, values, x, y, need_grad):
        if spec != self.teacher.spec:
            raise ValueError(f"layout mismatch: {spec} vs teacher {self.teacher.spec}")
        w_ce, w_kl = self.weights
        K = self.temperature
        ce, g_ce = self._ce._evaluate(spec, values, x, y, need_grad)
        teacher_logits, _ = _forward_values(spec, self.teacher.values.astype(values.dtype), x)
        logits, hidden = _forward_values(spec, values, x)
        log_pt = log_softmax(teacher_logits, K)
        log_ps = log_softmax(logits, K)
        pt = np.exp(log_pt)
        n = x.shape[0]
        kl = np.sum(pt * (log_pt - log_ps)) / n
        loss = w_ce * ce + w_kl * kl
        if not need_grad:
            return loss, None
        dlogits = (np.exp(log_ps) - pt) / (K * n)
        return loss, w_ce * g_ce + w_kl * _backward(spec, values, x, hidden, dlogits)


def ewc_loss(A: ModelParams, batch, global_model: ModelParams, fisher: FisherDiag, lam: float) -> tuple[float, np.ndarray]:
    check_layouts(A, global_model)
    return EWCLoss(global_model, fisher, lam).value_and_grad(A, batch)


def kd_loss(
    A: ModelParams, batch, global_model: ModelParams, alpha: float, temperature: float, scale_on_kl: bool = False
) -> tuple[float, np.ndarray]:
    check_layouts(A, global_model)
    return KDLoss(global_model, alpha, temperature, scale_on_kl).value_and_grad(A, batch)


def moe_predict(first: ModelParams, expert: ModelParams, alpha: float, features: np.ndarray) -> np.ndarray:
    """Weighted average of the two members' class probabilities."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if first.spec.input_dim != expert.spec.input_dim or first.spec.num_classes != expert.spec.num_classes:
        raise ValueError("ensemble members disagree on input or output dimension")
    return alpha * softmax(forward(first, features)) + (1 - alpha) * softmax(forward(expert, features))


def tune_moe_alpha(
    first: ModelParams, expert: ModelParams, validation: LabeledDataset, grid: Sequence[float] = DEFAULT_MOE_GRID
) -> float:
    """Grid value with the best validation accuracy; the smallest wins ties."""
    if len(validation) == 0:
        raise ValueError("cannot tune the ensemble weight on an empty validation set")
    grid = sorted(float(a) for a in grid)
    if grid[0] < 0 or grid[-1] > 1 or 0.0 not in grid or 1.0 not in grid:
        raise ValueError("grid must lie in [0, 1] and contain 0 and 1")
    pf = softmax(forward(first, validation.features))
    pe = softmax(forward(expert, validation.features))
    best_alpha, best_acc = grid[0], -1.0
    for a in grid:
        acc = float(np.mean(np.argmax(a * pf + (1 - a) * pe, axis=1) == validation.labels))
        if acc > best_acc:
            best_alpha, best_acc = a, acc
    return best_alpha


@dataclass
class PersonalizedPredictor:
    global_model: ModelParams
    adapted: Optional[ModelParams] = None
    domain_expert: Optional[ModelParams] = None
    moe_alpha: Optional[float] = None
    flags: list[str] = field(default_factory=list)

    @property
    def base(self) -> ModelParams:
        """The ensemble's first member, or the sole predictor without MoE."""
        return self.adapted if self.adapted is not None else self.global_model

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        if self.domain_expert is not None:
            return moe_predict(self.base, self.domain_expert, self.moe_alpha, features)
        return softmax(forward(self.base, features))

    def predict(self, features: np.ndarray) -> np.ndarray:
        if self.domain_expert is not None:
            return np.argmax(self.predict_proba(features), axis=1)
        return np.argmax(forward(self.base, features), axis=1)


def personalize_client(
    plan: PersonalizationPlan,
    global_model: ModelParams,
    client: ClientDataset,
    spec: ModelSpec,
    seed: int,
    *,
    local_lr: float = 0.1,
    batch_size: int = 16,
    expert_epochs: int = 10,
    domain_expert: Optional[ModelParams] = None,
) -> PersonalizedPredictor:
    """Build one client's predictor from the global model according to `plan`.

    `domain_expert` may be supplied to reuse an already trained local
    baseline; otherwise one is trained here with the same derived seed.
    """
    if global_model.spec != spec:
        raise ValueError(f"global model spec {global_model.spec} differs from {spec}")
    snapshot = ModelParams(spec, global_model.values.copy())
    pred = PersonalizedPredictor(global_model=snapshot)
    if len(client.train) == 0:
        pred.flags.append("empty-train: falling back to the global model")
        return pred

    if plan.use_ft or plan.use_fb:
        lr = plan.ft_lr if plan.ft_lr is not None else local_lr
        if plan.loss_variant == "kd":
            loss: Loss = KDLoss(snapshot, plan.kd_alpha, plan.kd_temperature, plan.kd_scale_on_kl)
        elif plan.loss_variant == "mtl":
            fisher = estimate_fisher_diag(
                snapshot, client.train, plan.fisher_samples, derive_rng(seed, "fisher")
            )
            loss = EWCLoss(snapshot, fisher, plan.lam)
        else:
            loss = CrossEntropyLoss()
        mask = None
        if plan.use_fb:
            mask, degenerate = freeze_mask_for_fb(spec)
            if degenerate:
                pred.flags.append("fb-degenerate: no hidden layer, FB equals FT")
        pred.adapted = local_train(
            snapshot, client.train, plan.ft_epochs, lr, batch_size, loss, mask, derive_rng(seed, "finetune")
        )

    if plan.use_moe:
        if domain_expert is None:
            domain_expert = train_local_baseline(client, spec, expert_epochs, local_lr, batch_size, seed)
        check_layouts(snapshot, domain_expert)
        pred.domain_expert = domain_expert
        if plan.moe_alpha == "tuned":
            tuning = client.validation
            if len(tuning) == 0:
                tuning = client.train
                pred.flags.append("moe-tuned-on-train: empty validation split")
            pred.moe_alpha = tune_moe_alpha(pred.base, domain_expert, tuning, plan.moe_grid)
        else:
            pred.moe_alpha = float(plan.moe_alpha)
    return pred


def evaluate_predictor(
    pred: PersonalizedPredictor, client: ClientDataset, shared_test: Optional[LabeledDataset] = None
) -> float:
    if shared_test is not None:
        if len(shared_test) == 0:
            raise ValueError("empty shared test set")
        return weighted_accuracy_from_predictions(pred.predict(shared_test.features), shared_test, client.class_ratios)
    if len(client.test) == 0:
        raise ValueError(f"client {client.client_id} has an empty test split")
    return float(np.mean(pred.predict(client.test.features) == client.test.labels))

