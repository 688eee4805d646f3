"""Small exact-gradient classifier: logistic regression or a one-hidden-layer tanh MLP.

Parameters live in one flat float64 vector so that client models can be
averaged, clipped and median-ed coordinate by coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.hidden_dim < 0:
            raise ValueError(f"hidden_dim must be >= 0, got {self.hidden_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.hidden_dim == 0:
            return [
                ("out.weight", (self.input_dim, self.num_classes)),
                ("out.bias", (self.num_classes,)),
            ]
        return [
            ("hidden.weight", (self.input_dim, self.hidden_dim)),
            ("hidden.bias", (self.hidden_dim,)),
            ("out.weight", (self.hidden_dim, self.num_classes)),
            ("out.bias", (self.num_classes,)),
        ]

    @property
    def layout(self) -> list[tuple[str, int, int]]:
        """(layer_name, offset, length) triples in storage order."""
        out, offset = [], 0
        for name, shape in self.layer_shapes:
            n = int(np.prod(shape))
            out.append((name, offset, n))
            offset += n
        return out

    @property
    def parameter_count(self) -> int:
        return sum(n for _, _, n in self.layout)


def parameter_count(spec: ModelSpec) -> int:
    return spec.parameter_count


@dataclass(frozen=True, eq=False)
class ModelParams:
    """A model as (spec, flat parameter vector). Treated as an immutable value."""

    spec: ModelSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)  # private copy
        if values.shape != (self.spec.parameter_count,):
            raise ValueError(
                f"expected {self.spec.parameter_count} values for {self.spec}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("model parameters must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def layer_layout(self) -> list[tuple[str, int, int]]:
        return self.spec.layout

    def layers(self) -> dict[str, np.ndarray]:
        """Reshaped read-only views of each layer."""
        out = {}
        for (name, shape), (_, offset, n) in zip(self.spec.layer_shapes, self.spec.layout):
            out[name] = self.values[offset : offset + n].reshape(shape)
        return out

    def with_values(self, values: np.ndarray) -> ModelParams:
        return ModelParams(self.spec, values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def check_layouts(*models: ModelParams) -> None:
    spec = models[0].spec
    for m in models[1:]:
        if m.spec != spec:
            raise ValueError(f"layout mismatch: {m.spec} vs {spec}")


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.parameter_count)
    for (name, shape), (_, offset, n) in zip(spec.layer_shapes, spec.layout):
        if name.endswith(".weight"):
            bound = 1.0 / np.sqrt(shape[0])
            values[offset : offset + n] = rng.uniform(-bound, bound, size=n)
    return ModelParams(spec, values)


def _unpack(spec: ModelSpec, values: np.ndarray) -> list[np.ndarray]:
    return [
        values[offset : offset + n].reshape(shape)
        for (_, shape), (_, offset, n) in zip(spec.layer_shapes, spec.layout)
    ]


def _forward_values(spec: ModelSpec, values: np.ndarray, x: np.ndarray):
    """Returns (logits, hidden activations or None). Dtype follows `values`."""
    if spec.hidden_dim == 0:
        w, b = _unpack(spec, values)
        return x @ w + b, None
    w1, b1, w2, b2 = _unpack(spec, values)
    h = np.tanh(x @ w1 + b1)
    return h @ w2 + b2, h


def _check_features(spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(
            f"expected features of shape (n, {spec.input_dim}), got {x.shape}"
        )
    return x


def forward(model: ModelParams, features: np.ndarray) -> np.ndarray:
    x = _check_features(model.spec, features)
    logits, _ = _forward_values(model.spec, model.values, x)
    return logits


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis, with max-subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _backward(spec: ModelSpec, values: np.ndarray, x: np.ndarray, hidden, dlogits) -> np.ndarray:
    """Gradient of sum_n <dlogits[n], logits[n]> with respect to the flat parameters."""
    if spec.hidden_dim == 0:
        parts = [x.T @ dlogits, dlogits.sum(axis=0)]
    else:
        _, _, w2, _ = _unpack(spec, values)
        dh = (dlogits @ w2.T) * (1.0 - hidden**2)
        parts = [x.T @ dh, dh.sum(axis=0), hidden.T @ dlogits, dlogits.sum(axis=0)]
    return np.concatenate([p.ravel() for p in parts])


def per_example_grads(model: ModelParams, features: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Row n is the parameter gradient of <dlogits[n], logits[n]>; shape (n, P)."""
    spec = model.spec
    x = _check_features(spec, features)
    _, hidden = _forward_values(spec, model.values, x)
    if spec.hidden_dim == 0:
        parts = [np.einsum("ni,nk->nik", x, dlogits), dlogits]
    else:
        _, _, w2, _ = _unpack(spec, model.values)
        dh = (dlogits @ w2.T) * (1.0 - hidden**2)
        parts = [
            np.einsum("ni,nj->nij", x, dh),
            dh,
            np.einsum("nj,nk->njk", hidden, dlogits),
            dlogits,
        ]
    n = x.shape[0]
    return np.concatenate([p.reshape(n, -1) for p in parts], axis=1)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_batch(spec: ModelSpec, batch) -> tuple[np.ndarray, np.ndarray]:
    x = _check_features(spec, batch.features)
    y = np.asarray(batch.labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (x.shape[0],):
        raise ValueError("labels do not match feature rows")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return x, y


class Loss:
    """Base class for the differentiable losses `grad` knows how to handle.

    Subclasses implement `_evaluate(spec, values, x, y, need_grad)` returning
    (mean loss, flat gradient or None). `values` may be any float dtype; the
    finite-difference checker evaluates in extended precision.
    """

    def value(self, model: ModelParams, batch) -> float:
        x, y = _check_batch(model.spec, batch)
        loss, _ = self._evaluate(model.spec, model.values, x, y, need_grad=False)
        return float(loss)

    def value_and_grad(self, model: ModelParams, batch) -> tuple[float, np.ndarray]:
        x, y = _check_batch(model.spec, batch)
        loss, g = self._evaluate(model.spec, model.values, x, y, need_grad=True)
        return float(loss), g

    def _evaluate(self, spec, values, x, y, need_grad):  # pragma: no cover - abstract
        raise NotImplementedError


class CrossEntropyLoss(Loss):
    def _evaluate(self, spec, values, x, y, need_grad):
        x = x.astype(values.dtype, copy=False)
        logits, hidden = _forward_values(spec, values, x)
        n = x.shape[0]
        logp = log_softmax(logits)
        loss = -logp[np.arange(n), y].mean()
        if not need_grad:
            return loss, None
        dlogits = (np.exp(logp) - _one_hot(y, spec.num_classes)) / n
        return loss, _backward(spec, values, x, hidden, dlogits)


def cross_entropy(model: ModelParams, batch) -> float:
    """Mean negative log-probability of the true labels."""
    return CrossEntropyLoss().value(model, batch)


def grad(loss_fn: Loss, model: ModelParams, batch) -> np.ndarray:
    if not isinstance(loss_fn, Loss):
        raise TypeError(f"unregistered loss: {loss_fn!r}")
    return loss_fn.value_and_grad(model, batch)[1]


def sgd_step(model: ModelParams, g: np.ndarray, lr: float) -> ModelParams:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != model.values.shape:
        raise ValueError(f"gradient length {g.shape} does not match model {model.values.shape}")
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    return model.with_values(model.values - lr * g)


def finite_diff_check(loss_fn: Loss, model: ModelParams, batch, eps: float = 1e-6) -> float:
    """Worst relative error between grad() and central differences.

    Loss values for the differences are evaluated in extended precision so
    that cancellation noise stays far below the analytic gradient's scale.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    analytic = grad(loss_fn, model, batch)
    x, y = _check_batch(model.spec, batch)
    base = model.values.astype(np.longdouble)
    x_ext = x.astype(np.longdouble)
    worst = 0.0
    for i in range(base.shape[0]):
        plus, minus = base.copy(), base.copy()
        plus[i] += eps
        minus[i] -= eps
        lp, _ = loss_fn._evaluate(model.spec, plus, x_ext, y, need_grad=False)
        lm, _ = loss_fn._evaluate(model.spec, minus, x_ext, y, need_grad=False)
        # the step actually taken after rounding, not the nominal eps
        numeric = float((lp - lm) / (plus[i] - minus[i]))
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
