"""The four context-learning algorithms and their evaluation machinery.

Server side: DCL trains a deep (hidden-layer) network; CL trains a
single-layer network plus per-class decision thresholds. Client side: ADCL
predicts by running the DCL network forward and taking the argmax; LCL
predicts by comparing the single-layer outputs against the CL thresholds.
Clients never learn; they only consume parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from statistics import pstdev
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import Dataset, apply_minmax_vector, normalize_minmax
from .nn import LayerSpec, NetworkParameters, TrainingConfig
from .rng import Rng

# Default training profiles. The server-resident single-layer CL uses a low
# learning rate; models destined for on-device ADCL prediction train at the
# higher client-facing rate. The deep model also trains for more epochs by
# default, which is what makes its training run the expensive one.
CL_LEARNING_RATE = 0.05
DCL_LEARNING_RATE = 0.3
CL_DEFAULT_CONFIG = TrainingConfig(learning_rate=CL_LEARNING_RATE, epochs=40, seed=0)
DCL_DEFAULT_CONFIG = TrainingConfig(learning_rate=DCL_LEARNING_RATE, epochs=300, seed=0)

THRESHOLD_FLOOR = 0.01
THRESHOLD_CEIL = 0.99


class NeverSyncedError(RuntimeError):
    """Prediction requested before any parameters were ever received."""


@dataclass(frozen=True)
class ThresholdVector:
    """Per-class decision thresholds for the CL/LCL pair."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not all(0.0 < v < 1.0 for v in self.values):
            raise ValueError("thresholds must lie strictly inside (0, 1)")
        arr = np.array(self.values)
        arr.setflags(write=False)
        object.__setattr__(self, "_array", arr)

    def as_array(self) -> np.ndarray:
        return self._array  # type: ignore[attr-defined]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ContextLabel:
    class_index: int
    name: str = ""


@dataclass(frozen=True)
class ClModel:
    """Single-layer network (inputs wired directly to sigmoid outputs) plus
    its calibrated thresholds."""

    params: NetworkParameters
    thresholds: ThresholdVector

    def __post_init__(self) -> None:
        if self.params.spec.hidden_sizes:
            raise ValueError("CL model must not have hidden layers")
        if len(self.thresholds) != self.params.spec.output_count:
            raise ValueError("threshold count must equal output count")


@dataclass(frozen=True)
class Metrics:
    """Evaluation summary: accuracy, confusion counts (rows = actual,
    columns = predicted), binary outcome rates, and per-prediction latency.

    For binary tasks class 1 is the positive class and the four rates are
    fractions of all evaluated samples; fn_rate is computed as the residual
    so the four always partition 1 exactly.
    """

    accuracy: float
    confusion: tuple[tuple[int, ...], ...]
    sample_count: int
    mean_latency_us: float
    p95_latency_us: float
    tp_rate: float | None = None
    tn_rate: float | None = None
    fp_rate: float | None = None
    fn_rate: float | None = None


def dcl_train(
    data: Dataset, spec: LayerSpec, cfg: TrainingConfig = DCL_DEFAULT_CONFIG
) -> NetworkParameters:
    """Train the deep context learner; the returned network is exactly what
    gets shipped to ADCL clients."""
    if not spec.hidden_sizes:
        raise ValueError("DCL requires at least one hidden layer")
    params = nn.init_network(spec, cfg.seed)
    trained, _ = nn.train(params, data, cfg)
    return trained


def cl_train(data: Dataset, cfg: TrainingConfig = CL_DEFAULT_CONFIG) -> ClModel:
    """Train the single-layer context learner and calibrate its thresholds
    on the training data."""
    if not data.samples:
        raise ValueError("cannot train on an empty dataset")
    spec = LayerSpec(data.n_features, (), data.n_classes)
    params = nn.init_network(spec, cfg.seed)
    trained, _ = nn.train(params, data, cfg)
    return ClModel(trained, calibrate_thresholds(trained, data))


def calibrate_thresholds(params: NetworkParameters, data: Dataset) -> ThresholdVector:
    """Per-class threshold: midpoint between the class node's mean output on
    positive samples and on negative samples, clamped into (0.01, 0.99).

    A class with no positives gets the 0.5 default; a class with no
    negatives uses its positive mean.
    """
    if params.spec.hidden_sizes:
        raise ValueError("thresholds are calibrated for single-layer models only")
    if not data.samples:
        raise ValueError("cannot calibrate on an empty dataset")
    outputs = np.array(
        [nn.forward(params, s.features).final_outputs for s in data.samples]
    )
    labels = data.label_array()
    thresholds = []
    for c in range(params.spec.output_count):
        pos = outputs[labels == c, c]
        neg = outputs[labels != c, c]
        if pos.size == 0:
            t = 0.5
        elif neg.size == 0:
            t = float(pos.mean())
        else:
            t = float((pos.mean() + neg.mean()) / 2.0)
        thresholds.append(min(THRESHOLD_CEIL, max(THRESHOLD_FLOOR, t)))
    return ThresholdVector(tuple(thresholds))


def adcl_predict(
    params: NetworkParameters | None,
    features: Sequence[float],
    class_names: Sequence[str] = (),
) -> ContextLabel:
    """Forward pass plus argmax; no learning happens on the device.

    Ties break toward the lowest class index. Raises NeverSyncedError when
    no parameters have been received yet.
    """
    if params is None:
        raise NeverSyncedError("no network parameters received yet")
    outputs = nn.forward(params, features).final_outputs
    idx = int(np.argmax(outputs))  # argmax returns the first maximum
    return ContextLabel(idx, class_names[idx] if idx < len(class_names) else "")


def lcl_predict(
    model: ClModel,
    features: Sequence[float],
    class_names: Sequence[str] = (),
) -> ContextLabel:
    """Single-layer outputs compared against the thresholds.

    Among classes whose output exceeds its threshold, the one with the
    largest margin (output - threshold) wins; when none exceeds, falls back
    to plain argmax. Ties break toward the lowest index, so a prediction is
    always produced.
    """
    outputs = nn.forward(model.params, features).final_outputs
    margins = outputs - model.thresholds.as_array()
    if margins.max() > 0.0:
        idx = int(np.argmax(np.where(margins > 0.0, margins, -np.inf)))
    else:
        idx = int(np.argmax(outputs))
    return ContextLabel(idx, class_names[idx] if idx < len(class_names) else "")


def evaluate(
    predict_fn: Callable[[tuple[float, ...]], ContextLabel | int],
    data: Dataset,
) -> Metrics:
    """Run the predictor over every sample, timing each call.

    ``predict_fn`` may return a ContextLabel or a bare class index. Latency
    covers the predict call only.
    """
    if not data.samples:
        raise ValueError("cannot evaluate on an empty dataset")
    k = data.n_classes
    confusion = [[0] * k for _ in range(k)]
    latencies_us = []
    for s in data.samples:
        t0 = time.perf_counter_ns()
        pred = predict_fn(s.features)
        latencies_us.append((time.perf_counter_ns() - t0) / 1000.0)
        idx = pred.class_index if isinstance(pred, ContextLabel) else int(pred)
        if not 0 <= idx < k:
            raise ValueError(f"predictor returned class {idx} outside [0, {k})")
        confusion[s.label][idx] += 1
    return metrics_from_counts(confusion, latencies_us)


def metrics_from_counts(
    confusion: Sequence[Sequence[int]], latencies_us: Sequence[float]
) -> Metrics:
    """Assemble Metrics from a filled confusion matrix and raw latencies."""
    k = len(confusion)
    n = sum(sum(row) for row in confusion)
    if n == 0:
        raise ValueError("no predictions to summarize")
    correct = sum(confusion[i][i] for i in range(k))
    lats = sorted(latencies_us)
    p95 = lats[min(len(lats) - 1, max(0, int(np.ceil(0.95 * len(lats))) - 1))] if lats else 0.0
    rates: dict[str, float | None] = dict.fromkeys(
        ("tp_rate", "tn_rate", "fp_rate", "fn_rate")
    )
    if k == 2:
        tp, tn, fp = confusion[1][1], confusion[0][0], confusion[0][1]
        rates["tp_rate"] = tp / n
        rates["tn_rate"] = tn / n
        rates["fp_rate"] = fp / n
        rates["fn_rate"] = 1.0 - rates["tp_rate"] - rates["tn_rate"] - rates["fp_rate"]
    return Metrics(
        accuracy=correct / n,
        confusion=tuple(tuple(int(c) for c in row) for row in confusion),
        sample_count=n,
        mean_latency_us=sum(lats) / len(lats) if lats else 0.0,
        p95_latency_us=p95,
        **rates,
    )


@dataclass(frozen=True)
class KFoldResult:
    mean_accuracy: float
    std_accuracy: float
    fold_accuracies: tuple[float, ...]


Trainer = Callable[[Dataset], Callable[[tuple[float, ...]], ContextLabel | int]]


def kfold_cross_validate(
    data: Dataset, k: int, trainer: Trainer, seed: int
) -> KFoldResult:
    """Stratified k-fold cross-validation with seeded fold assignment.

    ``trainer`` maps a training dataset to a predict function. k equal to
    the dataset size degenerates to leave-one-out (stratification is
    vacuous with single-sample folds); otherwise k must not exceed the
    smallest class count. Std deviation is the population form.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    n = len(data.samples)
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    if k < n:
        smallest = min(data.class_counts())
        if k > smallest:
            raise ValueError(
                f"k={k} exceeds smallest class count {smallest}; "
                "stratification impossible"
            )
    folds = _stratified_folds(data, k, seed)
    accuracies = []
    for f in range(k):
        test_idx = folds[f]
        train_samples = tuple(
            s for i, s in enumerate(data.samples) if i not in test_idx
        )
        test_samples = tuple(data.samples[i] for i in sorted(test_idx))
        train_ds = Dataset(train_samples, data.feature_names, data.class_names)
        test_ds = Dataset(test_samples, data.feature_names, data.class_names)
        predict_fn = trainer(train_ds)
        accuracies.append(evaluate(predict_fn, test_ds).accuracy)
    return KFoldResult(
        mean_accuracy=sum(accuracies) / k,
        std_accuracy=pstdev(accuracies),
        fold_accuracies=tuple(accuracies),
    )


def _stratified_folds(data: Dataset, k: int, seed: int) -> list[set[int]]:
    """Per-class shuffled round-robin deal into k folds."""
    rng = Rng(seed)
    folds: list[set[int]] = [set() for _ in range(k)]
    by_class: list[list[int]] = [[] for _ in data.class_names]
    for i, s in enumerate(data.samples):
        by_class[s.label].append(i)
    cursor = 0
    for indices in by_class:
        pool = list(indices)
        rng.shuffle(pool)
        for idx in pool:
            folds[cursor % k].add(idx)
            cursor += 1
    return folds


def make_dcl_trainer(
    hidden_sizes: tuple[int, ...] | None = None,
    cfg: TrainingConfig = DCL_DEFAULT_CONFIG,
    normalize: bool = True,
) -> Trainer:
    """Pipeline factory: min-max normalization fitted on the training fold,
    DCL training, then ADCL prediction with the stored ranges applied.

    ``hidden_sizes=None`` applies the default width rule with one hidden
    layer.
    """

    def trainer(train_data: Dataset):
        hidden = hidden_sizes
        if hidden is None:
            hidden = (nn.hidden_size_default(train_data.n_features, train_data.n_classes),)
        fitted = normalize_minmax(train_data) if normalize else train_data
        spec = LayerSpec(train_data.n_features, hidden, train_data.n_classes)
        params = dcl_train(fitted, spec, cfg)
        norms = fitted.normalization

        def predict(features):
            vec = apply_minmax_vector(tuple(features), norms) if norms else features
            return adcl_predict(params, vec, train_data.class_names)

        return predict

    return trainer


def make_cl_trainer(
    cfg: TrainingConfig = CL_DEFAULT_CONFIG, normalize: bool = True
) -> Trainer:
    """Pipeline factory: normalization, CL training with threshold
    calibration, then LCL prediction."""

    def trainer(train_data: Dataset):
        fitted = normalize_minmax(train_data) if normalize else train_data
        model = cl_train(fitted, cfg)
        norms = fitted.normalization

        def predict(features):
            vec = apply_minmax_vector(tuple(features), norms) if norms else features
            return lcl_predict(model, vec, train_data.class_names)

        return predict

    return trainer
