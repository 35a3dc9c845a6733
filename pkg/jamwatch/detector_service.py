"""Training, scoring and the threshold test for both watchdog models.

A sample is flagged as jammed (H1) when its score meets or exceeds the
threshold tau. For the CAE the score is the reconstruction error
Gamma = ||X - Y||^2; for the CNN it is the sigmoid output. False-alarm and
misdetection rates are estimated by counting over a tau grid.
"""

from __future__ import annotations

import copy
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from jamwatch.artifact_io import write_csv
from jamwatch.enums import ChannelLabel, Hypothesis, LossKind, ModelScale, ScoreKind, SpectrogramDomain
from jamwatch.errors import ArgumentError, TrainingError
from jamwatch.nn_engine import (
    AdamState,
    Network,
    adam_step,
    backward,
    bce_with_logits_loss,
    forward,
    mse_loss,
    predict,
)
from jamwatch.spectrogram_dataset import jammed_targets, stack_inputs
from jamwatch.spectrogram_service import Spectrogram

logger = logging.getLogger(__name__)

DEFAULT_GRID_POINTS = 512
DEFAULT_GRID_MARGIN = 1.1
DEFAULT_CALIBRATION_MARGIN = 1.1
CNN_THRESHOLD = 0.5

Counts = dict[ChannelLabel, int]


def _counts(empty: int, active: int, jammed: int) -> Counts:
    return {
        ChannelLabel.EMPTY_CHANNEL: empty,
        ChannelLabel.ACTIVE_CHANNEL: active,
        ChannelLabel.JAMMED: jammed,
    }


class SplitSpec(BaseModel):
    """Frame counts per label for the train, validation and test splits."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    supervised: bool = False
    train: Counts
    val: Counts
    test: Counts

    @model_validator(mode="after")
    def _check_counts(self) -> "SplitSpec":
        for split in ("train", "val", "test"):
            for label, n in getattr(self, split).items():
                if n < 0:
                    raise ValueError(f"{split} count for {label} must be non-negative, got {n}")
        if not self.supervised:
            for split in ("train", "val"):
                if getattr(self, split).get(ChannelLabel.JAMMED, 0):
                    raise ValueError(f"unsupervised {split} split must not contain jammed frames")
        return self

    @classmethod
    def unsupervised(cls, scale: ModelScale = ModelScale.FULL) -> "SplitSpec":
        if ModelScale(scale) is ModelScale.DESK:
            return cls(train=_counts(300, 300, 0), val=_counts(40, 40, 0), test=_counts(50, 50, 100))
        return cls(train=_counts(3000, 3000, 0), val=_counts(400, 400, 0), test=_counts(200, 200, 400))

    @classmethod
    def supervised_recipe(cls, scale: ModelScale = ModelScale.FULL) -> "SplitSpec":
        if ModelScale(scale) is ModelScale.DESK:
            return cls(supervised=True, train=_counts(150, 150, 150), val=_counts(60, 60, 60), test=_counts(40, 40, 40))
        return cls(supervised=True, train=_counts(1500, 1500, 1500), val=_counts(600, 600, 600), test=_counts(400, 400, 400))

    def counts(self, split: str) -> Counts:
        if split not in ("train", "val", "test"):
            raise ArgumentError(f"unknown split '{split}'", field="split")
        counts = getattr(self, split)
        return {label: counts.get(label, 0) for label in ChannelLabel}

    def total(self, split: str) -> int:
        return sum(self.counts(split).values())


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_epochs: int = Field(200, ge=1)
    patience: int = Field(6, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    seed: int = Field(0, ge=0)


class EarlyStopping:
    """Stops after `patience` consecutive epochs without a new best validation loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ArgumentError(f"patience must be at least 1, got {patience}", field="patience")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: Optional[int] = None
        self.counter = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Records one epoch; returns True when it is the new best."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        logger.info("Early stopping counter %d of %d", self.counter, self.patience)
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    loss: LossKind
    trace: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_epoch: int = 0
    best_val_loss: float = math.inf

    def summary(self) -> dict[str, Any]:
        return {
            "loss": str(self.loss),
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "best_val_loss": self.best_val_loss,
        }


def infer_score_kind(net: Network) -> ScoreKind:
    if tuple(net.output_shape) == tuple(net.input_shape):
        return ScoreKind.RECONSTRUCTION_ERROR
    if tuple(net.output_shape) == (1,):
        return ScoreKind.CLASS_PROBABILITY
    raise ArgumentError(f"cannot score a network with output shape {net.output_shape}", field="net")


def infer_loss(net: Network) -> LossKind:
    return LossKind.MSE if infer_score_kind(net) is ScoreKind.RECONSTRUCTION_ERROR else LossKind.BCE


def _check_neg_log(specs: Sequence[Spectrogram], what: str) -> None:
    if not specs:
        raise ArgumentError(f"{what} set is empty", field=what)
    for spec in specs:
        if spec.domain is not SpectrogramDomain.NEG_LOG:
            raise ArgumentError(f"{what} set holds {spec.domain} spectrograms, expected neglog", field="domain")


def _logit_index(net: Network) -> int:
    # output of the layer feeding the final sigmoid
    return len(net.specs) - 1


def _logits(net: Network, x: torch.Tensor) -> torch.Tensor:
    with torch.inference_mode():
        for module in list(net.body)[:-1]:
            x = module(x)
    return x


def _train_step(net: Network, state: AdamState, loss: LossKind, xb: torch.Tensor, yb: Optional[torch.Tensor], epoch: int) -> float:
    """One Adam update on a batch; returns the batch loss before the update."""
    n = xb.shape[0]
    acts = forward(net, xb)
    if loss is LossKind.MSE:
        out = acts.output.detach()
        value = float(mse_loss(out, xb)) / n
        upstream, at = 2.0 * (out - xb) / n, -1
    else:
        at = _logit_index(net)
        logits = acts.tensors[at].detach()
        value = float(bce_with_logits_loss(yb, logits))
        upstream = (torch.sigmoid(logits) - yb) / n
    if not math.isfinite(value):
        raise TrainingError(f"{loss} loss became {value} in epoch {epoch}", epoch=epoch, field="loss")
    try:
        adam_step(net, backward(net, acts, upstream, at=at).params, state)
    except TrainingError as e:
        raise TrainingError(f"{e.message} in epoch {epoch}", epoch=epoch, field=e.field) from e
    return value


def _eval_loss(net: Network, loss: LossKind, specs: Sequence[Spectrogram], y: Optional[torch.Tensor], batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(specs), batch_size):
        xb = stack_inputs(specs[start : start + batch_size])
        if loss is LossKind.MSE:
            out = predict(net, xb)
            total += float(mse_loss(out, xb))
        else:
            yb = y[start : start + batch_size]
            total += float(bce_with_logits_loss(yb, _logits(net, xb))) * len(yb)
    return total / len(specs)


def train(
    net: Network,
    train_specs: Sequence[Spectrogram],
    val_specs: Sequence[Spectrogram],
    cfg: TrainConfig = TrainConfig(),
    loss: Optional[LossKind] = None,
    progress: bool = False,
) -> TrainResult:
    """Mini-batch Adam with early stopping; the best-validation weights are restored on return.

    MSE trains a reconstruction model on trusted frames only (batch mean of
    Gamma). BCE trains a classifier on binary jammed targets, computed from the
    logits feeding the output sigmoid.
    """
    loss = infer_loss(net) if loss is None else LossKind(loss)
    _check_neg_log(train_specs, "train")
    _check_neg_log(val_specs, "val")

    y_train = y_val = None
    if loss is LossKind.MSE:
        for what, specs in (("train", train_specs), ("val", val_specs)):
            if any(s.label is ChannelLabel.JAMMED for s in specs):
                raise ArgumentError(f"reconstruction training needs trusted frames only; {what} holds jammed", field=what)
    else:
        y_train = jammed_targets(train_specs)[:, None]
        y_val = jammed_targets(val_specs)[:, None]

    with deterministic_algorithms():
        return _fit(net, train_specs, y_train, val_specs, y_val, loss, cfg, progress)


@contextmanager
def deterministic_algorithms() -> Iterator[None]:
    """Turns on torch's deterministic kernels and restores the caller's setting on exit."""
    enabled = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(enabled, warn_only=warn_only)


def _fit(
    net: Network,
    train_specs: Sequence[Spectrogram],
    y_train: Optional[torch.Tensor],
    val_specs: Sequence[Spectrogram],
    y_val: Optional[torch.Tensor],
    loss: LossKind,
    cfg: TrainConfig,
    progress: bool,
) -> TrainResult:
    state = AdamState.create(net, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    result = TrainResult(loss=loss)
    best_state = copy.deepcopy(net.state_dict())

    net.train()
    for epoch in tqdm(range(1, cfg.max_epochs + 1), desc="train", unit="epoch", disable=not progress):
        order = rng.permutation(len(train_specs))
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = stack_inputs([train_specs[i] for i in idx])
            yb = y_train[torch.from_numpy(idx)] if y_train is not None else None
            running += _train_step(net, state, loss, xb, yb, epoch) * len(idx)

        train_loss = running / len(order)
        val_loss = _eval_loss(net, loss, val_specs, y_val, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(f"validation loss became {val_loss} in epoch {epoch}", epoch=epoch, field="val_loss")
        result.trace.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        logger.info("Epoch %d: train %s %.6g, val %.6g", epoch, loss, train_loss, val_loss)

        if stopper.update(epoch, val_loss):
            best_state = copy.deepcopy(net.state_dict())
        result.stopped_epoch = epoch
        if stopper.should_stop:
            logger.info("Stopping after epoch %d; best epoch %d", epoch, stopper.best_epoch)
            break

    net.load_state_dict(best_state)
    net.mark_updated()
    net.eval()
    result.best_epoch = stopper.best_epoch
    result.best_val_loss = stopper.best_loss
    return result


def score(net: Network, spec: Spectrogram) -> float:
    """Gamma = ||X - net(X)||^2 for a reconstruction model, the sigmoid output for a classifier."""
    if spec.domain is not SpectrogramDomain.NEG_LOG:
        raise ArgumentError(f"scoring needs a neglog spectrogram, got {spec.domain}", field="domain")
    kind = infer_score_kind(net)
    x = torch.from_numpy(np.array(spec.data, dtype=np.float32))[None, None]
    out = predict(net, x)
    if kind is ScoreKind.RECONSTRUCTION_ERROR:
        return float(mse_loss(out, x))
    return float(out.reshape(-1)[0])


def score_many(net: Network, specs: Sequence[Spectrogram], batch_size: int = 32) -> np.ndarray:
    if not specs:
        return np.zeros(0, dtype=np.float64)
    _check_neg_log(specs, "specs")
    kind = infer_score_kind(net)
    scores: list[np.ndarray] = []
    for start in range(0, len(specs), batch_size):
        xb = stack_inputs(specs[start : start + batch_size])
        out = predict(net, xb)
        if kind is ScoreKind.RECONSTRUCTION_ERROR:
            per_sample = (out.double() - xb.double()).pow(2).flatten(1).sum(dim=1)
        else:
            per_sample = out.double().reshape(-1)
        scores.append(per_sample.numpy())
    return np.concatenate(scores)


def decide(score: float, tau: float) -> Hypothesis:
    return Hypothesis.H1 if score >= tau else Hypothesis.H0


@dataclass(frozen=True)
class SweepCurve:
    tau: np.ndarray
    p_fa: np.ndarray
    p_md: np.ndarray
    score_kind: ScoreKind
    h0_max: float
    h1_min: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return [(float(t), float(fa), float(md)) for t, fa, md in zip(self.tau, self.p_fa, self.p_md)]

    def rows(self) -> list[dict[str, float]]:
        return [{"tau": t, "p_fa": fa, "p_md": md} for t, fa, md in self.points]


def default_grid(
    h0: np.ndarray,
    h1: np.ndarray,
    score_kind: ScoreKind,
    n_points: int = DEFAULT_GRID_POINTS,
    margin: float = DEFAULT_GRID_MARGIN,
) -> np.ndarray:
    """Linear [0, 1] for probabilities; log-spaced around the pooled range for Gamma."""
    if ScoreKind(score_kind) is ScoreKind.CLASS_PROBABILITY:
        return np.linspace(0.0, 1.0, n_points)
    pooled = np.concatenate([h0, h1])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo > 0.0:
        return np.geomspace(lo / margin, hi * margin, n_points)
    pad = max(abs(lo), abs(hi), 1.0) * (margin - 1.0)
    return np.linspace(lo - pad, hi + pad, n_points)


def sweep(
    scores_h0: Sequence[float],
    scores_h1: Sequence[float],
    grid: Optional[Sequence[float]] = None,
    score_kind: ScoreKind = ScoreKind.RECONSTRUCTION_ERROR,
) -> SweepCurve:
    """p_fa(tau) = share of H0 scores >= tau; p_md(tau) = share of H1 scores < tau."""
    h0 = np.sort(np.asarray(scores_h0, dtype=np.float64))
    h1 = np.sort(np.asarray(scores_h1, dtype=np.float64))
    if h0.size == 0 or h1.size == 0:
        raise ArgumentError("sweep needs scores under both hypotheses", field="scores_h0" if h0.size == 0 else "scores_h1")
    tau = default_grid(h0, h1, score_kind) if grid is None else np.asarray(grid, dtype=np.float64)
    if tau.ndim != 1 or tau.size == 0:
        raise ArgumentError("threshold grid must be a non-empty 1-D sequence", field="grid")
    if np.any(np.diff(tau) <= 0):
        raise ArgumentError("threshold grid must be strictly increasing", field="grid")

    below_h0 = np.searchsorted(h0, tau, side="left")
    below_h1 = np.searchsorted(h1, tau, side="left")
    return SweepCurve(
        tau=tau,
        p_fa=(h0.size - below_h0) / h0.size,
        p_md=below_h1 / h1.size,
        score_kind=ScoreKind(score_kind),
        h0_max=float(h0[-1]),
        h1_min=float(h1[0]),
    )


def zero_error_interval(curve: SweepCurve) -> Optional[tuple[float, float]]:
    """(max H0 score, min H1 score]: every tau in it gives no false alarm and no misdetection."""
    if curve.h1_min > curve.h0_max:
        return (curve.h0_max, curve.h1_min)
    return None


def calibrate_threshold(val_scores: Sequence[float], margin: float = DEFAULT_CALIBRATION_MARGIN) -> float:
    """tau = max validation Gamma x margin, from trusted validation frames."""
    scores = np.asarray(val_scores, dtype=np.float64)
    if scores.size == 0:
        raise ArgumentError("calibration needs validation scores", field="val_scores")
    if margin <= 0:
        raise ArgumentError(f"calibration margin must be positive, got {margin}", field="margin")
    return float(scores.max() * margin)


def operating_threshold(score_kind: ScoreKind, val_scores: Sequence[float], margin: float = DEFAULT_CALIBRATION_MARGIN) -> float:
    if ScoreKind(score_kind) is ScoreKind.CLASS_PROBABILITY:
        return CNN_THRESHOLD
    return calibrate_threshold(val_scores, margin)


def split_by_hypothesis(labels: Sequence[ChannelLabel], scores: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) != len(scores):
        raise ArgumentError(f"{len(labels)} labels for {len(scores)} scores", field="labels")
    jammed = np.array([label is ChannelLabel.JAMMED for label in labels], dtype=bool)
    return scores[~jammed], scores[jammed]


def summarize_scores(labels: Sequence[ChannelLabel], scores: Sequence[float], tau: Optional[float] = None) -> dict[str, Any]:
    """Per-label mean score, jammed/trusted ratio and, given tau, the operating-point rates."""
    scores = np.asarray(scores, dtype=np.float64)
    h0, h1 = split_by_hypothesis(labels, scores)
    means: dict[str, Optional[float]] = {}
    for label in ChannelLabel:
        picked = scores[[i for i, l in enumerate(labels) if l is label]]
        means[str(label)] = float(picked.mean()) if picked.size else None

    summary: dict[str, Any] = {
        "counts": {"trusted": int(h0.size), "jammed": int(h1.size)},
        "mean_score": means,
        "jammed_to_trusted_ratio": float(h1.mean() / h0.mean()) if h0.size and h1.size and h0.mean() != 0 else None,
    }
    if tau is not None:
        p_fa = float(np.mean(h0 >= tau)) if h0.size else None
        p_md = float(np.mean(h1 < tau)) if h1.size else None
        correct = int(np.sum(h0 < tau) + np.sum(h1 >= tau))
        summary["operating_point"] = {
            "tau": float(tau),
            "p_fa": p_fa,
            "p_md": p_md,
            "accuracy": correct / len(scores) if len(scores) else None,
        }
    return summary


def write_sweep_csv(curve: SweepCurve, path: Path) -> None:
    write_csv(Path(path), curve.rows(), ["tau", "p_fa", "p_md"])


def write_loss_trace(result: TrainResult, path: Path) -> None:
    rows = [{"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss} for r in result.trace]
    write_csv(Path(path), rows, ["epoch", "train_loss", "val_loss"])


def write_scores_csv(labels: Sequence[ChannelLabel], scores: Sequence[float], path: Path) -> None:
    rows = [{"index": i, "label": str(label), "score": float(s)} for i, (label, s) in enumerate(zip(labels, scores))]
    write_csv(Path(path), rows, ["index", "label", "score"])


def label_counts(labels: Sequence[ChannelLabel]) -> Mapping[str, int]:
    counts = {str(label): 0 for label in ChannelLabel}
    for label in labels:
        counts[str(label)] += 1
    return counts


@dataclass(frozen=True)
class Evaluation:
    curve: SweepCurve
    interval: Optional[tuple[float, float]]
    summary: dict[str, Any]


class DetectorService:
    """A watchdog model together with the way its scores are read: Gamma for the CAE, probability for the CNN."""

    def __init__(self, net: Network):
        self.net = net
        self.score_kind = infer_score_kind(net)

    def fit(self, train_specs: Sequence[Spectrogram], val_specs: Sequence[Spectrogram], cfg: TrainConfig, progress: bool = False) -> TrainResult:
        return train(self.net, train_specs, val_specs, cfg, progress=progress)

    def score(self, specs: Sequence[Spectrogram]) -> np.ndarray:
        return score_many(self.net, specs)

    def operating_threshold(self, val_scores: Sequence[float], margin: float = DEFAULT_CALIBRATION_MARGIN) -> float:
        return operating_threshold(self.score_kind, val_scores, margin)

    def evaluate(self, labels: Sequence[ChannelLabel], scores: Sequence[float], tau: Optional[float] = None) -> Evaluation:
        h0, h1 = split_by_hypothesis(labels, scores)
        curve = sweep(h0, h1, score_kind=self.score_kind)
        return Evaluation(curve=curve, interval=zero_error_interval(curve), summary=summarize_scores(labels, scores, tau))

    def write_evaluation(self, evaluation: Evaluation, labels: Sequence[ChannelLabel], scores: Sequence[float], directory: Path) -> None:
        write_sweep_csv(evaluation.curve, Path(directory) / "sweep.csv")
        write_scores_csv(labels, scores, Path(directory) / "scores.csv")
