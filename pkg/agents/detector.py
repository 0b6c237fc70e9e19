# agents/detector.py
"""
Agent: DetectorAgent
Purpose:
  The listening station's classifier. Decides from a dB spectrogram of the
  received signal whether a malicious intruder is present (label 1) or not
  (label 0), and exposes the exact gradient of its loss with respect to the
  input spectrogram so the interferer can differentiate through it.

Architecture (forward and backward written by hand in numpy):
  conv 3x3, 1 -> C1 channels, same padding -> leaky ReLU
  -> 2x2 average pool (odd trailing row/column dropped)
  -> conv 3x3, C1 -> C2 channels, same padding -> leaky ReLU
  -> average over the time axis (frequency position is kept)
  -> dense -> sigmoid, clamped to [1e-12, 1 - 1e-12]
  Loss: binary cross-entropy, averaged over the batch.

Input:
  - Spectrograms as L x M arrays of dB values. They are normalized with a
    global shift/scale fitted on the training set and stored with the model.
Output:
  - probability of "malicious", predictions, loss, gradients, evaluation counts.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from utils.errors import InvalidInputError, SingleClassDatasetError

logger = logging.getLogger("WaveAttack.Detector")

PROB_CLAMP = 1e-12
LEAKY_SLOPE = 0.01
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b")


@dataclass(frozen=True)
class LabeledExample:
    values: np.ndarray          # L x M dB values, not normalized
    label: int                  # 1 malicious, 0 benign
    frequency_hz: float
    example_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInputError(f"Label must be 0 or 1, got {self.label}.")


@dataclass(eq=False)
class ModelParams:
    conv1_w: np.ndarray  # (C1, 1, 3, 3)
    conv1_b: np.ndarray  # (C1,)
    conv2_w: np.ndarray  # (C2, C1, 3, 3)
    conv2_b: np.ndarray  # (C2,)
    dense_w: np.ndarray  # (C2 * floor(L/2),)
    dense_b: np.ndarray  # (1,)
    input_shape: Tuple[int, int]
    shift: float = 0.0
    scale: float = 1.0
    negative_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if not (self.scale > 0.0):
            raise InvalidInputError(f"Normalization scale must be positive, got {self.scale}.")
        c1, c2 = self.conv1_w.shape[0], self.conv2_w.shape[0]
        if self.conv1_w.shape != (c1, 1, 3, 3) or self.conv2_w.shape != (c2, c1, 3, 3):
            raise InvalidInputError("Convolution kernels must be 3x3 with matching channel counts.")
        if self.dense_w.shape != (c2 * (self.input_shape[0] // 2),):
            raise InvalidInputError(
                f"Dense layer expects {c2 * (self.input_shape[0] // 2)} features, got {self.dense_w.shape}.")

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return replace(self, **{name: value.copy() for name, value in self.arrays().items()})

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Flat dict for the WNET1 file, normalization and shape included."""
        meta = np.array([self.input_shape[0], self.input_shape[1], self.shift, self.scale, self.negative_slope])
        return {**self.arrays(), "meta": meta}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        meta = arrays["meta"]
        return cls(**{name: np.asarray(arrays[name], dtype=float) for name in PARAM_NAMES},
                   input_shape=(int(meta[0]), int(meta[1])), shift=float(meta[2]),
                   scale=float(meta[3]), negative_slope=float(meta[4]))

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.shift) / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.scale + self.shift


def init_params(input_shape: Tuple[int, int], seed: int, conv1_channels: int = 8,
                conv2_channels: int = 16, shift: float = 0.0, scale: float = 1.0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    features = conv2_channels * (input_shape[0] // 2)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModelParams(
        conv1_w=uniform((conv1_channels, 1, 3, 3), 9),
        conv1_b=np.zeros(conv1_channels),
        conv2_w=uniform((conv2_channels, conv1_channels, 3, 3), 9 * conv1_channels),
        conv2_b=np.zeros(conv2_channels),
        dense_w=uniform((features,), features),
        dense_b=np.zeros(1),
        input_shape=tuple(input_shape),
        shift=shift,
        scale=scale,
    )


# ---------------------------------------------------------------- layers

def _patches(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C, H, W, 3, 3) zero-padded 3x3 neighbourhoods."""
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("bchwij,ocij->bohw", _patches(x), w, optimize=True) + b[None, :, None, None]


def conv_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db) for `conv_forward`."""
    dw = np.einsum("bchwij,bohw->ocij", _patches(x), grad_out, optimize=True)
    db = grad_out.sum(axis=(0, 2, 3))
    dx = np.einsum("bohwij,ocij->bchw", _patches(grad_out), w[:, :, ::-1, ::-1], optimize=True)
    return dx, dw, db


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0.0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0.0, grad_out, slope * grad_out)


def pool_forward(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    h2, w2 = H // 2, W // 2
    return x[:, :, : 2 * h2, : 2 * w2].reshape(B, C, h2, 2, w2, 2).mean(axis=(3, 5))


def pool_backward(x_shape: Tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    B, C, H, W = x_shape
    h2, w2 = grad_out.shape[2], grad_out.shape[3]
    grad = np.zeros(x_shape)
    spread = np.repeat(np.repeat(grad_out, 2, axis=2), 2, axis=3) / 4.0
    grad[:, :, : 2 * h2, : 2 * w2] = spread
    return grad


def bce_loss(p, y) -> np.ndarray:
    """-(y ln p + (1 - y) ln(1 - p)) with p clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=float)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


# ---------------------------------------------------------------- network

def _as_batch(model: ModelParams, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != tuple(model.input_shape):
        raise InvalidInputError(f"Input shape {x.shape} does not match model input {tuple(model.input_shape)}.")
    return x[:, None, :, :], single


def _forward_cache(model: ModelParams, x: np.ndarray) -> Dict[str, np.ndarray]:
    slope = model.negative_slope
    z1 = conv_forward(x, model.conv1_w, model.conv1_b)
    a1 = leaky_relu(z1, slope)
    p1 = pool_forward(a1)
    z2 = conv_forward(p1, model.conv2_w, model.conv2_b)
    a2 = leaky_relu(z2, slope)
    features = a2.mean(axis=3).reshape(a2.shape[0], -1)
    logit = features @ model.dense_w + model.dense_b[0]
    return {"x": x, "z1": z1, "a1": a1, "p1": p1, "z2": z2, "a2": a2, "features": features,
            "logit": logit, "sigma": expit(logit)}


def forward(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Probability of the malicious class for one normalized input (L, M) or a batch (B, L, M)."""
    batch, single = _as_batch(model, x)
    p = np.clip(_forward_cache(model, batch)["sigma"], PROB_CLAMP, 1.0 - PROB_CLAMP)
    return p[0] if single else p


def backward(model: ModelParams, x: np.ndarray, y) -> Tuple[Dict[str, np.ndarray], np.ndarray, float]:
    """
    Gradients of the batch-mean BCE loss.

    Returns (parameter gradients keyed like `PARAM_NAMES`, dL/dx with the
    shape of `x`, mean loss). Inputs are normalized values.
    """
    batch, single = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    B = batch.shape[0]
    if y.shape != (B,):
        raise InvalidInputError(f"Expected {B} labels, got shape {y.shape}.")
    cache = _forward_cache(model, batch)
    slope = model.negative_slope
    sigma = cache["sigma"]
    clamped = (sigma < PROB_CLAMP) | (sigma > 1.0 - PROB_CLAMP)
    loss = float(np.mean(bce_loss(sigma, y)))

    g_logit = np.where(clamped, 0.0, sigma - y) / B
    grads = {"dense_w": cache["features"].T @ g_logit, "dense_b": np.array([g_logit.sum()])}
    g_features = np.outer(g_logit, model.dense_w)

    a2 = cache["a2"]
    g_a2 = np.repeat(g_features.reshape(a2.shape[:3])[..., None], a2.shape[3], axis=3) / a2.shape[3]
    g_z2 = leaky_relu_backward(cache["z2"], g_a2, slope)
    g_p1, grads["conv2_w"], grads["conv2_b"] = conv_backward(cache["p1"], model.conv2_w, g_z2)
    g_a1 = pool_backward(cache["a1"].shape, g_p1)
    g_z1 = leaky_relu_backward(cache["z1"], g_a1, slope)
    g_x, grads["conv1_w"], grads["conv1_b"] = conv_backward(cache["x"], model.conv1_w, g_z1)

    g_x = g_x[:, 0]
    return grads, (g_x[0] if single else g_x), loss


def predict(p) -> np.ndarray:
    """Class decision; p = 0.5 exactly counts as benign."""
    return (np.asarray(p) > 0.5).astype(int)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 60
    patience: int = 10
    seed: int = 0
    conv1_channels: int = 8
    conv2_channels: int = 16


@dataclass
class EvaluationResult:
    accuracy: float
    mean_loss: float
    true_positive: int
    true_negative: int
    false_positive: int
    false_negative: int

    @property
    def total(self) -> int:
        return self.true_positive + self.true_negative + self.false_positive + self.false_negative


@dataclass
class TrainingLog:
    rows: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0

    def add(self, epoch: int, train_loss: float, test_loss: float, test_acc: float) -> None:
        self.rows.append({"epoch": epoch, "train_loss": train_loss, "test_loss": test_loss, "test_acc": test_acc})


def stack_examples(examples: Sequence[LabeledExample]) -> Tuple[np.ndarray, np.ndarray]:
    if not examples:
        raise InvalidInputError("Dataset is empty.")
    values = np.stack([np.asarray(e.values, dtype=float) for e in examples])
    labels = np.array([e.label for e in examples], dtype=float)
    return values, labels


def fit_normalization(values: np.ndarray) -> Tuple[float, float]:
    shift = float(values.mean())
    scale = float(values.std())
    return shift, (scale if scale > 0.0 else 1.0)


def evaluate(model: ModelParams, dataset: Sequence[LabeledExample]) -> EvaluationResult:
    values, labels = stack_examples(dataset)
    p = forward(model, model.normalize(values))
    pred = predict(p)
    y = labels.astype(int)
    return EvaluationResult(
        accuracy=float(np.mean(pred == y)),
        mean_loss=float(np.mean(bce_loss(p, y))),
        true_positive=int(np.sum((pred == 1) & (y == 1))),
        true_negative=int(np.sum((pred == 0) & (y == 0))),
        false_positive=int(np.sum((pred == 1) & (y == 0))),
        false_negative=int(np.sum((pred == 0) & (y == 1))),
    )


def train(dataset: Sequence[LabeledExample], config: TrainingConfig,
          test_set: Optional[Sequence[LabeledExample]] = None,
          show_progress: bool = False) -> Tuple[ModelParams, TrainingLog]:
    """
    Minibatch SGD with momentum on the BCE loss. Stops once the test-set loss
    has not improved for `patience` epochs and returns the best parameters.
    Deterministic for a fixed `config.seed`.
    """
    values, labels = stack_examples(dataset)
    if len(np.unique(labels)) < 2:
        raise SingleClassDatasetError("Training data must contain both malicious and benign examples.")
    test_set = dataset if test_set is None else test_set

    shift, scale = fit_normalization(values)
    model = init_params(values.shape[1:], config.seed, config.conv1_channels, config.conv2_channels, shift, scale)
    x_all = model.normalize(values)
    rng = np.random.default_rng(config.seed + 1)
    velocity = {name: np.zeros_like(value) for name, value in model.arrays().items()}

    log = TrainingLog()
    best_model, best_loss, stale = model.copy(), np.inf, 0
    epochs = tqdm(range(1, config.epochs + 1), desc="Training", disable=not show_progress)
    for epoch in epochs:
        order = rng.permutation(len(labels))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            grads, _, loss = backward(model, x_all[idx], labels[idx])
            batch_losses.append(loss * len(idx))
            for name, grad in grads.items():
                velocity[name] = config.momentum * velocity[name] - config.learning_rate * grad
                setattr(model, name, getattr(model, name) + velocity[name])
        train_loss = float(np.sum(batch_losses) / len(labels))
        result = evaluate(model, test_set)
        log.add(epoch, train_loss, result.mean_loss, result.accuracy)
        logger.debug(f"Epoch {epoch}: train_loss={train_loss:.5f} test_loss={result.mean_loss:.5f} "
                     f"test_acc={result.accuracy:.4f}")
        if result.mean_loss < best_loss:
            best_model, best_loss, stale = model.copy(), result.mean_loss, 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"Early stopping at epoch {epoch}; best test loss {best_loss:.5f} at epoch {log.best_epoch}.")
                break
    return best_model, log


class DetectorAgent:
    """The detector's classifier as used by the pipeline: raw dB spectrograms in, decisions and gradients out."""

    def __init__(self, model: ModelParams):
        self.model = model

    @classmethod
    def fit(cls, train_set: Sequence[LabeledExample], test_set: Sequence[LabeledExample],
            config: TrainingConfig, show_progress: bool = True) -> Tuple["DetectorAgent", TrainingLog]:
        model, log = train(train_set, config, test_set, show_progress=show_progress)
        return cls(model), log

    def probability(self, values: np.ndarray) -> float:
        """P(malicious) for one raw dB spectrogram."""
        return float(forward(self.model, self.model.normalize(values)))

    def confidence(self, values: np.ndarray, label: int) -> float:
        """Probability the detector assigns to `label`."""
        p = self.probability(values)
        return p if label == 1 else 1.0 - p

    def loss_and_input_gradient(self, values: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
        """BCE loss and its gradient with respect to the raw dB values."""
        _, g_x, loss = backward(self.model, self.model.normalize(values), label)
        return loss, g_x / self.model.scale

    def is_fooled(self, values: np.ndarray, label: int) -> bool:
        return int(predict(self.probability(values))) != label

    def evaluate(self, dataset: Sequence[LabeledExample]) -> EvaluationResult:
        return evaluate(self.model, dataset)
