"""
Payload feature encoder, feature enhancement and the closed-set classifier.

Every packet row is encoded independently by two conv blocks
(conv -> batchnorm -> leaky ReLU) taking 128 bytes down to 63 and then 21
features. The 16x21 result is concatenated with the 16x12 standardized
auxiliary matrix and flattened to 528 values for a single linear layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import EmptyTrainingSet, ShapeMismatch, SingleClass
from .features import (N_AUX, N_PACKETS, PAYLOAD_BYTES, NormalizationStats,
                       apply_normalization, fit_normalization)
from .flows import BENIGN

CONV1 = (1, 1, 4, 2)  # in channels, out channels, kernel, stride
CONV2 = (1, 1, 3, 3)
PAYLOAD_FEATURES = nn.conv_output_length(
    nn.conv_output_length(PAYLOAD_BYTES, CONV1[2], CONV1[3]), CONV2[2], CONV2[3])
ENHANCED_COLUMNS = PAYLOAD_FEATURES + N_AUX
ENHANCED_SIZE = N_PACKETS * ENHANCED_COLUMNS


def order_classes(labels) -> list[str]:
    """BENIGN first (if present), then the remaining names sorted."""
    names = {str(x) for x in labels}
    rest = sorted(names - {BENIGN})
    return [BENIGN, *rest] if BENIGN in names else rest


class PayloadEncoder(nn.Module):
    def __init__(self, rng: np.random.Generator | None = None, slope: float = nn.LEAKY_SLOPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.slope = slope
        self.conv1 = nn.Conv1d(CONV1[0], CONV1[1], CONV1[2], CONV1[3], rng=rng)
        self.bn1 = nn.BatchNorm1d(CONV1[1])
        self.conv2 = nn.Conv1d(CONV2[0], CONV2[1], CONV2[2], CONV2[3], rng=rng)
        self.bn2 = nn.BatchNorm1d(CONV2[1])

    def __call__(self, payload, training: bool | None = None) -> nn.Tensor:
        return encode(payload, self, self.training if training is None else training)


def encode(payload, encoder: PayloadEncoder, training: bool = False) -> nn.Tensor:
    """(n, 16, 128) payload -> (n, 16, 21) payload features."""
    payload = nn.as_tensor(payload)
    if payload.shape[-2:] != (N_PACKETS, PAYLOAD_BYTES):
        raise ShapeMismatch(f"payload must be (..., 16, 128), got {payload.shape}")
    single = payload.data.ndim == 2
    n = 1 if single else payload.shape[0]
    x = payload.reshape(n * N_PACKETS, 1, PAYLOAD_BYTES)
    x = nn.leaky_relu(nn.batch_norm(encoder.conv1(x), encoder.bn1, training), encoder.slope)
    x = nn.leaky_relu(nn.batch_norm(encoder.conv2(x), encoder.bn2, training), encoder.slope)
    shape = (N_PACKETS, PAYLOAD_FEATURES) if single else (n, N_PACKETS, PAYLOAD_FEATURES)
    return x.reshape(*shape)


def enhance(features, aux) -> nn.Tensor:
    """Append the auxiliary columns to each row of the payload features."""
    features = nn.as_tensor(features)
    aux = nn.as_tensor(aux)
    if features.shape[-2:] != (N_PACKETS, PAYLOAD_FEATURES) or aux.shape[-2:] != (N_PACKETS, N_AUX):
        raise ShapeMismatch(f"cannot enhance {features.shape} with {aux.shape}")
    if features.shape[:-1] != aux.shape[:-1]:
        raise ShapeMismatch(f"batch/row mismatch: {features.shape} vs {aux.shape}")
    return nn.concat([features, aux], axis=-1)


def flatten(epf) -> nn.Tensor:
    epf = nn.as_tensor(epf)
    return epf.reshape(-1, ENHANCED_SIZE)


def unflatten(flat) -> np.ndarray:
    return np.asarray(flat).reshape(-1, N_PACKETS, ENHANCED_COLUMNS)


class LinearClassifier(nn.Module):
    def __init__(self, class_names, rng: np.random.Generator | None = None):
        self.class_names = list(class_names)
        self.fc = nn.Linear(ENHANCED_SIZE, len(self.class_names), rng=rng)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __call__(self, flat_epf) -> nn.Tensor:
        return self.fc(flat_epf)


def classify(epf, classifier: LinearClassifier) -> tuple[np.ndarray, np.ndarray]:
    """Logits (activation vectors) and softmax scores for enhanced features."""
    logits = classifier(flatten(epf)).data
    return logits, nn.softmax_array(logits)


@dataclass
class Stage1Config:
    epochs: int = 20
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


@dataclass
class Stage1Result:
    encoder: PayloadEncoder
    classifier: LinearClassifier
    norm_stats: NormalizationStats
    loss_history: list[float] = field(default_factory=list)


def enhanced_features(payload, aux_normalized, encoder: PayloadEncoder) -> np.ndarray:
    """Inference-mode (n, 528) enhanced features; never touches running stats."""
    feats = encode(payload, encoder, training=False)
    return flatten(enhance(feats, aux_normalized)).data


def train_stage1(payload: np.ndarray, aux_raw: np.ndarray, labels,
                 config: Stage1Config | None = None, class_names=None) -> Stage1Result:
    """Fit normalization, then train encoder + classifier with cross-entropy.

    ``labels`` are class names; ``class_names`` fixes the output order (by
    default :func:`order_classes`).
    """
    config = config or Stage1Config()
    payload = np.asarray(payload, dtype=np.float64)
    labels = np.asarray(labels)
    if payload.shape[0] == 0:
        raise EmptyTrainingSet("stage-1 training set is empty")
    if labels.shape[0] != payload.shape[0]:
        raise ShapeMismatch("labels and features differ in length")
    class_names = list(class_names) if class_names is not None else order_classes(labels)
    if len(set(labels)) < 2 or len(class_names) < 2:
        raise SingleClass("stage-1 training needs at least two classes")
    index = {name: i for i, name in enumerate(class_names)}
    targets = np.array([index[str(lab)] for lab in labels])

    stats = fit_normalization(aux_raw)
    aux = apply_normalization(aux_raw, stats)

    rng = np.random.default_rng(config.seed)
    encoder = PayloadEncoder(rng)
    classifier = LinearClassifier(class_names, rng)
    params = encoder.parameters() + classifier.parameters()
    opt = nn.make_optimizer(params, config.optimizer, config.learning_rate,
                            (config.beta1, config.beta2), config.adam_eps)
    history = []
    n = payload.shape[0]
    encoder.train()
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            epf = enhance(encode(payload[idx], encoder, training=True), aux[idx])
            loss = nn.cross_entropy(classifier(flatten(epf)), targets[idx])
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
            total += float(loss.data) * idx.size
        history.append(total / n)
    encoder.eval()
    opt.zero_grad()
    return Stage1Result(encoder, classifier, stats, history)
