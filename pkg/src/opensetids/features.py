"""
Per-flow payload and auxiliary matrices.

Each flow becomes a 16x128 payload matrix (bytes / 255) and a 16x12
auxiliary matrix with columns::

    DIRC PLDL TCPW ITVT FIN SYN RST PSH ACK URG ECE CWR

DIRC is +1 for packets from the initiator and -1 otherwise, so a real packet
row never has DIRC == 0; that is how padding rows are told apart after the
fact. The four continuous columns are standardized with statistics fitted
on real (non-padding) training rows; the flag columns stay 0/1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import EmptyFlow, EmptyTrainingSet, ShapeMismatch
from .flows import Flow, Protocol

N_PACKETS = 16
PAYLOAD_BYTES = 128
AUX_COLUMNS = ("DIRC", "PLDL", "TCPW", "ITVT",
               "FIN", "SYN", "RST", "PSH", "ACK", "URG", "ECE", "CWR")
N_AUX = len(AUX_COLUMNS)
N_CONTINUOUS = 4
N_RAW_FEATURES = PAYLOAD_BYTES + N_AUX
STD_FLOOR = 1e-6


def extract_payload_matrix(flow: Flow) -> np.ndarray:
    if not flow.packets:
        raise EmptyFlow("flow has no packets")
    out = np.zeros((N_PACKETS, PAYLOAD_BYTES))
    for i, pkt in enumerate(flow.packets[:N_PACKETS]):
        row = np.frombuffer(pkt.payload[:PAYLOAD_BYTES], dtype=np.uint8)
        out[i, :row.size] = row / 255.0
    return out


def extract_auxiliary(flow: Flow) -> np.ndarray:
    """Raw (unstandardized) 16x12 auxiliary matrix."""
    if not flow.packets:
        raise EmptyFlow("flow has no packets")
    out = np.zeros((N_PACKETS, N_AUX))
    prev_ts = None
    for i, pkt in enumerate(flow.packets[:N_PACKETS]):
        out[i, 0] = 1.0 if pkt.src == flow.initiator else -1.0
        out[i, 1] = len(pkt.payload)
        out[i, 3] = 0.0 if prev_ts is None else pkt.timestamp - prev_ts
        prev_ts = pkt.timestamp
        if pkt.protocol == Protocol.TCP:
            out[i, 2] = pkt.tcp_window
            flags = pkt.tcp_flags
            out[i, 4:] = [(flags >> bit) & 1 for bit in range(8)]
    return out


def padding_mask(aux_raw: np.ndarray) -> np.ndarray:
    """True on real packet rows of a raw auxiliary matrix (or batch of them)."""
    return np.asarray(aux_raw)[..., 0] != 0


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(N_CONTINUOUS)
        std = np.maximum(np.array(self.std, dtype=np.float64).reshape(N_CONTINUOUS), STD_FLOOR)
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def fit_normalization(training_aux: Sequence[np.ndarray] | np.ndarray) -> NormalizationStats:
    """Population mean/std of DIRC, PLDL, TCPW, ITVT over real packet rows."""
    aux = np.asarray(training_aux, dtype=np.float64)
    if aux.size == 0:
        raise EmptyTrainingSet("no auxiliary matrices to fit normalization on")
    aux = aux.reshape(-1, N_PACKETS, N_AUX)
    rows = aux[padding_mask(aux)][:, :N_CONTINUOUS]
    if rows.shape[0] == 0:
        raise EmptyTrainingSet("auxiliary matrices contain no packet rows")
    return NormalizationStats(rows.mean(axis=0), rows.std(axis=0))


def apply_normalization(aux: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Standardize continuous columns of real rows; flags and padding untouched.

    Accepts a single 16x12 matrix or a stacked batch.
    """
    aux = np.array(aux, dtype=np.float64)
    if aux.shape[-2:] != (N_PACKETS, N_AUX):
        raise ShapeMismatch(f"expected (..., 16, 12) auxiliary matrix, got {aux.shape}")
    mask = padding_mask(aux)
    cont = aux[..., :N_CONTINUOUS]
    aux[..., :N_CONTINUOUS] = np.where(mask[..., None], (cont - stats.mean) / stats.std, cont)
    return aux


def featurize(flows: Sequence[Flow]) -> np.ndarray:
    """Stack flows into an (n, 16, 140) array: payload bytes/255 then raw auxiliary."""
    out = np.zeros((len(flows), N_PACKETS, N_RAW_FEATURES))
    for i, flow in enumerate(flows):
        out[i, :, :PAYLOAD_BYTES] = extract_payload_matrix(flow)
        out[i, :, PAYLOAD_BYTES:] = extract_auxiliary(flow)
    return out


def split_features(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an (n, 16, 140) feature array into payload and auxiliary parts."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (N_PACKETS, N_RAW_FEATURES):
        raise ShapeMismatch(f"expected (n, 16, 140) flow features, got {X.shape}")
    return X[:, :, :PAYLOAD_BYTES], X[:, :, PAYLOAD_BYTES:]


class FlowFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer: list of :class:`Flow` -> (n, 16, 140) array."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return featurize(list(X))

    def __sklearn_is_fitted__(self):
        return True


class AuxiliaryScaler(TransformerMixin, BaseEstimator):
    """Standardizes the auxiliary block of featurized flows."""

    def fit(self, X, y=None):
        _, aux = split_features(X)
        self.stats_ = fit_normalization(aux)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        payload, aux = split_features(X)
        return np.concatenate([payload, apply_normalization(aux, self.stats_)], axis=2)
