"""
Two-stage training, dual detection and model-bundle persistence.

Stage one trains the payload encoder and linear classifier, then fits the
per-class Weibull calibration on inference-mode activations. Stage two
freezes the encoder and trains one VAE per known class on that class's
enhanced features, picking a reconstruction-loss threshold for each.

At detection time a flow rejected by the recalibrated scores is reported as
an unknown attack straight away; otherwise the VAE of the class it was
assigned to gets a second look.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .encoder import (LinearClassifier, PayloadEncoder, Stage1Config, classify,
                      enhanced_features, order_classes, train_stage1)
from .errors import (BundleClassMismatch, ClassTooSmall, CorruptSection, DataError,
                     VersionMismatch)
from .features import (NormalizationStats, apply_normalization, featurize,
                       split_features)
from .flows import Flow
from .openmax import (ClassCalibration, OpenMaxConfig, WeibullModel, fit_per_class,
                      recalibrate_batch)
from .vae import (VAE, ReconstructionThreshold, VAEConfig, reconstruction_losses,
                  select_threshold, train_vae)

log = logging.getLogger(__name__)

UNKNOWN_ATTACK = "UNKNOWN_ATTACK"
BUNDLE_MAGIC = "OSIDS-BUNDLE"
BUNDLE_VERSION = 1
MIN_CLASS_SIZE = 2


class Stage(str, enum.Enum):
    OPENMAX_REJECT = "OPENMAX_REJECT"
    VAE_REJECT = "VAE_REJECT"
    ACCEPTED = "ACCEPTED"


@dataclass
class DetectionVerdict:
    flow_key: str
    start_time: float
    final_label: str
    stage: Stage
    scores: np.ndarray
    assigned_class: str | None = None
    recon_loss: float | None = None

    def __post_init__(self):
        if self.stage == Stage.OPENMAX_REJECT and (
                self.final_label != UNKNOWN_ATTACK or self.recon_loss is not None):
            raise ValueError("OpenMax rejections carry no reconstruction loss")
        if self.stage == Stage.VAE_REJECT and self.final_label != UNKNOWN_ATTACK:
            raise ValueError("VAE rejections must be labeled as unknown attacks")


@dataclass
class ModelBundle:
    class_names: list[str]
    encoder: PayloadEncoder
    classifier: LinearClassifier
    norm_stats: NormalizationStats
    calibrations: list[ClassCalibration]
    vaes: list[VAE]
    thresholds: list[ReconstructionThreshold]
    openmax_config: OpenMaxConfig = field(default_factory=OpenMaxConfig)
    train_config: dict = field(default_factory=dict)
    version: int = BUNDLE_VERSION

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def check_consistency(self) -> None:
        n = self.n_classes
        if self.classifier.n_classes != n or self.classifier.class_names != self.class_names:
            raise BundleClassMismatch("classifier classes differ from bundle classes")
        if sorted(c.index for c in self.calibrations) != list(range(1, n + 1)):
            raise BundleClassMismatch("OpenMax calibrations do not cover the known classes")
        if len(self.vaes) != n or [v.class_index for v in self.vaes] != list(range(1, n + 1)):
            raise BundleClassMismatch("VAEs do not match the known classes")
        if [t.class_index for t in self.thresholds] != list(range(1, n + 1)):
            raise BundleClassMismatch("thresholds do not match the known classes")


def _seed_for(random_state: int, stream: int) -> int:
    return int(np.random.SeedSequence([random_state, stream]).generate_state(1)[0])


class OpenSetDetector(ClassifierMixin, BaseEstimator):
    """Open-set flow classifier with OpenMax rejection and per-class VAEs.

    ``X`` is the (n, 16, 140) array produced by
    :class:`~opensetids.features.FlowFeaturizer`; ``y`` holds class names.
    :meth:`predict` returns a known class name or ``"UNKNOWN_ATTACK"``.
    """

    def __init__(self, epochs=20, batch_size=64, optimizer="adam", learning_rate=1e-3,
                 attenuation=0.5, tail_fraction=0.05, tail_floor=10,
                 vae_epochs=50, vae_batch_size=64, vae_learning_rate=1e-3,
                 beta_kl=1.0, threshold_position=0.96, calibrate_on="correct",
                 random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.attenuation = attenuation
        self.tail_fraction = tail_fraction
        self.tail_floor = tail_floor
        self.vae_epochs = vae_epochs
        self.vae_batch_size = vae_batch_size
        self.vae_learning_rate = vae_learning_rate
        self.beta_kl = beta_kl
        self.threshold_position = threshold_position
        self.calibrate_on = calibrate_on
        self.random_state = random_state

    def fit(self, X, y):
        payload, aux_raw = split_features(X)
        y = np.asarray([str(v) for v in y])
        if y.shape[0] != payload.shape[0]:
            raise ValueError("X and y differ in length")
        if self.calibrate_on not in ("correct", "all"):
            raise ValueError("calibrate_on must be 'correct' or 'all'")
        class_names = order_classes(y)
        for name in class_names:
            count = int(np.sum(y == name))
            if count < MIN_CLASS_SIZE:
                raise ClassTooSmall(name, count, MIN_CLASS_SIZE)

        om_config = OpenMaxConfig(self.attenuation, self.tail_fraction, self.tail_floor)
        stage1 = train_stage1(payload, aux_raw, y, Stage1Config(
            epochs=self.epochs, batch_size=self.batch_size, optimizer=self.optimizer,
            learning_rate=self.learning_rate, seed=_seed_for(self.random_state, 0)),
            class_names=class_names)
        aux = apply_normalization(aux_raw, stage1.norm_stats)
        epf = enhanced_features(payload, aux, stage1.encoder)
        logits, _ = classify(epf, stage1.classifier)
        pred = logits.argmax(axis=1)

        grouped = {}
        for j, name in enumerate(class_names):
            members = y == name
            chosen = members & (pred == j) if self.calibrate_on == "correct" else members
            if chosen.sum() < MIN_CLASS_SIZE:
                log.warning("class %s: fewer than %d correctly classified samples; "
                            "calibrating on all of its samples", name, MIN_CLASS_SIZE)
                chosen = members
            grouped[j + 1] = logits[chosen]
        calibrations = fit_per_class(grouped, om_config)

        vaes, thresholds = [], []
        for j, name in enumerate(class_names):
            cfg = VAEConfig(epochs=self.vae_epochs, batch_size=self.vae_batch_size,
                            learning_rate=self.vae_learning_rate, beta_kl=self.beta_kl,
                            position=self.threshold_position,
                            seed=_seed_for(self.random_state, j + 1))
            vae = train_vae(epf[y == name], j + 1, cfg).vae
            losses = reconstruction_losses(epf[y == name], vae)
            vaes.append(vae)
            thresholds.append(select_threshold(losses, self.threshold_position, j + 1))
            log.info("class %s: VAE threshold %.6g", name, thresholds[-1].threshold)

        self.bundle_ = ModelBundle(
            class_names, stage1.encoder, stage1.classifier, stage1.norm_stats,
            calibrations, vaes, thresholds, om_config, train_config=self.get_params())
        self.classes_ = np.array(class_names)
        self.stage1_loss_ = stage1.loss_history
        return self

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "OpenSetDetector":
        params = {k: v for k, v in bundle.train_config.items() if k in cls._get_param_names()}
        det = cls(**params)
        det.bundle_ = bundle
        det.classes_ = np.array(bundle.class_names)
        return det

    def decision_function(self, X) -> np.ndarray:
        """Recalibrated (n, N+1) scores; column 0 is the unknown score."""
        check_is_fitted(self, "bundle_")
        return score_features(X, self.bundle_)[1]

    def predict(self, X) -> np.ndarray:
        return np.array([v.final_label for v in self.verdicts(X)], dtype=object)

    def predict_openmax(self, X) -> np.ndarray:
        """Labels from the recalibrated scores alone (no VAE stage)."""
        check_is_fitted(self, "bundle_")
        _, _, pred = score_features(X, self.bundle_)
        names = np.array([UNKNOWN_ATTACK, *self.bundle_.class_names], dtype=object)
        return names[pred]

    def verdicts(self, X, flows: Sequence[Flow] | None = None) -> list[DetectionVerdict]:
        check_is_fitted(self, "bundle_")
        return detect_features(X, self.bundle_, flows)


def score_features(X, bundle: ModelBundle):
    """Enhanced features, recalibrated scores and predicted indices for X."""
    payload, aux_raw = split_features(X)
    epf = enhanced_features(payload, apply_normalization(aux_raw, bundle.norm_stats),
                            bundle.encoder)
    logits, _ = classify(epf, bundle.classifier)
    vhat, pred = recalibrate_batch(logits, bundle.calibrations, bundle.openmax_config)
    return epf, vhat, pred


def detect_features(X, bundle: ModelBundle,
                    flows: Sequence[Flow] | None = None) -> list[DetectionVerdict]:
    epf, vhat, pred = score_features(X, bundle)
    losses = np.full(len(pred), np.nan)
    for j in range(1, bundle.n_classes + 1):
        rows = pred == j
        if rows.any():
            losses[rows] = reconstruction_losses(epf[rows], bundle.vaes[j - 1])
    out = []
    for i, y_star in enumerate(pred):
        key, start = ("", float("nan")) if flows is None else (str(flows[i].key), flows[i].start_time)
        if y_star == 0:
            out.append(DetectionVerdict(key, start, UNKNOWN_ATTACK, Stage.OPENMAX_REJECT, vhat[i]))
            continue
        name = bundle.class_names[y_star - 1]
        loss = float(losses[i])
        if loss > bundle.thresholds[y_star - 1].threshold:
            out.append(DetectionVerdict(key, start, UNKNOWN_ATTACK, Stage.VAE_REJECT,
                                        vhat[i], name, loss))
        else:
            out.append(DetectionVerdict(key, start, name, Stage.ACCEPTED, vhat[i], name, loss))
    return out


def train_full(flows: Sequence[Flow], **params) -> ModelBundle:
    """Featurize labeled flows and run both training stages."""
    X = featurize(flows)
    y = [f.label for f in flows]
    return OpenSetDetector(**params).fit(X, y).bundle_


def detect(flow: Flow, bundle: ModelBundle) -> DetectionVerdict:
    return detect_many([flow], bundle)[0]


def detect_many(flows: Sequence[Flow], bundle: ModelBundle) -> list[DetectionVerdict]:
    if not flows:
        return []
    return detect_features(featurize(flows), bundle, flows)


# --------------------------------------------------------------------------
# verdict CSV


def verdict_header(n_classes: int) -> list[str]:
    return ["flow_key", "start_time", "final_label", "stage", "assigned_class",
            "recon_loss", *[f"vhat_{i}" for i in range(n_classes + 1)]]


def write_verdicts(verdicts: Sequence[DetectionVerdict], handle, n_classes: int) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(verdict_header(n_classes))
    for v in verdicts:
        writer.writerow([v.flow_key, repr(v.start_time), v.final_label, v.stage.value,
                         v.assigned_class or "",
                         "" if v.recon_loss is None else repr(v.recon_loss),
                         *[repr(float(s)) for s in v.scores]])


def read_verdicts(handle) -> list[DetectionVerdict]:
    reader = csv.reader(handle)
    header = next(reader, None)
    if header is None or header[:6] != verdict_header(0)[:6]:
        raise DataError("verdict CSV has an unexpected header")
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            out.append(DetectionVerdict(
                row[0], float(row[1]), row[2], Stage(row[3]), np.array(row[6:], dtype=float),
                row[4] or None, float(row[5]) if row[5] else None))
        except (IndexError, ValueError) as exc:
            raise DataError(f"verdict CSV line {lineno}: {exc}") from None
    return out


# --------------------------------------------------------------------------
# bundle persistence
#
# A bundle is one file: a UTF-8 manifest of "key = value" lines closed by a
# line reading "end", followed by a binary blob. The manifest lists every
# section's byte range and SHA-256 and every array's dtype, offset (relative
# to the blob) and shape. Network parameters are little-endian float32;
# statistics and calibration values are little-endian float64.

_SECTIONS = ("encoder", "classifier", "norm_stats", "openmax", "vae")


def _bundle_arrays(bundle: ModelBundle) -> dict[str, list[tuple[str, str, np.ndarray]]]:
    sections = {s: [] for s in _SECTIONS}
    for name, arr in bundle.encoder.state_dict().items():
        sections["encoder"].append((name, "<f4", arr))
    for name, arr in bundle.classifier.state_dict().items():
        sections["classifier"].append((name, "<f4", arr))
    sections["norm_stats"] += [("mean", "<f8", bundle.norm_stats.mean),
                               ("std", "<f8", bundle.norm_stats.std)]
    for cal in sorted(bundle.calibrations, key=lambda c: c.index):
        w = cal.weibull
        sections["openmax"] += [
            (f"{cal.index}.mean", "<f8", cal.mean_vector),
            (f"{cal.index}.weibull", "<f8", np.array([w.shift, w.shape, w.scale])),
            (f"{cal.index}.tail_size", "<f8", np.array([cal.tail_size]))]
    for vae, thr in zip(bundle.vaes, bundle.thresholds):
        for name, arr in vae.state_dict().items():
            sections["vae"].append((f"{vae.class_index}.{name}", "<f4", arr))
        sections["vae"].append((f"{thr.class_index}.threshold", "<f8",
                                np.array([thr.threshold, thr.position])))
    return sections


def bundle_bytes(bundle: ModelBundle) -> bytes:
    bundle.check_consistency()
    blob = io.BytesIO()
    array_lines, section_lines = [], []
    for section, arrays in _bundle_arrays(bundle).items():
        start = blob.tell()
        for name, dtype, arr in arrays:
            offset = blob.tell()
            blob.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
            array_lines.append(f"array.{section}.{name} = {dtype} {offset} "
                               f"{json.dumps(list(np.shape(arr)))}")
        chunk = blob.getvalue()[start:]
        section_lines.append(f"section.{section} = {start} {len(chunk)} "
                             f"{hashlib.sha256(chunk).hexdigest()}")
    om = bundle.openmax_config
    names = json.dumps(bundle.class_names)
    lines = [
        BUNDLE_MAGIC,
        f"format_version = {bundle.version}",
        f"class_names = {names}",
        f"classifier.class_names = {json.dumps(bundle.classifier.class_names)}",
        f"openmax.class_names = {json.dumps([bundle.class_names[c.index - 1] for c in bundle.calibrations])}",
        f"vae.class_names = {json.dumps([bundle.class_names[v.class_index - 1] for v in bundle.vaes])}",
        f"openmax.config = {json.dumps(dataclasses.asdict(om), sort_keys=True)}",
        f"encoder.leaky_slope = {bundle.encoder.slope!r}",
        f"encoder.bn_momentum = {bundle.encoder.bn1.momentum!r}",
        f"encoder.bn_eps = {bundle.encoder.bn1.eps!r}",
        f"train_config = {json.dumps(bundle.train_config, sort_keys=True)}",
        *section_lines,
        *array_lines,
        "end",
    ]
    return ("\n".join(lines) + "\n").encode() + blob.getvalue()


def save_bundle(bundle: ModelBundle, sink: str | BinaryIO) -> None:
    data = bundle_bytes(bundle)
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        with open(sink, "wb") as fh:
            fh.write(data)
    else:
        sink.write(data)


def _parse_manifest(data: bytes) -> tuple[dict[str, str], bytes]:
    if not data.startswith(BUNDLE_MAGIC.encode() + b"\n"):
        raise CorruptSection("manifest", "missing bundle magic")
    end = data.find(b"\nend\n")
    if end < 0:
        raise CorruptSection("manifest", "manifest is not terminated")
    manifest = {}
    try:
        for line in data[:end].decode().splitlines()[1:]:
            key, _, value = line.partition(" = ")
            manifest[key] = value
    except UnicodeDecodeError as exc:
        raise CorruptSection("manifest", str(exc)) from None
    return manifest, data[end + len(b"\nend\n"):]


def load_bundle(source: str | bytes | BinaryIO) -> ModelBundle:
    if isinstance(source, bytes):
        data = source
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    manifest, blob = _parse_manifest(data)
    try:
        version = int(manifest["format_version"])
    except (KeyError, ValueError):
        raise CorruptSection("manifest", "format_version missing") from None
    if version != BUNDLE_VERSION:
        raise VersionMismatch(f"bundle format version {version}; this build reads {BUNDLE_VERSION}")

    sections: dict[str, dict[str, np.ndarray]] = {}
    for section in _SECTIONS:
        try:
            start, length, digest = manifest[f"section.{section}"].split()
            start, length = int(start), int(length)
        except (KeyError, ValueError):
            raise CorruptSection(section, "missing from manifest") from None
        chunk = blob[start:start + length]
        if len(chunk) != length:
            raise CorruptSection(section, "truncated")
        if hashlib.sha256(chunk).hexdigest() != digest:
            raise CorruptSection(section, "checksum mismatch")
        sections[section] = {}
    for key, value in manifest.items():
        if not key.startswith("array."):
            continue
        _, section, name = key.split(".", 2)
        dtype, offset, shape = value.split(" ", 2)
        shape = tuple(json.loads(shape))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=int(offset))
        sections[section][name] = arr.astype(np.float64).reshape(shape)

    try:
        return _assemble_bundle(manifest, sections, version)
    except BundleClassMismatch:
        raise
    except (KeyError, ValueError, IndexError) as exc:
        raise CorruptSection("manifest", f"inconsistent contents: {exc}") from None


def _assemble_bundle(manifest, sections, version) -> ModelBundle:
    class_names = json.loads(manifest["class_names"])
    for part in ("classifier", "openmax", "vae"):
        declared = json.loads(manifest[f"{part}.class_names"])
        if declared != class_names:
            raise BundleClassMismatch(
                f"{part} section covers {declared}, classifier/bundle classes are {class_names}")
    n = len(class_names)

    encoder = PayloadEncoder(slope=float(manifest["encoder.leaky_slope"]))
    for bn in (encoder.bn1, encoder.bn2):
        bn.momentum = float(manifest["encoder.bn_momentum"])
        bn.eps = float(manifest["encoder.bn_eps"])
    encoder.load_state_dict(sections["encoder"])
    encoder.eval()
    classifier = LinearClassifier(class_names)
    classifier.load_state_dict(sections["classifier"])
    if classifier.fc.weight.shape[0] != n:
        raise BundleClassMismatch("classifier output size differs from class list")

    ns = sections["norm_stats"]
    stats = NormalizationStats(ns["mean"], ns["std"])
    om = sections["openmax"]
    calibrations = []
    for j in range(1, n + 1):
        shift, shape, scale = (float(x) for x in om[f"{j}.weibull"])
        calibrations.append(ClassCalibration(j, om[f"{j}.mean"], WeibullModel(shift, shape, scale),
                                             int(om[f"{j}.tail_size"][0])))
    vaes, thresholds = [], []
    vs = sections["vae"]
    for j in range(1, n + 1):
        prefix = f"{j}."
        vae = VAE(j)
        vae.load_state_dict({k[len(prefix):]: v for k, v in vs.items()
                             if k.startswith(prefix) and k != f"{j}.threshold"})
        vaes.append(vae)
        thr, pos = vs[f"{j}.threshold"]
        thresholds.append(ReconstructionThreshold(float(thr), float(pos), j))
    bundle = ModelBundle(class_names, encoder, classifier, stats, calibrations, vaes, thresholds,
                         OpenMaxConfig(**json.loads(manifest["openmax.config"])),
                         json.loads(manifest["train_config"]), version)
    bundle.check_consistency()
    return bundle
