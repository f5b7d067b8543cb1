"""Open-set network intrusion detection with OpenMax calibration and per-class VAEs."""

from .features import AuxiliaryScaler, FlowFeaturizer, featurize
from .flows import (AttackRecord, Flow, FlowKey, RawPacket, assemble_flows, label_flows,
                    parse_capture, read_flows, write_flows)
from .pipeline import (UNKNOWN_ATTACK, DetectionVerdict, ModelBundle, OpenSetDetector, Stage,
                       detect, detect_many, load_bundle, save_bundle, train_full)

__version__ = "0.1.0"

__all__ = [
    "AttackRecord", "AuxiliaryScaler", "DetectionVerdict", "Flow", "FlowFeaturizer", "FlowKey",
    "ModelBundle", "OpenSetDetector", "RawPacket", "Stage", "UNKNOWN_ATTACK", "assemble_flows",
    "detect", "detect_many", "featurize", "label_flows", "load_bundle", "parse_capture",
    "read_flows", "save_bundle", "train_full", "write_flows",
]
