"""
Seeded synthetic flow generator for desk-scale open-set experiments.

Each class owns a 16x128 byte template (one row per packet position) drawn
from its template seed. ``difficulty`` in [0, 1] pulls every template toward
one shared template, so 0 gives well separated classes and 1 makes their
payloads indistinguishable apart from noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .features import N_PACKETS, PAYLOAD_BYTES
from .flows import ACK, FIN, PSH, SYN, BENIGN, Flow, FlowKey, Protocol, RawPacket

_SHARED_TEMPLATE_SEED = 0x5EED
MAX_GAP = 30.0  # seconds; stays under the default idle timeout


@dataclass
class SyntheticClassSpec:
    name: str
    template_seed: int
    noise: float = 8.0
    packet_count: tuple[int, int] = (4, 16)
    payload_length: tuple[int, int] = (40, 200)
    window: tuple[int, int] = (1024, 65535)
    interarrival: float = 0.05
    flags: str = "handshake"  # handshake | push | udp
    reply_probability: float = 0.5
    dst_port: int = 80

    def __post_init__(self):
        self.packet_count = tuple(self.packet_count)
        self.payload_length = tuple(self.payload_length)
        self.window = tuple(self.window)
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        lo, hi = self.packet_count
        if not 1 <= lo <= hi <= 64:
            raise ValueError("packet count range must lie within [1, 64]")
        if not 0 <= self.payload_length[0] <= self.payload_length[1]:
            raise ValueError("invalid payload length range")
        if self.flags not in ("handshake", "push", "udp"):
            raise ValueError(f"unknown flag pattern {self.flags!r}")

    @property
    def protocol(self) -> Protocol:
        return Protocol.UDP if self.flags == "udp" else Protocol.TCP


def default_specs() -> list[SyntheticClassSpec]:
    """Four stock classes: benign traffic plus three attack shapes."""
    return [
        SyntheticClassSpec(BENIGN, 11, packet_count=(4, 16), payload_length=(60, 300),
                           interarrival=0.2, reply_probability=0.5, dst_port=443),
        SyntheticClassSpec("DoS", 22, packet_count=(2, 8), payload_length=(200, 400),
                           interarrival=0.01, reply_probability=0.2, dst_port=80),
        SyntheticClassSpec("PortScan", 33, packet_count=(1, 3), payload_length=(0, 20),
                           window=(1024, 4096), flags="push", reply_probability=0.6, dst_port=22),
        SyntheticClassSpec("Botnet", 44, packet_count=(6, 16), payload_length=(30, 120),
                           interarrival=1.0, flags="udp", reply_probability=0.5, dst_port=8080),
    ]


def class_template(spec: SyntheticClassSpec, difficulty: float) -> np.ndarray:
    own = np.random.default_rng(spec.template_seed).integers(0, 256, (N_PACKETS, PAYLOAD_BYTES))
    shared = np.random.default_rng(_SHARED_TEMPLATE_SEED).integers(0, 256, (N_PACKETS, PAYLOAD_BYTES))
    return (1.0 - difficulty) * own + difficulty * shared


def _flags_for(spec: SyntheticClassSpec, i: int, from_client: bool) -> int:
    if spec.flags == "handshake":
        if i == 0:
            return SYN
        if i == 1 and not from_client:
            return SYN | ACK
        return ACK | PSH
    return ACK | PSH if i else PSH


def _make_flow(spec: SyntheticClassSpec, class_pos: int, n: int, template: np.ndarray,
               rng: np.random.Generator, t0: float) -> Flow:
    client = (f"10.{class_pos % 256}.{(n >> 8) % 256}.{n % 256 or 1}",
              int(1024 + (n * 7919 + class_pos * 104729) % 60000))
    server = (f"172.16.{class_pos % 256}.{int(rng.integers(1, 255))}", spec.dst_port)
    n_packets = int(rng.integers(spec.packet_count[0], spec.packet_count[1] + 1))
    ts = t0
    packets = []
    for i in range(n_packets):
        from_client = i == 0 or rng.random() >= spec.reply_probability
        src, dst = (client, server) if from_client else (server, client)
        length = int(rng.integers(spec.payload_length[0], spec.payload_length[1] + 1))
        row = template[i % N_PACKETS]
        body = np.resize(row, length)
        if spec.noise:
            body = body + rng.normal(0.0, spec.noise, size=length)
        payload = np.clip(np.rint(body), 0, 255).astype(np.uint8).tobytes()
        if spec.protocol == Protocol.TCP:
            pkt = RawPacket(round(ts, 6), src[0], dst[0], src[1], dst[1], Protocol.TCP, payload,
                            int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)),
                            _flags_for(spec, i, from_client),
                            int(rng.integers(spec.window[0], spec.window[1] + 1)))
        else:
            pkt = RawPacket(round(ts, 6), src[0], dst[0], src[1], dst[1], Protocol.UDP, payload)
        packets.append(pkt)
        ts += min(rng.exponential(spec.interarrival), MAX_GAP)
    key = FlowKey.from_packet(packets[0])
    return Flow(key, client, packets, spec.name)


def generate(specs: Sequence[SyntheticClassSpec], counts: Sequence[int] | int,
             seed: int = 0, difficulty: float = 0.0, start_time: float = 1.5e9) -> list[Flow]:
    """Labeled flows, ``counts[k]`` of class ``specs[k]``, grouped by class."""
    if isinstance(counts, int):
        counts = [counts] * len(specs)
    if len(counts) != len(specs):
        raise ValueError("need one count per class spec")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")
    flows = []
    for pos, (spec, count) in enumerate(zip(specs, counts)):
        if count < 1:
            raise ValueError(f"class {spec.name}: count must be at least 1")
        rng = np.random.default_rng(np.random.SeedSequence([seed, spec.template_seed, pos]))
        template = class_template(spec, difficulty)
        for n in range(count):
            flows.append(_make_flow(spec, pos, n, template, rng, start_time + 100.0 * n))
    return flows


def split_flows(flows: Sequence[Flow], test_fraction: float, seed: int = 0):
    """Per-class random train/test split."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    by_label: dict[str, list[Flow]] = {}
    for f in flows:
        by_label.setdefault(f.label, []).append(f)
    for label in sorted(by_label):
        group = by_label[label]
        order = rng.permutation(len(group))
        n_test = int(round(test_fraction * len(group)))
        test += [group[i] for i in order[:n_test]]
        train += [group[i] for i in order[n_test:]]
    return train, test


@dataclass
class SynthPlan:
    specs: list[SyntheticClassSpec]
    counts: list[int]
    seed: int = 0
    difficulty: float = 0.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, text: str) -> "SynthPlan":
        """Parse ``{"seed", "difficulty", "classes": [{"name", "count", ...}]}``."""
        doc = json.loads(text)
        specs, counts = [], []
        for i, entry in enumerate(doc["classes"]):
            entry = dict(entry)
            counts.append(int(entry.pop("count")))
            entry.setdefault("template_seed", 1000 + i)
            specs.append(SyntheticClassSpec(**entry))
        return cls(specs, counts, int(doc.get("seed", 0)), float(doc.get("difficulty", 0.0)))

    def to_json(self) -> str:
        classes = [dict(asdict(s), count=c) for s, c in zip(self.specs, self.counts)]
        return json.dumps({"seed": self.seed, "difficulty": self.difficulty,
                           "classes": classes}, indent=2)

    def generate(self) -> list[Flow]:
        return generate(self.specs, self.counts, self.seed, self.difficulty)
