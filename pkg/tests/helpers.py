"""Independent oracles shared by the unit and acceptance tests."""

from __future__ import annotations

import struct
from fractions import Fraction

import numpy as np

from opensetids import nn
from opensetids.synth import SyntheticClassSpec

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}"
    if detail:
        line += f" [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# --------------------------------------------------------------------------
# finite differences

def numeric_grad(f, tensor: nn.Tensor, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. elements of ``tensor``.

    With ``indices`` only those elements are probed; the rest stay NaN.
    """
    out = np.full(tensor.data.shape, np.nan)
    for idx in indices if indices is not None else np.ndindex(tensor.data.shape):
        orig = tensor.data[idx]
        tensor.data[idx] = orig + h
        up = float(f().data)
        tensor.data[idx] = orig - h
        down = float(f().data)
        tensor.data[idx] = orig
        out[idx] = (up - down) / (2 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    probed = ~np.isnan(numeric)
    a, n = analytic[probed], numeric[probed]
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def gradient_check(f, tensors, h: float = 1e-3, sample: int | None = None, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences.

    ``sample`` limits probing to that many random elements per tensor.
    """
    pick = np.random.default_rng(seed)
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    nn.backward(f())
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        indices = None
        if sample is not None and t.data.size > sample:
            flat = pick.choice(t.data.size, sample, replace=False)
            indices = [np.unravel_index(i, t.data.shape) for i in flat]
        worst = max(worst, max_relative_error(analytic, numeric_grad(f, t, h, indices)))
    return worst


def leaf(rng, *shape, scale=1.0, away_from_zero=False):
    x = rng.normal(0.0, scale, shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.copysign(0.05, x) + x, x)
    return nn.Tensor(x, requires_grad=True)


def _project(out: nn.Tensor, rng) -> nn.Tensor:
    """Random linear functional of ``out`` (avoids symmetric zero gradients)."""
    return (out * rng.normal(size=out.shape)).sum()


def _case_conv1d(rng):
    x = leaf(rng, 3, 2, 11)
    conv = nn.Conv1d(2, 3, 4, 2, rng=rng)
    proj = rng.normal(size=(3, 3, 4))
    return (lambda: (conv(x) * proj).sum()), [x, conv.weight, conv.bias]


def _case_batch_norm_train(rng):
    x = leaf(rng, 4, 2, 7)
    bn = nn.BatchNorm1d(2)
    bn.gamma.data = rng.uniform(0.5, 1.5, 2)
    bn.beta.data = rng.normal(size=2)
    proj = rng.normal(size=(4, 2, 7))
    return (lambda: (nn.batch_norm(x, bn, True) * proj).sum()), [x, bn.gamma, bn.beta]


def _case_batch_norm_eval(rng):
    x = leaf(rng, 4, 2, 7)
    bn = nn.BatchNorm1d(2)
    bn.running_mean = rng.normal(size=2)
    bn.running_var = rng.uniform(0.5, 2.0, 2)
    bn.gamma.data = rng.uniform(0.5, 1.5, 2)
    proj = rng.normal(size=(4, 2, 7))
    return (lambda: (nn.batch_norm(x, bn, False) * proj).sum()), [x, bn.gamma, bn.beta]


def _case_linear(rng):
    x = leaf(rng, 5, 6)
    lin = nn.Linear(6, 4, rng=rng)
    proj = rng.normal(size=(5, 4))
    return (lambda: (lin(x) * proj).sum()), [x, lin.weight, lin.bias]


def _case_leaky_relu(rng):
    x = leaf(rng, 6, 5, away_from_zero=True)
    proj = rng.normal(size=(6, 5))
    return (lambda: (nn.leaky_relu(x) * proj).sum()), [x]


def _case_sigmoid(rng):
    x = leaf(rng, 6, 5, scale=2.0)
    proj = rng.normal(size=(6, 5))
    return (lambda: (nn.sigmoid(x) * proj).sum()), [x]


def _case_softmax(rng):
    x = leaf(rng, 4, 5)
    proj = rng.normal(size=(4, 5))
    return (lambda: (nn.softmax(x) * proj).sum()), [x]


def _case_cross_entropy(rng):
    x = leaf(rng, 6, 4)
    targets = rng.integers(0, 4, 6)
    return (lambda: nn.cross_entropy(x, targets)), [x]


def _case_mse(rng):
    a, b = leaf(rng, 3, 7), leaf(rng, 3, 7)
    return (lambda: nn.mse(a, b)), [a, b]


def _case_gaussian_kl(rng):
    mu = leaf(rng, 4, 5)
    var = nn.Tensor(rng.uniform(0.3, 3.0, (4, 5)), requires_grad=True)
    return (lambda: nn.gaussian_kl(mu, var)), [mu, var]


def _case_elementwise(rng):
    x = nn.Tensor(rng.uniform(0.3, 2.0, (3, 4)), requires_grad=True)
    y = leaf(rng, 3, 4)
    proj = rng.normal(size=(3, 4))
    return (lambda: ((x.sqrt() * y.exp() - y + 2.0 * x) * proj).sum()), [x, y]


def _case_shape_ops(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 3, 2)
    rows = np.array([0, 2, 2, 1])

    def f():
        cat = nn.concat([a, b], axis=-1)                 # (2, 3, 6)
        picked = cat[:, rows, 1:5]                      # repeated rows exercise scatter-add
        flat = picked.reshape(2, -1)
        return (flat * np.arange(flat.shape[1])).mean() + cat[1, 0].sum()
    return f, [a, b]


def _case_payload_encoder(rng, slope: float = 1.0):
    # slope 1 keeps the stack smooth so an h = 1e-3 probe never straddles a kink
    from opensetids.encoder import PayloadEncoder, encode
    enc = PayloadEncoder(rng, slope=slope)
    enc.bn1.gamma.data = rng.uniform(0.5, 1.5, 1)
    enc.bn2.beta.data = rng.normal(size=1)
    payload = rng.uniform(0, 1, (2, 16, 128))
    proj = rng.normal(size=(2, 16, 21))
    return (lambda: (encode(payload, enc, True) * proj).sum()), enc.parameters()


def _case_vae_objective(rng):
    from opensetids.vae import LATENT, VAE, vae_objective
    model = VAE(0, rng)
    x = rng.uniform(-1, 1, (3, 528))
    eps = rng.standard_normal((3, LATENT))
    return (lambda: vae_objective(model, x, eps, 1.0)), model.parameters()


GRADIENT_CASES = {
    "conv1d": (_case_conv1d, None),
    "batch_norm_train": (_case_batch_norm_train, None),
    "batch_norm_eval": (_case_batch_norm_eval, None),
    "linear": (_case_linear, None),
    "leaky_relu": (_case_leaky_relu, None),
    "sigmoid": (_case_sigmoid, None),
    "softmax": (_case_softmax, None),
    "cross_entropy": (_case_cross_entropy, None),
    "mse": (_case_mse, None),
    "gaussian_kl": (_case_gaussian_kl, None),
    "elementwise": (_case_elementwise, None),
    "shape_ops": (_case_shape_ops, None),
    "payload_encoder": (_case_payload_encoder, None),
    "vae_objective": (_case_vae_objective, 6),
}


def run_gradient_case(name: str, seed: int) -> float:
    build, sample = GRADIENT_CASES[name]
    f, tensors = build(np.random.default_rng(seed))
    return gradient_check(f, tensors, sample=sample, seed=seed)


# --------------------------------------------------------------------------
# hand-assembled captures (written without the library's encoder)

def pcap_header(magic: int = 0xA1B2C3D4, endian: str = "<", linktype: int = 1) -> bytes:
    return struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)


def pcap_record(frame: bytes, ts: float, endian: str = "<") -> bytes:
    sec = int(ts)
    usec = int(round((ts - sec) * 1e6))
    return struct.pack(endian + "IIII", sec, usec, len(frame), len(frame)) + frame


def ipv4(src: str, dst: str, proto: int, body: bytes, frag: int = 0) -> bytes:
    def octets(ip):
        return bytes(int(x) for x in ip.split("."))
    return struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(body), 7, frag, 64, proto, 0,
                       octets(src), octets(dst)) + body


def ether(payload: bytes, ethertype: int = 0x0800) -> bytes:
    return bytes(6) + bytes([2, 0, 0, 0, 0, 1]) + struct.pack("!H", ethertype) + payload


def udp(sport: int, dport: int, data: bytes) -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + len(data), 0) + data


def tcp(sport: int, dport: int, seq: int, ack: int, flags: int, window: int, data: bytes = b"") -> bytes:
    return struct.pack("!HHIIHHHH", sport, dport, seq, ack, (5 << 12) | flags, window, 0, 0) + data


# --------------------------------------------------------------------------
# brute-force metric counting

def brute_force_metrics(pred, truth, known, benign="BENIGN", unknown="UNKNOWN_ATTACK"):
    """Metrics by direct counting over (prediction, truth) pairs; no matrices.

    Arithmetic is exact (fractions) and each result is rounded to float once.
    """
    def ratio(a, b):
        return Fraction(a, b) if b else None

    def f1(p, r):
        if p is None or r is None:
            return None
        return Fraction(0) if p + r == 0 else 2 * p * r / (p + r)

    pairs = list(zip(pred, truth))
    tp = sum(1 for p, t in pairs if t != benign and p != benign)
    fn = sum(1 for p, t in pairs if t != benign and p == benign)
    fp = sum(1 for p, t in pairs if t == benign and p != benign)
    tn = sum(1 for p, t in pairs if t == benign and p == benign)
    prec, rec = ratio(tp, tp + fp), ratio(tp, tp + fn)
    res = {"acc": ratio(tp + tn, len(pairs)), "f1": f1(prec, rec), "fpr": ratio(fp, fp + tn),
           "bin_precision": prec, "bin_recall": rec}

    unk = [p for p, t in pairs if t not in known]
    res["r_unk"] = ratio(sum(1 for p in unk if p == unknown), len(unk))

    labels = list(known) + [unknown]
    folded = [(p, t if t in labels else unknown) for p, t in pairs]
    total = 0
    wp = wr = Fraction(0)
    p_undef = False
    for c in labels:
        support = sum(1 for _, t in folded if t == c)
        if support == 0:
            continue
        total += support
        predicted = sum(1 for p, _ in folded if p == c)
        hit = sum(1 for p, t in folded if p == c and t == c)
        wr += support * Fraction(hit, support)
        if predicted == 0:
            p_undef = True
        else:
            wp += support * Fraction(hit, predicted)
    res["p_wht"] = None if p_undef or total == 0 else wp / total
    res["r_wht"] = wr / total if total else None
    res["f1_wht"] = f1(res["p_wht"], res["r_wht"])
    return {k: None if v is None else float(v) for k, v in res.items()}


def two_class_specs(noise: float = 8.0, **kw):
    return [SyntheticClassSpec("BENIGN", 101, noise=noise, **kw),
            SyntheticClassSpec("Attack", 202, noise=noise, flags="push", **kw)]
