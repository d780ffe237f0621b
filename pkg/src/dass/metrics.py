"""Quantitative evaluation: parameter census, compression, NID, Kendall's tau,
accuracy and generalization gap."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FEATURE_SAMPLE_CAP = 4096  # activations per layer entering the O(n^2) tau


def count_params(network) -> tuple[int, int]:
    """(total, nonzero) trainable parameter counts.

    Pruning scores and architecture parameters are search bookkeeping, not
    network weights, and are excluded.  Masked tensors count all positions in
    ``total`` and their mask popcount in ``nonzero``; unmasked tensors
    (biases, batch-norm affine, dense convs) count fully in both.
    """
    sparse_thetas = {id(sp.theta) for _, sp in network.named_sparse_params()}
    total = 0
    nonzero = 0
    for name, p in network.named_parameters():
        if name.endswith(".scores") or name.startswith("alpha"):
            continue
        total += p.data.size
        if id(p) not in sparse_thetas:
            nonzero += p.data.size
    for _, sp in network.named_sparse_params():
        nonzero += sp.popcount()
    return total, nonzero


def nid(top1_percent: float, params_thousands: float) -> float:
    """Parameter-efficiency index: accuracy per 10^3 parameters."""
    if params_thousands <= 0:
        raise ValueError(f"params must be positive, got {params_thousands}")
    return top1_percent / params_thousands


def compression_rate(baseline_params: float, params: float) -> float:
    if params <= 0:
        raise ValueError(f"params must be positive, got {params}")
    return baseline_params / params


def generalization_gap(train_acc: float, test_acc: float) -> float:
    return train_acc - test_acc


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall tau_b over all pairs, scaled to [-100, 100]."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise ValueError(f"kendall_tau: length mismatch {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise ValueError("kendall_tau: need at least 2 elements")

    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(a)
    n2 = _tie_pairs(b)
    if n0 - n1 == 0 or n0 - n2 == 0:
        raise ValueError("kendall_tau: constant input, tau undefined")

    # concordant minus discordant via blocked sign products (exact integers)
    diff = 0
    block = 512
    cols = np.arange(n)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        sa = np.sign(a[lo:hi, None] - a[None, :]).astype(np.int8)
        sb = np.sign(b[lo:hi, None] - b[None, :]).astype(np.int8)
        prod = sa * sb
        # keep only pairs (i, j) with global i < j
        prod[cols[None, :] <= cols[lo:hi, None]] = 0
        diff += int(prod.sum(dtype=np.int64))
    return 100.0 * diff / math.sqrt((n0 - n1) * (n0 - n2))


def _tie_pairs(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int(sum(int(c) * (int(c) - 1) // 2 for c in counts))


def _subsample(flat: np.ndarray, cap: int = FEATURE_SAMPLE_CAP) -> np.ndarray:
    if flat.size <= cap:
        return flat
    stride = int(np.ceil(flat.size / cap))
    return flat[::stride]


def feature_map_similarity(net_a, net_b, probe_x: np.ndarray,
                           mode_a: str = "masked", mode_b: str = "dense") -> list[float]:
    """Per-cell scaled tau between two networks' activations on the same probe batch."""
    feats_a = net_a.collect_features(probe_x, mode_a)
    feats_b = net_b.collect_features(probe_x, mode_b)
    if len(feats_a) != len(feats_b):
        raise ValueError(f"feature_map_similarity: cell count mismatch "
                         f"{len(feats_a)} vs {len(feats_b)}")
    out = []
    for fa, fb in zip(feats_a, feats_b):
        if fa.shape != fb.shape:
            raise ValueError(f"feature_map_similarity: shape mismatch {fa.shape} vs {fb.shape}")
        out.append(kendall_tau(_subsample(fa.ravel()), _subsample(fb.ravel())))
    return out


def accuracy(network, x: np.ndarray, y: np.ndarray, mode: str,
             batch_size: int = 256) -> float:
    """Top-1 accuracy in percent, evaluated with tracked batch-norm statistics."""
    was_training = network.training
    network.set_training(False)
    correct = 0
    with ad.no_grad():
        for lo in range(0, len(y), batch_size):
            logits = network(Tensor(x[lo:lo + batch_size]), mode)
            pred = np.argmax(logits.data, axis=1)
            correct += int((pred == y[lo:lo + batch_size]).sum())
    network.set_training(was_training)
    return 100.0 * correct / len(y)


def dataset_loss(network, x: np.ndarray, y: np.ndarray, mode: str,
                 batch_size: int = 256, training_stats: bool = False) -> float:
    """Mean cross-entropy over a split (evaluation-mode batch norm by default)."""
    was_training = network.training
    network.set_training(training_stats)
    total = 0.0
    seen = 0
    with ad.no_grad():
        for lo in range(0, len(y), batch_size):
            xb, yb = x[lo:lo + batch_size], y[lo:lo + batch_size]
            loss = ad.cross_entropy(network(Tensor(xb), mode), yb)
            total += loss.item() * len(yb)
            seen += len(yb)
    network.set_training(was_training)
    return total / seen


@dataclass
class MetricsReport:
    top1_accuracy: float = 0.0
    params_total: int = 0
    params_nonzero: int = 0
    compression_rate: float = 0.0
    nid: float = 0.0
    generalization_gap: float = 0.0
    # per-phase (epoch, train_loss, val_loss) rows
    loss_curves: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self):
        if self.params_nonzero > self.params_total:
            raise ValueError("params_nonzero exceeds params_total")
        if not 0.0 <= self.top1_accuracy <= 100.0:
            raise ValueError(f"top1_accuracy out of range: {self.top1_accuracy}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def loss_curves_csv(report: MetricsReport) -> str:
    """Flatten the per-phase curves into ``epoch,train_loss,val_loss`` rows."""
    lines = ["epoch,train_loss,val_loss"]
    epoch = 0
    for phase in ("pretrain", "prune", "finetune"):
        for _, train_loss, val_loss in report.loss_curves.get(phase, []):
            lines.append(f"{epoch},{train_loss!r},{val_loss!r}")
            epoch += 1
    return "\n".join(lines) + "\n"
