"""Temporal convolutional network over per-window feature sequences."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import Adam, Conv1d, Linear, Module, Tensor, no_grad
from .nn import functional as F
from .nn.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CLASSES = ("Negative", "Positive")


class NumericError(RuntimeError):
    """Loss or parameters became NaN/inf."""


@dataclass
class TcnConfig:
    channels: int = 25
    blocks: int = 8
    kernel: int = 20
    dropout: float = 0.4
    classes: int = 2
    batch_size: int = 8
    lr: float = 0.001
    readout: str = "mean"  # or "last"
    weight_norm: bool = False
    epochs: int = 100
    patience: int = 15
    train_crop: int = 0  # >0: train on random crops of this many windows; inference always sees full sequences

    @property
    def dilations(self) -> list[int]:
        return [2 ** b for b in range(self.blocks)]

    def __post_init__(self):
        if self.readout not in ("mean", "last"):
            raise ValueError(f"readout must be 'mean' or 'last', got {self.readout!r}")
        if min(self.channels, self.blocks, self.kernel, self.batch_size) < 1:
            raise ValueError("channels, blocks, kernel and batch_size must be positive")
        if self.train_crop < 0:
            raise ValueError(f"train_crop must be non-negative, got {self.train_crop}")


def receptive_field(config: TcnConfig) -> int:
    """Input windows that can reach one output step: 1 + 2 (k-1) sum(d)."""
    return 1 + 2 * (config.kernel - 1) * sum(config.dilations)


# -- standardisation ------------------------------------------------------------------------

@dataclass
class Standardiser:
    median: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, names: list[str] | None = None) -> "Standardiser":
        """``values`` is ``(m, count)``: one row per channel."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] == 0:
            raise ValueError(f"need a non-empty (m, count) matrix, got shape {values.shape}")
        median = np.median(values, axis=1)
        std = values.std(axis=1)
        for c in np.flatnonzero(~(std > 0)):
            name = names[c] if names else str(c)
            raise ValueError(f"channel {name} has zero standard deviation; cannot standardise")
        return cls(median, std)

    def apply(self, seq: np.ndarray) -> np.ndarray:
        seq = np.asarray(seq)
        if seq.shape[0] != len(self.median):
            raise ValueError(f"sequence has {seq.shape[0]} channels, standardiser {len(self.median)}")
        return ((seq - self.median[:, None]) / self.std[:, None]).astype(np.float32)

    def to_json(self) -> dict:
        return {"median": self.median.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Standardiser":
        return cls(np.asarray(d["median"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# -- model ----------------------------------------------------------------------------------

class CausalConv(Module):
    """Causal dilated conv, optionally weight-normalised (w = g v / ||v|| per output channel)."""

    def __init__(self, c_in: int, c_out: int, k: int, dilation: int, rng, weight_norm: bool, dtype):
        self.conv = Conv1d(c_in, c_out, k, rng, dilation=dilation, causal=True, dtype=dtype)
        self.weight_norm = weight_norm
        if weight_norm:
            v = self.conv.weight.data
            self.g = Tensor(np.sqrt((v.astype(np.float64) ** 2).sum(axis=(1, 2))).astype(dtype)[:, None, None],
                            requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        w = self.conv.weight
        if self.weight_norm:
            w = w * (self.g / ((w * w).sum(axis=(1, 2), keepdims=True) ** 0.5))
        c = self.conv
        return F.conv1d(x, w, c.bias, dilation=c.dilation, pad_left=(w.shape[2] - 1) * c.dilation)


class TemporalBlock(Module):
    def __init__(self, c_in: int, c_out: int, k: int, dilation: int, dropout: float, rng,
                 weight_norm: bool, dtype):
        self.conv1 = CausalConv(c_in, c_out, k, dilation, rng, weight_norm, dtype)
        self.conv2 = CausalConv(c_out, c_out, k, dilation, rng, weight_norm, dtype)
        self.downsample = Conv1d(c_in, c_out, 1, rng, dtype=dtype) if c_in != c_out else None
        self.p = dropout

    def forward(self, x: Tensor, rng=None) -> Tensor:
        out = F.dropout(F.relu(self.conv1(x)), self.p, rng, self.training)
        out = F.dropout(F.relu(self.conv2(out)), self.p, rng, self.training)
        res = x if self.downsample is None else self.downsample(x)
        return F.relu(out + res)


class TcnModel(Module):
    def __init__(self, m: int, config: TcnConfig = TcnConfig(), seed: int = 0, dtype=np.float32):
        if m < 1:
            raise ValueError(f"input channel count must be positive, got {m}")
        rng = np.random.default_rng(seed)
        self.m = m
        self.config = config
        self.blocks = []
        c_in = m
        for d in config.dilations:
            self.blocks.append(TemporalBlock(c_in, config.channels, config.kernel, d, config.dropout, rng,
                                             config.weight_norm, dtype))
            c_in = config.channels
        self.fc = Linear(config.channels, config.classes, rng, dtype)

    def features(self, x: Tensor, rng=None) -> Tensor:
        """Conv stack output ``(B, T, channels)`` before pooling."""
        if x.shape[-1] != self.m:
            raise ValueError(f"model expects {self.m} input channels, got input of shape {x.shape}")
        for block in self.blocks:
            x = block(x, rng)
        return x

    def forward(self, x: Tensor, mask: np.ndarray | None = None, rng=None) -> Tensor:
        """Log-probabilities ``(B, 2)`` over [Negative, Positive] for ``(B, T, m)`` input."""
        h = self.features(x, rng)
        if self.config.readout == "mean":
            pooled = F.mean_pool_time(h, mask)
        else:
            last = (np.full(h.shape[0], h.shape[1] - 1) if mask is None
                    else np.asarray(mask).sum(axis=1).astype(int) - 1)
            pooled = h[np.arange(h.shape[0]), last]
        return F.log_softmax(self.fc(pooled))

    def architecture(self) -> dict:
        return {"kind": "tcn", "m": self.m, "config": asdict(self.config)}

    def layer_parameter_counts(self) -> dict[str, int]:
        counts = {}
        for name, p in self.named_parameters():
            layer = name.rsplit(".", 1)[0]
            counts[layer] = counts.get(layer, 0) + p.data.size
        return counts


def save_tcn(path, model: TcnModel, extra: dict | None = None) -> None:
    arch = model.architecture()
    if extra:
        arch.update(extra)
    save_checkpoint(path, arch, model.state_dict())


def load_tcn(path) -> tuple[TcnModel, dict]:
    arch, state = load_checkpoint(path)
    if arch.get("kind") != "tcn":
        raise ValueError(f"{path} is not a TCN checkpoint")
    model = TcnModel(arch["m"], TcnConfig(**arch["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, arch


# -- batching, training, inference --------------------------------------------------------

def pad_batch(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``(m, n_i)`` sequences into ``(B, T, m)`` with right zero padding and a validity mask."""
    t = max(s.shape[1] for s in seqs)
    m = seqs[0].shape[0]
    x = np.zeros((len(seqs), t, m), dtype=np.float32)
    mask = np.zeros((len(seqs), t), dtype=np.float32)
    for i, s in enumerate(seqs):
        x[i, :s.shape[1]] = s.T
        mask[i, :s.shape[1]] = 1.0
    return x, mask


def random_crops(seqs: list[np.ndarray], length: int, rng) -> list[np.ndarray]:
    """One random contiguous ``length``-window slice per sequence; shorter sequences pass through whole."""
    out = []
    for s in seqs:
        n = s.shape[1]
        if length <= 0 or n <= length:
            out.append(s)
        else:
            start = int(rng.integers(n - length + 1))
            out.append(s[:, start:start + length])
    return out


def predict_log_probs(model: TcnModel, seqs: list[np.ndarray], batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(seqs), batch_size):
            x, mask = pad_batch(seqs[i:i + batch_size])
            out.append(model(Tensor(x), mask).data)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, 2))


def rates(pred: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(recall, false positive rate) of 0/1 predictions."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    p, n = (labels == 1).sum(), (labels == 0).sum()
    recall = float(((pred == 1) & (labels == 1)).sum() / p) if p else float("nan")
    fpr = float(((pred == 1) & (labels == 0)).sum() / n) if n else float("nan")
    return recall, fpr


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_recall: float
    val_fpr: float


@dataclass
class TrainResult:
    model: TcnModel
    trace: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} during {where}")


def train(model: TcnModel, train_seqs: list[np.ndarray], train_labels, val_seqs: list[np.ndarray], val_labels,
          epochs: int | None = None, seed: int = 0, progress=None) -> TrainResult:
    """Mini-batch Adam on NLL; keeps the parameters of the epoch with the lowest validation loss."""
    if not train_seqs:
        raise ValueError("empty training split")
    if not val_seqs:
        raise ValueError("empty validation split")
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    result = TrainResult(model)
    best_loss, best_state, stale = math.inf, model.state_dict(), 0
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(train_seqs))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x, mask = pad_batch(random_crops([train_seqs[j] for j in idx], cfg.train_crop, rng))
            opt.zero_grad()
            loss = F.nll_loss(model(Tensor(x), mask, rng), train_labels[idx])
            _check_finite(float(loss.data), f"epoch {epoch} training")
            loss.backward()
            opt.step()
            losses.append(float(loss.data) * len(idx))
        lp = predict_log_probs(model, val_seqs, cfg.batch_size)
        val_loss = float(-lp[np.arange(len(val_labels)), val_labels].mean())
        _check_finite(val_loss, f"epoch {epoch} validation")
        recall, fpr = rates(lp.argmax(axis=1), val_labels)
        rec = EpochRecord(epoch, sum(losses) / len(train_seqs), val_loss, recall, fpr)
        result.trace.append(rec)
        if progress:
            progress(rec)
        if val_loss < best_loss:
            best_loss, best_state, stale = val_loss, model.state_dict(), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop after epoch %d (best %d)", epoch, result.best_epoch)
                break
    model.load_state_dict(best_state)
    model.eval()
    return result
