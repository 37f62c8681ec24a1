"""Variational autoencoders over waveforms, spectral profiles and spectrograms.

Embeddings are the deterministic posterior parameters: ``concat(mu, log_var)``
of length ``2 * latent_n`` per analysis window.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import features
from .features import FeatureSequence
from .nn import Adam, Conv1d, Conv2d, Linear, Module, Tensor, no_grad
from .nn import functional as F
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .tcn import NumericError

log = logging.getLogger(__name__)


class InputKind(str, enum.Enum):
    WAVEFORM512 = "Waveform512"
    WAVEFORM2048 = "Waveform2048"
    PROFILE200 = "Profile200"
    SPECTROGRAM128 = "Spectrogram128"

    @property
    def window(self) -> int:
        """Samples of audio behind one embedding."""
        return {"Waveform512": 512, "Waveform2048": 2048, "Profile200": 512, "Spectrogram128": 32_768}[self.value]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return {"Waveform512": (512, 1), "Waveform2048": (2048, 1), "Profile200": (200, 1),
                "Spectrogram128": (128, 128, 1)}[self.value]

    @property
    def is_2d(self) -> bool:
        return self is InputKind.SPECTROGRAM128

    @property
    def is_waveform(self) -> bool:
        return self in (InputKind.WAVEFORM512, InputKind.WAVEFORM2048)


LATENTS_1D = (8, 16, 24, 32)
LATENTS_2D = (8, 16, 24, 32, 64, 128)


@dataclass
class VaeConfig:
    input_kind: InputKind = InputKind.WAVEFORM512
    latent_n: int = 16
    channels: tuple[int, ...] = ()  # empty: (8, 16, 32, 64) for 1D, (16, 32, 64, 128) for 2D
    kernel: int = 9  # 1D only
    stride: int = 4  # 1D only
    blocks_per_stage: int = 2  # 2D only
    image_size: int = 128  # 2D only; smaller grids are for tests
    beta: float = 1.0
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.001
    strict_latent: bool = True

    def __post_init__(self):
        self.input_kind = InputKind(self.input_kind)
        allowed = LATENTS_2D if self.input_kind.is_2d else LATENTS_1D
        if self.strict_latent and self.latent_n not in allowed:
            raise ValueError(f"latent_n for {self.input_kind.value} must be one of {allowed}, got {self.latent_n}")
        if not self.channels:
            self.channels = (16, 32, 64, 128) if self.input_kind.is_2d else (8, 16, 32, 64)
        self.channels = tuple(self.channels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.input_kind.is_2d:
            return (self.image_size, self.image_size, 1)
        return self.input_kind.input_shape

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_kind"] = self.input_kind.value
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def _conv_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# -- 1D ---------------------------------------------------------------------------------------

class Vae1d(Module):
    """Strided conv encoder, linear heads; decoder upsamples back through the same lengths."""

    def __init__(self, cfg: VaeConfig, rng, dtype=np.float32):
        length = cfg.input_shape[0]
        pad = cfg.kernel // 2
        widths = [1, *cfg.channels]
        self.lengths = [length]
        self.enc = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            self.enc.append(Conv1d(c_in, c_out, cfg.kernel, rng, stride=cfg.stride, padding=pad, dtype=dtype))
            self.lengths.append(_conv_len(self.lengths[-1], cfg.kernel, cfg.stride, pad))
        flat = self.lengths[-1] * widths[-1]
        self.mu_head = Linear(flat, cfg.latent_n, rng, dtype)
        self.logvar_head = Linear(flat, cfg.latent_n, rng, dtype)
        self.dec_in = Linear(cfg.latent_n, flat, rng, dtype)
        self.dec = [Conv1d(c_out, c_in, cfg.kernel, rng, padding=pad, dtype=dtype)
                    for c_in, c_out in reversed(list(zip(widths[:-1], widths[1:])))]
        self.top = widths[-1]

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = x
        for conv in self.enc:
            h = F.relu(conv(h))
        h = h.reshape(h.shape[0], -1)
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z: Tensor) -> Tensor:
        h = F.relu(self.dec_in(z)).reshape(z.shape[0], self.lengths[-1], self.top)
        for i, conv in enumerate(self.dec):
            h = conv(F.upsample_nearest1d(h, self.lengths[-2 - i]))
            if i < len(self.dec) - 1:
                h = F.relu(h)
        return h


# -- 2D ---------------------------------------------------------------------------------------

class ResBlock2d(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng, dtype):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1, dtype=dtype)
        self.shortcut = (Conv2d(c_in, c_out, 1, rng, stride=stride, dtype=dtype)
                         if stride != 1 or c_in != c_out else None)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(F.relu(self.conv1(x)))
        return F.relu(h + (x if self.shortcut is None else self.shortcut(x)))


class Vae2d(Module):
    """Reduced residual encoder: one stride-2 stage per channel width, heads from the final grid."""

    def __init__(self, cfg: VaeConfig, rng, dtype=np.float32):
        size = cfg.image_size
        chans = list(cfg.channels)
        self.stem = Conv2d(1, chans[0], 3, rng, padding=1, dtype=dtype)
        self.enc = []
        c_in = chans[0]
        self.sizes = [size]
        for c in chans:
            for b in range(cfg.blocks_per_stage):
                self.enc.append(ResBlock2d(c_in, c, 2 if b == 0 else 1, rng, dtype))
                c_in = c
            self.sizes.append((self.sizes[-1] + 1) // 2)
        self.grid = self.sizes[-1]
        flat = self.grid * self.grid * chans[-1]
        self.mu_head = Linear(flat, cfg.latent_n, rng, dtype)
        self.logvar_head = Linear(flat, cfg.latent_n, rng, dtype)
        self.dec_in = Linear(cfg.latent_n, flat, rng, dtype)
        self.dec = []
        rev = chans[::-1] + [chans[0]]
        for i in range(len(chans)):
            for b in range(cfg.blocks_per_stage):
                self.dec.append(ResBlock2d(rev[i] if b == 0 else rev[i + 1], rev[i + 1], 1, rng, dtype))
        self.head = Conv2d(chans[0], 1, 3, rng, padding=1, dtype=dtype)
        self.top = chans[-1]
        self.per_stage = cfg.blocks_per_stage

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = F.relu(self.stem(x))
        for block in self.enc:
            h = block(h)
        h = h.reshape(h.shape[0], -1)
        return self.mu_head(h), self.logvar_head(h)

    def decode(self, z: Tensor) -> Tensor:
        h = F.relu(self.dec_in(z)).reshape(z.shape[0], self.grid, self.grid, self.top)
        for i, block in enumerate(self.dec):
            if i % self.per_stage == 0:
                size = self.sizes[-2 - i // self.per_stage]
                h = F.upsample_nearest2d(h, (size, size))
            h = block(h)
        return self.head(h)


# -- model wrapper -------------------------------------------------------------------------------

class VaeModel(Module):
    def __init__(self, config: VaeConfig, seed: int = 0, input_scale: float = 1.0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.input_scale = float(input_scale)
        self.net = (Vae2d if config.input_kind.is_2d else Vae1d)(config, rng, dtype)

    def _check(self, x: Tensor) -> None:
        want = self.config.input_shape
        if tuple(x.shape[1:]) != want:
            raise ValueError(f"{self.config.input_kind.value} VAE expects inputs of shape (B, {want}), "
                             f"got {x.shape}")

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check(x)
        return self.net.encode(x)

    def decode(self, z: Tensor) -> Tensor:
        return self.net.decode(z)

    def loss(self, x: Tensor, rng) -> tuple[Tensor, Tensor, Tensor]:
        """(total, reconstruction, KL) with one reparameterised sample per input."""
        mu, log_var = self.encode(x)
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        z = mu + (log_var * 0.5).exp() * Tensor(eps, dtype=mu.dtype)
        recon = F.mse_sum(self.decode(z), x)
        kl = F.gaussian_kl(mu, log_var)
        return recon + kl * self.config.beta, recon, kl

    def embed(self, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """``(count, 2n)`` rows of ``concat(mu, log_var)`` for prepared inputs."""
        out = []
        with no_grad():
            for i in range(0, len(inputs), batch_size):
                mu, log_var = self.encode(Tensor(inputs[i:i + batch_size]))
                out.append(np.concatenate([mu.data, log_var.data], axis=1))
        n2 = 2 * self.config.latent_n
        return np.concatenate(out).astype(np.float32) if out else np.zeros((0, n2), dtype=np.float32)

    def reconstruct(self, inputs: np.ndarray) -> np.ndarray:
        with no_grad():
            mu, _ = self.encode(Tensor(inputs))
            return self.decode(mu).data

    def architecture(self) -> dict:
        return {"kind": "vae", "config": self.config.to_json(), "input_scale": self.input_scale}


def save_vae(path, model: VaeModel) -> None:
    save_checkpoint(path, model.architecture(), model.state_dict())


def load_vae(path) -> VaeModel:
    arch, state = load_checkpoint(path)
    if arch.get("kind") != "vae":
        raise ValueError(f"{path} is not a VAE checkpoint")
    model = VaeModel(VaeConfig.from_json(arch["config"]), input_scale=arch["input_scale"])
    model.load_state_dict(state)
    return model.eval()


# -- inputs -----------------------------------------------------------------------------------

def waveform_scale(clips: np.ndarray) -> float:
    """Median absolute peak over clips; 1 if all clips are silent."""
    peaks = np.abs(np.asarray(clips)).max(axis=-1)
    med = float(np.median(peaks)) if len(peaks) else 0.0
    return med if med > 0 else 1.0


def prepare_inputs(kind: InputKind, windows: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Turn raw audio windows ``(count, kind.window)`` into network inputs."""
    kind = InputKind(kind)
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[1] != kind.window:
        raise ValueError(f"{kind.value} needs windows of {kind.window} samples, got shape {windows.shape}")
    if kind.is_waveform:
        x = windows / scale
    elif kind is InputKind.PROFILE200:
        x = features.normalised_profiles(windows)
    else:
        x = np.stack([features.spectrogram(w) for w in windows]) if len(windows) else np.zeros((0, 128, 128))
    return x.reshape((len(windows),) + kind.input_shape).astype(np.float32)


# -- training ---------------------------------------------------------------------------------

@dataclass
class VaeTrainResult:
    model: VaeModel
    trace: list[dict] = field(default_factory=list)


def train_vae(inputs: np.ndarray, config: VaeConfig, epochs: int | None = None, seed: int = 0,
              input_scale: float = 1.0, progress=None) -> VaeTrainResult:
    """Minimise reconstruction SSE + beta * KL over prepared ``inputs`` with Adam."""
    inputs = np.asarray(inputs, dtype=np.float32)
    if len(inputs) == 0:
        raise ValueError("empty clip corpus: nothing to train the VAE on")
    epochs = config.epochs if epochs is None else epochs
    rng = np.random.default_rng(seed)
    model = VaeModel(config, seed=int(rng.integers(2 ** 31)), input_scale=input_scale)
    opt = Adam(model.parameters(), lr=config.lr)
    result = VaeTrainResult(model)
    for epoch in range(epochs):
        order = rng.permutation(len(inputs))
        tot = rec = kl = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            opt.zero_grad()
            loss, r, k = model.loss(Tensor(inputs[idx]), rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"VAE loss became {value} at epoch {epoch}, batch {i // config.batch_size}")
            loss.backward()
            opt.step()
            tot += value * len(idx)
            rec += float(r.data) * len(idx)
            kl += float(k.data) * len(idx)
        row = {"epoch": epoch, "loss": tot / len(inputs), "recon": rec / len(inputs), "kl": kl / len(inputs)}
        result.trace.append(row)
        if progress:
            progress(row)
    return result


# -- embedding sequences -------------------------------------------------------------------------

def combo_name(config: VaeConfig) -> str:
    return f"vae-{config.input_kind.value}-{config.latent_n}"


def embed_recording(model: VaeModel, samples: np.ndarray, source: str = "", label: str = "",
                    deployment: str = "", chunk: int = 2048) -> FeatureSequence:
    """``(2n, windows)`` embedding sequence of a prepared 48 kHz recording."""
    kind = model.config.input_kind
    windows = features.frame_windows(samples, kind.window)
    rows = [model.embed(prepare_inputs(kind, windows[i:i + chunk], model.input_scale))
            for i in range(0, len(windows), chunk)]
    data = np.concatenate(rows).T if rows else np.zeros((2 * model.config.latent_n, 0), dtype=np.float32)
    return FeatureSequence(np.ascontiguousarray(data, dtype=np.float32), combo_name(model.config), kind.window,
                           source, label, deployment)
