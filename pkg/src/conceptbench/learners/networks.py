"""Small convolutional / dense networks and a seeded minibatch trainer."""

from __future__ import annotations

import io
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

NETWORK_KINDS = ("conv_encoder", "deconv_decoder", "mlp", "classifier_head")
ACTIVATIONS = {"relu": nn.ReLU, "elu": nn.ELU, "tanh": nn.Tanh, "leaky_relu": nn.LeakyReLU}
OPTIMIZERS = ("sgd", "adaptive_moment")
CHECKPOINT_MAGIC = b"CBCKPT"
CHECKPOINT_VERSION = 1

DEFAULT_CHANNELS = (32, 32, 64, 64)
DEFAULT_HIDDEN = 256


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class NetworkSpec:
    """Architecture description.

    ``input_shape`` is ``(C, H, W)`` for ``conv_encoder`` and
    ``(features,)`` otherwise; ``output_shape`` is ``(C, H, W)`` for
    ``deconv_decoder`` and ``(features,)`` otherwise.  ``widths`` are the
    convolution channels for the conv kinds and hidden layer widths for the
    dense kinds.  An encoder with no channels is a plain MLP on flattened
    pixels.
    """

    kind: str
    input_shape: tuple
    output_shape: tuple
    widths: tuple = DEFAULT_CHANNELS
    hidden: int = DEFAULT_HIDDEN
    activation: str = "relu"

    def __post_init__(self):
        self.input_shape = tuple(int(x) for x in self.input_shape)
        self.output_shape = tuple(int(x) for x in self.output_shape)
        self.widths = tuple(int(x) for x in self.widths)
        self.validate()

    def validate(self) -> None:
        if self.kind not in NETWORK_KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if any(w <= 0 for w in self.widths) or self.hidden <= 0:
            raise ValueError("layer widths must be positive")
        if self.kind in ("conv_encoder", "deconv_decoder"):
            img = self.input_shape if self.kind == "conv_encoder" else self.output_shape
            if len(img) != 3:
                raise ValueError(f"{self.kind} needs a (C, H, W) image shape, got {img}")
            factor = 2 ** len(self.widths)
            if img[1] % factor or img[2] % factor:
                raise ValueError(f"image size {img[1:]} not divisible by {factor} "
                                 f"({len(self.widths)} stride-2 layers)")
        if self.kind != "conv_encoder" and len(self.input_shape) != 1:
            raise ValueError(f"{self.kind} takes a flat input, got {self.input_shape}")
        if self.kind != "deconv_decoder" and len(self.output_shape) != 1:
            raise ValueError(f"{self.kind} produces a flat output, got {self.output_shape}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def build_network(spec: NetworkSpec) -> nn.Sequential:
    """Instantiate ``spec`` as a named ``nn.Sequential`` (layer names are tap points)."""
    act = ACTIVATIONS[spec.activation]
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    if spec.kind == "conv_encoder":
        c, h, w = spec.input_shape
        for i, ch in enumerate(spec.widths, 1):
            layers[f"conv{i}"] = nn.Sequential(nn.Conv2d(c, ch, 4, 2, 1), act())
            c, h, w = ch, h // 2, w // 2
        layers["flatten"] = nn.Flatten()
        layers["dense"] = nn.Sequential(nn.Linear(c * h * w, spec.hidden), act())
        layers["out"] = nn.Linear(spec.hidden, spec.output_shape[0])
    elif spec.kind == "deconv_decoder":
        c_out, h_out, w_out = spec.output_shape
        chans = tuple(reversed(spec.widths))
        s = 2 ** len(chans)
        h, w = h_out // s, w_out // s
        if chans:
            layers["dense"] = nn.Sequential(nn.Linear(spec.input_shape[0], spec.hidden), act())
            layers["project"] = nn.Sequential(nn.Linear(spec.hidden, chans[0] * h * w), act())
            layers["unflatten"] = nn.Unflatten(1, (chans[0], h, w))
            for i, (a, b) in enumerate(zip(chans, chans[1:]), 1):
                layers[f"deconv{i}"] = nn.Sequential(nn.ConvTranspose2d(a, b, 4, 2, 1), act())
            layers["out"] = nn.ConvTranspose2d(chans[-1], c_out, 4, 2, 1)
        else:
            layers["dense"] = nn.Sequential(nn.Linear(spec.input_shape[0], spec.hidden), act())
            layers["out"] = nn.Linear(spec.hidden, c_out * h_out * w_out)
            layers["unflatten"] = nn.Unflatten(1, (c_out, h_out, w_out))
    else:
        sizes = [spec.input_shape[0], *spec.widths, spec.output_shape[0]]
        for i, (a, b) in enumerate(zip(sizes[:-2], sizes[1:-1]), 1):
            layers[f"dense{i}"] = nn.Sequential(nn.Linear(a, b), act())
        layers["out"] = nn.Linear(sizes[-2], sizes[-1])
    return nn.Sequential(layers)


def init_network(spec: NetworkSpec, seed: int) -> nn.Sequential:
    """Build ``spec`` with parameters fixed by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = build_network(spec)
    return net


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def layer_names(net: nn.Sequential) -> list[str]:
    return [name for name, _ in net.named_children()]


def forward_until(net: nn.Sequential, x: torch.Tensor, layer: str) -> torch.Tensor:
    """Activations after the named child layer."""
    if layer not in layer_names(net):
        raise KeyError(f"no layer {layer!r}; available: {layer_names(net)}")
    for name, module in net.named_children():
        x = module(x)
        if name == layer:
            return x
    raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``steps`` fixes the number of gradient steps; when unset, training runs
    ``epochs`` passes over the data.  ``eval_every`` (steps) drives the
    evaluation callback.
    """

    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    steps: Optional[int] = None
    optimizer: str = "adaptive_moment"
    seed: int = 0
    eval_every: Optional[int] = None
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer == "adam":
            self.optimizer = "adaptive_moment"
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr < 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("lr must be >= 0 and batch_size, epochs positive")
        if self.steps is not None and self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.eval_every is not None and self.eval_every <= 0:
            raise ValueError("eval_every must be positive")

    def total_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * max(1, math.ceil(n_samples / self.batch_size))

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = list(params)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


class BatchSampler:
    """Epoch-wise shuffled minibatch indices from a seeded generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def run_steps(params, n_samples: int, batch_loss: Callable[[np.ndarray, int], torch.Tensor],
              cfg: TrainConfig, callback: Optional[Callable[[int], None]] = None,
              n_steps: Optional[int] = None) -> list[float]:
    """Minimise ``batch_loss(batch_indices, step)`` and return per-step losses.

    ``callback(step)`` fires every ``cfg.eval_every`` steps and after the last.
    """
    opt = make_optimizer(params, cfg)
    sampler = BatchSampler(n_samples, cfg.batch_size, np.random.default_rng(cfg.seed))
    total = n_steps if n_steps is not None else cfg.total_steps(n_samples)
    losses = []
    for step in range(1, total + 1):
        loss = batch_loss(sampler.next(), step)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(value)
        if callback is not None and ((cfg.eval_every and step % cfg.eval_every == 0) or step == total):
            callback(step)
    return losses


LOSSES = ("sparse_categorical_ce", "mse")


def to_tensor(X: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Images ``(N, H, W, C)`` become ``(N, C, H, W)``; other arrays pass through."""
    t = torch.as_tensor(np.ascontiguousarray(X), dtype=dtype)
    if t.ndim == 4:
        t = t.permute(0, 3, 1, 2)
    return t


def train_supervised(net: nn.Module, X: np.ndarray, y: np.ndarray, loss: str = "sparse_categorical_ce",
                     cfg: Optional[TrainConfig] = None, callback: Optional[Callable[[int], None]] = None):
    """Fit ``net`` to ``(X, y)``; returns ``(net, per-step losses)``."""
    cfg = cfg or TrainConfig()
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    X = np.asarray(X, dtype=np.float32)
    if loss == "sparse_categorical_ce":
        y_t = torch.as_tensor(np.asarray(y), dtype=torch.long)
        out_dim = net(to_tensor(X[:1])).shape[-1]
        if y_t.min() < 0 or y_t.max() >= out_dim:
            raise ValueError(f"labels must lie in [0, {out_dim})")
        fn = nn.functional.cross_entropy
    else:
        y_t = torch.as_tensor(np.asarray(y), dtype=torch.float32)
        fn = nn.functional.mse_loss

    def batch_loss(idx, step):
        return fn(net(to_tensor(X[idx])), y_t[idx])

    net.train()
    losses = run_steps(net.parameters(), len(X), batch_loss, cfg, callback)
    net.eval()
    return net, losses


@torch.no_grad()
def predict_batched(fn: Callable[[torch.Tensor], torch.Tensor], X: np.ndarray, batch_size: int = 512) -> np.ndarray:
    outs = [fn(to_tensor(X[i:i + batch_size])).numpy() for i in range(0, len(X), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,))


# --------------------------------------------------------------------------
# checkpoints


def state_to_bytes(state: dict) -> bytes:
    buf = io.BytesIO()
    torch.save(state, buf)
    header = CHECKPOINT_MAGIC + CHECKPOINT_VERSION.to_bytes(2, "little")
    return header + buf.getvalue()


def state_from_bytes(blob: bytes) -> dict:
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC:
        raise ValueError("not a conceptbench checkpoint")
    version = int.from_bytes(blob[n:n + 2], "little")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return torch.load(io.BytesIO(blob[n + 2:]), weights_only=True)


def save_checkpoint(net: nn.Module, spec: NetworkSpec, path) -> Path:
    """Write ``weights.bin`` and ``spec.json`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "weights.bin").write_bytes(state_to_bytes(net.state_dict()))
    (path / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[nn.Sequential, NetworkSpec]:
    path = Path(path)
    spec = NetworkSpec.from_dict(json.loads((path / "spec.json").read_text(encoding="utf-8")))
    net = build_network(spec)
    net.load_state_dict(state_from_bytes((path / "weights.bin").read_bytes()))
    net.eval()
    return net, spec


def configure_threads() -> None:
    """Honour ``CONCEPTBENCH_THREADS`` for intra-op parallelism."""
    n = os.environ.get("CONCEPTBENCH_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))
