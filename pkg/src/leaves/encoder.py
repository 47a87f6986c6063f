"""Small 1-D residual conv encoder, projection head, linear probe, and checkpoint I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    channels_in: int = 1
    widths: tuple[int, ...] = (16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2)
    stem_kernel: int = 7
    kernel: int = 3
    embed_dim: int = 64
    projection_dim: int = 32
    num_classes: int = 3

    def __post_init__(self):
        dims = (self.channels_in, self.stem_kernel, self.kernel, self.embed_dim, self.projection_dim, self.num_classes)
        if min(dims) < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError("all encoder dimensions must be >= 1")
        if len(self.strides) != len(self.widths):
            raise ValueError("one stride per residual block")
        if self.projection_dim > self.embed_dim:
            raise ValueError("projection dim must not exceed embedding dim")
        if self.embed_dim != self.widths[-1]:
            raise ValueError("embed_dim is the pooled width of the last block")

    @property
    def min_length(self) -> int:
        return self.stem_kernel


class InputTooShortError(ValueError):
    pass


class Encoder:
    """Parameters live in ``params`` (learnable) and ``buffers`` (running BN stats)."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        c = config

        self._conv("stem", c.channels_in, c.widths[0], c.stem_kernel, rng)
        prev = c.widths[0]
        for i, (w, s) in enumerate(zip(c.widths, c.strides)):
            self._conv(f"block{i}.conv1", prev, w, c.kernel, rng)
            self._conv(f"block{i}.conv2", w, w, c.kernel, rng)
            if prev != w or s != 1:
                self._conv(f"block{i}.short", prev, w, 1, rng)
            prev = w
        d, p = c.embed_dim, c.projection_dim
        self._dense("proj1", d, d, rng)
        self._dense("proj2", d, p, rng)
        self.params["probe.w"] = Tensor(np.zeros((d, c.num_classes)), requires_grad=True)
        self.params["probe.b"] = Tensor(np.zeros(c.num_classes), requires_grad=True)

    def _conv(self, name, c_in, c_out, k, rng):
        bound = 1.0 / np.sqrt(c_in * k)
        self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k)), requires_grad=True)
        self.params[f"{name}.bn.gamma"] = Tensor(np.ones(c_out), requires_grad=True)
        self.params[f"{name}.bn.beta"] = Tensor(np.zeros(c_out), requires_grad=True)
        self.buffers[f"{name}.bn.mean"] = np.zeros(c_out)
        self.buffers[f"{name}.bn.var"] = np.ones(c_out)

    def _dense(self, name, d_in, d_out, rng):
        bound = 1.0 / np.sqrt(d_in)
        self.params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(d_out), requires_grad=True)

    # parameter groups
    def encoder_tensors(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if not k.startswith(("proj", "probe"))]

    def projection_tensors(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("proj")]

    def probe_tensors(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("probe")]

    def count(self, group: str = "all") -> int:
        pick = {
            "all": list(self.params.values()),
            "encoder": self.encoder_tensors(),
            "projection": self.projection_tensors(),
            "probe": self.probe_tensors(),
        }[group]
        return sum(t.data.size for t in pick)

    def state(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=np.float64)

    def check_finite(self):
        for k, t in self.params.items():
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"non-finite values in encoder parameter {k}")

    # layers
    def _batchnorm(self, name: str, x: Tensor, train: bool) -> Tensor:
        gamma = ad.reshape(self.params[f"{name}.bn.gamma"], (1, -1, 1))
        beta = ad.reshape(self.params[f"{name}.bn.beta"], (1, -1, 1))
        if train:
            mean = x.mean(axis=(0, 2), keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=(0, 2), keepdims=True)
            count = x.shape[0] * x.shape[2]
            m = self.buffers[f"{name}.bn.mean"]
            v = self.buffers[f"{name}.bn.var"]
            unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
            self.buffers[f"{name}.bn.mean"] = (1 - BN_MOMENTUM) * m + BN_MOMENTUM * mean.data.reshape(-1)
            self.buffers[f"{name}.bn.var"] = (1 - BN_MOMENTUM) * v + BN_MOMENTUM * unbiased
        else:
            centered = x - Tensor(self.buffers[f"{name}.bn.mean"].reshape(1, -1, 1))
            var = Tensor(self.buffers[f"{name}.bn.var"].reshape(1, -1, 1))
        return centered / ad.sqrt(var + BN_EPS) * gamma + beta

    def _conv_bn(self, name: str, x: Tensor, stride: int, train: bool) -> Tensor:
        w = self.params[f"{name}.w"]
        k = w.shape[-1]
        return self._batchnorm(name, ad.conv1d(x, w, stride=stride, padding=k // 2), train)

    def forward(self, x, train: bool = True) -> Tensor:
        """(N, C, L) -> (N, D) pooled embedding."""
        x = ad.as_tensor(x)
        c = self.config
        if x.ndim != 3 or x.shape[1] != c.channels_in:
            raise ValueError(f"expected (N, {c.channels_in}, L) input, got {x.shape}")
        if x.shape[2] < c.min_length:
            raise InputTooShortError(f"input length {x.shape[2]} below minimum {c.min_length}")
        h = ad.relu(self._conv_bn("stem", x, 1, train))
        for i, s in enumerate(c.strides):
            h = self.block(i, h, train)
        return h.mean(axis=2)

    def block(self, i: int, h: Tensor, train: bool = True) -> Tensor:
        s = self.config.strides[i]
        branch = ad.relu(self._conv_bn(f"block{i}.conv1", h, s, train))
        branch = self._conv_bn(f"block{i}.conv2", branch, 1, train)
        short = self._conv_bn(f"block{i}.short", h, s, train) if f"block{i}.short.w" in self.params else h
        return ad.relu(branch + short)

    def project(self, z) -> Tensor:
        p = self.params
        h = ad.relu(ad.matmul(z, p["proj1.w"]) + p["proj1.b"])
        return ad.matmul(h, p["proj2.w"]) + p["proj2.b"]

    def probe(self, z) -> Tensor:
        return ad.matmul(z, self.params["probe.w"]) + self.params["probe.b"]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    picked = ad.take_lastaxis(logits, labels[:, None])
    return (ad.logsumexp(logits, axis=1) - ad.reshape(picked, (labels.size,))).mean()


# ------------------------------------------------------------- checkpoints

MAGIC = b"LEAV"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    """Binary ``LEAV`` header + little-endian float64 payload, and a text manifest sidecar."""
    flat = [np.asarray(a, dtype="<f8").reshape(-1) for a in arrays.values()]
    total = sum(a.size for a in flat)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, total))
        for a in flat:
            fh.write(a.tobytes())
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines += [f"{name} {'x'.join(str(d) for d in np.shape(a)) or 'scalar'}" for name, a in arrays.items()]
    manifest_path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, total = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    payload = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if payload.size != total:
        raise CheckpointError(f"{path}: header declares {total} values, found {payload.size}")

    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for line in manifest_path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
            continue
        if not line.strip():
            continue
        name, dims = line.split()
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = payload[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != total:
        raise CheckpointError(f"{path}: manifest covers {offset} of {total} values")
    return arrays, meta
