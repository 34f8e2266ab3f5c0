"""Toy denoising network: conv extractor -> key-graph stages -> conv reconstructor.

The reconstructor output is added to the input image (global residual).
Every branch that feeds a residual sum starts at zero, so a freshly
initialized network is exactly the identity map.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kgt.attention import GATHER, AttentionParams, Backend
from kgt.errors import (
    BadMagicError,
    CheckpointError,
    ConfigurationError,
    InputError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from kgt.kgtblock import KGTLayerParams, KGTStageParams, kgt_stage_forward
from kgt.numerics import Parameter, Tensor, add, conv2d_3x3

MAGIC = b"KGT1"
VERSION = 1
INIT_STD = 0.02


@dataclass
class KGTNetConfig:
    channels: int = 32
    n_stages: int = 2
    n_layers: int = 2
    heads: int = 2
    window: int = 8
    ffn_ratio: int = 2
    k_schedule: str = "random:4,8,16,32"
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.channels < 1:
            out.append(f"channels must be >= 1 (got {self.channels})")
        if self.heads < 1:
            out.append(f"heads must be >= 1 (got {self.heads})")
        elif self.channels % self.heads:
            out.append(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.window < 2:
            out.append(f"window must be >= 2 (got {self.window})")
        if self.n_stages < 1:
            out.append(f"n_stages must be >= 1 (got {self.n_stages})")
        if self.n_layers < 1:
            out.append(f"n_layers must be >= 1 (got {self.n_layers})")
        if self.ffn_ratio < 1:
            out.append(f"ffn_ratio must be >= 1 (got {self.ffn_ratio})")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigurationError("invalid network config: " + "; ".join(problems))

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> KGTNetConfig:
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise CheckpointError(f"unknown config key {key!r} in checkpoint")
            values[key] = val if types[key] == "str" else int(val)
        return cls(**values)


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


class KGTNet:
    def __init__(self, cfg: KGTNetConfig, params: OrderedDict[str, Parameter]):
        self.cfg = cfg
        self.params = params

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    @property
    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def stage_params(self, i: int) -> KGTStageParams:
        c, P = self.cfg, self.params
        layers = []
        for j in range(c.n_layers):
            pre = f"stages.{i}.layers.{j}."
            attn = AttentionParams(P[pre + "attn.w_qry"], P[pre + "attn.w_key"],
                                   P[pre + "attn.w_val"], P[pre + "attn.w_out"], c.heads)
            layers.append(KGTLayerParams(attn, P[pre + "ffn.w1"], P[pre + "ffn.w2"],
                                         P[pre + "norm1.gamma"], P[pre + "norm1.beta"],
                                         P[pre + "norm2.gamma"], P[pre + "norm2.beta"]))
        return KGTStageParams(layers, P[f"stages.{i}.tail.w"], P[f"stages.{i}.tail.b"])

    def __call__(self, image, k: int, backend=GATHER) -> Tensor:
        return forward(self, image, k, backend)


def param_shapes(cfg: KGTNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter name and shape, in checkpoint order."""
    c, hidden = cfg.channels, cfg.channels * cfg.ffn_ratio
    shapes = [("extract.w", (c, 1, 3, 3)), ("extract.b", (c,))]
    for i in range(cfg.n_stages):
        for j in range(cfg.n_layers):
            pre = f"stages.{i}.layers.{j}."
            shapes += [(pre + "norm1.gamma", (c,)), (pre + "norm1.beta", (c,))]
            shapes += [(pre + f"attn.{n}", (c, c)) for n in ("w_qry", "w_key", "w_val", "w_out")]
            shapes += [(pre + "norm2.gamma", (c,)), (pre + "norm2.beta", (c,)),
                       (pre + "ffn.w1", (c, hidden)), (pre + "ffn.w2", (hidden, c))]
        shapes += [(f"stages.{i}.tail.w", (c, c, 3, 3)), (f"stages.{i}.tail.b", (c,))]
    shapes += [("reconstruct.w", (1, c, 3, 3)), ("reconstruct.b", (1,))]
    return shapes


# branches that must start at zero so the network is the identity at init
_ZERO_INIT = ("attn.w_out", "tail.w", "reconstruct.w")


def init(cfg: KGTNetConfig, seed: int | None = None) -> KGTNet:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: OrderedDict[str, Parameter] = OrderedDict()
    for name, shape in param_shapes(cfg):
        if name.endswith("gamma"):
            value = np.ones(shape, np.float32)
        elif name.endswith((".b", "beta")) or name.endswith(_ZERO_INIT):
            value = np.zeros(shape, np.float32)
        else:
            value = _trunc_normal(rng, shape)
        params[name] = Parameter(value, name=name)
    return KGTNet(cfg, params)


def forward(net: KGTNet, image, k: int, backend: Backend | str = GATHER) -> Tensor:
    """Denoise ``1 x H x W`` (or ``N x 1 x H x W``) image(s); output is not clamped."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim not in (3, 4) or x.shape[-3] != 1:
        raise InputError(f"expected 1 x H x W or N x 1 x H x W image, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise InputError("input image contains non-finite values")
    P = net.params
    feat = conv2d_3x3(x, P["extract.w"], P["extract.b"])
    for i in range(net.cfg.n_stages):
        feat = kgt_stage_forward(feat, net.stage_params(i), k, net.cfg.window, backend)
    return add(x, conv2d_3x3(feat, P["reconstruct.w"], P["reconstruct.b"]))


def save(net: KGTNet, path):
    Path(path).write_bytes(to_bytes(net))


def to_bytes(net: KGTNet) -> bytes:
    buf = io.BytesIO()
    cfg_blob = net.cfg.to_text().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<I", len(net.params)))
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", 0, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedCheckpointError(
                f"checkpoint truncated reading {what} at byte {self.pos} "
                f"(need {n}, have {len(self.blob) - self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load(path) -> KGTNet:
    return from_bytes(Path(path).read_bytes())


def from_bytes(blob: bytes) -> KGTNet:
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        cfg = KGTNetConfig.from_text(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"unreadable config blob: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    params: OrderedDict[str, Parameter] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        dtype_code, rank = r.unpack("<BB", f"{name} header")
        if dtype_code != 0:
            raise CheckpointError(f"tensor {name}: unsupported dtype code {dtype_code}")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").reshape(dims)
        params[name] = Parameter(data.astype(np.float32), name=name)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after tensor table")
    expected = param_shapes(cfg)
    got = [(n, p.shape) for n, p in params.items()]
    if got != expected:
        raise CheckpointError("tensor table does not match the stored config")
    return KGTNet(cfg, params)
