"""Full network assembly, configuration and checkpoint persistence.

Data flow (input [N, T, C, H, W], upscale r):

    band conv -> n_tefa feature-attention blocks -> registration block
    -> temporal mean -> conv + pixel shuffle (x r) -> fusion head -> logits

Everything before the temporal mean is equivariant to permutations of the T
axis; the mean makes the logits invariant to them. The number of frames is
free at inference time.
"""

import io
import json
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import blocks, serial
from . import tensor as ts
from .errors import (
    ConfigError,
    EmptyInputError,
    FormatError,
    ManifestError,
    ShapeError,
    TruncationError,
    VersionError,
)
from .rng import as_generator
from .tensor import Tensor, no_grad

_MAGIC = b"SPINETCK"
_FORMAT_VERSION = 1


@dataclass
class SPInetConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale configuration used throughout the tests; the
    full-scale setting (12 bands, 48 channels, 16 blocks) is available via
    :meth:`paper_scale`.
    """

    bands: int = 4
    channels: int = 16
    n_tefa: int = 4
    attention_bottleneck: int = 6
    upscale: int = 4
    tern_kernel: int = 3
    leaky_slope: float = 0.2
    use_mrf: bool = True

    def validate(self) -> "SPInetConfig":
        if self.bands < 1:
            raise ConfigError(f"bands must be >= 1, got {self.bands}")
        if self.channels < self.attention_bottleneck + 1:
            raise ConfigError(
                f"channels ({self.channels}) must exceed attention_bottleneck ({self.attention_bottleneck})"
            )
        if self.n_tefa < 1:
            raise ConfigError(f"n_tefa must be >= 1, got {self.n_tefa}")
        if self.upscale < 1:
            raise ConfigError(f"upscale must be >= 1, got {self.upscale}")
        if self.tern_kernel % 2 == 0 or self.tern_kernel < 1:
            raise ConfigError(f"tern_kernel must be odd and positive, got {self.tern_kernel}")
        if not (0.0 < self.leaky_slope < 1.0):
            raise ConfigError(f"leaky_slope must be in (0,1), got {self.leaky_slope}")
        return self

    @classmethod
    def paper_scale(cls) -> "SPInetConfig":
        return cls(bands=12, channels=48, n_tefa=16, attention_bottleneck=6)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SPInetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config keys {sorted(unknown)}")
        return cls(**d).validate()


class SPInet(blocks.Module):
    """The end-to-end super-resolved segmentation network."""

    def __init__(self, config: SPInetConfig, rng=0, dtype=np.float32):
        config.validate()
        rng = as_generator(rng)
        f = config.channels
        self.head = blocks.Conv2d(config.bands, f, 3, pad=1, rng=rng, dtype=dtype)
        self.tefa = blocks.ModuleList(
            [
                blocks.FeatureAttentionBlock(f, config.attention_bottleneck, config.leaky_slope, rng=rng, dtype=dtype)
                for _ in range(config.n_tefa)
            ]
        )
        self.register = blocks.RegistrationBlock(
            f, config.tern_kernel, config.attention_bottleneck, rng=rng, dtype=dtype
        )
        self.upsample = blocks.UpsampleHead(f, config.upscale, rng=rng, dtype=dtype)
        if config.use_mrf:
            self.fusion = blocks.MultiResolutionFusion(f, config.leaky_slope, rng=rng, dtype=dtype)
        else:
            self.fusion = blocks.PlainConvHead(f, rng=rng, dtype=dtype)
        self._config = config
        self._assign_parameter_names()

    @property
    def config(self) -> SPInetConfig:
        return self._config

    def _assign_parameter_names(self):
        names = []
        for name, p in self.named_parameters():
            p.name = name
            names.append(name)
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in model")

    def forward(self, x: Tensor) -> Tensor:
        cfg = self._config
        if x.ndim != 5:
            raise ShapeError(f"expected input [N,T,C,H,W], got {x.shape}")
        if x.shape[1] < 1:
            raise EmptyInputError("forward with zero frames")
        if x.shape[2] != cfg.bands:
            raise ShapeError(f"model expects {cfg.bands} bands, got {x.shape[2]}")
        h = self.head(blocks._merge_time(x))
        h = blocks._split_time(h, x.shape[0], x.shape[1])
        for block in self.tefa:
            h = block(h)
        h = self.register(h)
        pooled = blocks.temporal_mean(h)
        up = self.upsample(pooled)
        return self.fusion(up)

    def predict(self, x: Tensor, threshold: float = 0.5) -> Tensor:
        """Binary segmentation map at the super-resolved size."""
        with no_grad():
            logits = self.forward(x)
        return threshold_logits(logits, threshold)


def threshold_logits(logits: Tensor, threshold: float = 0.5) -> Tensor:
    """sigmoid(logit) >= threshold -> 1 else 0 (ties go to the positive class)."""
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must be in (0,1), got {threshold}")
    probs = ts.sigmoid(logits)
    return Tensor((probs.data >= threshold).astype(logits.dtype))


def parameter_count(config: SPInetConfig) -> int:
    """Total trainable scalar count for the given configuration."""
    return blocks.count_parameters(SPInet(config, rng=0))


# -- checkpoint format -------------------------------------------------------------


def _checkpoint_entries(model: SPInet):
    """(name, array) pairs in manifest order: parameters, then state buffers,
    then optimizer moments/step counters under reserved prefixes."""
    entries = OrderedDict()
    for name, p in model.named_parameters():
        entries[name] = p.tensor.data
    for name, buf in model.named_buffers():
        entries[f"state/{name}"] = buf
    for name, p in model.named_parameters():
        entries[f"opt/m/{name}"] = p.adam_m
        entries[f"opt/v/{name}"] = p.adam_v
        entries[f"opt/t/{name}"] = np.array([p.step_count], dtype=np.float32)
    return entries


def save_checkpoint(model: SPInet, path: str) -> None:
    """Write the model (parameters, norm statistics, optimizer state) to disk.

    Layout: magic, u32 version, u32 config length + canonical JSON config,
    u32 entry count, manifest entries (u16 name length, name, u8 rank,
    u32 dims..., u64 byte offset), then the contiguous float32 LE payload.
    """
    entries = _checkpoint_entries(model)
    config_blob = serial.canonical_json(model.config.to_dict()).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    serial.write_u32(buf, _FORMAT_VERSION)
    serial.write_u32(buf, len(config_blob))
    buf.write(config_blob)
    serial.write_u32(buf, len(entries))
    offset = 0
    payloads = []
    for name, arr in entries.items():
        nb = name.encode("utf-8")
        serial.write_u16(buf, len(nb))
        buf.write(nb)
        buf.write(bytes([arr.ndim]))
        for d in arr.shape:
            serial.write_u32(buf, d)
        serial.write_u64(buf, offset)
        flat = np.ascontiguousarray(arr, dtype="<f4")
        payloads.append(flat.tobytes())
        offset += flat.nbytes
    for p in payloads:
        buf.write(p)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str, config: SPInetConfig | None = None):
    """Read a checkpoint; returns (entries, config) with float32 arrays.

    Validates the magic, version, manifest consistency (contiguous offsets),
    payload length, and every shape against a model built from the embedded
    config. When ``config`` is passed it must equal the embedded one.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version = serial.read_u32(fh, "format version")
        if version != _FORMAT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        clen = serial.read_u32(fh, "config length")
        cblob = serial.read_exact(fh, clen, "config blob")
        try:
            file_config = SPInetConfig.from_dict(json.loads(cblob.decode("utf-8")))
        except (ValueError, TypeError) as e:
            raise FormatError(f"unreadable checkpoint config: {e}") from None
        if config is not None and config != file_config:
            raise ConfigError(f"checkpoint config {file_config} does not match requested {config}")
        n_entries = serial.read_u32(fh, "entry count")
        manifest = []
        expected_offset = 0
        for i in range(n_entries):
            nlen = serial.read_u16(fh, f"entry {i} name length")
            name = serial.read_exact(fh, nlen, f"entry {i} name").decode("utf-8")
            rank = serial.read_exact(fh, 1, f"entry {i} rank")[0]
            shape = tuple(serial.read_u32(fh, f"entry {i} dim") for _ in range(rank))
            offset = serial.read_u64(fh, f"entry {i} offset")
            if offset != expected_offset:
                raise ManifestError(
                    f"manifest entry {name!r} offset {offset} is not contiguous (expected {expected_offset})"
                )
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            expected_offset += size * 4
            manifest.append((name, shape, size))
        payload = fh.read(expected_offset)
        if len(payload) != expected_offset:
            raise TruncationError(f"payload is {len(payload)} bytes, manifest declares {expected_offset}")
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    entries = OrderedDict()
    pos = 0
    for name, shape, size in manifest:
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(shape)
        entries[name] = arr.astype(np.float32)
        pos += size * 4
    _validate_entries(entries, file_config)
    return entries, file_config


def _validate_entries(entries, config):
    reference = SPInet(config, rng=0)
    expected = _checkpoint_entries(reference)
    for name, arr in entries.items():
        if name not in expected:
            raise ManifestError(f"unexpected checkpoint entry {name!r} for this config")
        if expected[name].shape != arr.shape:
            raise ShapeError(f"checkpoint entry {name!r} has shape {arr.shape}, config implies {expected[name].shape}")
    missing = [n for n in expected if n not in entries and not n.startswith(("opt/", "state/"))]
    if missing:
        raise ManifestError(f"checkpoint is missing parameters: {missing[:3]}...")


def restore_model(path: str, config: SPInetConfig | None = None) -> SPInet:
    """Build an SPInet and load parameters, statistics and optimizer state into it."""
    entries, file_config = load_checkpoint(path, config)
    model = SPInet(file_config, rng=0)
    params = dict(model.named_parameters())
    for name, p in params.items():
        p.tensor.data[...] = entries[name]
    for name, buf in model.named_buffers():
        key = f"state/{name}"
        if key in entries:
            buf[...] = entries[key]
    for name, p in params.items():
        if f"opt/m/{name}" in entries:
            p.adam_m[...] = entries[f"opt/m/{name}"]
            p.adam_v[...] = entries[f"opt/v/{name}"]
            p.step_count = int(entries[f"opt/t/{name}"][0])
    return model
