"""U-Net encoder-decoder assembled from the autodiff primitives.

Topology for ``depth`` pooling levels and ``base`` filters::

    encoder l = 0..depth-1 : [conv k -> BN -> swish] x 2 (base * 2**l), dropout, maxpool
    bottleneck             : [conv k -> BN -> swish] x 2 (base * 2**depth), dropout
    decoder l = depth-1..0 : up 2x2/2 -> concat(skip l) -> [conv k -> BN -> swish] x 2
    head                   : conv 1x1 -> n_classes, softmax over channels
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    he_init,
    maxpool2,
    softmax_channels,
    spatial_dropout2d,
    swish,
    transposed_conv2d,
)
from .errors import ConfigError, CorruptionError, FormatError, ShapeError

WEIGHTS_MAGIC = b"UNW1"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 5
    n_classes: int = 5
    base_filters: int = 16
    filter_size: int = 3
    depth: int = 4
    dropout_rate: float = 0.0

    def validate(self) -> None:
        if self.in_channels < 1 or self.n_classes < 1:
            raise ConfigError("in_channels and n_classes must be positive")
        if self.base_filters < 1:
            raise ConfigError(f"base_filters must be positive, got {self.base_filters}")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ConfigError(f"filter_size must be odd, got {self.filter_size}")
        if self.depth < 0:
            raise ConfigError(f"depth must be non-negative, got {self.depth}")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ConfigError(f"dropout_rate must lie in [0, 0.5], got {self.dropout_rate}")

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def level_channels(config: UNetConfig, level: int) -> int:
    return config.base_filters * 2**level


def parameter_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor's shape, in construction order."""
    k = config.filter_size
    shapes: dict[str, tuple[int, ...]] = {}

    def double_conv(prefix: str, cin: int, cout: int) -> None:
        for i, c_in in ((1, cin), (2, cout)):
            shapes[f"{prefix}.conv{i}.weight"] = (cout, c_in, k, k)
            shapes[f"{prefix}.conv{i}.bias"] = (cout,)
            shapes[f"{prefix}.bn{i}.scale"] = (cout,)
            shapes[f"{prefix}.bn{i}.shift"] = (cout,)

    cin = config.in_channels
    for level in range(config.depth):
        cout = level_channels(config, level)
        double_conv(f"enc{level}", cin, cout)
        cin = cout
    double_conv("mid", cin, level_channels(config, config.depth))
    for level in reversed(range(config.depth)):
        c_up_in = level_channels(config, level + 1)
        c = level_channels(config, level)
        shapes[f"dec{level}.up.weight"] = (c_up_in, c, 2, 2)
        shapes[f"dec{level}.up.bias"] = (c,)
        double_conv(f"dec{level}", 2 * c, c)
    shapes["head.weight"] = (config.n_classes, config.base_filters, 1, 1)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


class UNetModel:
    def __init__(self, config: UNetConfig, params: dict[str, Parameter], bn: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn = bn

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def copy(self) -> "UNetModel":
        params = {k: Parameter(p.data.copy(), k) for k, p in self.params.items()}
        return UNetModel(self.config, params, copy.deepcopy(self.bn))

    def __call__(self, batch, mode: str = "infer", rng=None) -> Tensor:
        return forward(self, batch, mode, rng)


def build_model(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """He-initialise conv weights from ``seed``; biases and BN shifts start at 0."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    bn: dict[str, BatchNormState] = {}
    for name, shape in parameter_shapes(config).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            if ".up." in name:
                # each transposed-conv output pixel sums over cin inputs
                fan_in = shape[0]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            data = he_init(shape, fan_in, rng, dtype)
        elif kind == "scale":
            data = np.ones(shape, dtype=dtype)
            bn[name.rsplit(".", 1)[0]] = BatchNormState(shape[0])
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Parameter(data, name)
    return UNetModel(config, params, bn)


def forward(model: UNetModel, batch, mode: str = "infer", rng: np.random.Generator | None = None) -> Tensor:
    """Per-pixel class probabilities, shape (n, n_classes, S, S)."""
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (n, {cfg.in_channels}, S, S) input, got {x.shape}")
    side = 2**cfg.depth
    if x.shape[2] % side or x.shape[3] % side:
        raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by 2**depth = {side}")
    p = model.params
    rate = cfg.dropout_rate

    def block(prefix: str, t: Tensor) -> Tensor:
        for i in (1, 2):
            t = conv2d(t, p[f"{prefix}.conv{i}.weight"], p[f"{prefix}.conv{i}.bias"])
            t = batchnorm2d(t, p[f"{prefix}.bn{i}.scale"], p[f"{prefix}.bn{i}.shift"], model.bn[f"{prefix}.bn{i}"], mode)
            t = swish(t)
        return t

    skips = []
    for level in range(cfg.depth):
        x = block(f"enc{level}", x)
        x = spatial_dropout2d(x, rate, mode, rng)
        skips.append(x)
        x = maxpool2(x)
    x = block("mid", x)
    x = spatial_dropout2d(x, rate, mode, rng)
    for level in reversed(range(cfg.depth)):
        x = transposed_conv2d(x, p[f"dec{level}.up.weight"], p[f"dec{level}.up.bias"])
        x = concat_channels(x, skips[level])
        x = block(f"dec{level}", x)
    x = conv2d(x, p["head.weight"], p["head.bias"])
    return softmax_channels(x)


def predict_proba(model: UNetModel, batch: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference-mode probabilities for an (n, c, S, S) array, in chunks."""
    out = [
        forward(model, batch[i : i + batch_size], "infer").data
        for i in range(0, len(batch), batch_size)
    ]
    return np.concatenate(out, axis=0)


def _state_tensors(model: UNetModel) -> list[tuple[str, np.ndarray]]:
    tensors = [(name, p.data) for name, p in model.params.items()]
    for name, state in model.bn.items():
        if state.initialized:
            tensors.append((f"{name}.running_mean", state.running_mean))
            tensors.append((f"{name}.running_var", state.running_var))
    return tensors


def save_weights(model: UNetModel, path) -> None:
    """Write the UNW1 container: magic, u32 manifest length, JSON manifest, f32 payload."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in _state_tensors(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": asdict(model.config), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def load_weights(path, expected_config: UNetConfig | None = None) -> UNetModel:
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a UNW1 weights file")
    if len(blob) < 8:
        raise CorruptionError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<I", blob[4:8])
    try:
        manifest = json.loads(blob[8 : 8 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable manifest ({exc})") from None
    config = UNetConfig.from_dict(manifest["config"])
    if expected_config is not None and config != expected_config:
        raise CorruptionError(f"{path}: manifest config {config} differs from expected {expected_config}")
    model = build_model(config, seed=0)
    shapes = parameter_shapes(config)
    payload = blob[8 + mlen :]
    missing = set(shapes) - {e["name"] for e in manifest["tensors"]}
    if missing:
        raise CorruptionError(f"{path}: manifest lacks tensors {sorted(missing)}")
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise CorruptionError(f"{path}: payload truncated inside tensor {name!r}")
        if zlib.crc32(raw) != entry["crc32"]:
            raise CorruptionError(f"{path}: checksum mismatch for tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if name in shapes:
            if shape != shapes[name]:
                raise CorruptionError(f"{path}: tensor {name!r} has shape {shape}, config implies {shapes[name]}")
            model.params[name].data = arr
            continue
        layer, stat = name.rsplit(".", 1)
        if layer not in model.bn or stat not in ("running_mean", "running_var"):
            raise CorruptionError(f"{path}: unknown tensor {name!r}")
        setattr(model.bn[layer], stat, arr)
    return model
