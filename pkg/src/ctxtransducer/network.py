"""Dual-mode transducer network.

One :class:`~ctxtransducer.autodiff.ParameterStore` backs both encoder modes.
Streaming mode masks attention to ``j <= i`` and drops the look-ahead taps of
the optional depthwise convolution; non-streaming mode sees the whole input.  Nothing else
differs between the modes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

CHECKPOINT_SCHEMA = 1


class Mode(str, Enum):
    STREAMING = "streaming"
    NONSTREAMING = "nonstreaming"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_blocks: int = 2
    model_dim: int = 32
    num_heads: int = 4
    feedforward_dim: int = 64
    use_depthwise_conv: bool = False
    conv_kernel: int = 3
    downsample_factor: int = 1

    def validate(self) -> None:
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.downsample_factor < 1:
            raise ConfigError("downsample_factor must be >= 1")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")


@dataclass
class ModelConfig:
    """Network sizes.  ``vocab_size`` counts real tokens; outputs add blank at 0."""

    feature_dim: int = 16
    vocab_size: int = 12
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 16
    pred_dim: int = 32
    joint_dim: int = 32
    init_scale: float = 1.0

    @property
    def num_outputs(self) -> int:
        return self.vocab_size + 1

    def validate(self) -> None:
        self.encoder.validate()
        for name in ("feature_dim", "vocab_size", "embed_dim", "pred_dim", "joint_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        data = dict(data)
        enc = EncoderConfig(**data.pop("encoder", {}))
        return cls(encoder=enc, **data)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    enc = config.encoder
    M, F, d = enc.model_dim, enc.feedforward_dim, enc.downsample_factor
    H, E, J, V = config.pred_dim, config.embed_dim, config.joint_dim, config.num_outputs
    shapes: dict[str, tuple[int, ...]] = {
        "enc.in.w": (d * config.feature_dim, M),
        "enc.in.b": (M,),
    }
    for i in range(enc.num_blocks):
        p = f"enc.{i}."
        shapes.update({
            p + "ln_att.g": (M,), p + "ln_att.b": (M,),
            p + "att.wq": (M, M), p + "att.wk": (M, M), p + "att.wv": (M, M),
            p + "att.wo": (M, M), p + "att.bo": (M,),
        })
        if enc.use_depthwise_conv:
            shapes.update({
                p + "ln_conv.g": (M,), p + "ln_conv.b": (M,),
                p + "conv.w": (enc.conv_kernel, M), p + "conv.b": (M,),
            })
        shapes.update({
            p + "ln_ff.g": (M,), p + "ln_ff.b": (M,),
            p + "ff.w1": (M, F), p + "ff.b1": (F,),
            p + "ff.w2": (F, M), p + "ff.b2": (M,),
        })
    shapes.update({
        "enc.ln_out.g": (M,), "enc.ln_out.b": (M,),
        "pred.embed": (V, E),
        "pred.start_h": (H,), "pred.start_c": (H,),
        "pred.w_x": (E, 4 * H), "pred.w_h": (H, 4 * H), "pred.b": (4 * H,),
        "joint.w_enc": (M, J), "joint.w_pred": (H, J), "joint.b": (J,),
        "joint.w_out": (J, V), "joint.b_out": (V,),
    })
    return shapes


def init_parameters(config: ModelConfig, seed: int) -> ParameterStore:
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        elif name == "pred.embed":
            value = rng.normal(0.0, 1.0, shape)
        else:
            fan_in = shape[0]
            value = rng.normal(0.0, config.init_scale / math.sqrt(fan_in), shape)
        store.create(name, value)
    return store


def stack_frames(features: np.ndarray, factor: int) -> np.ndarray:
    """Stack ``factor`` consecutive frames; the tail is zero-padded."""
    T, D = features.shape
    if factor == 1:
        return features
    n = -(-T // factor)
    padded = np.zeros((n * factor, D))
    padded[:T] = features
    return padded.reshape(n, factor * D)


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table


class Transducer:
    """Encoder, prediction network and joint network over one parameter store."""

    def __init__(self, config: ModelConfig, store: ParameterStore):
        config.validate()
        expected = parameter_shapes(config)
        for name, shape in expected.items():
            if name not in store:
                raise ConfigError(f"parameter store lacks {name!r}")
            if store[name].shape != shape:
                raise ConfigError(f"parameter {name!r} has shape {store[name].shape}, expected {shape}")
        self.config = config
        self.store = store

    @classmethod
    def initialise(cls, config: ModelConfig, seed: int) -> "Transducer":
        return cls(config, init_parameters(config, seed))

    def constants(self) -> dict[str, Tensor]:
        return self.store.constants()

    def _params(self, params):
        return self.constants() if params is None else params

    # -- encoder ---------------------------------------------------------

    def encode(self, features: np.ndarray, mode: Mode | str, params: Mapping[str, Tensor] | None = None) -> Tensor:
        p = self._params(params)
        mode = Mode(mode)
        enc = self.config.encoder
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ad.ShapeError(f"features must be (T, {self.config.feature_dim}), got {features.shape}")
        if features.shape[0] < 1:
            raise ad.ShapeError("cannot encode an empty feature sequence")
        x = stack_frames(features, enc.downsample_factor)
        n = x.shape[0]
        h = ad.matmul(Tensor(x), p["enc.in.w"]) + p["enc.in.b"]
        h = h + Tensor(sinusoidal_positions(n, enc.model_dim))
        mask = np.tril(np.ones((n, n), dtype=bool)) if mode is Mode.STREAMING else None
        for i in range(enc.num_blocks):
            pre = f"enc.{i}."
            a = ad.layer_norm(h, p[pre + "ln_att.g"], p[pre + "ln_att.b"])
            h = h + self._attention(a, p, pre, mask)
            if enc.use_depthwise_conv:
                c = ad.layer_norm(h, p[pre + "ln_conv.g"], p[pre + "ln_conv.b"])
                h = h + self._depthwise_conv(c, p, pre, mode)
            f = ad.layer_norm(h, p[pre + "ln_ff.g"], p[pre + "ln_ff.b"])
            f = ad.relu(ad.matmul(f, p[pre + "ff.w1"]) + p[pre + "ff.b1"])
            h = h + (ad.matmul(f, p[pre + "ff.w2"]) + p[pre + "ff.b2"])
        return ad.layer_norm(h, p["enc.ln_out.g"], p["enc.ln_out.b"])

    def _attention(self, x: Tensor, p, pre: str, mask) -> Tensor:
        n, M = x.shape
        H = self.config.encoder.num_heads
        dh = M // H

        def heads(w):
            return ad.transpose(ad.reshape(ad.matmul(x, w), (n, H, dh)), (1, 0, 2))

        q, k, v = heads(p[pre + "att.wq"]), heads(p[pre + "att.wk"]), heads(p[pre + "att.wv"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        weights = ad.masked_softmax(scores, mask)
        out = ad.reshape(ad.transpose(ad.matmul(weights, v), (1, 0, 2)), (n, M))
        return ad.matmul(out, p[pre + "att.wo"]) + p[pre + "att.bo"]

    def _depthwise_conv(self, x: Tensor, p, pre: str, mode: Mode) -> Tensor:
        """Centred depthwise kernel; streaming drops the taps that look ahead."""
        n, M = x.shape
        K = self.config.encoder.conv_kernel
        half = (K - 1) // 2
        right = 0 if mode is Mode.STREAMING else half
        parts = [x]
        if half:
            parts.insert(0, Tensor(np.zeros((half, M))))
        if right:
            parts.append(Tensor(np.zeros((right, M))))
        padded = ad.concat(parts, axis=0) if len(parts) > 1 else x
        w = p[pre + "conv.w"]
        taps = [ad.mul(padded[j:j + n], w[j]) for j in range(half + 1 + right)]
        return ad.relu(ad.add_n(taps) + p[pre + "conv.b"])

    def encoded_length(self, num_frames: int) -> int:
        return -(-num_frames // self.config.encoder.downsample_factor)

    # -- prediction network ----------------------------------------------

    def _check_ids(self, labels: Sequence[int]) -> list[int]:
        ids = [int(y) for y in labels]
        bad = [y for y in ids if not 1 <= y <= self.config.vocab_size]
        if bad:
            raise ValueError(f"label ids {bad} outside vocabulary [1, {self.config.vocab_size}]")
        return ids

    def start_state(self, params=None) -> tuple[Tensor, Tensor]:
        p = self._params(params)
        return p["pred.start_h"], p["pred.start_c"]

    def _lstm(self, gates_x: Tensor, h: Tensor, c: Tensor, p) -> tuple[Tensor, Tensor]:
        Hd = self.config.pred_dim
        gates = gates_x + ad.matmul(h, p["pred.w_h"])
        i = ad.sigmoid(gates[0:Hd])
        f = ad.sigmoid(gates[Hd:2 * Hd])
        g = ad.tanh(gates[2 * Hd:3 * Hd])
        o = ad.sigmoid(gates[3 * Hd:])
        c = f * c + i * g
        return o * ad.tanh(c), c

    def predict(self, labels: Sequence[int], params=None) -> Tensor:
        """Prediction states for every prefix; row ``j`` has seen ``labels[:j]``."""
        p = self._params(params)
        ids = self._check_ids(labels)
        h, c = self.start_state(p)
        states = [h]
        if ids:
            gx = ad.matmul(ad.take_rows(p["pred.embed"], ids), p["pred.w_x"]) + p["pred.b"]
            for j in range(len(ids)):
                h, c = self._lstm(gx[j], h, c, p)
                states.append(h)
        return ad.stack(states)

    def predict_step(self, label: int, state: tuple[Tensor, Tensor], params=None) -> tuple[Tensor, Tensor]:
        p = self._params(params)
        (label,) = self._check_ids([label])
        gx = ad.matmul(p["pred.embed"][label], p["pred.w_x"]) + p["pred.b"]
        return self._lstm(gx, state[0], state[1], p)

    # -- joint network ---------------------------------------------------

    def join(self, encoding_frame: Tensor, prediction_state: Tensor, params=None) -> Tensor:
        p = self._params(params)
        encoding_frame, prediction_state = ad.as_tensor(encoding_frame), ad.as_tensor(prediction_state)
        if encoding_frame.shape != (self.config.encoder.model_dim,) or prediction_state.shape != (self.config.pred_dim,):
            raise ad.ShapeError(f"join got {encoding_frame.shape} and {prediction_state.shape}")
        hidden = ad.tanh(ad.matmul(encoding_frame, p["joint.w_enc"]) + ad.matmul(prediction_state, p["joint.w_pred"]) + p["joint.b"])
        return ad.matmul(hidden, p["joint.w_out"]) + p["joint.b_out"]

    def joint_lattice(self, encodings: Tensor, predictions: Tensor, params=None) -> Tensor:
        """Logits for every (frame, prefix) node: shape (T, U + 1, V + 1)."""
        p = self._params(params)
        hidden = ad.tanh(ad.outer_add(ad.matmul(encodings, p["joint.w_enc"]), ad.matmul(predictions, p["joint.w_pred"])) + p["joint.b"])
        return ad.matmul(hidden, p["joint.w_out"]) + p["joint.b_out"]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Transducer, step: int, directory: str | Path, extra: Mapping | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    blobs = []
    for name in model.store.names():
        arr = model.store[name]
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": int(arr.size)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += int(arr.size)
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA,
        "config": model.config.to_dict(),
        "step": int(step),
        "tensors": table,
    }
    if extra:
        manifest["extra"] = dict(extra)
    (directory / "params.bin").write_bytes(b"".join(blobs))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> Transducer:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest in {directory}: {exc}") from exc
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    config = ModelConfig.from_dict(manifest["config"])
    raw = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    expected = parameter_shapes(config)
    store = ParameterStore(step=int(manifest["step"]))
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"tensor {name!r} is not part of the configured model")
        if shape != expected[name] or int(np.prod(shape)) != entry["length"]:
            raise CheckpointError(f"tensor {name!r}: manifest shape {list(shape)} does not match model shape {list(expected[name])}")
        start, stop = entry["offset"], entry["offset"] + entry["length"]
        if stop > raw.size:
            raise CheckpointError(f"tensor {name!r} extends past the end of params.bin")
        store.create(name, raw[start:stop].reshape(shape))
    missing = set(expected) - set(store.names())
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    return Transducer(config, store)


def checkpoint_step(directory: str | Path) -> int:
    return int(json.loads((Path(directory) / "manifest.json").read_text())["step"])
