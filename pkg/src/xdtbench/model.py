"""The trainable head: a small transformer (or MLP/linear variant) plus classifier.

Each embedding is treated as a one-token sequence.  With a single token the
attention softmax is identically 1, so the attention block reduces to the
value and output projections; the query/key maps still exist as parameters
but receive zero gradient.  Layers follow the post-norm encoder layout:

    x   -> x + Attn(x)   -> LayerNorm -> x1
    x1  -> x1 + FFN(x1)  -> LayerNorm -> x2     (FFN = Linear/ReLU/Linear)

The classifier maps the latent through a bottleneck projection and a class
map, then exponential-normalises into a probability vector.

Checkpoints store a format version, the head configuration as a key=value
text block (plus caller-supplied metadata), every tensor in declaration
order as little-endian float64 with a shape header, and a trailing CRC-32
over everything after the version field.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import ModelError

LAYERNORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"XDTM"
CHECKPOINT_VERSION = 1

HEAD_KINDS = ("transformer", "mlp", "linear")


@dataclass(frozen=True)
class HeadConfig:
    """Shape of the trainable head."""

    num_layers: int = 4
    model_dim: int = 512
    num_heads: int = 4
    ffn_dim: int = 256
    projection_dim: int = 16
    num_classes: int = 2
    head_kind: str = "transformer"
    init_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim", "projection_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.model_dim % self.num_heads != 0:
            raise ModelError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.head_kind not in HEAD_KINDS:
            raise ModelError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")


@dataclass
class HeadParameters:
    """All trainable tensors, keyed by path, plus the config that shaped them."""

    config: HeadConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "HeadParameters":
        return HeadParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ModelError(f"parameter {name!r} contains non-finite values")


def _declared_tensors(config: HeadConfig) -> Iterator[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) in declaration order; kind picks the initialiser."""
    d, f = config.model_dim, config.ffn_dim
    if config.head_kind == "transformer":
        for i in range(config.num_layers):
            p = f"layers.{i}"
            for m in ("wq", "wk", "wv", "wo"):
                yield f"{p}.attn.{m}", (d, d), "weight"
                yield f"{p}.attn.{m.replace('w', 'b')}", (d,), "zero"
            yield f"{p}.norm1.gamma", (d,), "one"
            yield f"{p}.norm1.beta", (d,), "zero"
            yield f"{p}.ffn.w1", (f, d), "weight"
            yield f"{p}.ffn.b1", (f,), "zero"
            yield f"{p}.ffn.w2", (d, f), "weight"
            yield f"{p}.ffn.b2", (d,), "zero"
            yield f"{p}.norm2.gamma", (d,), "one"
            yield f"{p}.norm2.beta", (d,), "zero"
    elif config.head_kind == "mlp":
        for i in range(config.num_layers):
            p = f"layers.{i}"
            yield f"{p}.ffn.w1", (f, d), "weight"
            yield f"{p}.ffn.b1", (f,), "zero"
            yield f"{p}.ffn.w2", (d, f), "weight"
            yield f"{p}.ffn.b2", (d,), "zero"
    else:
        yield "head.w", (d, d), "weight"
        yield "head.b", (d,), "zero"
    yield "proj.w", (config.projection_dim, d), "weight"
    yield "proj.b", (config.projection_dim,), "zero"
    yield "cls.w", (config.num_classes, config.projection_dim), "weight"
    yield "cls.b", (config.num_classes,), "zero"


def init_head(config: HeadConfig) -> HeadParameters:
    """Fresh parameters: weights uniform in +-1/sqrt(fan_in), biases zero,
    normalisation scales one.  Deterministic in ``config.init_seed``."""
    rng = np.random.default_rng(config.init_seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape, kind in _declared_tensors(config):
        if kind == "weight":
            scale = 1.0 / np.sqrt(shape[-1])
            tensors[name] = rng.uniform(-scale, scale, size=shape)
        elif kind == "one":
            tensors[name] = np.ones(shape, dtype=np.float64)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float64)
    return HeadParameters(config=config, tensors=tensors)


def zero_gradients(params: HeadParameters) -> dict[str, np.ndarray]:
    """A gradient structure mirroring the parameter tensors, all zero."""
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def _layer_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    x_hat = centered * inv_std
    return x_hat * gamma + beta, (x_hat, inv_std)


def _layer_norm_backward(d_out, cache, gamma):
    x_hat, inv_std = cache
    d_gamma = (d_out * x_hat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_xhat = d_out * gamma
    # d x = inv_std * (d_xhat - mean(d_xhat) - x_hat * mean(d_xhat * x_hat))
    m1 = d_xhat.mean(axis=1, keepdims=True)
    m2 = (d_xhat * x_hat).mean(axis=1, keepdims=True)
    d_x = inv_std * (d_xhat - m1 - x_hat * m2)
    return d_x, d_gamma, d_beta


def _forward_trace(params: HeadParameters, inputs: np.ndarray):
    """Full forward pass over a batch, caching what backward needs.

    Returns (latents, probs, trace).
    """
    cfg = params.config
    t = params.tensors
    x = inputs
    layer_caches = []
    if cfg.head_kind == "transformer":
        for i in range(cfg.num_layers):
            p = f"layers.{i}"
            v = x @ t[f"{p}.attn.wv"].T + t[f"{p}.attn.bv"]
            attn = v @ t[f"{p}.attn.wo"].T + t[f"{p}.attn.bo"]
            res1 = x + attn
            x1, ln1 = _layer_norm_forward(res1, t[f"{p}.norm1.gamma"], t[f"{p}.norm1.beta"])
            pre = x1 @ t[f"{p}.ffn.w1"].T + t[f"{p}.ffn.b1"]
            act = np.maximum(pre, 0.0)
            ffn = act @ t[f"{p}.ffn.w2"].T + t[f"{p}.ffn.b2"]
            res2 = x1 + ffn
            x2, ln2 = _layer_norm_forward(res2, t[f"{p}.norm2.gamma"], t[f"{p}.norm2.beta"])
            layer_caches.append({"x": x, "v": v, "ln1": ln1, "x1": x1, "pre": pre, "act": act, "ln2": ln2})
            x = x2
    elif cfg.head_kind == "mlp":
        for i in range(cfg.num_layers):
            p = f"layers.{i}"
            pre = x @ t[f"{p}.ffn.w1"].T + t[f"{p}.ffn.b1"]
            act = np.maximum(pre, 0.0)
            out = act @ t[f"{p}.ffn.w2"].T + t[f"{p}.ffn.b2"]
            layer_caches.append({"x": x, "pre": pre, "act": act})
            x = out
    else:
        layer_caches.append({"x": x})
        x = x @ t["head.w"].T + t["head.b"]

    latents = x
    hidden = latents @ t["proj.w"].T + t["proj.b"]
    logits = hidden @ t["cls.w"].T + t["cls.b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    trace = {"layers": layer_caches, "latents": latents, "hidden": hidden, "probs": probs}
    return latents, probs, trace


def _backward_trace(
    params: HeadParameters,
    trace: dict,
    d_latents: np.ndarray,
    d_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Propagate loss gradients back to every parameter tensor."""
    cfg = params.config
    t = params.tensors
    grads = zero_gradients(params)

    hidden = trace["hidden"]
    latents = trace["latents"]
    grads["cls.w"] += d_logits.T @ hidden
    grads["cls.b"] += d_logits.sum(axis=0)
    d_hidden = d_logits @ t["cls.w"]
    grads["proj.w"] += d_hidden.T @ latents
    grads["proj.b"] += d_hidden.sum(axis=0)
    d_x = d_latents + d_hidden @ t["proj.w"]

    if cfg.head_kind == "transformer":
        for i in reversed(range(cfg.num_layers)):
            p = f"layers.{i}"
            cache = trace["layers"][i]
            d_res2, d_g2, d_b2 = _layer_norm_backward(d_x, cache["ln2"], t[f"{p}.norm2.gamma"])
            grads[f"{p}.norm2.gamma"] += d_g2
            grads[f"{p}.norm2.beta"] += d_b2
            d_x1 = d_res2.copy()
            d_ffn = d_res2
            grads[f"{p}.ffn.w2"] += d_ffn.T @ cache["act"]
            grads[f"{p}.ffn.b2"] += d_ffn.sum(axis=0)
            d_act = d_ffn @ t[f"{p}.ffn.w2"]
            d_pre = d_act * (cache["pre"] > 0.0)
            grads[f"{p}.ffn.w1"] += d_pre.T @ cache["x1"]
            grads[f"{p}.ffn.b1"] += d_pre.sum(axis=0)
            d_x1 += d_pre @ t[f"{p}.ffn.w1"]
            d_res1, d_g1, d_b1 = _layer_norm_backward(d_x1, cache["ln1"], t[f"{p}.norm1.gamma"])
            grads[f"{p}.norm1.gamma"] += d_g1
            grads[f"{p}.norm1.beta"] += d_b1
            d_x = d_res1.copy()
            d_attn = d_res1
            grads[f"{p}.attn.wo"] += d_attn.T @ cache["v"]
            grads[f"{p}.attn.bo"] += d_attn.sum(axis=0)
            d_v = d_attn @ t[f"{p}.attn.wo"]
            grads[f"{p}.attn.wv"] += d_v.T @ cache["x"]
            grads[f"{p}.attn.bv"] += d_v.sum(axis=0)
            d_x += d_v @ t[f"{p}.attn.wv"]
    elif cfg.head_kind == "mlp":
        for i in reversed(range(cfg.num_layers)):
            p = f"layers.{i}"
            cache = trace["layers"][i]
            grads[f"{p}.ffn.w2"] += d_x.T @ cache["act"]
            grads[f"{p}.ffn.b2"] += d_x.sum(axis=0)
            d_act = d_x @ t[f"{p}.ffn.w2"]
            d_pre = d_act * (cache["pre"] > 0.0)
            grads[f"{p}.ffn.w1"] += d_pre.T @ cache["x"]
            grads[f"{p}.ffn.b1"] += d_pre.sum(axis=0)
            d_x = d_pre @ t[f"{p}.ffn.w1"]
    else:
        cache = trace["layers"][0]
        grads["head.w"] += d_x.T @ cache["x"]
        grads["head.b"] += d_x.sum(axis=0)
        d_x = d_x @ t["head.w"]

    return grads


def _check_input(params: HeadParameters, arr: np.ndarray, batched: bool) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    want = params.config.model_dim
    if batched:
        if arr.ndim != 2 or arr.shape[1] != want:
            raise ModelError(f"expected input of shape (n, {want}), got {arr.shape}")
    else:
        if arr.shape != (want,):
            raise ModelError(f"expected input of width {want}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError("input contains non-finite values")
    return arr


def forward_latent_batch(params: HeadParameters, embeddings: np.ndarray) -> np.ndarray:
    """Latent representations for a batch of embeddings (rows independent)."""
    arr = _check_input(params, embeddings, batched=True)
    latents, _, _ = _forward_trace(params, arr)
    if not np.all(np.isfinite(latents)):
        raise ModelError("non-finite latent output")
    return latents


def forward_latent(params: HeadParameters, embedding: np.ndarray) -> np.ndarray:
    """Latent representation of a single embedding vector."""
    arr = _check_input(params, embedding, batched=False)
    return forward_latent_batch(params, arr[None, :])[0]


def classify_batch(params: HeadParameters, latents: np.ndarray) -> np.ndarray:
    """Probability vectors for a batch of latents."""
    arr = np.asarray(latents, dtype=np.float64)
    want = params.config.model_dim
    if arr.ndim != 2 or arr.shape[1] != want:
        raise ModelError(f"expected latents of shape (n, {want}), got {arr.shape}")
    t = params.tensors
    hidden = arr @ t["proj.w"].T + t["proj.b"]
    logits = hidden @ t["cls.w"].T + t["cls.b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def classify(params: HeadParameters, latent: np.ndarray) -> np.ndarray:
    """Normalised class prediction vector for one latent."""
    arr = np.asarray(latent, dtype=np.float64)
    if arr.shape != (params.config.model_dim,):
        raise ModelError(f"expected latent of width {params.config.model_dim}, got shape {arr.shape}")
    return classify_batch(params, arr[None, :])[0]


def predict_batch(params: HeadParameters, embeddings: np.ndarray) -> np.ndarray:
    """Predicted class indices for a batch; ties resolve to the lower index."""
    arr = _check_input(params, embeddings, batched=True)
    _, probs, _ = _forward_trace(params, arr)
    return np.argmax(probs, axis=1)


def predict_class(params: HeadParameters, embedding: np.ndarray) -> int:
    """Predicted class index for one embedding."""
    arr = _check_input(params, embedding, batched=False)
    return int(predict_batch(params, arr[None, :])[0])


# --------------------------------------------------------------------------
# Checkpoint I/O
# --------------------------------------------------------------------------

_CONFIG_FIELDS = (
    "num_layers",
    "model_dim",
    "num_heads",
    "ffn_dim",
    "projection_dim",
    "num_classes",
    "head_kind",
    "init_seed",
)


def _config_block(config: HeadConfig, extra: Mapping[str, str]) -> str:
    lines = [f"head.{name} = {getattr(config, name)}" for name in _CONFIG_FIELDS]
    for key in sorted(extra):
        value = str(extra[key])
        if "\n" in key or "\n" in value or "=" in key:
            raise ModelError(f"invalid checkpoint metadata entry {key!r}")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _parse_config_block(text: str, path: Path) -> tuple[HeadConfig, dict[str, str]]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ModelError(f"{path}: malformed checkpoint header line {lineno}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    kwargs: dict[str, object] = {}
    for name in _CONFIG_FIELDS:
        key = f"head.{name}"
        if key not in values:
            raise ModelError(f"{path}: checkpoint header missing {key}")
        raw = values.pop(key)
        kwargs[name] = raw if name == "head_kind" else int(raw)
    return HeadConfig(**kwargs), values


def save_checkpoint(
    params: HeadParameters,
    path: str | Path,
    extra: Mapping[str, str] | None = None,
) -> None:
    """Write parameters (plus optional metadata strings) to a checkpoint file."""
    p = Path(path)
    header = _config_block(params.config, extra or {}).encode("utf-8")
    body = [struct.pack("<I", len(header)), header, struct.pack("<I", len(params.tensors))]
    for name, tensor in params.tensors.items():
        raw = name.encode("utf-8")
        body.append(struct.pack("<I", len(raw)))
        body.append(raw)
        body.append(struct.pack("<B", tensor.ndim))
        body.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        body.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    payload = b"".join(body)
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<H", CHECKPOINT_VERSION)
        + payload
        + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    )
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, p)


def load_checkpoint(path: str | Path) -> tuple[HeadParameters, dict[str, str]]:
    """Read a checkpoint; returns the parameters and the metadata block."""
    p = Path(path)
    if not p.is_file():
        raise ModelError(f"checkpoint file not found: {p}")
    blob = p.read_bytes()
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise ModelError(f"{p}: not a checkpoint file")
    version = struct.unpack("<H", blob[4:6])[0]
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{p}: unsupported checkpoint version {version}")
    payload, stored = blob[6:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise ModelError(f"{p}: checkpoint checksum mismatch")

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise ModelError(f"{p}: truncated checkpoint")
        chunk = payload[pos : pos + n]
        pos += n
        return chunk

    header_len = struct.unpack("<I", take(4))[0]
    config, extra = _parse_config_block(take(header_len).decode("utf-8"), p)
    count = struct.unpack("<I", take(4))[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = take(struct.unpack("<I", take(4))[0]).decode("utf-8")
        ndim = struct.unpack("<B", take(1))[0]
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(size * 8), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(payload):
        raise ModelError(f"{p}: trailing bytes in checkpoint")

    expected = {name: shape for name, shape, _ in _declared_tensors(config)}
    got = {name: tuple(t.shape) for name, t in tensors.items()}
    if expected != got:
        raise ModelError(f"{p}: tensor inventory does not match head configuration")
    params = HeadParameters(config=config, tensors=tensors)
    params.check_finite()
    return params, extra
