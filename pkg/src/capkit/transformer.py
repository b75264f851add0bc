"""Attention encoder-decoder over feature-vector memories.

One model instance is trained per feature source. The encoder consumes a
short sequence of projected feature vectors (usually a single one), the
decoder consumes the caption prefix under a causal mask, and both share one
learned position-embedding table. Sublayers use post-norm residuals:
x -> x + sublayer(x) -> layer_norm.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import (
    BadMagic,
    PrefixTooLong,
    ShapeMismatch,
    TooManySources,
    UnsupportedVersion,
    ValidationError,
)
from .textpipe import START_ID, TokenSequence, Vocabulary
from .vision import FeatureMap

CAPM_MAGIC = b"CAPM"
CAPM_VERSION = 1

MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    sources: dict[str, int]
    d_model: int = 128
    h: int = 8
    layers_enc: int = 2
    layers_dec: int = 2
    d_ff: int | None = None
    max_len: int = 24

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        for name, value in (("vocab_size", self.vocab_size), ("d_model", self.d_model),
                            ("h", self.h), ("layers_enc", self.layers_enc),
                            ("layers_dec", self.layers_dec), ("d_ff", self.d_ff),
                            ("max_len", self.max_len)):
            if int(value) <= 0:
                raise ValidationError(f"{name} must be positive, got {value}")
        if self.d_model % self.h != 0:
            raise ValidationError(f"d_model {self.d_model} not divisible by h {self.h}")
        if not self.sources:
            raise ValidationError("at least one feature source is required")
        for name, dim in self.sources.items():
            if int(dim) <= 0:
                raise ValidationError(f"source {name!r} has non-positive dim {dim}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.h

    @property
    def d_v(self) -> int:
        return self.d_model // self.h

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "sources": dict(sorted(self.sources.items())),
            "d_model": self.d_model,
            "h": self.h,
            "layers_enc": self.layers_enc,
            "layers_dec": self.layers_dec,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ValidationError(f"bad model config: {exc}") from None


@dataclass
class AttentionParams:
    """Per-head projections plus the output projection of one attention block."""

    w_q: list[nm.Tensor]
    w_k: list[nm.Tensor]
    w_v: list[nm.Tensor]
    w_o: nm.Tensor

    def __post_init__(self):
        h = len(self.w_q)
        if h == 0 or len(self.w_k) != h or len(self.w_v) != h:
            raise ValidationError("head projection lists must be non-empty and equal length")
        d_model, d_k = self.w_q[0].shape
        d_v = self.w_v[0].shape[1]
        if h * d_k != d_model or h * d_v != d_model:
            raise ValidationError(
                f"h*d_k and h*d_v must equal d_model: h={h} d_k={d_k} d_v={d_v} d_model={d_model}")
        if self.w_o.shape != (h * d_v, d_model):
            raise ValidationError(f"w_o shape {self.w_o.shape}, expected {(h * d_v, d_model)}")

    @property
    def h(self) -> int:
        return len(self.w_q)


def scaled_dot_attention(q: nm.Tensor, k: nm.Tensor, v: nm.Tensor,
                         mask: np.ndarray | None = None) -> tuple[nm.Tensor, nm.Tensor]:
    """softmax(q kT / sqrt(d_k)) v. Returns (output, attention weights).

    mask, if given, is a boolean (m, n) array; True marks allowed positions
    and blocked ones get a -1e9 bias before the softmax.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"q/k width mismatch {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"k/v row mismatch {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scores = nm.scale(nm.matmul(q, nm.transpose_last_two(k)), 1.0 / float(np.sqrt(d_k)))
    if mask is not None:
        if mask.shape != scores.shape:
            raise ShapeMismatch(f"mask {mask.shape} for scores {scores.shape}")
        bias = nm.Tensor(np.where(mask, 0.0, MASK_BIAS), dtype=q.dtype.type)
        scores = nm.add(scores, bias)
    weights = nm.softmax_rows(scores)
    return nm.matmul(weights, v), weights


def multi_head_attention(x_q: nm.Tensor, x_kv: nm.Tensor, params: AttentionParams,
                         mask: np.ndarray | None = None) -> nm.Tensor:
    """Concat of per-head attentions, then the output projection."""
    heads = []
    for i in range(params.h):
        q = nm.matmul(x_q, params.w_q[i])
        k = nm.matmul(x_kv, params.w_k[i])
        v = nm.matmul(x_kv, params.w_v[i])
        out, _ = scaled_dot_attention(q, k, v, mask)
        heads.append(out)
    return nm.matmul(nm.concat_last_axis(heads), params.w_o)


def _xavier(rng: np.random.Generator, shape: tuple[int, ...]) -> nm.Tensor:
    std = float(np.sqrt(2.0 / (shape[0] + shape[-1])))
    return nm.Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def _zeros(shape) -> nm.Tensor:
    return nm.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> nm.Tensor:
    return nm.Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def _make_attention(rng, cfg: ModelConfig) -> AttentionParams:
    d, d_k, d_v = cfg.d_model, cfg.d_k, cfg.d_v
    return AttentionParams(
        w_q=[_xavier(rng, (d, d_k)) for _ in range(cfg.h)],
        w_k=[_xavier(rng, (d, d_k)) for _ in range(cfg.h)],
        w_v=[_xavier(rng, (d, d_v)) for _ in range(cfg.h)],
        w_o=_xavier(rng, (cfg.h * d_v, d)),
    )


@dataclass
class _FeedForward:
    w1: nm.Tensor
    b1: nm.Tensor
    w2: nm.Tensor
    b2: nm.Tensor

    def __call__(self, x: nm.Tensor) -> nm.Tensor:
        hidden = nm.relu(nm.add(nm.matmul(x, self.w1), self.b1))
        return nm.add(nm.matmul(hidden, self.w2), self.b2)


@dataclass
class _LayerNormParams:
    g: nm.Tensor
    b: nm.Tensor

    def __call__(self, x: nm.Tensor) -> nm.Tensor:
        return nm.layer_norm(x, self.g, self.b)


@dataclass
class EncoderLayer:
    attn: AttentionParams
    ln1: _LayerNormParams
    ff: _FeedForward
    ln2: _LayerNormParams

    def __call__(self, x: nm.Tensor) -> nm.Tensor:
        x = self.ln1(nm.add(x, multi_head_attention(x, x, self.attn)))
        return self.ln2(nm.add(x, self.ff(x)))


@dataclass
class DecoderLayer:
    self_attn: AttentionParams
    ln1: _LayerNormParams
    cross_attn: AttentionParams
    ln2: _LayerNormParams
    ff: _FeedForward
    ln3: _LayerNormParams

    def __call__(self, x: nm.Tensor, memory: nm.Tensor, causal: np.ndarray) -> nm.Tensor:
        x = self.ln1(nm.add(x, multi_head_attention(x, x, self.self_attn, causal)))
        x = self.ln2(nm.add(x, multi_head_attention(x, memory, self.cross_attn)))
        return self.ln3(nm.add(x, self.ff(x)))


def _make_ff(rng, cfg: ModelConfig) -> _FeedForward:
    return _FeedForward(
        w1=_xavier(rng, (cfg.d_model, cfg.d_ff)), b1=_zeros(cfg.d_ff),
        w2=_xavier(rng, (cfg.d_ff, cfg.d_model)), b2=_zeros(cfg.d_model),
    )


def _make_ln(cfg: ModelConfig) -> _LayerNormParams:
    return _LayerNormParams(g=_ones(cfg.d_model), b=_zeros(cfg.d_model))


class CaptionModel:
    """Encoder-decoder captioner for one feature source family."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.token_emb = nm.Tensor(
            rng.normal(0.0, 0.02, size=(config.vocab_size, d)).astype(np.float32),
            requires_grad=True)
        self.pos_emb = nm.Tensor(
            rng.normal(0.0, 0.02, size=(config.max_len, d)).astype(np.float32),
            requires_grad=True)
        self.src_proj: dict[str, tuple[nm.Tensor, nm.Tensor]] = {}
        for name in sorted(config.sources):
            dim = config.sources[name]
            self.src_proj[name] = (_xavier(rng, (dim, d)), _zeros(d))
        self.enc_layers = [
            EncoderLayer(attn=_make_attention(rng, config), ln1=_make_ln(config),
                         ff=_make_ff(rng, config), ln2=_make_ln(config))
            for _ in range(config.layers_enc)
        ]
        self.dec_layers = [
            DecoderLayer(self_attn=_make_attention(rng, config), ln1=_make_ln(config),
                         cross_attn=_make_attention(rng, config), ln2=_make_ln(config),
                         ff=_make_ff(rng, config), ln3=_make_ln(config))
            for _ in range(config.layers_dec)
        ]
        self.out_w = _xavier(rng, (d, config.vocab_size))

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self) -> dict[str, nm.Tensor]:
        params: dict[str, nm.Tensor] = {"token_emb": self.token_emb, "pos_emb": self.pos_emb}
        for name, (w, b) in self.src_proj.items():
            params[f"src.{name}.w"] = w
            params[f"src.{name}.b"] = b

        def attn_entries(prefix: str, a: AttentionParams):
            for i in range(a.h):
                params[f"{prefix}.wq.{i}"] = a.w_q[i]
            for i in range(a.h):
                params[f"{prefix}.wk.{i}"] = a.w_k[i]
            for i in range(a.h):
                params[f"{prefix}.wv.{i}"] = a.w_v[i]
            params[f"{prefix}.wo"] = a.w_o

        for i, layer in enumerate(self.enc_layers):
            attn_entries(f"enc.{i}.attn", layer.attn)
            params[f"enc.{i}.ln1.g"] = layer.ln1.g
            params[f"enc.{i}.ln1.b"] = layer.ln1.b
            params[f"enc.{i}.ff.w1"] = layer.ff.w1
            params[f"enc.{i}.ff.b1"] = layer.ff.b1
            params[f"enc.{i}.ff.w2"] = layer.ff.w2
            params[f"enc.{i}.ff.b2"] = layer.ff.b2
            params[f"enc.{i}.ln2.g"] = layer.ln2.g
            params[f"enc.{i}.ln2.b"] = layer.ln2.b
        for i, layer in enumerate(self.dec_layers):
            attn_entries(f"dec.{i}.self", layer.self_attn)
            params[f"dec.{i}.ln1.g"] = layer.ln1.g
            params[f"dec.{i}.ln1.b"] = layer.ln1.b
            attn_entries(f"dec.{i}.cross", layer.cross_attn)
            params[f"dec.{i}.ln2.g"] = layer.ln2.g
            params[f"dec.{i}.ln2.b"] = layer.ln2.b
            params[f"dec.{i}.ff.w1"] = layer.ff.w1
            params[f"dec.{i}.ff.b1"] = layer.ff.b1
            params[f"dec.{i}.ff.w2"] = layer.ff.w2
            params[f"dec.{i}.ff.b2"] = layer.ff.b2
            params[f"dec.{i}.ln3.g"] = layer.ln3.g
            params[f"dec.{i}.ln3.b"] = layer.ln3.b
        params["out.w"] = self.out_w
        return params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def astype(self, dtype) -> "CaptionModel":
        """Deep copy with every parameter cast (used by precision replicas)."""
        clone = CaptionModel(self.config, seed=0)
        src, dst = self.parameters(), clone.parameters()
        for name, p in src.items():
            dst[name].data = p.data.astype(dtype)
        return clone

    # -- forward passes -------------------------------------------------------

    def project_source(self, name: str, rows: nm.Tensor) -> nm.Tensor:
        if name not in self.src_proj:
            raise ValidationError(f"model has no projection for source {name!r}")
        w, b = self.src_proj[name]
        if rows.shape[-1] != w.shape[0]:
            raise ShapeMismatch(
                f"source {name!r} expects dim {w.shape[0]}, got {rows.shape[-1]}")
        return nm.add(nm.matmul(rows, w), b)

    def encode_rows(self, rows: list[nm.Tensor]) -> nm.Tensor:
        """Encode pre-projected (1, d_model) rows into a memory tensor."""
        n = len(rows)
        if n == 0:
            raise ValidationError("cannot encode zero feature sources")
        if n > self.config.max_len:
            raise TooManySources(f"{n} sources exceed max_len {self.config.max_len}")
        x = rows[0] if n == 1 else nm.concat_rows(rows)
        pos = nm.embedding_lookup(self.pos_emb, np.arange(n))
        x = nm.add(x, pos)
        for layer in self.enc_layers:
            x = layer(x)
        return x

    def encode(self, features: list[FeatureMap]) -> nm.Tensor:
        dtype = self.token_emb.dtype.type
        rows = []
        for fm in features:
            values = nm.Tensor(fm.values.reshape(1, -1), dtype=dtype)
            rows.append(self.project_source(fm.source, values))
        return self.encode_rows(rows)

    def sequence_logits(self, memory: nm.Tensor, ids: list[int]) -> nm.Tensor:
        """Teacher-forced decoder logits for every position: (L, vocab)."""
        ids = list(ids)
        if not ids:
            raise ValidationError("decoder input is empty")
        if len(ids) > self.config.max_len:
            raise PrefixTooLong(f"{len(ids)} decoder positions exceed max_len "
                                f"{self.config.max_len}")
        n = len(ids)
        x = nm.add(nm.embedding_lookup(self.token_emb, np.asarray(ids)),
                   nm.embedding_lookup(self.pos_emb, np.arange(n)))
        causal = np.tril(np.ones((n, n), dtype=bool))
        for layer in self.dec_layers:
            x = layer(x, memory, causal)
        return nm.matmul(x, self.out_w)

    def next_token_logits(self, ids: list[int], memory: nm.Tensor) -> np.ndarray:
        """Logits over the vocabulary for the token after the given prefix."""
        if len(ids) >= self.config.max_len:
            raise PrefixTooLong(f"prefix of {len(ids)} cannot grow past max_len "
                                f"{self.config.max_len}")
        return self.sequence_logits(memory, ids).data[-1].copy()


def encode(features: list[FeatureMap], model: CaptionModel) -> nm.Tensor:
    return model.encode(features)


def decode_step(prefix: TokenSequence, memory: nm.Tensor, model: CaptionModel) -> nm.Tensor:
    """Next-token logits for a caption prefix. Softmax is the caller's job."""
    content = prefix.content()
    if not content or content[0] != START_ID:
        raise ValidationError("prefix must begin with the start id")
    return nm.Tensor(model.next_token_logits(content, memory),
                     dtype=model.token_emb.dtype.type)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form size of a CaptionModel built from cfg."""
    d, dff = cfg.d_model, cfg.d_ff
    attn = 4 * d * d
    ln = 2 * d
    ff = 2 * d * dff + dff + d
    enc = cfg.layers_enc * (attn + ff + 2 * ln)
    dec = cfg.layers_dec * (2 * attn + ff + 3 * ln)
    emb = cfg.vocab_size * d + cfg.max_len * d
    src = sum(dim * d + d for dim in cfg.sources.values())
    return emb + src + enc + dec + d * cfg.vocab_size


# ---------------------------------------------------------------------------
# CAPM checkpoints
#
#   magic "CAPM" | u32 version | u32 json length | json payload
#   then named tensors until EOF:
#     u16 name length | name utf-8 | u8 rank | rank * u32 dims | f32 payload
#
# The JSON block holds the model config plus the vocabulary so a checkpoint
# can caption on its own. Integers little-endian, tensor payloads f32.


def save_checkpoint(model: CaptionModel, vocab: Vocabulary,
                    cnn: "object | None" = None) -> bytes:
    payload = {
        "model": model.config.to_dict(),
        "vocab": {"words": vocab.id_to_word[4:]},
        "has_cnn": cnn is not None,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += CAPM_MAGIC
    out += struct.pack("<II", CAPM_VERSION, len(blob))
    out += blob
    tensors = dict(model.parameters())
    if cnn is not None:
        tensors.update(cnn.parameters())
    for name, p in tensors.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        shape = p.shape
        out += struct.pack("<B", len(shape))
        for dim in shape:
            out += struct.pack("<I", dim)
        out += p.data.astype("<f4").tobytes()
    return bytes(out)


def load_checkpoint(data: bytes):
    """Returns (model, vocab, cnn-or-None). Inverse of save_checkpoint."""
    from .vision import TinyCnnParams  # local to avoid a cycle at import time

    if data[:4] != CAPM_MAGIC:
        raise BadMagic(f"expected CAPM magic, got {data[:4]!r}")
    if len(data) < 12:
        raise ValidationError("CAPM header truncated")
    version, json_len = struct.unpack_from("<II", data, 4)
    if version != CAPM_VERSION:
        raise UnsupportedVersion(f"CAPM version {version}, supported: {CAPM_VERSION}")
    pos = 12
    if pos + json_len > len(data):
        raise ValidationError("CAPM config block truncated")
    try:
        payload = json.loads(data[pos:pos + json_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"bad CAPM config block: {exc}") from None
    pos += json_len
    cfg = ModelConfig.from_dict(payload["model"])
    vocab = Vocabulary.from_words(payload["vocab"]["words"])
    if vocab.size != cfg.vocab_size:
        raise ValidationError(f"vocab size {vocab.size} != config vocab_size {cfg.vocab_size}")

    loaded: dict[str, np.ndarray] = {}
    while pos < len(data):
        if pos + 2 > len(data):
            raise ValidationError("CAPM tensor header truncated")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 1 > len(data):
            raise ValidationError(f"CAPM tensor {name!r} rank truncated")
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if pos + 4 * rank > len(data):
            raise ValidationError(f"CAPM tensor {name!r} dims truncated")
        dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        end = pos + 4 * count
        if end > len(data):
            raise ValidationError(f"CAPM tensor {name!r} payload truncated")
        if name in loaded:
            raise ValidationError(f"duplicate CAPM tensor {name!r}")
        loaded[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims).copy()
        pos = end

    model = CaptionModel(cfg, seed=0)
    cnn = None
    expected = dict(model.parameters())
    if payload.get("has_cnn"):
        if "tinycnn" not in cfg.sources:
            raise ValidationError("checkpoint has CNN weights but no tinycnn source")
        cnn = TinyCnnParams.create(d_model=cfg.sources["tinycnn"], seed=0)
        expected.update(cnn.parameters())
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise ValidationError(f"checkpoint tensor mismatch: missing={missing} extra={extra}")
    for name, p in expected.items():
        if loaded[name].shape != p.shape:
            raise ValidationError(
                f"tensor {name!r} shape {loaded[name].shape}, expected {p.shape}")
        p.data = np.ascontiguousarray(loaded[name])
    return model, vocab, cnn
