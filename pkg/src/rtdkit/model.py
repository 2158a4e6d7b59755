"""Post-LN transformer encoder shared by the generator and discriminator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_NORM_EPS = 1e-12
NUM_SEGMENTS = 2
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int
    num_heads: int
    hidden_size: int
    vocab_size: int
    max_positions: int
    ffn_size: int | None = None
    embedding_size: int | None = None
    dropout: float = 0.1

    def __post_init__(self):
        if self.ffn_size is None:
            self.ffn_size = 4 * self.hidden_size
        if self.embedding_size is None:
            self.embedding_size = self.hidden_size
        for name in ("num_heads", "hidden_size", "vocab_size", "max_positions", "ffn_size", "embedding_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown EncoderConfig fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """Parameters by dotted name. A tensor reachable twice keeps its first name."""
        out: dict[str, Tensor] = {}
        seen: set[int] = set()
        for name, t in self._walk(prefix):
            if id(t) not in seen:
                seen.add(id(t))
                out[name] = t
        return out

    def _walk(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val._walk(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self) -> Iterator[Module]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _param(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=T.DEFAULT_DTYPE), requires_grad=True)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return T.mul(x, Tensor(keep, dtype=x.dtype))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int):
        self.weight = _param(n_in, n_out)
        self.bias = _param(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, n: int):
        self.gamma = _param(n)
        self.beta = _param(n)
        self.gamma.data[...] = 1.0

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)


class Embeddings(Module):
    """Token + position + segment embeddings followed by layer norm.

    ``token`` lets a second encoder reuse another encoder's token table.
    """

    def __init__(self, config: EncoderConfig, token: Tensor | None = None):
        e = config.embedding_size
        if token is not None and token.shape != (config.vocab_size, e):
            raise ConfigError(f"shared token table has shape {token.shape}, expected {(config.vocab_size, e)}")
        self.token = token if token is not None else _param(config.vocab_size, e)
        self.position = _param(config.max_positions, e)
        self.segment = _param(NUM_SEGMENTS, e)
        self.norm = LayerNorm(e)
        self.dropout = config.dropout

    def __call__(self, ids: np.ndarray, segment_ids: np.ndarray, rng=None) -> Tensor:
        L = ids.shape[-1]
        x = T.embedding_lookup(self.token, ids)
        x = T.add(x, T.embedding_lookup(self.position, np.arange(L)))
        x = T.add(x, T.embedding_lookup(self.segment, segment_ids))
        return dropout(self.norm(x), self.dropout, rng, self.training)


class SelfAttention(Module):
    def __init__(self, config: EncoderConfig):
        h = config.hidden_size
        self.num_heads = config.num_heads
        self.query = Linear(h, h)
        self.key = Linear(h, h)
        self.value = Linear(h, h)
        self.output = Linear(h, h)
        self.dropout = config.dropout
        self._last_probs: np.ndarray | None = None

    @property
    def last_probs(self) -> np.ndarray | None:
        return self._last_probs

    def __call__(self, x: Tensor, mask_bias: np.ndarray, rng=None) -> Tensor:
        B, L, H = x.shape
        nh, dh = self.num_heads, H // self.num_heads

        def heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (B, L, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        probs = T.softmax(T.add(scores, Tensor(mask_bias, dtype=x.dtype)), axis=-1)
        self._last_probs = probs.data
        probs = dropout(probs, self.dropout, rng, self.training)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, L, H))
        return dropout(self.output(ctx), self.dropout, rng, self.training)


class EncoderLayer(Module):
    def __init__(self, config: EncoderConfig):
        self.attention = SelfAttention(config)
        self.attention_norm = LayerNorm(config.hidden_size)
        self.ffn_in = Linear(config.hidden_size, config.ffn_size)
        self.ffn_out = Linear(config.ffn_size, config.hidden_size)
        self.ffn_norm = LayerNorm(config.hidden_size)
        self.dropout = config.dropout

    def __call__(self, x: Tensor, mask_bias: np.ndarray, rng=None) -> Tensor:
        x = self.attention_norm(T.add(x, self.attention(x, mask_bias, rng)))
        h = self.ffn_out(T.gelu(self.ffn_in(x)))
        return self.ffn_norm(T.add(x, dropout(h, self.dropout, rng, self.training)))


def attention_bias(attention_mask: np.ndarray, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Additive key mask of shape [B, 1, 1, L]: 0 where attended, -inf at padding."""
    attention_mask = np.asarray(attention_mask)
    if not attention_mask.any(axis=-1).all():
        raise ValueError("every row needs at least one unmasked position")
    bias = np.where(attention_mask.astype(bool), 0.0, -np.inf).astype(dtype)
    return bias[:, None, None, :]


class Encoder(Module):
    """Embeddings (optionally projected to the hidden width) plus a layer stack.

    Padded keys are masked out of every attention row, so hidden states at
    real positions do not depend on padding content. Hidden states *at* pad
    positions are computed but meaningless.
    """

    def __init__(self, config: EncoderConfig, embeddings: Embeddings | None = None, shared_token: Tensor | None = None):
        self.config = config
        if embeddings is not None:
            if embeddings.token.shape != (config.vocab_size, config.embedding_size):
                raise ConfigError("shared embeddings do not match vocab_size x embedding_size")
            self.embeddings = embeddings
        else:
            self.embeddings = Embeddings(config, token=shared_token)
        self.projection = Linear(config.embedding_size, config.hidden_size) if config.embedding_size != config.hidden_size else None
        self.layers = [EncoderLayer(config) for _ in range(config.num_layers)]

    def __call__(self, ids, segment_ids=None, attention_mask=None, rng=None) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, L = ids.shape
        if L > self.config.max_positions:
            raise ValueError(f"sequence length {L} exceeds max_positions {self.config.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id out of range [0, {self.config.vocab_size})")
        segment_ids = np.zeros_like(ids) if segment_ids is None else np.asarray(segment_ids).reshape(B, L)
        attention_mask = np.ones_like(ids) if attention_mask is None else np.asarray(attention_mask).reshape(B, L)
        x = self.embeddings(ids, segment_ids, rng)
        if self.projection is not None:
            x = self.projection(x)
        bias = attention_bias(attention_mask, x.dtype)
        for layer in self.layers:
            x = layer(x, bias, rng)
        return x


def encode_sequence(model: Encoder, ids, segment_ids=None, attention_mask=None, rng=None) -> Tensor:
    return model(ids, segment_ids, attention_mask, rng)


# ---------------------------------------------------------------------------
# heads


class MlmHead(Module):
    """Dense + GELU + layer norm back to embedding width, then logits against
    the (tied) token embedding matrix plus an output bias."""

    kind = "mlm"

    def __init__(self, config: EncoderConfig, token_embeddings: Tensor):
        self.dense = Linear(config.hidden_size, config.embedding_size)
        self.norm = LayerNorm(config.embedding_size)
        self.decoder = token_embeddings
        self.bias = _param(config.vocab_size)

    def __call__(self, h: Tensor) -> Tensor:
        x = self.norm(T.gelu(self.dense(h)))
        return T.add(T.matmul(x, T.transpose(self.decoder, (1, 0))), self.bias)


class RtdHead(Module):
    """Per-token replaced/original logit."""

    kind = "rtd"

    def __init__(self, config: EncoderConfig):
        self.dense = Linear(config.hidden_size, config.hidden_size)
        self.out = Linear(config.hidden_size, 1)

    def __call__(self, h: Tensor) -> Tensor:
        logits = self.out(T.gelu(self.dense(h)))
        return T.reshape(logits, logits.shape[:-1])


class SpanHead(Module):
    kind = "span"

    def __init__(self, config: EncoderConfig):
        self.out = Linear(config.hidden_size, 2)

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        logits = self.out(h)
        return logits[..., 0], logits[..., 1]


class ClsHead(Module):
    kind = "cls"

    def __init__(self, config: EncoderConfig, num_labels: int):
        self.num_labels = num_labels
        self.out = Linear(config.hidden_size, num_labels)

    def __call__(self, h: Tensor) -> Tensor:
        return self.out(h[:, 0, :])


class TokenHead(Module):
    kind = "token"

    def __init__(self, config: EncoderConfig, num_labels: int):
        self.num_labels = num_labels
        self.out = Linear(config.hidden_size, num_labels)

    def __call__(self, h: Tensor) -> Tensor:
        return self.out(h)


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    num_labels: int = 0


TYING_POLICIES = ("none", "token", "all")


def count_parameters(config: EncoderConfig, heads: Sequence[HeadSpec] = (), tying: str = "none") -> int:
    """Closed-form count of distinct trainable scalars.

    ``tying`` says which embedding tensors belong to another model and are
    therefore excluded: ``"token"`` the token table, ``"all"`` the whole
    embedding block (token, position, segment tables and their layer norm).
    The MLM decoder matrix is always the encoder's own token table.
    """
    if tying not in TYING_POLICIES:
        raise ValueError(f"tying must be one of {TYING_POLICIES}")
    V, P, E, H, F = config.vocab_size, config.max_positions, config.embedding_size, config.hidden_size, config.ffn_size
    total = 0
    if tying == "none":
        total += V * E
    if tying != "all":
        total += P * E + NUM_SEGMENTS * E + 2 * E
    if E != H:
        total += E * H + H
    per_layer = 4 * (H * H + H) + 2 * H + (H * F + F) + (F * H + H) + 2 * H
    total += config.num_layers * per_layer
    for head in heads:
        if head.kind == "mlm":
            total += H * E + E + 2 * E + V
        elif head.kind == "rtd":
            total += H * H + H + H + 1
        elif head.kind == "span":
            total += 2 * H + 2
        elif head.kind in ("cls", "token"):
            total += H * head.num_labels + head.num_labels
        else:
            raise ValueError(f"unknown head kind {head.kind!r}")
    return total


def distinct_parameter_count(modules: Iterable[Module], exclude: Iterable[Module] = ()) -> int:
    """Count scalars by enumerating parameter arrays; shared tensors count once."""
    skip = {id(t) for m in exclude for t in m.parameters()}
    seen: set[int] = set()
    total = 0
    for m in modules:
        for t in m.parameters():
            if id(t) in seen or id(t) in skip:
                continue
            seen.add(id(t))
            total += t.data.size
    return total


# ---------------------------------------------------------------------------
# initialisation


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within +/- bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_parameters(model: Module, seed: int) -> None:
    """Weights ~ truncated normal(0, 0.02); biases and LN shifts 0; LN gains 1."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters().items():
        if name.endswith(".gamma"):
            p.data[...] = 1.0
        elif name.endswith(("bias", ".beta")):
            p.data[...] = 0.0
        else:
            p.data[...] = truncated_normal(rng, p.shape)


# ---------------------------------------------------------------------------
# task models


class PretrainingModels(Module):
    """Generator and discriminator for replaced-token detection.

    With ``tying="all"`` the generator reuses the discriminator's embedding
    block and projects it to its own hidden width; with ``"token"`` only the
    token table is shared.
    """

    def __init__(self, generator_config: EncoderConfig, discriminator_config: EncoderConfig, tying: str = "all"):
        if tying not in TYING_POLICIES:
            raise ValueError(f"tying must be one of {TYING_POLICIES}")
        g, d = generator_config, discriminator_config
        if g.vocab_size != d.vocab_size:
            raise ConfigError("generator and discriminator vocab sizes differ")
        if tying != "none" and g.embedding_size != d.embedding_size:
            raise ConfigError("tied embeddings need equal embedding_size in generator and discriminator")
        if tying == "all" and g.max_positions != d.max_positions:
            raise ConfigError("tying all embeddings needs equal max_positions")
        self.tying = tying
        self.discriminator = Encoder(d)
        self.rtd_head = RtdHead(d)
        if tying == "all":
            self.generator = Encoder(g, embeddings=self.discriminator.embeddings)
        elif tying == "token":
            self.generator = Encoder(g, shared_token=self.discriminator.embeddings.token)
        else:
            self.generator = Encoder(g)
        self.mlm_head = MlmHead(g, self.generator.embeddings.token)

    def shared_parameter_ids(self) -> set[int]:
        d = {id(t) for t in self.discriminator.parameters()}
        return {id(t) for t in self.generator.parameters() if id(t) in d}

    def generator_parameters(self) -> dict[str, Tensor]:
        out = self.generator.named_parameters("generator.")
        out.update(self.mlm_head.named_parameters("mlm_head."))
        return out

    def discriminator_parameters(self) -> dict[str, Tensor]:
        out = self.discriminator.named_parameters("discriminator.")
        out.update(self.rtd_head.named_parameters("rtd_head."))
        return out


class MaskedLanguageModel(Module):
    """Single encoder with an MLM head: the masked-LM-only baseline."""

    def __init__(self, config: EncoderConfig):
        self.encoder = Encoder(config)
        self.mlm_head = MlmHead(config, self.encoder.embeddings.token)
