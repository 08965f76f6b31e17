"""Small bidirectional post-norm transformer encoder built on :mod:`jtner.autodiff`.

Several queries can be encoded in one call: their tokens are stacked into a
single ``[total_tokens, d_model]`` matrix and attention is restricted to a
block-diagonal mask, so each query only ever attends to itself. This is the
same computation as encoding the queries one at a time, without padding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .heads import TAGS

ModelParams = Dict[str, Tensor]


class QueryLengthError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder hyper-parameters; ``vocab_size`` is reset from the vocabulary at training time."""

    vocab_size: int = 2
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: EncoderConfig) -> dict:
    """Name -> shape for every learnable tensor, in initialisation order.

    Linear weights are stored ``[out_features, in_features]``.
    """
    d, f = config.d_model, config.d_ff
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_len, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn.q.weight": (d, d),
            p + "attn.k.weight": (d, d),
            p + "attn.v.weight": (d, d),
            p + "attn.o.weight": (d, d),
            p + "attn.o.bias": (d,),
            p + "ln1.gain": (d,),
            p + "ln1.bias": (d,),
            p + "ff1.weight": (f, d),
            p + "ff1.bias": (f,),
            p + "ff2.weight": (d, f),
            p + "ff2.bias": (d,),
            p + "ln2.gain": (d,),
            p + "ln2.bias": (d,),
        })
    shapes.update({
        "ner.weight": (len(TAGS), d),
        "ner.bias": (len(TAGS),),
        "intent.weight": (1, d),
        "intent.bias": (1,),
    })
    return shapes


def init_params(config: EncoderConfig) -> ModelParams:
    """Deterministic Glorot-uniform init; layer-norm gains 1, every bias 0."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = ad.matmul(x, ad.transpose(weight))
    return y if bias is None else ad.add(y, bias)


def _check_ids(token_ids: Sequence[int], config: EncoderConfig) -> None:
    n = len(token_ids)
    if not 1 <= n <= config.max_len:
        raise QueryLengthError(f"query has {n} tokens; allowed range is 1..{config.max_len}")
    for t in token_ids:
        if not 0 <= t < config.vocab_size:
            raise IndexError(f"token id {t} outside vocabulary of size {config.vocab_size}")


def encode_batch(
    batch: Sequence[Sequence[int]],
    params: ModelParams,
    config: EncoderConfig,
    capture: Optional[dict] = None,
) -> Tensor:
    """Encode several queries at once; rows follow the queries' tokens in order.

    If ``capture`` is a dict, attention probability matrices are stored in it
    under ``(layer, head)`` keys.
    """
    for ids in batch:
        _check_ids(ids, config)
    ids = np.concatenate([np.asarray(q, dtype=np.int64) for q in batch])
    positions = np.concatenate([np.arange(len(q)) for q in batch])
    mask = None
    if len(batch) > 1:
        segment = np.repeat(np.arange(len(batch)), [len(q) for q in batch])
        mask = segment[:, None] == segment[None, :]

    x = ad.add(ad.embedding(params["tok_emb"], ids), ad.embedding(params["pos_emb"], positions))
    dh = config.head_dim
    for i in range(config.n_layers):
        p = f"layers.{i}."
        q = linear(x, params[p + "attn.q.weight"])
        k = linear(x, params[p + "attn.k.weight"])
        v = linear(x, params[p + "attn.v.weight"])
        heads = []
        for h in range(config.n_heads):
            qh = ad.slice_(q, h * dh, (h + 1) * dh, axis=1)
            kh = ad.slice_(k, h * dh, (h + 1) * dh, axis=1)
            vh = ad.slice_(v, h * dh, (h + 1) * dh, axis=1)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
            probs = ad.softmax_rows(scores, mask)
            if capture is not None:
                capture[(i, h)] = probs.data
            heads.append(ad.matmul(probs, vh))
        attn = linear(ad.concat(heads, axis=1), params[p + "attn.o.weight"], params[p + "attn.o.bias"])
        x = ad.layer_norm(ad.add(x, attn), params[p + "ln1.gain"], params[p + "ln1.bias"])
        ff = ad.gelu(linear(x, params[p + "ff1.weight"], params[p + "ff1.bias"]))
        ff = linear(ff, params[p + "ff2.weight"], params[p + "ff2.bias"])
        x = ad.layer_norm(ad.add(x, ff), params[p + "ln2.gain"], params[p + "ln2.bias"])
    return x


def encode(token_ids: Sequence[int], params: ModelParams, config: EncoderConfig) -> Tensor:
    """Contextual vectors ``[n, d_model]`` for one query."""
    return encode_batch([token_ids], params, config)


def attention_weights(
    token_ids: Sequence[int], params: ModelParams, config: EncoderConfig, layer: int, head: int
) -> np.ndarray:
    if not 0 <= layer < config.n_layers:
        raise IndexError(f"layer {layer} out of range (n_layers={config.n_layers})")
    if not 0 <= head < config.n_heads:
        raise IndexError(f"head {head} out of range (n_heads={config.n_heads})")
    captured: dict = {}
    encode_batch([token_ids], params, config, capture=captured)
    return captured[(layer, head)]
