"""Training loops for the multitask, base and summed-loss modes, plus checkpoints.

Multitask mode runs two complete optimisation passes per batch: first the
tagging loss, then the per-token intent loss on the already-updated weights
with the learning rate scaled by ``intent_lr_factor``. Base mode runs only the
tagging pass. Summed mode backpropagates ``ner + intent_loss_weight * intent``
in a single pass.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import NumericDomainError, Tape, Tensor
from .datagen import LabeledQuery, Vocabulary, build_vocab
from .encoder import EncoderConfig, ModelParams, encode_batch, init_params, param_shapes
from .heads import TAG_INDEX, TAGS, expand_intent_labels, intent_scores, ner_logits

logger = logging.getLogger(__name__)

MAGIC = "JTNER"
FORMAT_VERSION = 1
MODES = ("multitask", "base", "summed")


class DivergenceError(ArithmeticError):
    """A loss became non-finite. ``checkpoint`` holds the last good state, if any."""

    def __init__(self, loss_name: str, checkpoint: Optional["Checkpoint"] = None):
        super().__init__(f"{loss_name} diverged (non-finite value)")
        self.loss_name = loss_name
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "multitask"
    lr: float = 1e-3
    intent_lr_factor: float = 0.1
    intent_loss_weight: float = 0.1
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gate_entities_on_intent: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        # zero is allowed so the intent pass can be switched off exactly
        if self.intent_lr_factor < 0 or self.intent_loss_weight < 0:
            raise ValueError("intent_lr_factor and intent_loss_weight must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    def step(self, params: ModelParams, grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            params[name].data -= lr * g


class Adam:
    """Adam with per-parameter bias correction; one state shared by every pass."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**t)
            v_hat = self.v[name] / (1 - b2**t)
            params[name].data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD()
    return Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)


@dataclass
class TrainState:
    params: ModelParams
    encoder: EncoderConfig
    vocab: Vocabulary
    optimizer: object
    step_count: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, encoder: EncoderConfig, vocab: Vocabulary, cfg: TrainConfig) -> "TrainState":
        if encoder.vocab_size != len(vocab):
            encoder = replace(encoder, vocab_size=len(vocab))
        return cls(
            params=init_params(encoder),
            encoder=encoder,
            vocab=vocab,
            optimizer=make_optimizer(cfg),
            rng=shuffle_rng(cfg.seed),
        )


def shuffle_rng(seed: int) -> np.random.Generator:
    # separate stream from the encoder's initialisation rng
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


def forward_losses(
    batch: Sequence[LabeledQuery],
    params: ModelParams,
    encoder: EncoderConfig,
    vocab: Vocabulary,
    ner: bool = True,
    intent: bool = True,
) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """Batch tagging and intent losses (token mean per query, then batch mean)."""
    if not batch:
        raise ValueError("empty batch")
    h = encode_batch([vocab.encode(q.tokens) for q in batch], params, encoder)
    weights = np.concatenate([np.full(len(q), 1.0 / (len(q) * len(batch))) for q in batch])
    ner_loss = intent_loss = None
    if ner:
        targets = [TAG_INDEX[t] for q in batch for t in q.tags]
        ner_loss = ad.cross_entropy(ner_logits(h, params), targets, weights)
    if intent:
        labels = [y for q in batch for y in expand_intent_labels(q.is_store_lookup, len(q))]
        intent_loss = ad.logistic_loss(intent_scores(h, params), labels, weights)
    return ner_loss, intent_loss


def _optimise(state: TrainState, batch, lr: float, loss_name: str) -> float:
    try:
        with Tape() as tape:
            ner, intent = forward_losses(
                batch,
                state.params,
                state.encoder,
                state.vocab,
                ner=loss_name == "ner_loss",
                intent=loss_name == "intent_loss",
            )
            loss = ner if loss_name == "ner_loss" else intent
    except NumericDomainError as e:
        raise DivergenceError(loss_name) from e
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(loss_name)
    grads = ad.backward(loss, tape)
    state.optimizer.step(state.params, grads, lr)
    return value


def train_step_multitask(batch, state: TrainState, cfg: TrainConfig) -> Tuple[float, float]:
    """Tagging pass at ``lr``, then intent pass at ``lr * intent_lr_factor``."""
    ner = _optimise(state, batch, cfg.lr, "ner_loss")
    intent = _optimise(state, batch, cfg.lr * cfg.intent_lr_factor, "intent_loss")
    state.step_count += 1
    return ner, intent


def train_step_base(batch, state: TrainState, cfg: TrainConfig) -> float:
    ner = _optimise(state, batch, cfg.lr, "ner_loss")
    state.step_count += 1
    return ner


def _summed_step(batch, state: TrainState, cfg: TrainConfig) -> Tuple[float, float, float]:
    try:
        with Tape() as tape:
            ner, intent = forward_losses(batch, state.params, state.encoder, state.vocab)
            combined = ad.add(ner, ad.scale(intent, cfg.intent_loss_weight))
    except NumericDomainError as e:
        raise DivergenceError("combined_loss") from e
    grads = ad.backward(combined, tape)
    state.optimizer.step(state.params, grads, cfg.lr)
    state.step_count += 1
    return combined.item(), ner.item(), intent.item()


def train_step_summed(batch, state: TrainState, cfg: TrainConfig) -> float:
    """One update on ``ner + intent_loss_weight * intent``."""
    return _summed_step(batch, state, cfg)[0]


@dataclass
class Checkpoint:
    encoder: EncoderConfig
    train: TrainConfig
    vocab: Vocabulary
    params: Dict[str, np.ndarray]
    step_count: int = 0
    history: List[dict] = field(default_factory=list)
    tags: Tuple[str, ...] = TAGS
    format_version: int = FORMAT_VERSION

    def model_params(self) -> ModelParams:
        return {k: Tensor(v, name=k) for k, v in self.params.items()}

    @classmethod
    def from_state(cls, state: TrainState, cfg: TrainConfig, history=()) -> "Checkpoint":
        return cls(
            encoder=state.encoder,
            train=cfg,
            vocab=state.vocab,
            params={k: t.data.copy() for k, t in state.params.items()},
            step_count=state.step_count,
            history=[dict(h) for h in history],
        )


def _format_loss(x: Optional[float]) -> str:
    return "NA" if x is None else f"{x:.6f}"


def train(
    corpus: Sequence[LabeledQuery],
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    vocab: Optional[Vocabulary] = None,
) -> Checkpoint:
    """Train from scratch; ``enc_cfg.vocab_size`` is taken from the vocabulary.

    Emits one ``epoch=<i> ner_loss=<f> intent_loss=<f|NA>`` log line per epoch.
    On divergence, the raised :class:`DivergenceError` carries the checkpoint
    from the end of the last completed epoch.
    """
    if not corpus:
        raise ValueError("cannot train on an empty corpus")
    vocab = vocab or build_vocab(corpus)
    state = TrainState.fresh(enc_cfg, vocab, cfg)
    history: List[dict] = []
    last_good = Checkpoint.from_state(state, cfg)
    for epoch in range(1, cfg.epochs + 1):
        order = state.rng.permutation(len(corpus))
        ner_sum = intent_sum = 0.0
        n_steps = 0
        try:
            for start in range(0, len(corpus), cfg.batch_size):
                batch = [corpus[i] for i in order[start : start + cfg.batch_size]]
                if cfg.mode == "multitask":
                    ner, intent = train_step_multitask(batch, state, cfg)
                elif cfg.mode == "base":
                    ner, intent = train_step_base(batch, state, cfg), None
                else:
                    _, ner, intent = _summed_step(batch, state, cfg)
                ner_sum += ner
                intent_sum += intent if intent is not None else 0.0
                n_steps += 1
        except DivergenceError as e:
            e.checkpoint = last_good
            raise
        state.epoch = epoch
        entry = {
            "epoch": epoch,
            "ner_loss": ner_sum / n_steps,
            "intent_loss": None if cfg.mode == "base" else intent_sum / n_steps,
        }
        history.append(entry)
        logger.info(
            "epoch=%d ner_loss=%s intent_loss=%s",
            epoch,
            _format_loss(entry["ner_loss"]),
            _format_loss(entry["intent_loss"]),
        )
        last_good = Checkpoint.from_state(state, cfg, history)
    return last_good


# ---------------------------------------------------------------------------
# persistence: a "JTNER <version>" header line followed by one JSON document


def dumps_checkpoint(ckpt: Checkpoint) -> str:
    body = {
        "encoder": ckpt.encoder.to_dict(),
        "train": ckpt.train.to_dict(),
        "tags": list(ckpt.tags),
        "vocab": ckpt.vocab.tokens,
        "step_count": ckpt.step_count,
        "history": ckpt.history,
        "params": {
            k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for k, v in ckpt.params.items()
        },
    }
    return f"{MAGIC} {ckpt.format_version}\n{json.dumps(body)}\n"


def loads_checkpoint(text: str) -> Checkpoint:
    header, _, payload = text.partition("\n")
    parts = header.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointError("not a JTNER checkpoint (bad magic line)")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {parts[1]!r}, expected {FORMAT_VERSION}")
    try:
        body = json.loads(payload)
        encoder = EncoderConfig(**body["encoder"])
        train_cfg = TrainConfig(**body["train"])
        vocab = Vocabulary(body["vocab"])
        params = {}
        for name, rec in body["params"].items():
            params[name] = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
        ckpt = Checkpoint(
            encoder=encoder,
            train=train_cfg,
            vocab=vocab,
            params=params,
            step_count=int(body["step_count"]),
            history=list(body["history"]),
            tags=tuple(body["tags"]),
        )
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    expected = {k: tuple(v) for k, v in param_shapes(ckpt.encoder).items()}
    if {k: v.shape for k, v in ckpt.params.items()} != expected:
        raise CheckpointError("parameter names or shapes do not match the encoder config")
    if ckpt.tags != TAGS:
        raise CheckpointError(f"tag set {ckpt.tags} does not match {TAGS}")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as f:
        return loads_checkpoint(f.read())
