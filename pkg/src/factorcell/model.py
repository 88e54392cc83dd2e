"""Context-adapted coupled-gate LSTM language models.

Four variants share one code path:

* ``unadapted``     plain LSTM language model, context ignored
* ``softmax_bias``  context shifts only the output bias (projected ``Q c`` or a per-class table)
* ``concat_cell``   additionally adds ``V c`` to the recurrent gate bias
* ``factor_cell``   additionally adds the rank-``r`` matrix ``A(c)`` to the recurrent weights

The recurrent weights ``W`` have shape ``(3d, e+d)`` with gate rows ordered
``[i, f, o]``. ``Z_L`` is ``(k, e+d, r)`` and ``Z_R`` is ``(r, 3d, k)``, so the
mode products give an ``(e+d, r)`` and an ``(r, 3d)`` factor whose product is
transposed into the ``(3d, e+d)`` weight layout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor_core as tc
from .context import ContextEncoder, ContextSchema, class_weights, embed_batch, embed_context, encode_raw
from .errors import CapabilityError, ConfigError, DimensionError, NumericError, VocabError

VARIANTS = ("unadapted", "softmax_bias", "concat_cell", "factor_cell")
BIAS_MODES = ("off", "projected", "one_hot")
GATE_ORDER = ("i", "f", "o")
FORGET_SHIFT = 1.0


@dataclass
class ModelConfig:
    variant: str = "factor_cell"
    vocab_size: int = 0
    embed_dim: int = 32
    hidden_dim: int = 32
    context_dim: int = 4
    rank: int = 2
    bias_mode: str = "projected"
    unit: str = "word"
    encoder_hidden: int = 0  # 0 means 2 * context_dim
    one_hot_max: int = 64

    @property
    def uses_encoder(self) -> bool:
        return self.variant in ("concat_cell", "factor_cell") or (
            self.variant == "softmax_bias" and self.bias_mode == "projected")

    @property
    def adapts_cell(self) -> bool:
        return self.variant in ("concat_cell", "factor_cell")

    @property
    def enc_hidden(self) -> int:
        return self.encoder_hidden or 2 * self.context_dim

    def validate(self, schema: Optional[ContextSchema] = None) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.bias_mode not in BIAS_MODES:
            raise ConfigError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")
        if self.unit not in ("word", "character"):
            raise ConfigError(f"unit must be 'word' or 'character', got {self.unit!r}")
        if (self.rank >= 1) != (self.variant == "factor_cell"):
            raise ConfigError(f"rank must be >= 1 exactly when variant is factor_cell "
                              f"(variant={self.variant}, rank={self.rank})")
        if self.variant == "unadapted" and self.bias_mode != "off":
            raise ConfigError("the unadapted variant requires bias_mode = off")
        if self.variant == "softmax_bias" and self.bias_mode == "off":
            raise ConfigError("the softmax_bias variant needs bias_mode projected or one_hot")
        for name in ("vocab_size", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.uses_encoder and self.context_dim < 1:
            raise ConfigError("context_dim must be positive for adapted variants")
        if schema is not None:
            if self.variant != "unadapted" and len(schema) == 0:
                raise ConfigError(f"variant {self.variant} needs at least one context variable")
            if self.bias_mode == "one_hot":
                if not schema.all_categorical:
                    raise ConfigError("one_hot bias mode needs all context variables to be categorical")
                if schema.n_classes > self.one_hot_max:
                    raise ConfigError(f"one_hot bias mode: {schema.n_classes} context classes exceeds "
                                      f"one_hot_max={self.one_hot_max}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def param_shapes(cfg: ModelConfig, schema: ContextSchema) -> dict:
    """Name -> shape of every learnable array the configuration owns."""
    V, e, d, k, r = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.context_dim, cfg.rank
    shapes = {"E": (V, e)}
    if e != d:
        shapes["L"] = (e, d)
    shapes["W"] = (3 * d, e + d)
    shapes["b"] = (3 * d,)
    shapes["b_out"] = (V,)
    if cfg.uses_encoder:
        H = cfg.enc_hidden
        shapes.update(enc_W1=(H, schema.raw_width), enc_b1=(H,), enc_W2=(k, H), enc_b2=(k,))
    if cfg.adapts_cell:
        shapes["V_bias"] = (3 * d, k)
    if cfg.variant == "factor_cell":
        shapes["Z_L"] = (k, e + d, r)
        shapes["Z_R"] = (r, 3 * d, k)
    if cfg.variant != "unadapted":
        if cfg.bias_mode == "projected":
            shapes["Q"] = (V, k)
        elif cfg.bias_mode == "one_hot":
            shapes["class_bias"] = (schema.n_classes, V)
    return shapes


def _glorot(rng, shape, scale=1.0):
    fan_out, fan_in = shape[-2], shape[-1]
    s = scale * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def init_params(cfg: ModelConfig, schema: ContextSchema, rng: np.random.Generator,
                dtype=np.float64) -> dict:
    """Glorot-uniform matrices, zero biases, adaptation bases at a tenth of the Glorot scale."""
    params = {}
    for name, shape in param_shapes(cfg, schema).items():
        if len(shape) == 1 or name in ("class_bias", "Q"):
            arr = np.zeros(shape)
        elif name in ("Z_L", "Z_R"):
            arr = _glorot(rng, shape, 0.1)
        else:
            arr = _glorot(rng, shape)
        params[name] = np.ascontiguousarray(arr, dtype=dtype)
    return params


@dataclass
class AdaptedCell:
    W: np.ndarray
    b: np.ndarray
    offset: np.ndarray
    c: Optional[np.ndarray] = None


@dataclass
class CellState:
    h: np.ndarray
    m: np.ndarray

    @classmethod
    def zeros(cls, d, dtype=np.float64):
        return cls(np.zeros(d, dtype=dtype), np.zeros(d, dtype=dtype))


def sigmoid(x):
    # tanh form never overflows for large |x|.
    return 0.5 * np.tanh(0.5 * x) + 0.5


def log_softmax(z, axis=-1):
    mx = np.max(z, axis=axis, keepdims=True)
    shifted = z - mx
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def compute_adaptation(c: np.ndarray, Z_L: np.ndarray, Z_R: np.ndarray) -> np.ndarray:
    """Rank-``r`` weight adaptation ``A(c)`` in the ``(3d, e+d)`` layout."""
    left = tc.mode1_product(c, Z_L)    # (e+d, r)
    right = tc.mode3_product(Z_R, c)   # (r, 3d)
    return tc.matmul(left, right).T.copy()


def context_embedding(params, cfg: ModelConfig, schema: ContextSchema, value) -> Optional[np.ndarray]:
    if not cfg.uses_encoder:
        return None
    raw = encode_raw(schema, value).astype(params["enc_W1"].dtype)
    return embed_context(ContextEncoder.from_params(params), raw)


def softmax_offset(params, cfg: ModelConfig, schema: ContextSchema, value, c=None) -> np.ndarray:
    if cfg.variant == "unadapted" or cfg.bias_mode == "off":
        return np.zeros(cfg.vocab_size, dtype=params["b_out"].dtype)
    if cfg.bias_mode == "projected":
        if c is None:
            c = context_embedding(params, cfg, schema, value)
        return params["Q"] @ c
    w = class_weights(schema, value).astype(params["class_bias"].dtype)
    return w @ params["class_bias"]


def adapt(params, cfg: ModelConfig, schema: ContextSchema, value) -> AdaptedCell:
    """Precompute the context-specific recurrent weights, gate bias and softmax offset."""
    c = context_embedding(params, cfg, schema, value)
    W, b = params["W"], params["b"]
    if cfg.variant == "factor_cell":
        W = W + compute_adaptation(c, params["Z_L"], params["Z_R"])
    if cfg.adapts_cell:
        b = b + params["V_bias"] @ c
    return AdaptedCell(W, b, softmax_offset(params, cfg, schema, value, c), c)


def cell_step(cell: AdaptedCell, w_emb: np.ndarray, state: CellState, keep_mask=None,
              step: Optional[int] = None) -> CellState:
    """One coupled-gate LSTM step.

    ``keep_mask`` (inverted-dropout scale per unit) multiplies ``tanh(i)``
    before the memory update; ``None`` is the evaluation path.
    """
    d = state.h.shape[0]
    x = np.concatenate([w_emb, state.h])
    if cell.W.shape != (3 * d, x.shape[0]):
        raise DimensionError(f"cell weights {cell.W.shape} do not fit input {x.shape[0]} and state {d}")
    g = cell.W @ x + cell.b
    i, f, o = g[:d], g[d:2 * d], g[2 * d:]
    f = sigmoid(f + FORGET_SHIFT)
    cand = np.tanh(i)
    if keep_mask is not None:
        cand = cand * keep_mask
    m = state.m * f + (1.0 - f) * cand
    h = np.tanh(m) * sigmoid(o)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(m))):
        where = "" if step is None else f" at time step {step}"
        raise NumericError(f"non-finite cell state{where}")
    return CellState(h, m)


def output_logits(params, cfg: ModelConfig, cell: AdaptedCell, h: np.ndarray) -> np.ndarray:
    if h.shape != (cfg.hidden_dim,):
        raise DimensionError(f"hidden state shape {h.shape} != ({cfg.hidden_dim},)")
    proj = params["L"] @ h if "L" in params else h
    return params["E"] @ proj + params["b_out"] + cell.offset


@dataclass
class LanguageModel:
    """Configuration, parameters, context schema and vocabulary bundled together."""

    config: ModelConfig
    params: dict
    schema: ContextSchema
    vocab: object = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, schema: ContextSchema, vocab=None, seed: int = 0,
               dtype=np.float64, rng=None) -> "LanguageModel":
        if vocab is not None and config.vocab_size != len(vocab):
            config.vocab_size = len(vocab)
        config.validate(schema)
        if rng is None:
            rng = np.random.default_rng(seed)
        return cls(config, init_params(config, schema, rng, dtype), schema, vocab)

    @property
    def dtype(self):
        return self.params["W"].dtype

    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def context(self, mapping) -> tuple:
        return self.schema.value(mapping)

    def adapt(self, value) -> AdaptedCell:
        return adapt(self.params, self.config, self.schema, value)

    def embed(self, token_id: int) -> np.ndarray:
        if not 0 <= token_id < self.config.vocab_size:
            raise VocabError(f"token id {token_id} outside vocabulary of size {self.config.vocab_size}")
        return self.params["E"][token_id]

    def token_logprobs(self, value, tokens, recompute: bool = False) -> np.ndarray:
        """log p(tokens[t] | tokens[:t], context) for t = 1..len-1.

        With ``recompute`` the adapted cell is rebuilt before every step
        instead of once per sequence.
        """
        tokens = list(tokens)
        if not tokens:
            raise ValueError("empty token sequence")
        for t in tokens:
            if not 0 <= t < self.config.vocab_size:
                raise VocabError(f"token id {t} outside vocabulary of size {self.config.vocab_size}")
        cell = self.adapt(value)
        state = CellState.zeros(self.config.hidden_dim, self.dtype)
        out = np.zeros(len(tokens) - 1)
        for t in range(len(tokens) - 1):
            if recompute:
                cell = self.adapt(value)
            state = cell_step(cell, self.embed(tokens[t]), state, step=t)
            logits = output_logits(self.params, self.config, cell, state.h)
            out[t] = log_softmax(logits)[tokens[t + 1]]
        return out

    def sequence_logprob(self, value, tokens, recompute: bool = False) -> float:
        return float(math.fsum(self.token_logprobs(value, tokens, recompute)))

    def astype(self, dtype) -> "LanguageModel":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return LanguageModel(self.config, params, self.schema, self.vocab, dict(self.meta))


# ---------------------------------------------------------------------------
# Batched forward pass shared by training and evaluation.
# ---------------------------------------------------------------------------

def batch_context(params, cfg: ModelConfig, raw: np.ndarray):
    """Context embeddings for a batch of raw context rows, plus encoder activations."""
    if not cfg.uses_encoder:
        return None, None, None
    enc = ContextEncoder.from_params(params)
    return embed_batch(enc, raw.astype(params["enc_W1"].dtype))


def forward_batch(params, cfg: ModelConfig, inputs: np.ndarray, raw_context: np.ndarray,
                  class_w: np.ndarray, keep_masks=None, keep_cache: bool = False):
    """Logits of shape (B, T, V) for right-padded ``inputs``.

    ``keep_masks`` is either ``None``, a (B, d) per-sequence mask, or a
    (T, B, d) per-step mask. Returns ``(logits, cache)``; the cache is ``None``
    unless ``keep_cache``.
    """
    dtype = params["W"].dtype
    B, T = inputs.shape
    d, e = cfg.hidden_dim, cfg.embed_dim
    E = params["E"]
    c, enc_pre, enc_hidden = batch_context(params, cfg, raw_context)

    # The low-rank term is applied in factored form, (x . left) . right, so the
    # batch never materializes a per-sequence W'.
    if cfg.variant == "factor_cell":
        left = np.einsum("bk,kpr->bpr", c, params["Z_L"])
        right = np.einsum("rqk,bk->brq", params["Z_R"], c)
    else:
        left = right = None
    W = params["W"]
    if cfg.adapts_cell:
        bp = params["b"][None] + c @ params["V_bias"].T
    else:
        bp = np.broadcast_to(params["b"], (B, 3 * d))

    if cfg.variant == "unadapted" or cfg.bias_mode == "off":
        offset = None
    elif cfg.bias_mode == "projected":
        offset = c @ params["Q"].T
    else:
        offset = class_w.astype(dtype) @ params["class_bias"]

    h = np.zeros((B, d), dtype=dtype)
    m = np.zeros((B, d), dtype=dtype)
    X = np.empty((B, T, e + d), dtype=dtype)
    H = np.empty((B, T, d), dtype=dtype)
    U = np.empty((B, T, cfg.rank), dtype=dtype) if left is not None else None
    if keep_cache:
        M = np.empty((B, T, d), dtype=dtype)
        Fg = np.empty((B, T, d), dtype=dtype)
        Ci = np.empty((B, T, d), dtype=dtype)
        So = np.empty((B, T, d), dtype=dtype)
    for t in range(T):
        x = X[:, t]
        x[:, :e] = E[inputs[:, t]]
        x[:, e:] = h
        g = x @ W.T + bp
        if left is not None:
            u = np.matmul(x[:, None, :], left)[:, 0, :]
            U[:, t] = u
            g += np.matmul(u[:, None, :], right)[:, 0, :]
        f = sigmoid(g[:, d:2 * d] + FORGET_SHIFT)
        ci = np.tanh(g[:, :d])
        cand = ci
        if keep_masks is not None:
            cand = ci * (keep_masks[t] if keep_masks.ndim == 3 else keep_masks)
        m = m * f + (1.0 - f) * cand
        so = sigmoid(g[:, 2 * d:])
        tm = np.tanh(m)
        h = tm * so
        H[:, t] = h
        if keep_cache:
            M[:, t] = m
            Fg[:, t] = f
            Ci[:, t] = ci
            So[:, t] = so
    proj = H @ params["L"].T if "L" in params else H
    logits = proj @ E.T + params["b_out"]
    if offset is not None:
        logits = logits + offset[:, None, :]
    if not np.all(np.isfinite(logits)):
        bad = int(np.argwhere(~np.isfinite(logits))[0][1])
        raise NumericError(f"non-finite logits at time step {bad}")
    cache = None
    if keep_cache:
        cache = dict(inputs=inputs, raw=raw_context, class_w=class_w, c=c, enc_pre=enc_pre,
                     enc_hidden=enc_hidden, left=left, right=right, U=U, X=X, H=H, M=M, F=Fg,
                     Ci=Ci, So=So, proj=proj, keep_masks=keep_masks)
    return logits, cache


def batch_token_logprobs(model: LanguageModel, batch) -> np.ndarray:
    """(B, T) log-probabilities of each target; zero on padded positions."""
    logits, _ = forward_batch(model.params, model.config, batch.inputs, batch.raw_context, batch.class_w)
    lp = log_softmax(logits)
    picked = np.take_along_axis(lp, batch.targets[:, :, None], axis=2)[:, :, 0]
    return np.where(batch.mask > 0, picked, 0.0)
