"""Maximum-likelihood training with hand-written backpropagation through time."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import Corpus, make_batches
from .errors import ConfigError, NumericError
from .model import LanguageModel, ModelConfig, forward_batch, log_softmax

log = logging.getLogger(__name__)

# Named RNG substreams derived from the single user seed.
STREAMS = {"init": 0, "dropout": 1, "batching": 2, "sampling": 3, "generation": 4}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 1000
    keep_prob: float = 1.0
    dropout_per_step: bool = False
    sample_count: int = 0
    clip_norm: float = 5.0
    seed: int = 0
    precision: str = "float64"
    eval_interval: int = 100

    def validate(self, vocab_size: Optional[int] = None) -> "TrainConfig":
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be positive, max_steps non-negative")
        if self.sample_count < 0 or (vocab_size is not None and self.sample_count >= vocab_size):
            raise ConfigError(f"sample_count must be in [0, |V|), got {self.sample_count}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be non-negative (0 disables clipping)")
        return self

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(params: dict, cfg: ModelConfig, cache: dict, dlogits: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d logits."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    B, T, V = dlogits.shape
    d, e = cfg.hidden_dim, cfg.embed_dim
    E = params["E"]
    H, X, M = cache["H"], cache["X"], cache["M"]
    F, Ci, So = cache["F"], cache["Ci"], cache["So"]
    masks = cache["keep_masks"]
    c = cache["c"]

    flat = dlogits.reshape(-1, V)
    grads["E"] += flat.T @ cache["proj"].reshape(-1, e)
    grads["b_out"] += flat.sum(axis=0)
    dproj = dlogits @ E
    if "L" in params:
        grads["L"] += dproj.reshape(-1, e).T @ H.reshape(-1, d)
        dH = dproj @ params["L"]
    else:
        dH = dproj
    doffset = dlogits.sum(axis=1)

    W = params["W"]
    left, right = cache["left"], cache["right"]
    DG = np.empty((B, T, 3 * d), dtype=dlogits.dtype)
    DE = np.empty((B, T, e), dtype=dlogits.dtype)
    dh_next = np.zeros((B, d), dtype=dlogits.dtype)
    dm_next = np.zeros((B, d), dtype=dlogits.dtype)
    for t in range(T - 1, -1, -1):
        dh = dH[:, t] + dh_next
        tm = np.tanh(M[:, t])
        so, f, ci = So[:, t], F[:, t], Ci[:, t]
        mprev = M[:, t - 1] if t > 0 else 0.0
        keep = None if masks is None else (masks[t] if masks.ndim == 3 else masks)
        cand = ci if keep is None else ci * keep
        dm = dm_next + dh * so * (1.0 - tm * tm)
        dcand = dm * (1.0 - f)
        if keep is not None:
            dcand = dcand * keep
        dg = DG[:, t]
        dg[:, :d] = dcand * (1.0 - ci * ci)
        dg[:, d:2 * d] = dm * (mprev - cand) * f * (1.0 - f)
        dg[:, 2 * d:] = dh * tm * so * (1.0 - so)
        dm_next = dm * f
        dx = dg @ W
        if left is not None:
            rd = np.matmul(right, dg[:, :, None])              # (B, r, 1)
            dx += np.matmul(left, rd)[:, :, 0]
        DE[:, t] = dx[:, :e]
        dh_next = dx[:, e:]
    np.add.at(grads["E"], cache["inputs"].reshape(-1), DE.reshape(-1, e))

    dc = None if c is None else np.zeros_like(c)
    grads["W"] += DG.reshape(-1, 3 * d).T @ X.reshape(-1, e + d)
    if cfg.variant == "factor_cell":
        RD = np.matmul(DG, right.transpose(0, 2, 1))            # (B, T, r)
        dleft = np.matmul(X.transpose(0, 2, 1), RD)             # (B, e+d, r)
        dright = np.matmul(cache["U"].transpose(0, 2, 1), DG)   # (B, r, 3d)
        grads["Z_L"] += np.einsum("bk,bpr->kpr", c, dleft)
        grads["Z_R"] += np.einsum("brq,bk->rqk", dright, c)
        dc += np.einsum("kpr,bpr->bk", params["Z_L"], dleft)
        dc += np.einsum("rqk,brq->bk", params["Z_R"], dright)
    dbp = DG.sum(axis=1)
    grads["b"] += dbp.sum(axis=0)
    if cfg.adapts_cell:
        grads["V_bias"] += dbp.T @ c
        dc += dbp @ params["V_bias"]
    if "Q" in params:
        grads["Q"] += doffset.T @ c
        dc += doffset @ params["Q"]
    if "class_bias" in params:
        grads["class_bias"] += cache["class_w"].astype(dlogits.dtype).T @ doffset
    if cfg.uses_encoder:
        hidden, pre = cache["enc_hidden"], cache["enc_pre"]
        grads["enc_W2"] += dc.T @ hidden
        grads["enc_b2"] += dc.sum(axis=0)
        dpre = (dc @ params["enc_W2"]) * (pre > 0)
        grads["enc_W1"] += dpre.T @ cache["raw"].astype(dlogits.dtype)
        grads["enc_b1"] += dpre.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _check_loss(loss, batch_index):
    if not math.isfinite(loss):
        where = "" if batch_index is None else f" in batch {batch_index}"
        raise NumericError(f"non-finite loss{where}")


def cross_entropy_loss(params: dict, cfg: ModelConfig, batch, keep_masks=None, batch_index=None,
                       with_grads: bool = True):
    """Mean negative log-likelihood over non-pad targets, and its gradients."""
    logits, cache = forward_batch(params, cfg, batch.inputs, batch.raw_context, batch.class_w,
                                  keep_masks, keep_cache=with_grads)
    lp = log_softmax(logits)
    n = batch.mask.sum()
    tgt = batch.targets[:, :, None]
    loss = -float(np.sum(np.take_along_axis(lp, tgt, axis=2)[:, :, 0] * batch.mask) / n)
    _check_loss(loss, batch_index)
    if not with_grads:
        return loss, None
    dlogits = np.exp(lp)
    np.put_along_axis(dlogits, tgt, np.take_along_axis(dlogits, tgt, axis=2) - 1.0, axis=2)
    dlogits *= (batch.mask / n).astype(dlogits.dtype)[:, :, None]
    return loss, backward(params, cfg, cache, dlogits)


class UnigramSampler:
    """Draws negative candidates from the training unigram distribution.

    ``sample(T)`` returns a (T, m) array of ids drawn with replacement (one set
    per time step, shared across the batch). ``log_expected`` holds
    ``log(m * q_j)``, the log expected count of each word, which is subtracted
    from candidate logits. With ``exhaustive`` every id is a candidate at every
    step with expected count 1, which makes the surrogate equal the full
    softmax.
    """

    def __init__(self, proposal: np.ndarray, m: int, rng: np.random.Generator, exhaustive: bool = False):
        proposal = np.asarray(proposal, dtype=np.float64)
        total = proposal.sum()
        if not total > 0 or np.any(proposal < 0):
            raise ConfigError("unigram proposal has no probability mass")
        if m < 1:
            raise ConfigError("sampled softmax needs at least one sample")
        self.q = proposal / total
        self.m = m
        self.rng = rng
        self.exhaustive = exhaustive
        with np.errstate(divide="ignore"):
            self.log_expected = np.zeros_like(self.q) if exhaustive else np.where(
                self.q > 0, np.log(m * self.q), 0.0)

    def sample(self, T: int) -> np.ndarray:
        V = self.q.shape[0]
        if self.exhaustive:
            return np.tile(np.arange(V), (T, 1))
        return self.rng.choice(V, size=(T, self.m), replace=True, p=self.q)


def sampled_softmax_loss(params: dict, cfg: ModelConfig, batch, sampler: UnigramSampler,
                         keep_masks=None, batch_index=None):
    """Sampled-softmax surrogate of the mean NLL and its gradients.

    Per step the softmax runs over ``{target} + samples``. Sample logits get
    their log expected count subtracted and samples equal to the target are
    masked out, so the sampled denominator is an unbiased estimate of the full
    partition function.
    """
    logits, cache = forward_batch(params, cfg, batch.inputs, batch.raw_context, batch.class_w,
                                  keep_masks, keep_cache=True)
    B, T, V = logits.shape
    samples = sampler.sample(T)                                   # (T, m)
    corr = sampler.log_expected.astype(logits.dtype)
    tgt = batch.targets
    z_t = np.take_along_axis(logits, tgt[:, :, None], axis=2)[:, :, 0]
    z_s = logits[:, np.arange(T)[:, None], samples] - corr[samples][None]   # (B, T, m)
    hit = samples[None] == tgt[:, :, None]
    z_s = np.where(hit, -np.inf, z_s)
    z = np.concatenate([z_t[:, :, None], z_s], axis=2)
    lp = log_softmax(z)
    n = batch.mask.sum()
    loss = -float(np.sum(lp[:, :, 0] * batch.mask) / n)
    _check_loss(loss, batch_index)
    p = np.exp(lp)
    p[:, :, 0] -= 1.0
    p *= (batch.mask / n).astype(p.dtype)[:, :, None]
    dlogits = np.zeros_like(logits)
    bi = np.arange(B)[:, None]
    ti = np.arange(T)[None, :]
    np.add.at(dlogits, (bi, ti, tgt), p[:, :, 0])
    m = samples.shape[1]
    np.add.at(dlogits, (np.repeat(bi[:, :, None], T, 1).repeat(m, 2),
                        np.broadcast_to(ti[:, :, None], (B, T, m)),
                        np.broadcast_to(samples[None], (B, T, m))), p[:, :, 1:])
    return loss, backward(params, cfg, cache, dlogits)


def recurrent_dropout_mask(rng: np.random.Generator, keep: float, d: int, batch: int,
                           steps: Optional[int] = None, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask on the candidate update: Bernoulli(keep) / keep.

    Shape (batch, d) for one mask per sequence, or (steps, batch, d) when
    ``steps`` is given.
    """
    if not 0.0 < keep <= 1.0:
        raise ConfigError(f"keep probability must be in (0, 1], got {keep}")
    shape = (batch, d) if steps is None else (steps, batch, d)
    if keep == 1.0:
        return np.ones(shape, dtype=dtype)
    return ((rng.random(shape) < keep) / keep).astype(dtype)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grads(grads: dict, max_norm: float) -> tuple:
    """Scale ``grads`` so their global norm is at most ``max_norm`` (0 disables)."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * g.dtype.type(scale) for k, g in grads.items()}
    return grads, norm


def adam_step(params: dict, grads: dict, opt: OptimizerState, tc: TrainConfig):
    """Bias-corrected Adam update after global-norm clipping, applied in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; update skipped")
    grads, _ = clip_grads(grads, tc.clip_norm)
    opt.step += 1
    b1, b2 = tc.beta1, tc.beta2
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = grads[name]
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (tc.lr * (m / bc1) / (np.sqrt(v / bc2) + tc.adam_eps)).astype(p.dtype)
    return params, opt


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: LanguageModel
    metrics: list = field(default_factory=list)   # (step, train_loss, dev_ppl)
    best_step: int = 0
    steps: int = 0


def format_metric(step: int, loss: float, ppl: float) -> str:
    return f"{step}\t{loss:.6f}\t{ppl:.6f}"


def train(corpus: Corpus, cfg: ModelConfig, tc: TrainConfig, checkpoint_path=None,
          progress: Optional[Callable] = None, metrics_path=None, meta: Optional[dict] = None) -> TrainResult:
    """Train from a fresh initialization and keep the best-dev-perplexity parameters.

    Without a dev split the final parameters are kept. ``progress`` is called
    as ``progress(step, train_loss, dev_ppl)`` after every evaluation; the
    same numbers are appended to ``metrics_path`` as tab-separated lines.
    """
    from .checkpoint import save_checkpoint
    from .evaluation import perplexity

    cfg.vocab_size = len(corpus.vocab)
    tc.validate(cfg.vocab_size)
    model = LanguageModel.create(cfg, corpus.schema, corpus.vocab, rng=substream(tc.seed, "init"),
                                 dtype=tc.dtype)
    model.meta = {"train_config": tc.to_dict(), **(meta or {})}
    result = TrainResult(model)
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None

    def emit(step, loss, ppl):
        result.metrics.append((step, loss, ppl))
        if metrics_fh:
            metrics_fh.write(format_metric(step, loss, ppl) + "\n")
            metrics_fh.flush()
        if progress:
            progress(step, loss, ppl)

    def snapshot(m):
        return LanguageModel(m.config, {k: v.copy() for k, v in m.params.items()}, m.schema, m.vocab,
                             copy.deepcopy(m.meta))

    try:
        if tc.max_steps == 0:
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path)
            return result

        drop_rng = substream(tc.seed, "dropout")
        batch_rng = substream(tc.seed, "batching")
        sampler = None
        if tc.sample_count > 0:
            sampler = UnigramSampler(corpus.proposal, tc.sample_count, substream(tc.seed, "sampling"))
        opt = OptimizerState.zeros(model.params)
        best_ppl = math.inf
        best = snapshot(model)
        d = cfg.hidden_dim
        step = 0
        interval_losses = []
        while step < tc.max_steps:
            for batch in make_batches(corpus.train, tc.batch_size, corpus.schema, rng=batch_rng):
                step += 1
                masks = None
                if tc.keep_prob < 1.0:
                    steps = batch.inputs.shape[1] if tc.dropout_per_step else None
                    masks = recurrent_dropout_mask(drop_rng, tc.keep_prob, d, batch.size, steps, tc.dtype)
                try:
                    if sampler is None:
                        loss, grads = cross_entropy_loss(model.params, cfg, batch, masks, step)
                    else:
                        loss, grads = sampled_softmax_loss(model.params, cfg, batch, sampler, masks, step)
                    adam_step(model.params, grads, opt, tc)
                except NumericError:
                    if checkpoint_path:
                        save_checkpoint(best, checkpoint_path)
                    raise
                interval_losses.append(loss)
                if step % tc.eval_interval == 0 or step == tc.max_steps:
                    train_loss = float(np.mean(interval_losses))
                    interval_losses = []
                    dev_ppl = perplexity(model, corpus.dev).perplexity if corpus.dev else math.nan
                    emit(step, train_loss, dev_ppl)
                    if not corpus.dev or dev_ppl < best_ppl:
                        best_ppl = dev_ppl
                        best = snapshot(model)
                        best.meta["step"] = step
                        result.best_step = step
                        if checkpoint_path:
                            save_checkpoint(best, checkpoint_path)
                if step >= tc.max_steps:
                    break
        result.model = best
        result.steps = step
        return result
    finally:
        if metrics_fh:
            metrics_fh.close()
