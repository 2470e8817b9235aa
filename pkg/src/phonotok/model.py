"""Encoder -> DiffKM -> {CTC recognition head, speaker-conditioned decoder}."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .diffkm import DiffKmConfig, quantize
from .errors import ConfigError, DimensionError, InfeasibleTargetError

GROUPS = ("encoder", "asr", "decoder")


@dataclass
class ModelConfig:
    d: int = 32
    hidden: int = 64
    d_z: int = 16
    v_c: int = 12
    d_s: int = 8
    k: int = 16

    def validate(self):
        for name in ("d", "hidden", "d_z", "v_c", "d_s", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        return self

    @property
    def n_logits(self):
        return self.v_c + 1

    @property
    def blank(self):
        return self.v_c


@dataclass
class LossReport:
    l_asr: float
    l_voc: float
    l_total: float
    alpha: float

    def identity_error(self):
        return abs(self.l_total - ((1.0 - self.alpha) * self.l_asr + self.alpha * self.l_voc))


def _dense(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


class TokenizerModel:
    """Parameter container for the three trainable groups.

    ``params`` maps ``"<group>.<name>"`` to a leaf :class:`Tensor`; the
    codebook lives outside, in a :class:`~phonotok.diffkm.Codebook`.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed=0):
        c = config.validate()
        rng = np.random.default_rng([seed, 7])
        arrays = {
            "encoder.w1": _dense(rng, c.d, c.hidden),
            "encoder.b1": np.zeros(c.hidden),
            "encoder.w2": _dense(rng, c.hidden, c.d_z),
            "encoder.b2": np.zeros(c.d_z),
            "asr.w1": _dense(rng, c.d_z, c.hidden),
            "asr.b1": np.zeros(c.hidden),
            "asr.w2": _dense(rng, c.hidden, c.n_logits),
            "asr.b2": np.zeros(c.n_logits),
            "decoder.w1": _dense(rng, c.d_z + c.d_s, c.hidden),
            "decoder.b1": np.zeros(c.hidden),
            "decoder.w2": _dense(rng, c.hidden, c.d),
            "decoder.b2": np.zeros(c.d),
        }
        return cls(c, {k: gc.Tensor(v, True, name=k) for k, v in arrays.items()})

    def group(self, name):
        return {k: v for k, v in self.params.items() if k.startswith(name + ".")}

    def p(self, key):
        return self.params[key]

    def copy(self):
        return TokenizerModel(
            self.config,
            {k: gc.Tensor(v.data.copy(), v.requires_grad, name=k) for k, v in self.params.items()},
        )


def _mlp(x, w1, b1, w2, b2):
    h = gc.tanh(gc.add_row(gc.matmul(x, w1), b1))
    return gc.add_row(gc.matmul(h, w2), b2)


def encode(x, model):
    x = gc.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != model.config.d:
        raise DimensionError(f"encode: expected (T, {model.config.d}) features, got {x.shape}")
    p = model.p
    return _mlp(x, p("encoder.w1"), p("encoder.b1"), p("encoder.w2"), p("encoder.b2"))


def asr_logits(q, model):
    p = model.p
    return _mlp(q, p("asr.w1"), p("asr.b1"), p("asr.w2"), p("asr.b2"))


def decode_features(q, spk, model):
    """Reconstruct features from quantized frames and per-frame speaker rows."""
    p = model.p
    inp = gc.concat_cols(q, spk)
    return _mlp(inp, p("decoder.w1"), p("decoder.b1"), p("decoder.w2"), p("decoder.b2"))


# ---------------------------------------------------------------------------
# CTC


def min_ctc_frames(target):
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def _ctc_prepare(lengths, targets, blank):
    batch = len(targets)
    # at least 3 states so the two-step shifts below are always defined
    s_max = max(3, 2 * max((len(t) for t in targets), default=0) + 1)
    ext = np.full((batch, s_max), blank, dtype=np.int64)
    valid = np.zeros((batch, s_max), dtype=bool)
    skip = np.zeros((batch, s_max), dtype=bool)
    for b, tgt in enumerate(targets):
        n = 2 * len(tgt) + 1
        ext[b, 1:n:2] = tgt
        valid[b, :n] = True
        for s in range(3, n, 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    return ext, valid, skip


def _ctc_fwd(logprobs, offsets, targets, blank):
    lengths = np.diff(offsets)
    batch, t_max = len(targets), int(lengths.max())
    n_cls = logprobs.shape[1]
    ext, valid, skip = _ctc_prepare(lengths, targets, blank)
    s_max = ext.shape[1]
    s_len = np.array([2 * len(t) + 1 for t in targets])

    lp = np.zeros((batch, t_max, n_cls))
    for b in range(batch):
        lp[b, : lengths[b]] = logprobs[offsets[b]: offsets[b + 1]]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (batch, t_max, s_max)), axis=2)
    emit = np.where(valid[:, None, :], emit, -np.inf)

    neg = np.full((batch, 1), -np.inf)
    neg2 = np.full((batch, 2), -np.inf)
    alpha = np.full((batch, t_max, s_max), -np.inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        shift1 = np.concatenate([neg, prev[:, :-1]], axis=1)
        shift2 = np.where(skip, np.concatenate([neg2, prev[:, :-2]], axis=1), -np.inf)
        alpha[:, t] = emit[:, t] + _lse3(prev, shift1, shift2)

    beta = np.full((batch, t_max, s_max), -np.inf)
    rows = np.arange(batch)
    skip_next = np.concatenate([skip[:, 2:], np.zeros((batch, 2), dtype=bool)], axis=1)
    for t in range(t_max - 1, -1, -1):
        if t < t_max - 1:
            nxt = beta[:, t + 1]
            shift1 = np.concatenate([nxt[:, 1:], neg], axis=1)
            shift2 = np.where(skip_next, np.concatenate([nxt[:, 2:], neg2], axis=1), -np.inf)
            beta[:, t] = emit[:, t] + _lse3(nxt, shift1, shift2)
        ends = lengths - 1 == t
        if ends.any():
            b_idx = rows[ends]
            beta[b_idx, t] = -np.inf
            last = s_len[b_idx] - 1
            beta[b_idx, t, last] = emit[b_idx, t, last]
            two = last >= 1
            beta[b_idx[two], t, last[two] - 1] = emit[b_idx[two], t, last[two] - 1]

    last = s_len - 1
    end_a = alpha[rows, lengths - 1, last]
    end_b = np.where(last >= 1, alpha[rows, lengths - 1, np.maximum(last - 1, 0)], -np.inf)
    logp = np.logaddexp(end_a, end_b)
    return -logp, (alpha, beta, emit, ext, valid, logp)


def _ctc_bwd(g, saved, logprobs, offsets, targets, blank):
    alpha, beta, emit, ext, valid, logp = saved
    lengths = np.diff(offsets)
    batch, t_max, s_max = alpha.shape
    n_cls = logprobs.shape[1]
    with np.errstate(invalid="ignore"):
        occ = alpha + beta - emit - logp[:, None, None]
    post = np.where(np.isfinite(occ), np.exp(np.where(np.isfinite(occ), occ, 0.0)), 0.0)
    onehot = (ext[:, :, None] == np.arange(n_cls)[None, None, :]) & valid[:, :, None]
    grad_pad = -np.einsum("bts,bsc->btc", post, onehot.astype(np.float64)) * g[:, None, None]
    grad = np.zeros_like(logprobs)
    for b in range(batch):
        grad[offsets[b]: offsets[b + 1]] = grad_pad[b, : lengths[b]]
    return (grad,)


def ctc_nll(logprobs, offsets, targets, blank):
    """Per-utterance CTC negative log-likelihood from frame log-probabilities.

    ``logprobs`` stacks all utterances' frames (N×C); utterance b owns rows
    ``offsets[b]:offsets[b+1]``. Returns a length-B tensor.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    targets = [np.asarray(t, dtype=np.int64) for t in targets]
    lengths = np.diff(offsets)
    if len(lengths) != len(targets):
        raise DimensionError(f"ctc: {len(lengths)} segments but {len(targets)} targets")
    for b, (n, tgt) in enumerate(zip(lengths, targets)):
        if n < 1:
            raise DimensionError(f"ctc: utterance {b} has no frames")
        if np.any(tgt == blank) or np.any(tgt < 0) or np.any(tgt >= gc.as_tensor(logprobs).shape[1]):
            raise DimensionError(f"ctc: target {b} contains the blank index or an out-of-range label")
        need = min_ctc_frames(tgt)
        if need > n:
            raise InfeasibleTargetError(f"ctc: target {b} needs {need} frames, only {n} available")
    return gc.apply_op("ctc_nll", _ctc_fwd, _ctc_bwd, (logprobs,), offsets=offsets, targets=targets, blank=blank)


def ctc_loss(logits, target, blank=None):
    """CTC loss of one utterance; blank defaults to the last logit index."""
    logits = gc.as_tensor(logits)
    blank = logits.shape[1] - 1 if blank is None else blank
    lp = gc.log_softmax_rows(logits)
    return gc.sum_all(ctc_nll(lp, [0, logits.shape[0]], [target], blank))


def ctc_greedy_decode(logits, blank=None):
    logits = np.asarray(gc.as_tensor(logits).data)
    blank = logits.shape[1] - 1 if blank is None else blank
    best = np.argmax(logits, axis=1)
    out = []
    prev = None
    for k in best:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def recon_loss(x_hat, x):
    x_hat, x = gc.as_tensor(x_hat), gc.as_tensor(x)
    if x_hat.shape != x.shape:
        raise DimensionError(f"recon_loss: shapes differ, {x_hat.shape} vs {x.shape}")
    return gc.mean_all(gc.square(gc.sub(x_hat, x)))


# ---------------------------------------------------------------------------
# full objective


@dataclass
class BatchOutput:
    report: LossReport
    total: gc.Tensor
    objective: gc.Tensor
    quantized: gc.Tensor
    asr_input: gc.Tensor
    decoder_input: gc.Tensor
    hard_ids: np.ndarray


def stack_batch(sequences):
    feats = np.concatenate([s.features for s in sequences], axis=0)
    offsets = np.concatenate([[0], np.cumsum([s.n_frames for s in sequences])])
    spk = np.concatenate(
        [np.repeat(s.factors.speaker_vector[None, :], s.n_frames, axis=0) for s in sequences], axis=0
    )
    targets = [s.factors.content_labels for s in sequences]
    return feats, offsets, spk, targets


def forward_batch(sequences, model, codebook, alpha, km_config=None, tau=None, mode="train"):
    """Shared forward pass for a list of utterances.

    ``l_asr`` is the mean per-utterance CTC loss and ``l_voc`` the MSE over
    all frames. At ``alpha`` 0 or 1 the zero-weighted head is fed a detached
    copy of the tokens and its loss is added to ``objective`` only, so it
    still trains without sending gradient into the encoder or codebook.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    km_config = km_config or DiffKmConfig()
    feats, offsets, spk, targets = stack_batch(sequences)
    x = gc.Tensor(feats)
    z = encode(x, model)
    q, assign = quantize(z, codebook, km_config, mode=mode, tau=tau)

    asr_in = gc.detach(q) if alpha == 1.0 else q
    voc_in = gc.detach(q) if alpha == 0.0 else q

    lp = gc.log_softmax_rows(asr_logits(asr_in, model))
    per_utt = ctc_nll(lp, offsets, targets, model.config.blank)
    l_asr = gc.scale(gc.sum_all(per_utt), 1.0 / len(sequences))
    l_voc = recon_loss(decode_features(voc_in, gc.Tensor(spk), model), x)
    total = gc.add(gc.scale(l_asr, 1.0 - alpha), gc.scale(l_voc, alpha))

    objective = total
    if alpha == 0.0:
        objective = gc.add(total, l_voc)
    elif alpha == 1.0:
        objective = gc.add(total, l_asr)
    report = LossReport(l_asr.item(), l_voc.item(), total.item(), float(alpha))
    return BatchOutput(report, total, objective, q, asr_in, voc_in, assign.hard_ids)


def total_loss(x, model, codebook, alpha, km_config=None, tau=None):
    """LossReport for one utterance or a list of utterances (train-mode quantization)."""
    seqs = x if isinstance(x, (list, tuple)) else [x]
    with gc.no_grad():
        return forward_batch(seqs, model, codebook, alpha, km_config, tau).report
