"""Two-stage training with parameter freezing, Adam and binary checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .diffkm import Codebook, DiffKmConfig, codebook_stats, init_codebook_lloyd, quantize
from .errors import CheckpointError, ConfigError, TrainingAbort
from .metrics import levenshtein
from .model import LossReport, TokenizerModel, asr_logits, ctc_greedy_decode, encode, forward_batch

log = logging.getLogger(__name__)

STAGE_FREEZE = {1: ("encoder", "codebook"), 2: ()}


@dataclass
class TrainConfig:
    alpha: float = 0.1
    stage1_epochs: int = 15
    stage2_epochs: int = 30
    stage1_lr: float = 1e-3
    stage2_lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    init_fraction: float = 0.1
    lloyd_max_iters: int = 100
    stage1_freeze: tuple = STAGE_FREEZE[1]
    stage2_freeze: tuple = STAGE_FREEZE[2]

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"train.alpha must lie in [0, 1], got {self.alpha}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not (self.stage1_lr > 0 and self.stage2_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0 < self.init_fraction <= 1:
            raise ConfigError("train.init_fraction must lie in (0, 1]")
        return self

    def freeze_list(self, stage):
        return tuple(self.stage1_freeze if stage == 1 else self.stage2_freeze)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, frozen=()):
    """In-place Adam update with bias correction.

    ``params``/``grads`` are dicts keyed by parameter path; entries named in
    ``frozen`` (or whose grad is None) are left untouched.
    """
    if not lr > 0:
        raise ConfigError("learning rate must be positive")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient in {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if name in frozen or g is None:
            continue
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None)))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        grads = {k: (None if g is None else g * factor) for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    model: TokenizerModel
    codebook: Codebook
    optimizer: AdamState
    rng: np.random.Generator
    stage: int = 1
    epoch: int = 0  # epochs completed within the current stage

    def named_parameters(self):
        out = dict(self.model.params)
        out["codebook"] = self.codebook.centroids
        return out


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    tau: float
    train: LossReport
    dev: LossReport
    dev_uer: float
    utilization: float
    perplexity: float


@dataclass
class History:
    steps: list = field(default_factory=list)  # (stage, epoch, batch, LossReport)
    epochs: list = field(default_factory=list)


def _trainable(name, frozen):
    group = "codebook" if name == "codebook" else name.split(".", 1)[0]
    return group not in frozen


def stage_tau(km_config, stage, step, total_steps):
    if stage == 1:
        return km_config.tau
    return km_config.tau_at(step, total_steps)


def lloyd_subset(train, fraction, seed):
    n = max(1, int(round(len(train) * fraction)))
    idx = np.sort(np.random.default_rng([seed, 11]).permutation(len(train))[:n])
    return [train[i] for i in idx]


def initialize(train, model_config, cfg: TrainConfig, km_config: DiffKmConfig):
    """Seeded model init and Lloyd codebook init on encoded subset features."""
    model = TokenizerModel.init(model_config, seed=cfg.seed)
    subset = lloyd_subset(train, cfg.init_fraction, cfg.seed)
    with gc.no_grad():
        z = encode(np.concatenate([s.features for s in subset]), model).data
    codebook, _ = init_codebook_lloyd(z, model_config.k, seed=cfg.seed, max_iters=cfg.lloyd_max_iters)
    rng = np.random.default_rng([cfg.seed, 13])
    return TrainState(model, codebook, AdamState(), rng)


def evaluate_split(seqs, model, codebook, alpha, km_config, batch_size=64):
    """Infer-mode losses, unit error rate and codebook stats on a split."""
    if not seqs:
        return LossReport(0.0, 0.0, 0.0, alpha), float("nan"), 0.0, 0.0
    totals = np.zeros(2)
    frames = 0
    errors = refs = 0
    ids = []
    with gc.no_grad():
        for start in range(0, len(seqs), batch_size):
            batch = seqs[start:start + batch_size]
            out = forward_batch(batch, model, codebook, alpha, km_config, mode="infer")
            r = out.report
            totals[0] += r.l_asr * len(batch)
            f = sum(s.n_frames for s in batch)
            totals[1] += r.l_voc * f
            frames += f
            logits = asr_logits(out.asr_input, model).data
            off = 0
            for s in batch:
                hyp = ctc_greedy_decode(logits[off:off + s.n_frames])
                errors += levenshtein(hyp, list(s.factors.content_labels))
                refs += len(s.factors.content_labels)
                off += s.n_frames
            ids.append(out.hard_ids)
    l_asr = totals[0] / len(seqs)
    l_voc = totals[1] / frames
    report = LossReport(l_asr, l_voc, (1.0 - alpha) * l_asr + alpha * l_voc, alpha)
    stats = codebook_stats(np.concatenate(ids), codebook.k)
    return report, errors / max(refs, 1), stats.utilization, stats.perplexity


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(train_set, dev_set, state: TrainState, cfg: TrainConfig, km_config: DiffKmConfig,
          history=None, stop_after=None, on_epoch=None):
    """Run (or resume) the two-stage schedule.

    ``state.stage``/``state.epoch`` say where to resume. ``stop_after`` limits
    the number of epochs run in this call. Returns ``(state, history)``.
    """
    cfg.validate()
    km_config.validate()
    history = history or History()
    epochs = {1: cfg.stage1_epochs, 2: cfg.stage2_epochs}
    lrs = {1: cfg.stage1_lr, 2: cfg.stage2_lr}
    steps_per_epoch = -(-len(train_set) // cfg.batch_size)
    ran = 0
    for stage in (1, 2):
        if stage < state.stage:
            continue
        if stage > state.stage:
            state.stage, state.epoch = stage, 0
            state.optimizer = AdamState()
        frozen = cfg.freeze_list(stage)
        params = state.named_parameters()
        for name, p in params.items():
            p.requires_grad = _trainable(name, frozen)
        total_steps = epochs[stage] * steps_per_epoch
        while state.epoch < epochs[stage]:
            if stop_after is not None and ran >= stop_after:
                return state, history
            epoch = state.epoch
            sums = np.zeros(3)
            tau = km_config.tau
            for b, idx in enumerate(_batches(len(train_set), cfg.batch_size, state.rng)):
                tau = stage_tau(km_config, stage, epoch * steps_per_epoch + b, total_steps)
                batch = [train_set[i] for i in idx]
                for p in params.values():
                    p.zero_grad()
                with gc.Graph() as graph:
                    out = forward_batch(batch, state.model, state.codebook, cfg.alpha, km_config, tau=tau)
                r = out.report
                if not np.isfinite(out.objective.item()):
                    raise TrainingAbort(f"non-finite loss at stage {stage} epoch {epoch} batch {b}", epoch, b)
                gc.backward(graph, out.objective)
                grads = {k: p.grad for k, p in params.items() if p.requires_grad}
                grads, _ = clip_global_norm(grads, cfg.clip_norm)
                try:
                    adam_step(params, grads, state.optimizer, lrs[stage], cfg.beta1, cfg.beta2, cfg.eps, frozen)
                except TrainingAbort as exc:
                    raise TrainingAbort(f"{exc} (stage {stage} epoch {epoch} batch {b})", epoch, b) from None
                history.steps.append((stage, epoch, b, r))
                sums += (r.l_asr, r.l_voc, r.l_total)
            mean = sums / steps_per_epoch
            train_report = LossReport(mean[0], mean[1], mean[2], cfg.alpha)
            dev_report, uer, util, ppl = evaluate_split(dev_set, state.model, state.codebook, cfg.alpha, km_config)
            rec = EpochRecord(stage, epoch, tau, train_report, dev_report, uer, util, ppl)
            history.epochs.append(rec)
            log.info("stage %d epoch %d: l_total=%.4f dev_total=%.4f uer=%.3f util=%.2f",
                     stage, epoch, mean[2], dev_report.l_total, uer, util)
            state.epoch += 1
            ran += 1
            if on_epoch is not None:
                on_epoch(state, history)
    for p in state.named_parameters().values():
        p.requires_grad = True
        p.zero_grad()
    return state, history


# ---------------------------------------------------------------------------
# checkpoint container
#
#   b"PHTK" | u32 format version | 32-byte config hash
#   u32 tensor count, then per tensor:
#       u32 name length | utf-8 name | u32 ndim | ndim x u64 dims | float64 LE data
#   u32 rng-state length | utf-8 JSON of the numpy bit generator state
#   u64 checksum (blake2b-64 of every preceding byte)

MAGIC = b"PHTK"
CHECKPOINT_VERSION = 1


def _checksum(blob):
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def state_tensors(state: TrainState):
    out = {f"param.{k}": v.data for k, v in state.named_parameters().items()}
    for k, v in sorted(state.optimizer.m.items()):
        out[f"adam.m.{k}"] = v
    for k, v in sorted(state.optimizer.v.items()):
        out[f"adam.v.{k}"] = v
    out["meta.adam_t"] = np.array([float(state.optimizer.t)])
    out["meta.stage"] = np.array([float(state.stage)])
    out["meta.epoch"] = np.array([float(state.epoch)])
    return out


def save_checkpoint(state: TrainState, path, config_hash: str):
    digest = bytes.fromhex(config_hash)
    if len(digest) != 32:
        raise CheckpointError("config hash must be a 32-byte sha256 hex digest")
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), digest]
    tensors = state_tensors(state)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    rng_blob = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(rng_blob)) + rng_blob)
    blob = b"".join(parts)
    Path(path).write_bytes(blob + struct.pack("<Q", _checksum(blob)))


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Parse and verify a checkpoint. Returns ``(config_hash, tensors, rng_state)``."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 + 4 + 32 + 4 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a PHTK checkpoint")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_hash = r.take(32).hex()
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (n,) = r.unpack("<I")
    rng_state = json.loads(r.take(n).decode())
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after rng state")
    return config_hash, tensors, rng_state


def load_checkpoint(path, model_config):
    """Rebuild a :class:`TrainState`; returns ``(state, config_hash)``."""
    config_hash, tensors, rng_state = read_checkpoint(path)
    params = {}
    for name, arr in tensors.items():
        if name.startswith("param.") and name != "param.codebook":
            key = name[len("param."):]
            params[key] = gc.Tensor(arr, True, name=key)
    model = TokenizerModel(model_config, params)
    expected = TokenizerModel.init(model_config, seed=0).params
    for key, t in expected.items():
        if key not in params or params[key].shape != t.shape:
            raise CheckpointError(f"checkpoint parameter {key} missing or mis-shaped for this model config")
    codebook = Codebook.from_array(tensors["param.codebook"])
    opt = AdamState(
        m={k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")},
        v={k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")},
        t=int(tensors["meta.adam_t"][0]),
    )
    bitgen = getattr(np.random, rng_state["bit_generator"])()
    bitgen.state = rng_state
    rng = np.random.Generator(bitgen)
    state = TrainState(model, codebook, opt, rng, int(tensors["meta.stage"][0]), int(tensors["meta.epoch"][0]))
    return state, config_hash


def tokens_for(seqs, model, codebook, km_config=None):
    """Hard token ids per utterance (infer mode)."""
    km_config = km_config or DiffKmConfig()
    out = []
    with gc.no_grad():
        for s in seqs:
            z = encode(s.features, model)
            _, a = quantize(z, codebook, km_config, mode="infer")
            out.append(a.hard_ids)
    return out
