"""Synthetic stand-in for SSL speech features.

Every frame is an additive mix of three independent factors plus noise::

    x_t = a_c * Q_c[:, label_t] + a_p * Q_p @ basis(contour_t) + a_s * Q_s @ spk + sigma * eps_t

``Q_c``, ``Q_p`` and ``Q_s`` are disjoint column blocks of one random
orthogonal matrix, so the three factor subspaces never overlap.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

DATASET_FORMAT_VERSION = 1
PROSODY_BASIS_DIM = 3

# stream ids for np.random.default_rng([seed, stream, ...])
_MIXING, _SPEAKERS, _UTTERANCE = 0, 1, 2
_SPLITS = ("train", "dev", "test")


@dataclass
class GenConfig:
    v_c: int = 12
    s: int = 10
    d: int = 32
    d_s: int = 8
    min_frames: int = 20
    max_frames: int = 60
    min_duration: int = 2
    max_duration: int = 6
    prosody_window: int = 5
    prosody_step: float = 0.35
    prosody_smoothness: float = 0.25
    content_scale: float = 2.0
    prosody_scale: float = 1.5
    speaker_scale: float = 0.6
    noise_sigma: float = 0.1
    heldout_speakers: int = 2
    seed: int = 0

    def validate(self):
        for name in ("v_c", "s", "d", "d_s", "min_frames", "min_duration", "prosody_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"gen.{name} must be >= 1")
        if self.max_duration < self.min_duration:
            raise ConfigError("gen.max_duration must be >= gen.min_duration")
        if self.max_frames < self.min_frames:
            raise ConfigError("gen.max_frames must be >= gen.min_frames")
        if self.min_frames < self.min_duration:
            raise ConfigError("gen.min_frames must be >= gen.min_duration")
        if self.v_c < 2:
            raise ConfigError("gen.v_c must be >= 2 so adjacent symbols can differ")
        if self.noise_sigma < 0:
            raise ConfigError("gen.noise_sigma must be >= 0")
        if not self.prosody_smoothness > 0:
            raise ConfigError("gen.prosody_smoothness must be positive")
        if self.v_c + PROSODY_BASIS_DIM + self.d_s > self.d:
            raise ConfigError(
                f"gen.d={self.d} too small for orthogonal mixing of "
                f"{self.v_c}+{PROSODY_BASIS_DIM}+{self.d_s} factor dimensions"
            )
        return self

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class LatentFactors:
    content_labels: np.ndarray
    frame_labels: np.ndarray | None
    prosody_contour: np.ndarray
    speaker_id: int
    speaker_vector: np.ndarray


@dataclass
class FrameSequence:
    features: np.ndarray
    factors: LatentFactors
    utterance_id: str

    @property
    def n_frames(self):
        return self.features.shape[0]


@dataclass
class Dataset:
    train: list
    dev: list
    test: list
    config: GenConfig
    speaker_independent: bool = True
    meta: dict = field(default_factory=dict)

    def splits(self):
        return {"train": self.train, "dev": self.dev, "test": self.test}


def collapse_repeats(seq):
    seq = list(seq)
    return [v for i, v in enumerate(seq) if i == 0 or v != seq[i - 1]]


def prosody_basis(contour):
    c = np.asarray(contour, dtype=np.float64)
    return np.stack([c, c * c, c * c * c], axis=-1)


class SyntheticSpeech:
    """Holds the fixed mixing matrices and speaker vectors for one config."""

    def __init__(self, cfg: GenConfig):
        self.cfg = cfg.validate()
        rng = np.random.default_rng([cfg.seed, _MIXING])
        q, r = np.linalg.qr(rng.standard_normal((cfg.d, cfg.d)))
        q = q * np.sign(np.diag(r))
        a, b = cfg.v_c, cfg.v_c + PROSODY_BASIS_DIM
        self.content_mix = q[:, :a]
        self.prosody_mix = q[:, a:b]
        self.speaker_mix = q[:, b:b + cfg.d_s]
        spk_rng = np.random.default_rng([cfg.seed, _SPEAKERS])
        self.speaker_vectors = spk_rng.standard_normal((cfg.s, cfg.d_s))
        for i in range(cfg.s):
            for j in range(i):
                if np.array_equal(self.speaker_vectors[i], self.speaker_vectors[j]):
                    raise DataError(f"speakers {j} and {i} drew identical vectors")

    def speaker_embedding(self, speaker_id):
        if not 0 <= int(speaker_id) < self.cfg.s:
            raise KeyError(f"unknown speaker id {speaker_id}")
        return self.speaker_vectors[int(speaker_id)].copy()

    def sample_factors(self, rng, speaker_id):
        cfg = self.cfg
        n_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        labels, durations = [], []
        total = 0
        while total < n_frames:
            choices = [v for v in range(cfg.v_c) if not labels or v != labels[-1]]
            sym = int(choices[rng.integers(len(choices))])
            dur = int(rng.integers(cfg.min_duration, cfg.max_duration + 1))
            dur = min(dur, n_frames - total)
            if dur < cfg.min_duration and durations:
                # fold a too-short tail into the previous symbol
                durations[-1] += dur
            else:
                labels.append(sym)
                durations.append(dur)
            total += dur
        frame_labels = np.repeat(np.array(labels, dtype=np.int64), durations)
        contour = self._contour(rng, n_frames)
        return LatentFactors(
            content_labels=np.array(labels, dtype=np.int64),
            frame_labels=frame_labels,
            prosody_contour=contour,
            speaker_id=int(speaker_id),
            speaker_vector=self.speaker_embedding(speaker_id),
        )

    def _contour(self, rng, n_frames):
        cfg = self.cfg
        w = cfg.prosody_window
        steps = rng.standard_normal(n_frames + w - 1) * cfg.prosody_step
        walk = np.empty_like(steps)
        level = rng.uniform(-1.0, 1.0)
        for i, u in enumerate(steps):
            level = 0.9 * level + u
            walk[i] = level
        smooth = np.convolve(walk, np.ones(w) / w, mode="valid")
        raw = np.clip(smooth, -1.0, 1.0)
        # slew-rate limiter enforces the smoothness bound exactly
        out = np.empty(n_frames)
        out[0] = raw[0]
        b = cfg.prosody_smoothness
        for t in range(1, n_frames):
            out[t] = out[t - 1] + min(max(raw[t] - out[t - 1], -b), b)
        return out

    def render(self, factors, rng=None):
        """Features for given factors; ``rng`` supplies the noise (None: no noise)."""
        cfg = self.cfg
        x = cfg.content_scale * self.content_mix[:, factors.frame_labels].T
        x = x + cfg.prosody_scale * prosody_basis(factors.prosody_contour) @ self.prosody_mix.T
        x = x + cfg.speaker_scale * (self.speaker_mix @ factors.speaker_vector)[None, :]
        if rng is not None and cfg.noise_sigma > 0:
            x = x + cfg.noise_sigma * rng.standard_normal(x.shape)
        return x

    def utterance(self, rng, speaker_id, utterance_id):
        factors = self.sample_factors(rng, speaker_id)
        return FrameSequence(self.render(factors, rng), factors, utterance_id)


def utterance_rng(cfg, split, index):
    return np.random.default_rng([cfg.seed, _UTTERANCE, _SPLITS.index(split), index])


def gen_utterance(cfg, rng, speaker_id=None, utterance_id="utt", speech=None):
    """Draw one utterance. ``speaker_id`` defaults to a uniform draw from ``rng``."""
    speech = speech or SyntheticSpeech(cfg)
    if speaker_id is None:
        speaker_id = int(rng.integers(cfg.s))
    return speech.utterance(rng, speaker_id, utterance_id)


def split_sizes(n, ratios):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_dev = int(round(n * ratios[1]))
    return n_train, n_dev, n - n_train - n_dev


def speaker_pools(cfg, speaker_independent):
    speakers = list(range(cfg.s))
    if not speaker_independent:
        return {"train": speakers, "dev": speakers, "test": speakers}
    if cfg.s <= cfg.heldout_speakers or cfg.heldout_speakers < 1:
        raise ConfigError(
            f"speaker-independent split needs more than {cfg.heldout_speakers} speakers "
            f"and at least one held out, got s={cfg.s}"
        )
    seen = speakers[: cfg.s - cfg.heldout_speakers]
    held = speakers[cfg.s - cfg.heldout_speakers:]
    return {"train": seen, "dev": seen, "test": held}


def gen_dataset(cfg, n_utterances, split_ratios=(0.8, 0.1, 0.1), speaker_independent=True):
    """Generate train/dev/test splits.

    With ``speaker_independent`` the test split draws only from held-out
    speakers; train and dev share the remaining speakers. Speakers are
    assigned round-robin within each split's pool.
    """
    speech = SyntheticSpeech(cfg)
    sizes = split_sizes(n_utterances, split_ratios)
    pools = speaker_pools(cfg, speaker_independent)
    out = {}
    for split, size in zip(_SPLITS, sizes):
        pool = pools[split]
        out[split] = [
            speech.utterance(utterance_rng(cfg, split, i), pool[i % len(pool)], f"{split}-{i:05d}")
            for i in range(size)
        ]
    return Dataset(out["train"], out["dev"], out["test"], cfg, speaker_independent)


def oracle_speaker_embedding(speaker_id, cfg=None, speech=None):
    """The generating speaker vector, standing in for a pretrained speaker encoder."""
    speech = speech or SyntheticSpeech(cfg)
    return speech.speaker_embedding(speaker_id)


# ---------------------------------------------------------------------------
# dataset files
#
# A file starts with one header line
#   #phtk-dataset version=1 config_hash=<hex> tool=<version> d=<D> records=<N>
# followed by N records. Each record is, in order:
#   version <int>
#   utterance_id <str>
#   speaker_id <int>
#   L <int>
#   content_labels <L ints>
#   T <int>
#   prosody_contour <T decimals, 6 fractional digits>
#   features
#   <T lines of D decimals, shortest round-trip repr>


def _fmt_row(row):
    return " ".join(repr(float(v)) for v in row)


def write_split(path, sequences, cfg, tool_version):
    buf = io.StringIO()
    buf.write(
        f"#phtk-dataset version={DATASET_FORMAT_VERSION} config_hash={cfg.config_hash()} "
        f"tool={tool_version} d={cfg.d} records={len(sequences)}\n"
    )
    for seq in sequences:
        f = seq.factors
        buf.write(f"version {DATASET_FORMAT_VERSION}\n")
        buf.write(f"utterance_id {seq.utterance_id}\n")
        buf.write(f"speaker_id {f.speaker_id}\n")
        buf.write(f"L {len(f.content_labels)}\n")
        buf.write("content_labels " + " ".join(str(int(v)) for v in f.content_labels) + "\n")
        buf.write(f"T {seq.n_frames}\n")
        buf.write("prosody_contour " + " ".join(f"{v:.6f}" for v in f.prosody_contour) + "\n")
        buf.write("features\n")
        for row in seq.features:
            buf.write(_fmt_row(row) + "\n")
    Path(path).write_text(buf.getvalue())


def _expect(lines, pos, key):
    if pos >= len(lines):
        raise DataError(f"unexpected end of file, expected {key!r}")
    parts = lines[pos].split(" ", 1)
    if parts[0] != key:
        raise DataError(f"line {pos + 1}: expected {key!r}, got {parts[0]!r}")
    return parts[1] if len(parts) > 1 else ""


def read_header(path):
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("#phtk-dataset"):
        raise DataError(f"{path}: missing dataset header")
    fields = dict(item.split("=", 1) for item in first.split()[1:])
    if int(fields.get("version", -1)) != DATASET_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset version {fields.get('version')}")
    return fields


def read_split(path, speech):
    """Parse one split file; speaker vectors come from ``speech``."""
    header = read_header(path)
    lines = Path(path).read_text().splitlines()[1:]
    seqs = []
    pos = 0
    while pos < len(lines):
        version = int(_expect(lines, pos, "version"))
        if version != DATASET_FORMAT_VERSION:
            raise DataError(f"record at line {pos + 2}: unsupported version {version}")
        uid = _expect(lines, pos + 1, "utterance_id")
        spk = int(_expect(lines, pos + 2, "speaker_id"))
        n_labels = int(_expect(lines, pos + 3, "L"))
        labels = np.array([int(v) for v in _expect(lines, pos + 4, "content_labels").split()], dtype=np.int64)
        n_frames = int(_expect(lines, pos + 5, "T"))
        contour = np.array([float(v) for v in _expect(lines, pos + 6, "prosody_contour").split()])
        _expect(lines, pos + 7, "features")
        rows = lines[pos + 8: pos + 8 + n_frames]
        if len(labels) != n_labels or len(contour) != n_frames or len(rows) != n_frames:
            raise DataError(f"record {uid}: declared lengths do not match contents")
        feats = np.array([[float(v) for v in r.split()] for r in rows])
        if feats.shape != (n_frames, int(header["d"])):
            raise DataError(f"record {uid}: feature matrix has shape {feats.shape}")
        factors = LatentFactors(labels, None, contour, spk, speech.speaker_embedding(spk))
        seqs.append(FrameSequence(feats, factors, uid))
        pos += 8 + n_frames
    if len(seqs) != int(header["records"]):
        raise DataError(f"{path}: header declares {header['records']} records, found {len(seqs)}")
    return seqs, header


def write_dataset(directory, dataset, tool_version):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, seqs in dataset.splits().items():
        paths[name] = directory / f"{name}.phtk"
        write_split(paths[name], seqs, dataset.config, tool_version)
    return paths


def read_dataset(directory, cfg):
    """Load the three split files written by :func:`write_dataset`.

    Raises :class:`DataError` if a file was produced under another config.
    """
    speech = SyntheticSpeech(cfg)
    expected = cfg.config_hash()
    out = {}
    for name in _SPLITS:
        seqs, header = read_split(Path(directory) / f"{name}.phtk", speech)
        if header["config_hash"] != expected:
            raise DataError(f"{name}.phtk was generated with config {header['config_hash'][:12]}, expected {expected[:12]}")
        out[name] = seqs
    return Dataset(out["train"], out["dev"], out["test"], cfg)
