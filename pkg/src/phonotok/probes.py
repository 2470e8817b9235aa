"""Linear probes measuring content, prosody and speaker information in tokens."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr
from sklearn.linear_model import LogisticRegression, Ridge
from threadpoolctl import threadpool_limits

from . import gradcore as gc
from .diffkm import DiffKmConfig, codebook_stats, quantize
from .errors import DegenerateProbeError, PhonotokError, UndefinedMetricError
from .metrics import pearson, unit_error_rate
from .model import asr_logits, ctc_greedy_decode, encode

log = logging.getLogger(__name__)

N_PROSODY_CLASSES = 4


@dataclass
class TokenSequence:
    ids: np.ndarray
    utterance_id: str
    factors: object


@dataclass
class ProbeResult:
    accuracy: float
    chance: float


@dataclass
class CorrelationResult:
    r: float
    degenerate: bool = False


@dataclass
class ProbeReport:
    content_uer: float
    er_proxy_acc: float
    er_chance: float
    prosody_corr: float
    prosody_degenerate: bool
    sid_acc: float
    sid_chance: float
    utilization: float
    perplexity: float


def tokenize_corpus(sequences, model, codebook, km_config=None):
    """Hard token ids for every utterance; uses only the encoder and codebook."""
    km_config = km_config or DiffKmConfig()
    out = []
    with gc.no_grad():
        for s in sequences:
            _, a = quantize(encode(s.features, model), codebook, km_config, mode="infer")
            out.append(TokenSequence(a.hard_ids, s.utterance_id, s.factors))
    return out


def content_uer(tokens, model, codebook):
    """Greedy-decode each token sequence through the recognition head."""
    hyps, refs = [], []
    with gc.no_grad():
        for tok in tokens:
            q = codebook.centroids.data[tok.ids]
            hyps.append(ctc_greedy_decode(asr_logits(gc.Tensor(q), model)))
            refs.append(list(tok.factors.content_labels))
    return unit_error_rate(hyps, refs)


def one_hot(ids, k):
    out = np.zeros((len(ids), k))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def histogram(ids, k):
    return np.bincount(ids, minlength=k) / max(len(ids), 1)


def quantile_edges(values, n_classes=N_PROSODY_CLASSES):
    return np.quantile(np.asarray(values), np.linspace(0, 1, n_classes + 1)[1:-1])


def train_probe(x_train, y_train, x_test, y_test, seed=0, c=1.0):
    """Multinomial logistic regression; returns held-out accuracy and chance."""
    y_train = np.asarray(y_train)
    classes = np.unique(y_train)
    if len(classes) < 2:
        raise DegenerateProbeError("probe labels contain a single class")
    clf = LogisticRegression(C=c, max_iter=2000, random_state=seed)
    clf.fit(np.asarray(x_train), y_train)
    acc = float((clf.predict(np.asarray(x_test)) == np.asarray(y_test)).mean())
    return ProbeResult(acc, 1.0 / len(classes))


def prosody_regression(x_train, c_train, x_test, c_test, ridge=1.0):
    """Ridge regression to contour values; Pearson r on the held-out frames.

    A constant prediction (e.g. every test frame hits the same token)
    yields ``r = 0`` with ``degenerate=True``.
    """
    c_test = np.asarray(c_test, dtype=np.float64)
    if np.ptp(c_test) == 0:
        raise UndefinedMetricError("contour target has zero variance")
    reg = Ridge(alpha=ridge).fit(np.asarray(x_train), np.asarray(c_train))
    pred = reg.predict(np.asarray(x_test))
    try:
        return CorrelationResult(pearson(pred, c_test))
    except UndefinedMetricError:
        return CorrelationResult(0.0, True)


def _frames(tokens, k):
    x = np.concatenate([one_hot(t.ids, k) for t in tokens])
    contour = np.concatenate([t.factors.prosody_contour for t in tokens])
    return x, contour


def probe_report(model, codebook, dataset, km_config=None, seed=0, shuffle_labels=False):
    """All probe metrics for a trained tokenizer.

    Split roles: the recognition UER and both prosody probes are scored on
    the test split (held-out speakers), with prosody probes fitted on the
    train split. The speaker probe is fitted on train and scored on dev,
    which share speakers.

    ``shuffle_labels`` permutes every label vector, fit and scoring splits
    alike, which gives the chance-level control.
    """
    k = codebook.k
    tok = {name: tokenize_corpus(seqs, model, codebook, km_config) for name, seqs in dataset.splits().items()}
    rng = np.random.default_rng([seed, 17])

    uer = content_uer(tok["test"], model, codebook)

    x_tr, c_tr = _frames(tok["train"], k)
    x_te, c_te = _frames(tok["test"], k)
    edges = quantile_edges(c_tr)
    y_tr, y_te = np.digitize(c_tr, edges), np.digitize(c_te, edges)
    if shuffle_labels:
        y_tr, y_te = rng.permutation(y_tr), rng.permutation(y_te)
        c_tr, c_te = rng.permutation(c_tr), rng.permutation(c_te)
    er = train_probe(x_tr, y_tr, x_te, y_te, seed=seed)
    corr = prosody_regression(x_tr, c_tr, x_te, c_te)

    h_tr = np.stack([histogram(t.ids, k) for t in tok["train"]])
    h_dev = np.stack([histogram(t.ids, k) for t in tok["dev"]])
    s_tr = np.array([t.factors.speaker_id for t in tok["train"]])
    s_dev = np.array([t.factors.speaker_id for t in tok["dev"]])
    if shuffle_labels:
        s_tr, s_dev = rng.permutation(s_tr), rng.permutation(s_dev)
    sid = train_probe(h_tr, s_tr, h_dev, s_dev, seed=seed)

    stats = codebook_stats([t.ids for t in tok["test"]], k)
    return ProbeReport(uer, er.accuracy, er.chance, corr.r, corr.degenerate, sid.accuracy, sid.chance,
                       stats.utilization, stats.perplexity)


def raw_feature_probes(dataset, seed=0, shuffle_labels=False):
    """Probe the generator's features directly (no tokenizer).

    Returns frame-content accuracy, prosody correlation and speaker accuracy
    from linear probes on the raw features.
    """
    rng = np.random.default_rng([seed, 19])
    tr, dev, te = dataset.train, dataset.dev, dataset.test
    x_tr = np.concatenate([s.features for s in tr])
    x_te = np.concatenate([s.features for s in te])
    y_tr = np.concatenate([s.factors.frame_labels for s in tr])
    y_te = np.concatenate([s.factors.frame_labels for s in te])
    c_tr = np.concatenate([s.factors.prosody_contour for s in tr])
    c_te = np.concatenate([s.factors.prosody_contour for s in te])
    m_tr = np.stack([s.features.mean(axis=0) for s in tr])
    m_dev = np.stack([s.features.mean(axis=0) for s in dev])
    s_tr = np.array([s.factors.speaker_id for s in tr])
    s_dev = np.array([s.factors.speaker_id for s in dev])
    if shuffle_labels:
        y_tr, c_tr, s_tr = rng.permutation(y_tr), rng.permutation(c_tr), rng.permutation(s_tr)
        y_te, c_te, s_dev = rng.permutation(y_te), rng.permutation(c_te), rng.permutation(s_dev)
    content = train_probe(x_tr, y_tr, x_te, y_te, seed=seed)
    prosody = prosody_regression(x_tr, c_tr, x_te, c_te)
    speaker = train_probe(m_tr, s_tr, m_dev, s_dev, seed=seed)
    return {"content": content, "prosody": prosody, "speaker": speaker}


# ---------------------------------------------------------------------------
# alpha sweep

METRICS = ("content_uer", "er_proxy_acc", "prosody_corr", "sid_acc")


@dataclass
class SweepCell:
    alpha: float
    seed: int
    report: ProbeReport | None
    l_asr: float = float("nan")
    l_voc: float = float("nan")
    error: str | None = None


@dataclass
class SweepResult:
    cells: list
    summary: list = field(default_factory=list)  # dicts: alpha, n, <metric>_mean, <metric>_std
    spearman: dict = field(default_factory=dict)

    @property
    def n_failed(self):
        return sum(c.report is None for c in self.cells)


def run_cell(alpha, seed, dataset, model_config, train_config, km_config):
    """Train one tokenizer at ``alpha`` and evaluate it. Never raises on training failure."""
    from dataclasses import replace

    from .trainer import evaluate_split, initialize, train

    cfg = replace(train_config, alpha=float(alpha), seed=int(seed))
    with threadpool_limits(1):
        try:
            state = initialize(dataset.train, model_config, cfg, km_config)
            state, _ = train(dataset.train, dataset.dev, state, cfg, km_config)
            report = probe_report(state.model, state.codebook, dataset, km_config, seed=seed)
            dev, *_ = evaluate_split(dataset.dev, state.model, state.codebook, cfg.alpha, km_config)
        except PhonotokError as exc:
            log.warning("sweep cell alpha=%s seed=%s failed: %s", alpha, seed, exc)
            return SweepCell(float(alpha), int(seed), None, error=str(exc))
    return SweepCell(float(alpha), int(seed), report, dev.l_asr, dev.l_voc)


def summarize(cells, alphas):
    summary = []
    for a in alphas:
        ok = [c.report for c in cells if c.alpha == a and c.report is not None]
        row = {"alpha": a, "n": len(ok)}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in ok])
            row[f"{m}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        summary.append(row)
    spear = {}
    rows = [r for r in summary if r["n"] > 0]
    for m in METRICS:
        ys = [r[f"{m}_mean"] for r in rows]
        if len(rows) >= 2 and np.ptp(ys) == 0:
            spear[m] = 0.0  # flat metric: no monotone trend either way
        elif len(rows) >= 2:
            rho = spearmanr([r["alpha"] for r in rows], ys).statistic
            spear[m] = float(rho) if np.isfinite(rho) else 0.0
        else:
            spear[m] = float("nan")
    return summary, spear


def sweep_alpha(alphas, dataset, model_config, train_config, km_config, n_seeds=1, seed0=None, parallel=1):
    """Train and probe one tokenizer per (alpha, seed) cell.

    Cells are independent; with ``parallel > 1`` they run in worker
    processes and results are collected in grid order, so the output does
    not depend on ``parallel``.
    """
    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas) or alphas != sorted(alphas):
        raise ValueError("alphas must be sorted ascending within [0, 1]")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    seed0 = train_config.seed if seed0 is None else seed0
    grid = [(a, seed0 + i) for a in alphas for i in range(n_seeds)]
    args = [(a, s, dataset, model_config, train_config, km_config) for a, s in grid]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            cells = list(pool.map(run_cell, *zip(*args)))
    else:
        cells = [run_cell(*a) for a in args]
    summary, spear = summarize(cells, alphas)
    return SweepResult(cells, summary, spear)


def report_dict(report):
    return asdict(report)


def argmax_alpha(summary, metric):
    rows = [r for r in summary if r["n"] > 0 and not math.isnan(r[f"{metric}_mean"])]
    return max(rows, key=lambda r: r[f"{metric}_mean"])["alpha"]
