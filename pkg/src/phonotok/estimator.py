"""scikit-learn style wrapper around the two-stage tokenizer training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

from . import gradcore as gc
from .diffkm import DiffKmConfig, quantize
from .errors import DimensionError
from .model import ModelConfig, asr_logits, ctc_greedy_decode, encode
from .synthgen import FrameSequence
from .trainer import TrainConfig, initialize, train


def _check_sequences(X, name="X"):
    if isinstance(X, FrameSequence):
        X = [X]
    seqs = list(X)
    if not seqs or not all(isinstance(s, FrameSequence) for s in seqs):
        raise TypeError(f"{name} must be a non-empty list of FrameSequence")
    return seqs


def _check_features(x, d):
    x = check_array(x, dtype=np.float64, ensure_min_samples=1)
    if x.shape[1] != d:
        raise DimensionError(f"expected {d} feature columns, got {x.shape[1]}")
    return x


class PhonologicalTokenizer(BaseEstimator, TransformerMixin):
    """Learns discrete tokens that keep content and prosody but not speaker.

    ``fit`` takes a list of :class:`FrameSequence` (training utterances with
    labels) and optionally a dev list for per-epoch monitoring. ``transform``
    maps each utterance (or a raw T x D feature matrix) to hard token ids.
    """

    def __init__(self, alpha=0.1, k=16, hidden=64, d_z=16, tau=1.0, tau_final=0.1,
                 assignment_mode="soft-mixture", stage1_epochs=15, stage2_epochs=30,
                 stage1_lr=1e-3, stage2_lr=1e-4, batch_size=8, random_state=0):
        self.alpha = alpha
        self.k = k
        self.hidden = hidden
        self.d_z = d_z
        self.tau = tau
        self.tau_final = tau_final
        self.assignment_mode = assignment_mode
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.batch_size = batch_size
        self.random_state = random_state

    def _configs(self, d, v_c, d_s):
        mc = ModelConfig(d=d, hidden=self.hidden, d_z=self.d_z, v_c=v_c, d_s=d_s, k=self.k).validate()
        tc = TrainConfig(alpha=float(self.alpha), stage1_epochs=self.stage1_epochs,
                         stage2_epochs=self.stage2_epochs, stage1_lr=self.stage1_lr,
                         stage2_lr=self.stage2_lr, batch_size=self.batch_size,
                         seed=int(self.random_state)).validate()
        km = DiffKmConfig(tau=self.tau, tau_final=self.tau_final,
                          assignment_mode=self.assignment_mode).validate()
        return mc, tc, km

    def fit(self, X, y=None, dev=None, v_c=None):
        """Train on utterances ``X``; ``v_c`` defaults to max content label + 1."""
        seqs = _check_sequences(X)
        dev_seqs = _check_sequences(dev, "dev") if dev is not None else []
        d = seqs[0].features.shape[1]
        d_s = len(seqs[0].factors.speaker_vector)
        if v_c is None:
            v_c = 1 + max(int(np.max(s.factors.content_labels)) for s in seqs)
        mc, tc, km = self._configs(d, v_c, d_s)
        state = initialize(seqs, mc, tc, km)
        state, history = train(seqs, dev_seqs, state, tc, km)
        self.model_ = state.model
        self.codebook_ = state.codebook
        self.km_config_ = km
        self.history_ = history
        self.n_features_in_ = d
        return self

    def _frames(self, X):
        check_is_fitted(self, "codebook_")
        if isinstance(X, FrameSequence):
            return [X.features], True
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return [_check_features(X, self.n_features_in_)], True
        out = []
        for item in X:
            f = item.features if isinstance(item, FrameSequence) else item
            out.append(_check_features(f, self.n_features_in_))
        return out, False

    def transform(self, X):
        """Hard token ids: an array for one utterance, a list for several."""
        frames, single = self._frames(X)
        ids = []
        with gc.no_grad():
            for f in frames:
                _, a = quantize(encode(f, self.model_), self.codebook_, self.km_config_, mode="infer")
                ids.append(a.hard_ids)
        return ids[0] if single else ids

    def decode_content(self, X):
        """Greedy CTC transcription of the token sequence(s)."""
        tokens = self.transform(X)
        single = isinstance(tokens, np.ndarray)
        out = []
        with gc.no_grad():
            for t in ([tokens] if single else tokens):
                q = gc.Tensor(self.codebook_.centroids.data[t])
                out.append(ctc_greedy_decode(asr_logits(q, self.model_)))
        return out[0] if single else out

    @property
    def centroids_(self):
        try:
            return self.codebook_.centroids.data.copy()
        except AttributeError:
            raise NotFittedError("PhonologicalTokenizer is not fitted yet") from None
