"""Finite-difference verification of every primitive and of the full loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .diffkm import Codebook, DiffKmConfig
from .model import ModelConfig, TokenizerModel, ctc_nll, forward_batch
from .synthgen import FrameSequence, LatentFactors

PRIMITIVE_TOL = 1e-6
LOSS_TOL = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    passed: bool
    detail: str = ""


def _leaf(rng, shape, name, low=-2.0, high=2.0):
    return gc.Tensor(rng.uniform(low, high, shape), True, name=name)


def _primitive_cases(rng):
    a, b = _leaf(rng, (3, 4), "a"), _leaf(rng, (4, 2), "b")
    x, y = _leaf(rng, (3, 4), "x"), _leaf(rng, (3, 4), "y")
    s = _leaf(rng, (1,), "s")
    r = gc.Tensor(rng.uniform(-2, 2, (3, 4)) + np.sign(rng.uniform(-1, 1, (3, 4))) * 0.1, True, name="r")
    v = _leaf(rng, (4,), "v")
    z, m = _leaf(rng, (5, 3), "z"), _leaf(rng, (4, 3), "m")
    w = gc.Tensor(rng.dirichlet(np.ones(4), size=5), True, name="w")
    lg = _leaf(rng, (9, 4), "logits")
    return [
        ("matmul", lambda: gc.matmul(a, b), [a, b]),
        ("add", lambda: gc.add(x, y), [x, y]),
        ("add_scalar", lambda: gc.add(x, s), [x, s]),
        ("sub", lambda: gc.sub(x, y), [x, y]),
        ("mul", lambda: gc.mul(x, y), [x, y]),
        ("mul_scalar", lambda: gc.mul(s, y), [s, y]),
        ("tanh", lambda: gc.tanh(x), [x]),
        ("relu", lambda: gc.relu(r), [r]),
        ("square", lambda: gc.square(x), [x]),
        ("scale", lambda: gc.scale(x, -0.7), [x]),
        ("add_row", lambda: gc.add_row(x, v), [x, v]),
        ("sum", lambda: gc.sum_all(x), [x]),
        ("mean", lambda: gc.mean_all(x), [x]),
        ("softmax_rows", lambda: gc.softmax_rows(x), [x]),
        ("log_softmax_rows", lambda: gc.log_softmax_rows(x), [x]),
        ("logsumexp_rows", lambda: gc.logsumexp_rows(x), [x]),
        ("sqdist", lambda: gc.sqdist(z, m), [z, m]),
        ("concat_cols", lambda: gc.concat_cols(x, y), [x, y]),
        ("mixture_soft", lambda: gc.matmul(w, m), [w, m]),
        ("ctc_nll", lambda: ctc_nll(gc.log_softmax_rows(lg), [0, 4, 9], [[0, 1], [2, 2]], 3), [lg]),
    ]


def check_primitives(seed=0, tol=PRIMITIVE_TOL, step=STEP):
    rng = np.random.default_rng(seed)
    results = []
    for name, build, leaves in _primitive_cases(rng):
        # random positive projection so every output entry matters
        proj_rng = np.random.default_rng([seed, len(results)])
        with gc.no_grad():
            shape = build().shape
        w = gc.Tensor(proj_rng.uniform(0.5, 1.5, shape))
        report = gc.grad_check(lambda: gc.sum_all(gc.mul(build(), w)), leaves, step=step, tol=tol)
        results.append(CheckResult(name, report.worst(), tol, report.passed, "; ".join(report.failures)))
    return results


def tiny_problem(seed=0):
    """A two-utterance batch and a small model for full-loss checks."""
    rng = np.random.default_rng([seed, 99])
    mc = ModelConfig(d=4, hidden=5, d_z=3, v_c=3, d_s=2, k=4)
    model = TokenizerModel.init(mc, seed=seed)
    for t in model.params.values():
        t.data = t.data + rng.uniform(-0.1, 0.1, t.shape)
    codebook = Codebook.from_array(rng.uniform(-1, 1, (mc.k, mc.d_z)))
    seqs = []
    for i, (labels, durs) in enumerate((([0, 2, 1], [2, 1, 2]), ([1, 0], [3, 2]))):
        frames = np.repeat(labels, durs)
        spk = rng.standard_normal(mc.d_s)
        factors = LatentFactors(np.array(labels), frames, rng.uniform(-1, 1, len(frames)), i, spk)
        seqs.append(FrameSequence(rng.uniform(-2, 2, (len(frames), mc.d)), factors, f"tiny-{i}"))
    return model, codebook, seqs


def check_total_loss(alpha, mode, seed=0, tol=LOSS_TOL, step=STEP, tau=0.7):
    """Full weighted loss vs. finite differences.

    Straight-through has no finite-difference counterpart (its forward is
    piecewise constant); there the analytic gradient is compared with the
    soft-mixture analytic gradient instead.
    """
    model, codebook, seqs = tiny_problem(seed)
    leaves = list(model.params.values()) + [codebook.centroids]
    names = list(model.params) + ["codebook"]
    soft = DiffKmConfig(tau=tau, tau_final=tau, assignment_mode="soft-mixture")

    def loss_soft():
        return forward_batch(seqs, model, codebook, alpha, soft, tau=tau).total

    if mode == "soft-mixture":
        report = gc.grad_check(loss_soft, leaves, step=step, tol=tol, names=names)
        return CheckResult(f"total_loss[alpha={alpha:g},{mode}]", report.worst(), tol, report.passed,
                           "; ".join(report.failures))

    failures = []
    worst = 0.0

    def record(label, a, b):
        nonlocal worst
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        err = float((np.abs(a - b) / denom).max())
        worst = max(worst, err)
        if err > tol or not np.all(np.isfinite(a)):
            failures.append(f"{label}: relative error {err:.2e}")

    # the surrogate rule itself: d(mixture_st)/d(w, m) must equal d(w @ m)
    rng = np.random.default_rng(seed)
    w = gc.Tensor(rng.dirichlet(np.ones(4), size=5), True, name="w")
    m = gc.Tensor(rng.uniform(-1, 1, (4, 3)), True, name="m")
    g_up = gc.Tensor(rng.uniform(-1, 1, (5, 3)))
    pair = {}
    for label, fn in (("st", gc.mixture_st), ("soft", gc.matmul)):
        w.zero_grad()
        m.zero_grad()
        with gc.Graph() as g:
            loss = gc.sum_all(gc.mul(fn(w, m), g_up))
        gc.backward(g, loss)
        pair[label] = (w.grad.copy(), m.grad.copy())
    for i, nm in enumerate(("w", "m")):
        record(f"surrogate d/d{nm}", pair["st"][i], pair["soft"][i])

    # full chain: at a cold temperature the soft forward is hard to machine
    # precision, so both modes must produce the same analytic gradient
    cold = 1e-3
    grads = {}
    for mode_name in ("soft-mixture", "straight-through"):
        cfg = DiffKmConfig(tau=cold, tau_final=cold, assignment_mode=mode_name)
        for t in leaves:
            t.zero_grad()
        with gc.Graph() as g:
            out = forward_batch(seqs, model, codebook, alpha, cfg, tau=cold)
        gc.backward(g, out.total)
        grads[mode_name] = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in leaves]
    for t in leaves:
        t.zero_grad()
    for n, a, b in zip(names, grads["straight-through"], grads["soft-mixture"]):
        record(n, a, b)
    return CheckResult(f"total_loss[alpha={alpha:g},{mode}]", worst, tol, not failures, "; ".join(failures))


def run_all(seed=0, alphas=(0.0, 0.1, 1.0), modes=("soft-mixture", "straight-through")):
    results = check_primitives(seed)
    for alpha in alphas:
        for mode in modes:
            results.append(check_total_loss(alpha, mode, seed))
    return results
