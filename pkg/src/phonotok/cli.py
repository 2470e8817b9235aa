"""Command-line entry point: ``phonotok {gen,train,eval,sweep,gradcheck,bitrate}``."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import verify
from .config import RunConfig, dump_config, load_config, with_overrides
from .diffkm import bitrate
from .errors import CheckpointError, CompatibilityError, ConfigError, DataError, TrainingAbort
from .probes import METRICS, argmax_alpha, probe_report, sweep_alpha
from .synthgen import gen_dataset, read_dataset, write_dataset
from .trainer import History, initialize, load_checkpoint, save_checkpoint, train

log = logging.getLogger("phonotok")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_TRAINING, EXIT_COMPAT, EXIT_SWEEP = 0, 1, 2, 3, 4, 5
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

CHECKPOINT = "checkpoint.phtk"
EFFECTIVE_CONFIG = "config.ini"
EPOCH_COLUMNS = ("stage", "epoch", "tau", "train_l_asr", "train_l_voc", "train_l_total",
                 "dev_l_asr", "dev_l_voc", "dev_l_total", "dev_uer", "utilization", "perplexity")
STEP_COLUMNS = ("stage", "epoch", "batch", "l_asr", "l_voc", "l_total", "alpha")
SWEEP_COLUMNS = ("alpha", "seed", "content_uer", "er_proxy_acc", "prosody_corr", "sid_acc",
                 "l_asr", "l_voc", "utilization", "perplexity")
REPORT_COLUMNS = ("content_uer", "er_proxy_acc", "er_chance", "prosody_corr", "prosody_degenerate",
                  "sid_acc", "sid_chance", "utilization", "perplexity")
# plot panels: recognition and probe metrics, then the reconstruction-side view
PANELS = {"discriminative": ("content_uer", "er_proxy_acc", "sid_acc"), "generative": ("prosody_corr",)}


def _full(v):
    return repr(float(v))


def _six(v):
    return f"{float(v):.6f}"


def _banner(cfg_hash):
    return f"# config_hash={cfg_hash} tool=phonotok-{__version__}\n"


def _write_csv(path, cfg_hash, columns, rows):
    buf = io.StringIO()
    buf.write(_banner(cfg_hash))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read_csv(path):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# config_hash="):
        raise DataError(f"{path}: missing config banner")
    cfg_hash = lines[0].split()[1].split("=", 1)[1]
    rows = list(csv.reader(lines[1:]))
    return cfg_hash, rows[0], rows[1:]


def _setup_logging():
    level = os.environ.get("PHTK_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    return with_overrides(cfg, seed=getattr(args, "seed", None), alpha=getattr(args, "alpha", None))


def _outdir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args):
    cfg = _config(args)
    out = _outdir(args.out)
    ds = gen_dataset(cfg.gen, cfg.n_utterances, cfg.split_ratios, cfg.speaker_independent)
    write_dataset(out, ds, f"phonotok-{__version__}")
    dump_config(cfg, out / EFFECTIVE_CONFIG)
    sizes = {k: len(v) for k, v in ds.splits().items()}
    frames = sum(s.n_frames for v in ds.splits().values() for s in v)
    speakers = len({s.factors.speaker_id for v in ds.splits().values() for s in v})
    print(f"utterances={sum(sizes.values())} train={sizes['train']} dev={sizes['dev']} test={sizes['test']} "
          f"speakers={speakers} frames={frames}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_data(cfg, directory):
    try:
        return read_dataset(directory, cfg.gen)
    except DataError as exc:
        if "generated with config" in str(exc):
            raise CompatibilityError(str(exc)) from None
        raise


def _epoch_row(rec):
    return (rec.stage, rec.epoch, _full(rec.tau), _full(rec.train.l_asr), _full(rec.train.l_voc),
            _full(rec.train.l_total), _full(rec.dev.l_asr), _full(rec.dev.l_voc), _full(rec.dev.l_total),
            _full(rec.dev_uer), _full(rec.utilization), _full(rec.perplexity))


def _step_row(step):
    stage, epoch, batch, r = step
    return (stage, epoch, batch, _full(r.l_asr), _full(r.l_voc), _full(r.l_total), _full(r.alpha))


def _completed(stage, epoch, state):
    return (stage, epoch) < (state.stage, state.epoch)


def cmd_train(args):
    cfg = _config(args)
    out = _outdir(args.out)
    cfg_hash = cfg.config_hash()
    ds = _load_data(cfg, args.data)
    mc, tc, km = cfg.model_config(), cfg.train_config(), cfg.diffkm
    ckpt = out / CHECKPOINT
    epoch_rows, step_rows = [], []
    if args.resume:
        state, stored = load_checkpoint(ckpt, mc)
        if stored != cfg_hash:
            raise CompatibilityError(f"checkpoint {ckpt} was written under config {stored[:12]}, not {cfg_hash[:12]}")
        for name, into in (("metrics.csv", epoch_rows), ("steps.csv", step_rows)):
            h, _, rows = _read_csv(out / name)
            if h != cfg_hash:
                raise CompatibilityError(f"{name} belongs to another config")
            into.extend(tuple(r) for r in rows if _completed(int(r[0]), int(r[1]), state))
    else:
        state = initialize(ds.train, mc, tc, km)
    dump_config(cfg, out / EFFECTIVE_CONFIG)

    def on_epoch(st, hist):
        rec = hist.epochs[-1]
        epoch_rows.append(_epoch_row(rec))
        step_rows.extend(_step_row(s) for s in hist.steps if (s[0], s[1]) == (rec.stage, rec.epoch))
        _write_csv(out / "metrics.csv", cfg_hash, EPOCH_COLUMNS, epoch_rows)
        _write_csv(out / "steps.csv", cfg_hash, STEP_COLUMNS, step_rows)
        save_checkpoint(st, ckpt, cfg_hash)

    if not args.resume:
        save_checkpoint(state, ckpt, cfg_hash)
        _write_csv(out / "metrics.csv", cfg_hash, EPOCH_COLUMNS, [])
        _write_csv(out / "steps.csv", cfg_hash, STEP_COLUMNS, [])
    state, _ = train(ds.train, ds.dev, state, tc, km, History(), stop_after=args.stop_after, on_epoch=on_epoch)
    save_checkpoint(state, ckpt, cfg_hash)
    print(f"checkpoint={ckpt} stage={state.stage} epoch={state.epoch}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else ckpt.parent / EFFECTIVE_CONFIG
    cfg = load_config(config_path)
    cfg_hash = cfg.config_hash()
    state, stored = load_checkpoint(ckpt, cfg.model_config())
    if stored != cfg_hash:
        raise CompatibilityError(f"checkpoint config {stored[:12]} does not match {config_path} ({cfg_hash[:12]})")
    ds = _load_data(cfg, args.data)
    report = probe_report(state.model, state.codebook, ds, cfg.diffkm, seed=cfg.probe_seed)
    values = [getattr(report, c) for c in REPORT_COLUMNS]
    row = [str(int(v)) if isinstance(v, bool) else _six(v) for v in values]
    out = _outdir(args.out) if args.out else ckpt.parent
    _write_csv(out / "report.csv", cfg_hash, REPORT_COLUMNS, [row])
    for c, v in zip(REPORT_COLUMNS, row):
        print(f"{c}={v}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _plot_files(out, summary, cfg_hash):
    scripts = []
    for panel, metrics in PANELS.items():
        plots = []
        for m in metrics:
            dat = out / f"{panel}_{m}.dat"
            lines = [f"# config_hash={cfg_hash} tool=phonotok-{__version__}", "# alpha mean std"]
            lines += [f"{r['alpha']:.6f} {r[m + '_mean']:.6f} {r[m + '_std']:.6f}" for r in summary]
            dat.write_text("\n".join(lines) + "\n")
            plots.append(f"'{dat.name}' using 1:2:3 with yerrorlines title '{m}'")
        scripts.append(f"set output '{panel}.png'\nset title '{panel}'\nplot " + ", \\\n     ".join(plots))
    gp = ["# " + _banner(cfg_hash).strip("# \n"), "set terminal pngcairo size 640,480",
          "set xlabel 'alpha'", "set key outside", "set xrange [-0.05:1.05]", *scripts]
    (out / "sweep.gp").write_text("\n".join(gp) + "\n")


def cmd_sweep(args):
    cfg = _config(args)
    if args.alphas:
        cfg = replace(cfg, sweep_alphas=tuple(float(a) for a in args.alphas.split(","))).validate()
    if args.seeds is not None:
        cfg = replace(cfg, sweep_seeds=int(args.seeds)).validate()
    out = _outdir(args.out)
    cfg_hash = cfg.config_hash()
    if args.data:
        ds = _load_data(cfg, args.data)
    else:
        ds = gen_dataset(cfg.gen, cfg.n_utterances, cfg.split_ratios, cfg.speaker_independent)
    dump_config(cfg, out / EFFECTIVE_CONFIG)
    res = sweep_alpha(cfg.sweep_alphas, ds, cfg.model_config(), cfg.train_config(), cfg.diffkm,
                      n_seeds=cfg.sweep_seeds, seed0=cfg.seed, parallel=args.parallel)
    rows = []
    for c in res.cells:
        if c.report is None:
            rows.append([_six(c.alpha), c.seed] + ["nan"] * (len(SWEEP_COLUMNS) - 2))
            continue
        r = c.report
        vals = (r.content_uer, r.er_proxy_acc, r.prosody_corr, r.sid_acc, c.l_asr, c.l_voc, r.utilization, r.perplexity)
        rows.append([_six(c.alpha), c.seed] + [_six(v) for v in vals])
    _write_csv(out / "sweep.csv", cfg_hash, SWEEP_COLUMNS, rows)
    cols = ["alpha", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    srows = [[_six(r["alpha"]), r["n"]] + [_six(r[c]) for c in cols[2:]] for r in res.summary]
    srows.append(["spearman", ""] + [x for m in METRICS for x in (_six(res.spearman[m]), "")])
    _write_csv(out / "summary.csv", cfg_hash, cols, srows)
    _plot_files(out, res.summary, cfg_hash)
    failed = res.n_failed
    for m in METRICS:
        print(f"spearman[{m}]={res.spearman[m]:.6f}")
    if failed < len(res.cells):
        print(f"argmax_alpha[prosody_corr]={argmax_alpha(res.summary, 'prosody_corr'):g}")
    print(f"cells={len(res.cells)} failed={failed}")
    if failed == len(res.cells):
        log.error("every sweep cell failed")
        return EXIT_SWEEP
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / bitrate


def cmd_gradcheck(args):
    if args.config:
        load_config(args.config)
    results = verify.run_all(seed=args.seed or 0)
    ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:40s} max_rel_error={r.max_rel_error:.3e} tol={r.tol:.0e}")
        if not r.passed:
            ok = False
            print(f"     {r.detail}")
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_bitrate(args):
    try:
        value = bitrate(args.vocab, args.rate)
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    print(f"{value:.1f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="phonotok", description=__doc__)
    p.add_argument("--version", action="version", version=f"phonotok {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--parallel", type=int, default=1, help="worker processes (sweep only)")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="Lloyd init plus two-stage training")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory written by 'gen'")
    sp.add_argument("--alpha", type=float, help="override train.alpha")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    sp.add_argument("--stop-after", type=int, help="stop after this many epochs (for staged runs)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="probe a trained checkpoint")
    common(sp, out=False)
    sp.add_argument("--out", help="output directory (default: next to the checkpoint)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train and probe over an alpha grid")
    common(sp)
    sp.add_argument("--data", help="dataset directory (default: generate from config)")
    sp.add_argument("--alphas", help="comma-separated alpha grid")
    sp.add_argument("--seeds", type=int, help="seeds per alpha")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    common(sp, out=False)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bitrate", help="bits per second for a vocabulary and token rate")
    sp.add_argument("vocab", type=int)
    sp.add_argument("rate", type=float)
    sp.set_defaults(func=cmd_bitrate)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"training aborted: {exc} (epoch {exc.epoch}, batch {exc.batch})", file=sys.stderr)
        return EXIT_TRAINING
    except (CompatibilityError, CheckpointError) as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_COMPAT


if __name__ == "__main__":
    sys.exit(main())
