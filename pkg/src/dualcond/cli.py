"""Command line entry point.

    dualcond gen-data            render the synthetic corpus and its manifest
    dualcond train ae|cfr|dcdm   train one stage (dcdm takes --mode)
    dualcond evaluate            score the test split, write CSV, report, figures
    dualcond ablate              four conditioning modes over several seeds

Artifacts go under --out, else $DUALCOND_OUT, else ./runs. Exit codes:
0 success, 1 usage, 2 validation or lineage failure, 3 training failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from ._torch import TrainingError
from .autoencoder import load_autoencoder, save_autoencoder, train_autoencoder
from .checkpoint import CheckpointError
from .classifier import load_classifier, save_classifier, train_classifier
from .conditioning import MODES
from .config import ConfigError, RunConfig, dump_config, load_config
from .dataset import ManifestError, export_manifest, generate_toy, load_manifest
from .denoiser import load_denoiser, save_denoiser
from .evaluation import EvalResult, evaluate
from .pipeline import ModelBundle
from .schedule import build_schedule
from .training import encode_training_set, train_dcdm

log = logging.getLogger("dualcond")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_TRAINING = 0, 1, 2, 3
ENV_OUT = "DUALCOND_OUT"

# config sections each stage depends on; their hash goes into the lineage
STAGE_SECTIONS = {
    "data": ("data",),
    "ae": ("data", "autoencoder"),
    "cfr": ("data", "classifier"),
    "dcdm": ("data", "autoencoder", "schedule", "diffusion"),
    "evaluate": ("sampler", "evaluate"),
}


class UsageError(Exception):
    pass


class LineageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- layout

class Layout:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    def stage(self, name: str) -> Path:
        return self.root / name

    def dcdm(self, mode: str, seed: int) -> Path:
        return self.root / "dcdm" / f"{mode}_s{seed}"

    def evaluation(self, mode: str, seed: int) -> Path:
        return self.root / "eval" / f"{mode}_s{seed}"


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise LineageError(f"missing run manifest {path}") from None


def _write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise LineageError(f"missing {what}: {path} (run the upstream stage first)")
    return path


def _stage_config(cfg: RunConfig, stage: str) -> dict:
    d = cfg.to_dict()
    return {s: d[s] for s in STAGE_SECTIONS[stage]}


def _lineage(cfg: RunConfig, stage: str, **inputs) -> dict:
    return {"stage": stage, "config_hash": cfg.section_hash(*STAGE_SECTIONS[stage]), "inputs": inputs}


def _check_lineage(recorded: dict, expected: dict, what: str, force: bool) -> None:
    problems = []
    if recorded.get("config_hash") != expected["config_hash"]:
        problems.append("config hash differs")
    for k, v in expected["inputs"].items():
        if recorded.get("inputs", {}).get(k) != v:
            problems.append(f"input {k!r} differs")
    if problems:
        msg = f"{what}: lineage mismatch ({'; '.join(problems)})"
        if not force:
            raise LineageError(msg + "; rerun the stage or pass --force")
        log.warning("%s; continuing because of --force", msg)


def _load_corpus(layout: Layout, cfg: RunConfig, data=None):
    path = Path(data) if data else _require(layout.data / "manifest.csv", "corpus manifest")
    return load_manifest(path, cfg.data.image_size)


# ---------------------------------------------------------------- stages

def cmd_gen_data(cfg: RunConfig, layout: Layout, args) -> int:
    if layout.root.exists() and not layout.root.is_dir():
        raise OSError(f"output root {layout.root} is not a directory")
    corpus = generate_toy(cfg.data)
    manifest = export_manifest(corpus, layout.data)
    info = {
        **_lineage(cfg, "data"),
        "config": _stage_config(cfg, "data"),
        "corpus_hash": corpus.hash,
        "manifest_sha256": _file_hash(manifest),
        "counts": {f"{s}/{'ood' if o else 'id'}": int(((corpus.splits == s) & (corpus.ood == o)).sum())
                   for s in ("train", "val", "test") for o in (0, 1)},
    }
    _write_json(layout.data / "run.json", info)
    print(f"wrote {len(corpus)} images to {layout.data}")
    for k, v in info["counts"].items():
        if v:
            print(f"  {k}: {v}")
    print(f"corpus hash {corpus.hash}")
    return EXIT_OK


def _train_ae(cfg, layout, corpus):
    tr, va = corpus.training_view("train"), corpus.training_view("val")
    model, hist = train_autoencoder(tr.images, cfg.autoencoder, val_images=va.images)
    lineage = _lineage(cfg, "ae", corpus=corpus.hash)
    out = layout.stage("ae")
    digest = save_autoencoder(model, out / "ae.ckpt", {"lineage": lineage})
    _write_csv(out / "loss.csv", ("step", "loss"), [(i, _fmt(v)) for i, v in enumerate(hist["step_loss"])])
    plotting.loss_curve(hist["step_loss"], out / "loss.png", "autoencoder reconstruction loss")
    _write_json(out / "run.json", {**lineage, "config": _stage_config(cfg, "ae"), "checkpoint": digest,
                                   "loss_csv_sha256": _file_hash(out / "loss.csv"),
                                   "val_ssim": hist["val_ssim"]})
    print(f"autoencoder: held-out SSIM {hist['val_ssim']:.4f}, checkpoint {digest[:16]}")


def _train_cfr(cfg, layout, corpus):
    tr, va = corpus.training_view("train"), corpus.training_view("val")
    model, hist = train_classifier(tr.images, tr.labels, cfg.data.n_id_classes, cfg.classifier,
                                   val_images=va.images, val_labels=va.labels)
    lineage = _lineage(cfg, "cfr", corpus=corpus.hash)
    out = layout.stage("cfr")
    digest = save_classifier(model, out / "cfr.ckpt", {"lineage": lineage})
    _write_csv(out / "loss.csv", ("epoch", "loss"), [(i, _fmt(v)) for i, v in enumerate(hist["epoch_loss"])])
    plotting.loss_curve(hist["epoch_loss"], out / "loss.png", "classifier cross-entropy", smooth=2)
    _write_json(out / "run.json", {**lineage, "config": _stage_config(cfg, "cfr"), "checkpoint": digest,
                                   "loss_csv_sha256": _file_hash(out / "loss.csv"),
                                   "val_accuracy": hist["val_accuracy"]})
    print(f"classifier: held-out accuracy {hist['val_accuracy']:.4f}, checkpoint {digest[:16]}")


def _load_ae(layout, cfg, corpus, force):
    ae, meta, digest = load_autoencoder(_require(layout.stage("ae") / "ae.ckpt", "autoencoder checkpoint"))
    _check_lineage(meta.get("lineage", {}), _lineage(cfg, "ae", corpus=corpus.hash), "autoencoder", force)
    return ae, digest


def _load_cfr(layout, cfg, corpus, force):
    cf, meta, digest = load_classifier(_require(layout.stage("cfr") / "cfr.ckpt", "classifier checkpoint"))
    _check_lineage(meta.get("lineage", {}), _lineage(cfg, "cfr", corpus=corpus.hash), "classifier", force)
    return cf, digest


def train_dcdm_stage(cfg, layout, corpus, mode, ae, ae_digest, reuse: bool = False) -> str:
    """Train (or, with ``reuse``, keep a lineage-matching) denoiser; returns its digest."""
    seed = cfg.diffusion.seed
    out = layout.dcdm(mode, seed)
    lineage = _lineage(cfg, "dcdm", corpus=corpus.hash, ae=ae_digest)
    if reuse and (out / "run.json").exists() and (out / "dcdm.ckpt").exists():
        run = _read_json(out / "run.json")
        if (run.get("config_hash"), run.get("inputs"), run.get("mode")) == \
                (lineage["config_hash"], lineage["inputs"], mode):
            log.info("reusing %s", out)
            return run["checkpoint"]
    tr = corpus.training_view("train")
    data = encode_training_set(ae, tr.images, tr.labels)
    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
    res = train_dcdm(data, schedule, cfg.diffusion, mode, cfg.data.n_id_classes, seed)
    digest = save_denoiser(res.model, out / "dcdm.ckpt", {"lineage": lineage, "seed": seed})
    losses = res.loss_array()
    _write_csv(out / "loss.csv", ("step", "loss"), [(r.step, _fmt(r.loss)) for r in res.losses])
    plotting.loss_curve(losses, out / "loss.png", f"denoiser loss ({mode}, seed {seed})")
    _write_json(out / "run.json", {**lineage, "config": _stage_config(cfg, "dcdm"), "mode": mode, "seed": seed,
                                   "checkpoint": digest, "latent_scale": float(res.model.latent_scale),
                                   "loss_csv_sha256": _file_hash(out / "loss.csv"),
                                   "loss_first_100": float(losses[:100].mean()),
                                   "loss_last_100": float(losses[-100:].mean())})
    print(f"denoiser[{mode}, seed {seed}]: loss {losses[:100].mean():.4f} -> {losses[-100:].mean():.4f}, "
          f"checkpoint {digest[:16]}")
    return digest


def cmd_train(cfg: RunConfig, layout: Layout, args) -> int:
    corpus = _load_corpus(layout, cfg, args.data)
    if args.stage == "ae":
        _train_ae(cfg, layout, corpus)
    elif args.stage == "cfr":
        _train_cfr(cfg, layout, corpus)
    else:
        ae, digest = _load_ae(layout, cfg, corpus, args.force)
        train_dcdm_stage(cfg, layout, corpus, args.mode, ae, digest)
    return EXIT_OK


def load_bundle(cfg, layout, corpus, mode, force=False) -> ModelBundle:
    ae, ae_digest = _load_ae(layout, cfg, corpus, force)
    cf, cf_digest = _load_cfr(layout, cfg, corpus, force)
    path = _require(layout.dcdm(mode, cfg.diffusion.seed) / "dcdm.ckpt", f"denoiser checkpoint ({mode})")
    den, meta, den_digest = load_denoiser(path)
    _check_lineage(meta.get("lineage", {}), _lineage(cfg, "dcdm", corpus=corpus.hash, ae=ae_digest),
                   f"denoiser ({mode})", force)
    if den.mode != mode:
        raise LineageError(f"{path} holds a {den.mode!r} denoiser, expected {mode!r}")
    s = cfg.schedule
    if (den.arch["T"], den.arch["beta_start"], den.arch["beta_end"]) != (s.T, s.beta_start, s.beta_end):
        raise LineageError(f"{path}: noise schedule differs from the config")
    schedule = build_schedule(s.T, s.beta_start, s.beta_end)
    return ModelBundle(ae, den, schedule, cf, cfg.sampler.steps, cfg.sampler.noise_to_t,
                       {"ae": ae_digest, "cfr": cf_digest, "dcdm": den_digest})


def write_scores(path, result: EvalResult) -> None:
    _write_csv(path, ("sample_id", "truth", "predicted_class", "ood_score", "y_pred"),
               [(s.sample_id, s.truth, s.predicted_class, _fmt(s.ood_score), s.y_pred) for s in result.scored])


def write_report(path, report: dict) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in report.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _figures(out: Path, corpus, result: EvalResult, n_grid: int) -> None:
    ok = [r for r in result.raw if r.error is None]
    s = np.array([r.ood_score for r in ok])
    y = np.array([r.truth for r in ok])
    plotting.score_histogram(s, y, out / "score_hist.png", result.tau)
    plotting.roc_curve(s, y, out / "roc.png", result.auc)
    if n_grid and result.reconstructions:
        test = corpus.select("test")
        index = {sid: i for i, sid in enumerate(test.ids)}
        for flag, name in ((0, "id"), (1, "ood")):
            # spread picks over classes: sort by (class, id) and stride
            cand = sorted((int(test.labels[index[r.sample_id]]), r.sample_id) for r in ok if r.truth == flag)
            picks = [cand[k][1] for k in np.linspace(0, len(cand) - 1, min(n_grid, len(cand))).astype(int)]
            rows = [index[p] for p in picks]
            scores = {r.sample_id: r.ood_score for r in ok}
            plotting.reconstruction_grid(test.images[rows], np.stack([result.reconstructions[i] for i in rows]),
                                         out / f"recon_{name}.png", test.labels[rows], [scores[p] for p in picks])


def cmd_evaluate(cfg: RunConfig, layout: Layout, args) -> int:
    corpus = _load_corpus(layout, cfg, args.data)
    bundle = load_bundle(cfg, layout, corpus, args.mode, args.force)
    tau = args.tau if args.tau is not None else cfg.evaluate.tau
    res = evaluate(bundle, corpus, cfg.evaluate.seed, tau, cfg.evaluate.batch_size,
                   keep_reconstructions=cfg.evaluate.grid_samples > 0)
    out = layout.evaluation(args.mode, cfg.diffusion.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.csv", res)
    if res.failures:
        _write_csv(out / "failures.csv", ("sample_id", "error"), sorted(res.failures.items()))
    report = {"mode": args.mode, "seed": cfg.evaluate.seed, **res.report()}
    write_report(out / "metrics.txt", report)
    _figures(out, corpus, res, cfg.evaluate.grid_samples)
    _write_json(out / "run.json", {**_lineage(cfg, "evaluate", corpus=corpus.hash, **bundle.hashes),
                                   "config": _stage_config(cfg, "evaluate"), "mode": args.mode,
                                   "scores_csv_sha256": _file_hash(out / "scores.csv"), "report": report})
    for k in ("auc", "f1", "accuracy", "precision", "tau"):
        print(f"{k:>10} = {report[k]:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


ABLATION_METRICS = ("accuracy", "precision", "f1", "auc")


def summarize_ablation(rows: list[dict], modes) -> list[dict]:
    table = []
    for mode in modes:
        sel = [r for r in rows if r["method"] == mode]
        entry = {"method": mode, "n_seeds": len(sel)}
        for m in ABLATION_METRICS:
            v = np.array([r[m] for r in sel], dtype=float)
            entry[f"{m}_mean"] = float(v.mean())
            entry[f"{m}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        table.append(entry)
    return table


def cmd_ablate(cfg: RunConfig, layout: Layout, args) -> int:
    corpus = _load_corpus(layout, cfg, args.data)
    ae, ae_digest = _load_ae(layout, cfg, corpus, args.force)
    _load_cfr(layout, cfg, corpus, args.force)
    seeds = (args.seed,) if args.seed is not None else cfg.ablate.seeds
    if len(seeds) < 3:
        log.warning("ablation over %d seed(s); the comparison protocol calls for at least 3", len(seeds))
    out = layout.stage("ablate")
    rows = []
    for seed in seeds:
        run_cfg = cfg.replace("diffusion", seed=seed).replace("evaluate", seed=seed)
        for mode in cfg.ablate.modes:
            train_dcdm_stage(run_cfg, layout, corpus, mode, ae, ae_digest, reuse=not args.retrain)
            bundle = load_bundle(run_cfg, layout, corpus, mode, args.force)
            res = evaluate(bundle, corpus, seed, None, cfg.evaluate.batch_size)
            write_scores(out / "scores" / f"{mode}_s{seed}.csv", res)
            rows.append({"method": mode, "seed": seed, "tau": res.tau, "auc": res.auc,
                         **{m: res.metrics[m] for m in ("accuracy", "precision", "f1")}})
            print(f"{mode:>14} seed {seed}: AUC {res.auc:.4f} acc {res.metrics['accuracy']:.4f} "
                  f"prec {res.metrics['precision']:.4f}", flush=True)
    cols = ("method", "seed", "accuracy", "precision", "f1", "auc", "tau")
    _write_csv(out / "runs.csv", cols, [[_fmt(r[c]) for c in cols] for r in rows])
    table = summarize_ablation(rows, cfg.ablate.modes)
    tcols = ("method", "n_seeds") + tuple(f"{m}_{s}" for m in ABLATION_METRICS for s in ("mean", "std"))
    _write_csv(out / "ablation.csv", tcols, [[_fmt(t[c]) for c in tcols] for t in table])
    plotting.ablation_bars([t["method"] for t in table], [t["auc_mean"] for t in table],
                           [t["auc_std"] for t in table], out / "ablation_auc.png")
    _write_json(out / "run.json", {**_lineage(cfg, "dcdm", corpus=corpus.hash, ae=ae_digest),
                                   "seeds": list(seeds), "modes": list(cfg.ablate.modes),
                                   "runs_csv_sha256": _file_hash(out / "runs.csv"),
                                   "ablation_csv_sha256": _file_hash(out / "ablation.csv")})
    print()
    for t in table:
        print(f"{t['method']:>14}: AUC {t['auc_mean']:.4f} +/- {t['auc_std']:.4f}  "
              f"acc {t['accuracy_mean']:.4f}  prec {t['precision_mean']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run config; defaults are used for anything it leaves out")
    common.add_argument("--seed", type=int, help="override the seed of the stage being run")
    common.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./runs)")
    common.add_argument("--force", action="store_true", help="continue despite lineage mismatches")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dualcond", description="Dual-conditioned latent diffusion OOD detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("stage", choices=("ae", "cfr", "dcdm"))
    t.add_argument("--mode", choices=MODES, default="dual")
    t.add_argument("--data", help="corpus manifest (default: <out>/data/manifest.csv)")
    e = sub.add_parser("evaluate", parents=[common], help="score the test split")
    e.add_argument("--mode", choices=MODES, default="dual")
    e.add_argument("--tau", type=float, help="decision threshold; default selects one on a calibration fold")
    e.add_argument("--data", help="corpus manifest (default: <out>/data/manifest.csv)")
    a = sub.add_parser("ablate", parents=[common], help="compare the four conditioning modes")
    a.add_argument("--data", help="corpus manifest (default: <out>/data/manifest.csv)")
    a.add_argument("--retrain", action="store_true", help="retrain denoisers even when lineage matches")
    p.add_argument("--version", action="version", version="dualcond 0.1.0")
    return p


def _apply_seed(cfg: RunConfig, args) -> RunConfig:
    if args.seed is None or args.command == "ablate":
        return cfg
    if args.command == "gen-data":
        return cfg.replace("data", seed=args.seed)
    if args.command == "evaluate":
        return cfg.replace("diffusion", seed=args.seed).replace("evaluate", seed=args.seed)
    section = {"ae": "autoencoder", "cfr": "classifier", "dcdm": "diffusion"}[args.stage]
    return cfg.replace(section, seed=args.seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_seed(load_config(args.config), args)
        if args.command == "evaluate" and args.tau is not None and not -1.0 <= args.tau <= 1.0:
            raise UsageError("--tau must lie in [-1, 1]")
        layout = Layout(args.out or os.environ.get(ENV_OUT) or "runs")
        handler = {"gen-data": cmd_gen_data, "train": cmd_train,
                   "evaluate": cmd_evaluate, "ablate": cmd_ablate}[args.command]
        return handler(cfg, layout, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LineageError, CheckpointError, ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, FloatingPointError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
