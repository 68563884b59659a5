"""Command-line entry point.

Each invocation creates ``<out>/<command>-<timestamp>/`` holding its outputs
and a ``config.ini`` snapshot, and repoints ``<out>/LATEST`` at it.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig, load_config
from .contrastive import LossMode
from .errors import DataError, MVCLError, UsageError
from .eval import (
    embedding_diagnostics,
    evaluate_head,
    fine_tune,
    representation_matrix,
    train_linear_head,
    write_pca_csv,
)
from .nn.checkpoint import checkpoint_load, checkpoint_save
from .nn.model import preset
from .nn.optim import OptimizerConfig
from .pipeline import PretrainConfig, ViewStore, assemble_batch, forward_projections, pretrain
from .views import extract_views
from .volume import CropPolicy, Volume, crop_lesion, crop_side_for, load_volume, preprocess, save_volume

log = logging.getLogger("mvcl")

REPORT_METRICS = ("accuracy", "auc", "sensitivity", "specificity", "precision")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------------

def _run_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run = out / f"{command}-{stamp}"
    run.mkdir(parents=True, exist_ok=False)
    latest = out / "LATEST"
    tmp = out / f".LATEST.{os.getpid()}"
    if tmp.is_symlink() or tmp.exists():
        tmp.unlink()
    tmp.symlink_to(run.name)
    os.replace(tmp, latest)
    cfg.save(run / "config.ini")
    return run


def _require(cfg, *keys):
    for k in keys:
        if not getattr(cfg, k):
            raise UsageError(f"missing required setting {k!r} (flag --{k.replace('_', '-')} or config key)")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pretrain_config(cfg: RunConfig) -> PretrainConfig:
    enc, proj = preset(cfg.preset)
    opt = OptimizerConfig(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.epochs,
                          cfg.decay_epochs, cfg.decay_factor, cfg.batch_size)
    return PretrainConfig(plane_ids=cfg.planes, optimizer=opt, mode=LossMode.parse(cfg.mode), tau=cfg.tau,
                          out_size=cfg.out_size, seed=cfg.seed, encoder=enc, projector=proj,
                          log_every=cfg.log_every, checkpoint_every=cfg.checkpoint_every,
                          threads=cfg.threads or None)


def _labelled(cfg: RunConfig, store: ViewStore):
    rows = D.filter_manifest(D.read_manifest(cfg.manifest), cfg.dataset_mode)
    lesions = D.label_rows(rows, cfg.dataset_mode)
    missing = [les.lesion_id for les in lesions if les.lesion_id not in store]
    if missing:
        raise DataError(f"{len(missing)} labelled lesions have no extracted views, e.g. {missing[:3]}")
    classes = D.class_names(cfg.dataset_mode)
    return lesions, classes


def _xy(state, store, lesions, classes):
    ids = [les.lesion_id for les in lesions]
    y = np.array([classes.index(les.label) for les in lesions])
    return ids, representation_matrix(state, store, ids), y


def _split(cfg, lesions, run):
    train, test = D.split_dataset(lesions, cfg.test_fraction, cfg.seed)
    subset = D.subsample_labels(train, cfg.fraction, cfg.seed)
    D.write_split(subset, test, cfg.seed, cfg.fraction, run / "split.json")
    return subset, test


# -- commands -------------------------------------------------------------------

def cmd_gen_synthetic(cfg: RunConfig, run: Path):
    vol_dir = run / "volumes"
    rows = []
    c = float(cfg.side // 2)
    for cls in D.SYNTHETIC_CLASSES:
        for k in range(cfg.n_per_class):
            lid = f"{cls}_{k:04d}"
            cube = D.gen_synthetic_lesion(cls, cfg.side, (cfg.seed, k), lid)
            save_volume(Volume(cube.data, (1.0, 1.0, 1.0), normalized=True), vol_dir / f"{lid}.raw")
            rows.append(D.ManifestRow(f"volumes/{lid}.raw", lid, (c, c, c), float(cfg.side) / 2,
                                      1.0, class_label=cls))
    D.write_manifest(rows, run / "manifest.csv")
    log.info("wrote %d synthetic lesions to %s", len(rows), run)
    return {"lesions": len(rows), "manifest": str(run / "manifest.csv")}


def cmd_extract_views(cfg: RunConfig, run: Path):
    _require(cfg, "manifest")
    manifest = Path(cfg.manifest)
    rows = D.filter_manifest(D.read_manifest(manifest), cfg.dataset_mode)
    policy = CropPolicy(cfg.crop_kind, cfg.crop_margin_mm, cfg.crop_fixed_mm)
    out = run / "views"
    cache = {}
    for r in rows:
        vpath = (manifest.parent / r.volume_path).resolve()
        if vpath not in cache:
            cache.clear()
            cache[vpath] = preprocess(load_volume(vpath), cfg.hu_lo, cfg.hu_hi)
        side = crop_side_for(policy, r.longest_diameter_mm)
        cube = crop_lesion(cache[vpath], r.center_mm, side, r.lesion_id)
        vs = extract_views(cube, cfg.planes, cfg.out_size)
        ViewStore([vs]).save(out)
    log.info("extracted %d view stacks into %s", len(rows), out)
    return {"lesions": len(rows), "views": str(out)}


def cmd_pretrain(cfg: RunConfig, run: Path):
    _require(cfg, "views")
    store = ViewStore.load(cfg.views)
    pcfg = _pretrain_config(cfg)
    state = checkpoint_load(cfg.checkpoint) if cfg.checkpoint else None
    state, rows = pretrain(store, pcfg, state=state, log_path=run / "train_log.jsonl",
                           checkpoint_dir=run / "checkpoints")
    ids = store.ids()[: cfg.diagnostic_lesions]
    z = forward_projections(state, assemble_batch(store, ids, state.plane_ids, state.dtype), train=False)
    diag = embedding_diagnostics(z)
    _write_json(run / "diagnostics.json", diag.to_dict())
    write_pca_csv(run / "pca.csv", ids, state.plane_ids, diag.pca)
    return {"final_loss": rows[-1].loss if rows else None, "checkpoint": str(run / "checkpoints" / "final.ckpt"),
            **diag.to_dict()}


def _eval_common(cfg: RunConfig):
    _require(cfg, "checkpoint", "manifest", "views")
    state = checkpoint_load(cfg.checkpoint)
    store = ViewStore.load(cfg.views)
    lesions, classes = _labelled(cfg, store)
    return state, store, lesions, classes


def cmd_linear_eval(cfg: RunConfig, run: Path):
    state, store, lesions, classes = _eval_common(cfg)
    subset, test = _split(cfg, lesions, run)
    _, xtr, ytr = _xy(state, store, subset, classes)
    _, xte, yte = _xy(state, store, test, classes)
    head = train_linear_head(xtr, ytr, len(classes), cfg.head_epochs, cfg.head_lr, batch_size=cfg.head_batch_size,
                             seed=cfg.seed, state=state, classes=classes)
    report = evaluate_head(head, xte, yte)
    out = {"protocol": "linear", "fraction": cfg.fraction, "seed": cfg.seed, "classes": list(classes),
           "n_train": len(subset), **report.to_dict()}
    _write_json(run / "metrics.json", out)
    return out


def cmd_finetune(cfg: RunConfig, run: Path):
    state, store, lesions, classes = _eval_common(cfg)
    subset, test = _split(cfg, lesions, run)
    ids = [les.lesion_id for les in subset]
    y = np.array([classes.index(les.label) for les in subset])
    state2, head = fine_tune(state, None, store, ids, y, len(classes), cfg.finetune_epochs, cfg.finetune_lr,
                             batch_size=cfg.head_batch_size, seed=cfg.seed, classes=classes,
                             warmup_epochs=cfg.head_epochs)
    _, xte, yte = _xy(state2, store, test, classes)
    report = evaluate_head(head, xte, yte)
    checkpoint_save(state2, run / "finetuned.ckpt", extra={"finetune": {"fraction": cfg.fraction}})
    out = {"protocol": "finetune", "fraction": cfg.fraction, "seed": cfg.seed, "classes": list(classes),
           "n_train": len(subset), **report.to_dict()}
    _write_json(run / "metrics.json", out)
    return out


def aggregate_metrics(root) -> list[dict]:
    """One row per (protocol, fraction): mean and std of each metric across runs."""
    groups = defaultdict(list)
    for path in sorted(Path(root).rglob("metrics.json")):
        m = json.loads(path.read_text())
        groups[(m["protocol"], float(m["fraction"]))].append(m)
    rows = []
    for (protocol, fraction), ms in sorted(groups.items()):
        row = {"protocol": protocol, "fraction": fraction, "n_runs": len(ms)}
        for k in REPORT_METRICS:
            vals = np.array([m[k] for m in ms], dtype=float)
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std())
        rows.append(row)
    return rows


def cmd_report(cfg: RunConfig, run: Path, source: Path):
    from . import plotting

    if not source.is_dir():
        raise DataError(f"run directory not found: {source}")
    rows = aggregate_metrics(source)
    if not rows:
        raise DataError(f"no metrics.json files under {source}")
    fields = ["protocol", "fraction", "n_runs"] + [f"{k}_{s}" for k in REPORT_METRICS for s in ("mean", "std")]
    with open(run / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    figures = [plotting.plot_fraction_sweep(rows, run / "fraction_sweep.png")]
    for logfile in sorted(source.rglob("train_log.jsonl")):
        log_rows = [json.loads(line) for line in logfile.read_text().splitlines() if line.strip()]
        if log_rows:
            figures.append(plotting.plot_loss_curve(log_rows, run / f"loss_{logfile.parent.name}.png"))
    for pca in sorted(source.rglob("pca.csv")):
        with open(pca, newline="") as fh:
            pts = list(csv.DictReader(fh))
        if pts:
            figures.append(plotting.plot_embedding(pts, run / f"embedding_{pca.parent.name}.png"))
    return {"rows": len(rows), "report": str(run / "report.csv"), "figures": [str(f) for f in figures]}


# -- argument parsing ---------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--planes", help="comma-separated plane ids, e.g. 1,2,3")
    common.add_argument("--fraction", type=float)
    common.add_argument("--mode", choices=["cmc", "as-written"])
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="parent directory for run directories")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mvcl", description="Multi-view contrastive learning for 3D lesion volumes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", parents=[common], help="write synthetic lesion volumes + manifest")
    g.add_argument("--n-per-class", type=int)
    g.add_argument("--side", type=int)

    e = sub.add_parser("extract-views", parents=[common], help="crop lesions and cache their views")
    e.add_argument("--manifest")
    e.add_argument("--out-size", type=int)

    t = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    t.add_argument("--views")
    t.add_argument("--checkpoint", help="resume from this checkpoint")

    for name, help_ in (("linear-eval", "linear evaluation on frozen representations"),
                        ("finetune", "fine-tune encoders and head on a label fraction")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--checkpoint")
        s.add_argument("--manifest")
        s.add_argument("--views")

    r = sub.add_parser("report", parents=[common], help="aggregate metrics and render figures")
    r.add_argument("run_dir")
    return p


def _resolve(args) -> RunConfig:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k] = v
    direct = {"seed": args.seed, "planes": args.planes, "fraction": args.fraction, "threads": args.threads,
              "out": args.out}
    if args.mode:
        direct["mode"] = LossMode.parse(args.mode).value
    for attr in ("n_per_class", "side", "manifest", "views", "checkpoint", "out_size"):
        if getattr(args, attr, None) is not None:
            direct[attr] = getattr(args, attr)
    over.update({k: v for k, v in direct.items() if v is not None})
    return load_config(args.config, over)


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "extract-views": cmd_extract_views,
    "pretrain": cmd_pretrain,
    "linear-eval": cmd_linear_eval,
    "finetune": cmd_finetune,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "report":
            source = Path(args.run_dir).resolve()
            if args.out is None:
                cfg.out = str(source)
            run = _run_dir(cfg, "report")
            result = cmd_report(cfg, run, source)
        else:
            run = _run_dir(cfg, args.command)
            result = COMMANDS[args.command](cfg, run)
        result["run_dir"] = str(run)
        print(json.dumps(result, sort_keys=True, default=str))
        return 0
    except MVCLError as exc:
        dump = getattr(exc, "dump", None)
        if dump and "run" in locals():
            _write_json(run / "numeric_error_dump.json", dump)
        print(f"mvcl: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mvcl: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
