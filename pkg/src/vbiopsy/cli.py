"""Command-line entry point: ``vbiopsy <subcommand> [flags]``.

Every subcommand reads one run config and writes under a single output
root::

    <out>/phantom/      manifest.json, cases/*.vbv, cases/*_gt.vbm
    <out>/preprocess/   manifest.json, registered volumes, brain and gt masks, stage logs
    <out>/localize/     prior maps, coarse and refined masks, localization_report.json
    <out>/folds.json
    <out>/train/        fold checkpoints and JSONL epoch logs
    <out>/evaluate/     cv_report.json, cv_report.csv
    <out>/ablate/       ablation.csv, ablation.json
    <out>/saliency/     heatmaps (VBV), per-slice PGM dumps, saliency_report.json
    <out>/produced_files.json

A lock file keeps two invocations off the same root, and a stage that fails
leaves a FAILED marker in its directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from vbiopsy import evaluate as E
from vbiopsy.config import ConfigError, RunConfig
from vbiopsy.diagnoser import (
    Dataset, load_checkpoint, predict_case, save_checkpoint, train, write_epoch_log,
)
from vbiopsy.localizer import iou, localize_case, recall
from vbiopsy.oracle import RemotePredictor, StubPredictor
from vbiopsy.phantom import CaseRecord, Manifest, class_separability_report, generate_cohort
from vbiopsy.preprocess import PreprocessError, run_preprocess
from vbiopsy.volume import Mask, Volume, load_mask, load_volume, save_mask, save_volume

log = logging.getLogger("vbiopsy")

LOCK_NAME = ".vbiopsy.lock"
FAILED_NAME = "FAILED"


class CLIError(RuntimeError):
    pass


class MissingArtifact(CLIError):
    def __init__(self, path, producer):
        super().__init__(f"missing {path}; run `vbiopsy {producer}` first (same --out)")


# ---------------------------------------------------------------------------
# workspace helpers
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def dir(self, name):
        p = self.root / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, rel, producer):
        p = self.root / rel
        if not p.exists():
            raise MissingArtifact(p, producer)
        return p

    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / LOCK_NAME
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CLIError(f"{path} exists: another vbiopsy command is using this output root "
                           "(delete the lock file if that run has died)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return path

    def record_outputs(self):
        """Rewrite produced_files.json with a sha256 of every file under the root."""
        entries = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name not in (LOCK_NAME, "produced_files.json"):
                entries[p.relative_to(self.root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        E.write_json(self.root / "produced_files.json", entries)


def _echo_config(cfg: RunConfig, d: Path):
    (d / "config.json").write_text(cfg.echo())


def _parallel_map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_phantom(cfg: RunConfig, ws: Workspace, args):
    d = ws.dir("phantom")
    manifest = generate_cohort(cfg.phantom, d)
    E.write_json(d / "separability.json", {str(k): v for k, v in class_separability_report(manifest).items()})
    _echo_config(cfg, d)
    print(f"phantom: {len(manifest.cases)} cases -> {d / 'manifest.json'}")
    return manifest


def _preprocess_one(job):
    cfg, src, dst, rec = job
    manifest_root, out = Path(src), Path(dst)
    v = load_volume(manifest_root / rec.volume_path)
    res = run_preprocess(v, cfg.preprocess)
    cid = rec.case_id
    save_volume(res.volume, out / "cases" / f"{cid}.vbv")
    save_mask(res.brain_mask, out / "cases" / f"{cid}_brain.vbm")
    gt_path = manifest_root / rec.gt_mask_path
    meta = dict(rec.meta)
    meta["brain_mask_path"] = f"cases/{cid}_brain.vbm"
    gt_rel = ""
    if rec.gt_mask_path and gt_path.exists():
        gt = load_mask(gt_path)
        save_mask(Mask(res.transform.apply(gt.bits)), out / "cases" / f"{cid}_gt.vbm")
        gt_rel = f"cases/{cid}_gt.vbm"
    E.write_json(out / "cases" / f"{cid}_log.json", {"stages": res.log, "transform": res.transform.to_dict()})
    return CaseRecord(cid, rec.class_label, f"cases/{cid}.vbv", gt_rel, meta)


def stage_preprocess(cfg: RunConfig, ws: Workspace, args):
    mpath = Path(args.manifest) if args.manifest else ws.require("phantom/manifest.json", "phantom-gen")
    if not mpath.exists():
        raise MissingArtifact(mpath, "phantom-gen")
    src = Manifest.load(mpath)
    d = ws.dir("preprocess")
    (d / "cases").mkdir(exist_ok=True)
    jobs = [(cfg, str(src.root), str(d), rec) for rec in src.cases]
    try:
        cases = _parallel_map(_preprocess_one, jobs, args.jobs)
    except PreprocessError as exc:
        raise CLIError(f"preprocess failed at stage {exc.stage}: {exc}") from exc
    out = Manifest(cases, src.k_classes, src.generator_config_echo, d)
    out.save(d / "manifest.json")
    _echo_config(cfg, d)
    print(f"preprocess: {len(cases)} cases -> {d / 'manifest.json'}")
    return out


def _localize_one(job):
    cfg, root, out, index, rec, oracle_kind = job
    root, out = Path(root), Path(out)
    v = load_volume(root / rec.volume_path)
    brain = load_mask(root / rec.meta["brain_mask_path"])
    gt = load_mask(root / rec.gt_mask_path) if rec.gt_mask_path else None
    if oracle_kind == "stub":
        if gt is None:
            raise CLIError(f"{rec.case_id}: the stub oracle needs a ground-truth mask")
        predictor = StubPredictor(gt.bits, cfg.oracle.stub(cfg.oracle_seed(index)))
    else:
        predictor = RemotePredictor(cfg.oracle.endpoint())
    loc = localize_case(v, predictor, cfg.localizer, brain, seed=cfg.localizer.seed + index)
    coarse = Mask(loc.prior.values > cfg.localizer.tau_bin)
    cid = rec.case_id
    save_volume(Volume(loc.prior.values.astype(np.float32)), out / "cases" / f"{cid}_prior.vbv")
    save_mask(coarse, out / "cases" / f"{cid}_coarse.vbm")
    save_mask(loc.refined, out / "cases" / f"{cid}_refined.vbm")
    entry = {"case_id": cid, "fallback": loc.fallback, "n_boxes": loc.n_boxes, "note": loc.note,
             "refined_voxels": loc.refined.count}
    if gt is not None:
        entry.update({"recall_coarse": recall(coarse, gt), "recall_refined": recall(loc.refined, gt),
                      "iou_coarse": iou(coarse, gt), "iou_refined": iou(loc.refined, gt)})
    if isinstance(predictor, RemotePredictor):
        entry["failed_slices"] = predictor.failed
        entry["warnings"] = predictor.warnings
    return entry


def stage_localize(cfg: RunConfig, ws: Workspace, args):
    mpath = Path(args.manifest) if args.manifest else ws.require("preprocess/manifest.json", "preprocess")
    if not mpath.exists():
        raise MissingArtifact(mpath, "preprocess")
    man = Manifest.load(mpath)
    d = ws.dir("localize")
    (d / "cases").mkdir(exist_ok=True)
    kind = args.oracle or cfg.oracle.kind
    jobs = [(cfg, str(man.root), str(d), i, rec, kind) for i, rec in enumerate(man.cases)]
    entries = _parallel_map(_localize_one, jobs, args.jobs)
    summary = {"n_cases": len(entries), "n_fallback": sum(e["fallback"] for e in entries), "oracle": kind}
    for key in ("recall_coarse", "recall_refined", "iou_coarse", "iou_refined"):
        vals = [e[key] for e in entries if key in e]
        if vals:
            summary[f"mean_{key}"] = float(np.mean(vals))
    E.write_json(d / "localization_report.json", {"summary": summary, "cases": entries})
    _echo_config(cfg, d)
    print(f"localize: {len(entries)} cases, {summary['n_fallback']} fallbacks -> {d}")
    return entries


def load_cohort(ws: Workspace, manifest=None):
    """Registered volumes, the three mask sources and labels, in manifest order."""
    mpath = Path(manifest) if manifest else ws.require("preprocess/manifest.json", "preprocess")
    if not mpath.exists():
        raise MissingArtifact(mpath, "preprocess")
    ws.require("localize/localization_report.json", "localize")
    man = Manifest.load(mpath)
    vols, brain, coarse, refined = [], [], [], []
    for rec in man.cases:
        vols.append(load_volume(man.path(rec.volume_path)).data.astype(np.float64))
        brain.append(load_mask(man.path(rec.meta["brain_mask_path"])).bits)
        loc = ws.root / "localize" / "cases"
        for arr, name in ((coarse, "coarse"), (refined, "refined")):
            p = loc / f"{rec.case_id}_{name}.vbm"
            if not p.exists():
                raise MissingArtifact(p, "localize")
            arr.append(load_mask(p).bits)
    masks = {"brain": np.stack(brain), "coarse": np.stack(coarse), "refined": np.stack(refined)}
    return man, np.stack(vols), masks, man.labels()


def _folds(cfg: RunConfig, ws: Workspace, man, args):
    path = Path(args.folds) if getattr(args, "folds", None) else ws.root / "folds.json"
    if path.exists():
        folds = E.FoldAssignment.load(path)
        if len(folds.fold_of) != len(man.cases):
            raise CLIError(f"{path} covers {len(folds.fold_of)} cases but the manifest has {len(man.cases)}")
        return folds
    folds = E.stratified_kfold(man, cfg.eval.k_folds, cfg.fold_seed())
    folds.save(path)
    return folds


def stage_folds(cfg, ws, args):
    man = Manifest.load(ws.require("preprocess/manifest.json", "preprocess"))
    return _folds(cfg, ws, man, args)


def _fold_list(spec, k):
    if spec in (None, "all"):
        return list(range(k))
    f = int(spec)
    if not 0 <= f < k:
        raise CLIError(f"--fold {f} outside [0, {k})")
    return [f]


def stage_train(cfg: RunConfig, ws: Workspace, args):
    man, vols, masks, labels = load_cohort(ws, args.manifest)
    folds = _folds(cfg, ws, man, args)
    d = ws.dir("train")
    ds = Dataset(vols, masks["refined"], labels, [c.case_id for c in man.cases])
    for f in _fold_list(args.fold, folds.k):
        fcfg = replace(cfg.diagnoser, seed=E.fold_seed(cfg.diagnoser.seed, f))
        params, history = train(ds, folds.train_idx(f), fcfg, cfg.augment)
        save_checkpoint(d / f"fold{f}.vbck", params, fcfg, {"fold": f})
        write_epoch_log(d / f"fold{f}_epochs.jsonl", history)
        print(f"train: fold {f} final loss {history[-1]['loss']:.4f} -> {d / f'fold{f}.vbck'}"
              if history else f"train: fold {f} (0 epochs)")
    _echo_config(cfg, d)


def _write_cv(result: E.CVResult, d: Path, stem):
    E.write_json(d / f"{stem}.json", result.to_dict())
    rows = ["fold,Precision,Recall,F1-score,Accuracy"]
    for fr in result.folds:
        r = fr.report.row()
        rows.append(f"{fr.fold}," + ",".join(f"{r[c]:.6f}" for c in E.ABLATION_COLUMNS))
    r = result.mean.row()
    rows.append("mean," + ",".join(f"{r[c]:.6f}" for c in E.ABLATION_COLUMNS))
    (d / f"{stem}.csv").write_text("\n".join(rows) + "\n")


def _save_fold_models(ws, cfg, result):
    d = ws.dir("train")
    for fr in result.folds:
        if fr.params is not None:
            fcfg = replace(cfg.diagnoser, seed=E.fold_seed(cfg.diagnoser.seed, fr.fold))
            save_checkpoint(d / f"fold{fr.fold}.vbck", fr.params, fcfg, {"fold": fr.fold})
            write_epoch_log(d / f"fold{fr.fold}_epochs.jsonl", fr.history)


def stage_evaluate(cfg: RunConfig, ws: Workspace, args):
    man, vols, masks, labels = load_cohort(ws)
    folds = _folds(cfg, ws, man, args)
    ds = Dataset(vols, masks["refined"], labels)
    res = E.run_cv(ds, folds, cfg.diagnoser, cfg.augment, cfg.eval.average, args.jobs, keep_params=True)
    d = ws.dir("evaluate")
    _write_cv(res, d, "cv_report")
    _save_fold_models(ws, cfg, res)
    _echo_config(cfg, d)
    print(f"evaluate: mean accuracy {res.mean.accuracy:.4f} ({folds.k} folds) -> {d}")
    return res


def stage_ablate(cfg: RunConfig, ws: Workspace, args):
    man, vols, masks, labels = load_cohort(ws)
    folds = _folds(cfg, ws, man, args)
    d = ws.dir("ablate")

    def on_row(rid, setting, res):
        print(f"ablate: row {rid} ({setting}) accuracy {res.mean.accuracy:.4f}", flush=True)

    table = E.run_ablation(vols, masks, labels, folds, cfg.diagnoser, cfg.augment, cfg.eval.average, args.jobs,
                           keep_params=True, on_row=on_row)
    (d / "ablation.csv").write_text(table.to_csv())
    E.write_json(d / "ablation.json", table.to_dict())
    _echo_config(cfg, d)
    return table


def _saliency_case(cfg, ws, man, vols, masks, index, ckpt_path, out_dir):
    rec = man.cases[index]
    params, ccfg, _ = load_checkpoint(ckpt_path)
    probs, pred = predict_case(params, vols[index], masks["refined"][index], ccfg)
    heat = E.grad_cam3d(params, vols[index], masks["refined"][index], pred, ccfg)
    save_volume(Volume(heat.values.astype(np.float32)), out_dir / f"{rec.case_id}_cam.vbv")
    E.dump_heatmap_slices(heat, out_dir / f"{rec.case_id}_slices")
    entry = {"case_id": rec.case_id, "label": int(rec.class_label), "pred": pred,
             "checkpoint": Path(ckpt_path).name, "probs": [float(p) for p in probs]}
    if rec.gt_mask_path:
        gt = load_mask(man.path(rec.gt_mask_path))
        entry["cam_mass_in_tumor"] = E.cam_mass_fraction(heat, gt)
        entry["tumor_volume_fraction"] = gt.count / gt.bits.size
    return entry


def stage_saliency(cfg: RunConfig, ws: Workspace, args):
    man, vols, masks, labels = load_cohort(ws)
    d = ws.dir("saliency")
    ids = [c.case_id for c in man.cases]
    entries = []
    if args.case:
        if args.case not in ids:
            raise CLIError(f"unknown case {args.case}")
        ckpt = Path(args.checkpoint) if args.checkpoint else None
        if ckpt is None:
            folds = _folds(cfg, ws, man, args)
            f = int(folds.fold_of[ids.index(args.case)])
            ckpt = ws.require(f"train/fold{f}.vbck", "train")
        entries.append(_saliency_case(cfg, ws, man, vols, masks, ids.index(args.case), ckpt, d))
    else:
        # a few held-out cases per fold, each explained by the model that never saw it
        folds = _folds(cfg, ws, man, args)
        per_fold = max(1, -(-cfg.eval.saliency_cases // folds.k)) if cfg.eval.saliency_cases else 0
        for f in range(folds.k):
            ckpt = ws.require(f"train/fold{f}.vbck", "train")
            for i in folds.test_idx(f)[:per_fold]:
                entries.append(_saliency_case(cfg, ws, man, vols, masks, int(i), ckpt, d))
    E.write_json(d / "saliency_report.json", {"cases": entries})
    _echo_config(cfg, d)
    print(f"saliency: {len(entries)} heatmaps -> {d}")
    return entries


def stage_predict(cfg: RunConfig, ws: Workspace, args):
    if not args.checkpoint or not args.case:
        raise CLIError("predict needs --checkpoint and --case")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise MissingArtifact(ckpt, "train")
    man = Manifest.load(ws.require("preprocess/manifest.json", "preprocess"))
    rec = man.case(args.case)
    v = load_volume(man.path(rec.volume_path))
    mpath = ws.require(f"localize/cases/{rec.case_id}_refined.vbm", "localize")
    probs, pred = predict_case(ckpt, v, load_mask(mpath))
    doc = {"case_id": rec.case_id, "probs": [float(p) for p in probs], "pred": pred}
    print(json.dumps(doc, sort_keys=True))
    return doc


def stage_pipeline(cfg: RunConfig, ws: Workspace, args):
    """phantom -> preprocess -> localize -> folds -> ablation (row 5 is the CV report) -> saliency."""
    stage_phantom(cfg, ws, args)
    args.manifest = None
    stage_preprocess(cfg, ws, args)
    stage_localize(cfg, ws, args)
    man = Manifest.load(ws.root / "preprocess" / "manifest.json")
    _folds(cfg, ws, man, args)
    table = stage_ablate(cfg, ws, args)
    full = table.rows[-1][2]
    d = ws.dir("evaluate")
    _write_cv(full, d, "cv_report")
    _echo_config(cfg, d)
    _save_fold_models(ws, cfg, full)
    stage_saliency(cfg, ws, args)
    print(f"pipeline: full-model accuracy {full.mean.accuracy:.4f}")


STAGES = {
    "phantom-gen": (stage_phantom, "phantom"),
    "preprocess": (stage_preprocess, "preprocess"),
    "localize": (stage_localize, "localize"),
    "folds": (stage_folds, "."),
    "train": (stage_train, "train"),
    "evaluate": (stage_evaluate, "evaluate"),
    "ablate": (stage_ablate, "ablate"),
    "saliency": (stage_saliency, "saliency"),
    "predict": (stage_predict, None),
    "pipeline": (stage_pipeline, "."),
}

HELP = {
    "phantom-gen": "generate a synthetic labelled cohort",
    "preprocess": "skull-strip, bias-correct and register every case",
    "localize": "coarse prior and refined tumour mask per case",
    "folds": "write the stratified fold assignment",
    "train": "train the diagnoser on fold complements",
    "evaluate": "cross-validate the full model",
    "ablate": "run the five-row ablation",
    "saliency": "3D Grad-CAM heatmaps for held-out cases",
    "predict": "class probabilities for one case",
    "pipeline": "run every stage end to end",
}


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="vbiopsy", formatter_class=fmt,
                                description="Phantom-scale brain tumour localization and diagnosis pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        sp = sub.add_parser(name, help=text, description=text, formatter_class=fmt)
        sp.add_argument("--config", default=None, help="YAML or JSON run config (built-in defaults if omitted)")
        sp.add_argument("--out", default=None, help="output root (overrides output_root from the config)")
        sp.add_argument("--seed", type=int, default=None, help="override master_seed")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for per-case and per-fold work")
        if name in ("preprocess", "localize", "train"):
            sp.add_argument("--manifest", default=None, help="input manifest (default: previous stage's)")
        if name in ("train", "evaluate", "ablate", "saliency", "folds"):
            sp.add_argument("--folds", default=None, help="fold assignment JSON (default: <out>/folds.json)")
        if name in ("localize", "pipeline"):
            sp.add_argument("--oracle", choices=("stub", "remote"), default=None,
                            help="box predictor (default: oracle.kind from the config)")
        if name == "train":
            sp.add_argument("--fold", default="all", help="fold index to hold out, or 'all'")
        if name in ("saliency", "predict"):
            sp.add_argument("--checkpoint", default=None, help="diagnoser checkpoint (.vbck)")
            sp.add_argument("--case", default=None, help="case id, e.g. case_0003")
    return p


def _setup_logging():
    level = os.environ.get("VB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    for attr in ("manifest", "folds", "oracle", "fold", "checkpoint", "case"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({}, "<defaults>")
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    ws = Workspace(args.out or cfg.output_root)
    fn, stage_dir = STAGES[args.command]
    if stage_dir is None:
        try:
            fn(cfg, ws, args)
        except (CLIError, KeyError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0
    try:
        lock = ws.lock()
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    marker = ws.root / stage_dir / FAILED_NAME
    try:
        if marker.exists():
            marker.unlink()
        fn(cfg, ws, args)
    except Exception as exc:
        marker.parent.mkdir(parents=True, exist_ok=True)
        marker.write_text(f"{args.command} failed: {type(exc).__name__}: {exc}\n")
        print(f"error: {exc}", file=sys.stderr)
        if not isinstance(exc, (CLIError, ConfigError, PreprocessError)):
            log.debug("traceback", exc_info=True)
        return 1
    finally:
        lock.unlink(missing_ok=True)
    ws.record_outputs()
    return 0


if __name__ == "__main__":
    sys.exit(main())
