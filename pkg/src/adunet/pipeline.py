"""Experiment stages: generate, train-recon, gen-anomalies, train-seg, evaluate, render.

Every stage records itself in ``<run>/manifest.json`` and is skipped on
re-invocation unless ``force`` is set.
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import os
import time
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
import torch

from . import io as store
from .anomaly import AnomalyMap, generate_case_anomalies, healthy_reference_threshold
from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANTS, RunConfig
from .errors import ConfigError, MissingArtifactError, StorageError
from .evaluation import (average_score, evaluate_detections, foreground_range, psnr,
                         volume_ssim)
from .layout import (anomaly_path, case_dir, prediction_path, recon_ckpt_path, recon_volume_path,
                     seg_ckpt_path)
from .panels import render_case_panel
from .phantom import Case, generate_dataset, split_dataset
from .preprocess import prepare
from .recon import classifier_path, load_reconstructor, save_reconstructor, train_reconstructor
from .segmentation import build_unet, collect_seg_slices, predict, train_segmenter
from .slices import collect_slices

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "external")
EVAL_SPLITS = ("val", "external")


class RunManifest:
    """JSON record of stage status and outputs, rewritten atomically."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
        else:
            self.data = {"config": None, "stages": {}, "tables": {}}

    def done(self, stage: str) -> bool:
        return self.data["stages"].get(stage, {}).get("status") == "done"

    def complete(self, stage: str, outputs: Iterable[str] = (), **extra) -> None:
        self.data["stages"][stage] = {"status": "done", "outputs": sorted(str(o) for o in outputs), **extra}
        self.save()

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name("manifest.json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.path)


def _rel(root: Path, p: Path) -> str:
    return str(Path(p).relative_to(root))


def _root(config: RunConfig) -> Path:
    root = Path(config.output_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {root}: {exc}") from exc
    return root


def _manifest(config: RunConfig) -> RunManifest:
    m = RunManifest(_root(config))
    m.data["config"] = config.to_dict()
    return m


# ---------------------------------------------------------------- data

def build_splits(config: RunConfig) -> Dict[str, List[Case]]:
    ds = config.dataset
    cases = generate_dataset(ds.n_healthy, ds.n_diseased, config.seed, config.phantom)
    train, val, test = split_dataset(cases, ds.split, config.seed)
    shifted = config.phantom.shifted(ds.external_noise_factor, ds.external_bias_factor)
    # external seeds start past the in-distribution block
    ext_seed = config.seed + ds.n_healthy + ds.n_diseased + 10_000
    external = generate_dataset(ds.external_healthy, ds.external_diseased, ext_seed, shifted, prefix="ext")
    return {"train": train, "val": val, "test": test, "external": external}


def load_splits(config: RunConfig, splits: Sequence[str] = SPLITS) -> Dict[str, List[Case]]:
    root = Path(config.output_dir)
    index = root / "data" / "splits.json"
    if not index.exists():
        raise MissingArtifactError(f"dataset missing: {index} (run `adunet generate` first)")
    ids = json.loads(index.read_text(encoding="utf-8"))
    return {s: [store.read_case(case_dir(root, cid)) for cid in ids[s]] for s in splits}


def cmd_generate(config: RunConfig, force: bool = False) -> Dict[str, List[str]]:
    manifest = _manifest(config)
    root = manifest.root
    if manifest.done("generate") and not force:
        log.info("generate: already complete, skipping")
        return json.loads((root / "data" / "splits.json").read_text())
    splits = build_splits(config)
    outputs = []
    for cases in splits.values():
        for case in cases:
            store.write_case(case, case_dir(root, case.case_id))
            outputs.append(_rel(root, case_dir(root, case.case_id)))
    ids = {s: [c.case_id for c in cases] for s, cases in splits.items()}
    index = root / "data" / "splits.json"
    index.write_text(json.dumps(ids, indent=2), encoding="utf-8")
    manifest.complete("generate", outputs + [_rel(root, index)],
                      counts={s: len(v) for s, v in ids.items()})
    return ids


# ---------------------------------------------------------------- reconstruction

def _curve_csv(path: Path, history: dict) -> None:
    keys = [k for k, v in history.items() if isinstance(v, list) and v]
    n = max((len(history[k]) for k in keys), default=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + keys)
        for i in range(n):
            w.writerow([i] + [repr(history[k][i]) if i < len(history[k]) else "" for k in keys])


def cmd_train_recon(config: RunConfig, backend: str | None = None, modality: str | None = None,
                    force: bool = False) -> List[Path]:
    manifest = _manifest(config)
    root = manifest.root
    backends = [backend] if backend else list(config.backends)
    modalities = [modality] if modality else list(config.modalities)
    for b in backends:
        if b not in config.backends:
            raise ConfigError(f"backend {b!r} not configured")
    train = None
    paths = []
    for b in backends:
        for m in modalities:
            stage = f"train-recon:{b}:{m}"
            path = recon_ckpt_path(root, b, m)
            paths.append(path)
            if manifest.done(stage) and not force and path.exists():
                log.info("%s: already complete, skipping", stage)
                continue
            if train is None:
                train = load_splits(config, ("train",))["train"]
            cfg = config.recon_config(b, m)
            slices = collect_slices(train, m, cfg.slice_shape, healthy_only=b in ("dense_ae", "spatial_ae"))
            t0 = time.time()
            torch.manual_seed(cfg.seed)
            ckpt, classifier = train_reconstructor(cfg, slices)
            elapsed = time.time() - t0
            save_reconstructor(path, ckpt, classifier)
            curve = root / "curves" / f"recon_{b}_{m}.csv"
            _curve_csv(curve, ckpt.history)
            outs = [_rel(root, path), _rel(root, curve)]
            if classifier is not None:
                outs.append(_rel(root, classifier_path(path)))
            manifest.complete(stage, outs, seconds=round(elapsed, 1), final_loss=ckpt.final_loss)
            log.info("%s: trained in %.1fs", stage, elapsed)
    return paths


# ---------------------------------------------------------------- anomaly maps

def _load_reconstructors(config: RunConfig, backend: str):
    root = Path(config.output_dir)
    recs = {}
    for m in config.modalities:
        path = recon_ckpt_path(root, backend, m)
        if not path.exists():
            raise MissingArtifactError(f"missing reconstruction checkpoint for backend {backend}, modality {m}: {path}")
        recs[m] = load_reconstructor(path)
    return recs


def recon_quality(prepared_image, recon, mask, window: int) -> tuple:
    x, y, msk = prepared_image.data, recon.data, mask.data
    rng = foreground_range(x, msk)
    s = volume_ssim(x, y, msk, window=window, data_range=rng)
    fg = msk > 0
    return s, psnr(x[fg], y[fg], rng)


def _table_rows_to_csv(rows: List[dict], columns: Sequence[str]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def _markdown(rows: List[dict], columns: Sequence[str], digits: int = 4) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        cells = [f"{r[c]:.{digits}f}" if isinstance(r[c], float) else str(r[c]) for c in columns]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_gen_anomalies(config: RunConfig, force: bool = False) -> dict:
    manifest = _manifest(config)
    root = manifest.root
    if manifest.done("gen-anomalies") and not force:
        log.info("gen-anomalies: already complete, skipping")
        return manifest.data["tables"].get("recon", {})
    splits = load_splits(config)
    window = config.metrics.ssim_window
    rows, outputs, thresholds = [], [], {}
    for b in config.backends:
        recs = _load_reconstructors(config, b)
        quality = {m: [] for m in config.modalities}
        healthy_maps = {m: [] for m in config.modalities}
        healthy_masks = []
        for split, cases in splits.items():
            for case in cases:
                maps, recons = generate_case_anomalies(
                    case, recs, config.modalities, config.metrics.kernel_size, config.canvas, return_recon=True)
                for m in config.modalities:
                    p = anomaly_path(root, b, case.case_id, m, config.seg_backend)
                    store.write_volume(maps[m].volume, p)
                    rp = recon_volume_path(root, b, case.case_id, m)
                    store.write_volume(recons[m], rp)
                    outputs += [_rel(root, p), _rel(root, rp)]
                if split == "val":
                    for m in config.modalities:
                        prep = prepare(case.modalities[m], case.zone_mask)
                        quality[m].append(recon_quality(prep.image, recons[m], prep.mask, window))
                    if case.healthy:
                        for m in config.modalities:
                            healthy_maps[m].append(maps[m])
                        healthy_masks.append(case.prostate_mask)
        for m in config.modalities:
            q = np.asarray(quality[m], dtype=np.float64)
            rows.append({"backend": b, "modality": m,
                         "ssim": float(q[:, 0].mean()), "psnr": float(q[:, 1].mean())})
            if healthy_masks:
                thresholds[f"{b}:{m}"] = healthy_reference_threshold(healthy_maps[m], healthy_masks)
    reports = root / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    cols = ("backend", "modality", "ssim", "psnr")
    (reports / "recon_metrics.csv").write_text(_table_rows_to_csv(rows, cols))
    (reports / "recon_metrics.md").write_text(_markdown(rows, cols))
    manifest.data["tables"]["recon"] = {"rows": rows, "healthy_threshold": thresholds}
    manifest.complete("gen-anomalies", outputs + ["reports/recon_metrics.csv", "reports/recon_metrics.md"],
                      healthy_threshold=thresholds)
    return manifest.data["tables"]["recon"]


def load_case_anomalies(config: RunConfig, case_id: str, modalities: Iterable[str],
                        backend: str | None = None) -> Dict[str, AnomalyMap]:
    root = Path(config.output_dir)
    backend = backend or config.seg_backend
    out = {}
    for m in modalities:
        p = anomaly_path(root, backend, case_id, m, config.seg_backend)
        if not p.exists():
            raise MissingArtifactError(f"missing {m} anomaly map for case {case_id} ({p})")
        out[m] = AnomalyMap(m, store.read_volume(p))
    return out


# ---------------------------------------------------------------- segmentation

def cmd_train_seg(config: RunConfig, variant: str | None = None, force: bool = False) -> List[Path]:
    manifest = _manifest(config)
    root = manifest.root
    variants = [variant] if variant else list(config.variants)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    train = None
    paths = []
    for v in variants:
        for seed in config.seg_seeds:
            stage = f"train-seg:{v}:{seed}"
            path = seg_ckpt_path(root, v, seed)
            paths.append(path)
            if manifest.done(stage) and not force and path.exists():
                log.info("%s: already complete, skipping", stage)
                continue
            if train is None:
                train = load_splits(config, ("train",))["train"]
            cfg = config.seg_config(v, seed)
            anomalies = {c.case_id: load_case_anomalies(config, c.case_id, cfg.anomaly_channels) for c in train}
            data = collect_seg_slices(train, anomalies, cfg)
            torch.manual_seed(seed)
            t0 = time.time()
            ckpt = train_segmenter(build_unet(cfg), data, cfg)
            save_checkpoint(ckpt, path)
            curve = root / "curves" / f"seg_{v}_seed{seed}.csv"
            _curve_csv(curve, ckpt.history)
            manifest.complete(stage, [_rel(root, path), _rel(root, curve)],
                              seconds=round(time.time() - t0, 1), final_loss=ckpt.final_loss)
    return paths


SEG_COLUMNS = ("split", "variant", "auroc", "ap", "average")
RUN_COLUMNS = ("split", "variant", "seed", "auroc", "ap", "average")


def cmd_evaluate(config: RunConfig, force: bool = False) -> dict:
    manifest = _manifest(config)
    root = manifest.root
    if manifest.done("evaluate") and not force:
        log.info("evaluate: already complete, skipping")
        return manifest.data["tables"]["seg"]
    splits = load_splits(config, EVAL_SPLITS)
    met = config.metrics
    run_rows, outputs = [], []
    for v in config.variants:
        channels = VARIANTS[v]
        for seed in config.seg_seeds:
            path = seg_ckpt_path(root, v, seed)
            if not path.exists():
                raise MissingArtifactError(f"missing segmentation checkpoint for variant {v}, seed {seed}: {path}")
            ckpt = load_checkpoint(path)
            for split in EVAL_SPLITS:
                probs = {}
                for case in splits[split]:
                    anomalies = load_case_anomalies(config, case.case_id, channels)
                    res = predict(ckpt, case, anomalies, channels, met.threshold, met.min_voxels)
                    pp = prediction_path(root, v, seed, case.case_id)
                    store.write_volume(res.probability, pp)
                    outputs.append(_rel(root, pp))
                    probs[case.case_id] = res.probability.data
                sm = evaluate_detections(probs, splits[split], met.threshold, met.min_voxels, met.iou)
                run_rows.append({"split": split, "variant": v, "seed": seed,
                                 "auroc": sm.auroc, "ap": sm.ap, "average": sm.average})
    summary = []
    for split in EVAL_SPLITS:
        for v in config.variants:
            rs = [r for r in run_rows if r["split"] == split and r["variant"] == v]
            a = float(np.mean([r["auroc"] for r in rs]))
            p = float(np.mean([r["ap"] for r in rs]))
            summary.append({"split": split, "variant": v, "auroc": a, "ap": p, "average": average_score(a, p)})
    reports = root / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "seg_runs.csv").write_text(_table_rows_to_csv(run_rows, RUN_COLUMNS))
    (reports / "seg_report.csv").write_text(_table_rows_to_csv(summary, SEG_COLUMNS))
    md = []
    for split in EVAL_SPLITS:
        md.append(f"### {split} (mean over {config.seg_repeats} seeds)\n")
        md.append(_markdown([r for r in summary if r["split"] == split], ("variant", "auroc", "ap", "average")))
    (reports / "seg_report.md").write_text("\n".join(md))
    table = {"runs": run_rows, "summary": summary}
    (reports / "seg_report.json").write_text(json.dumps(table, indent=2))
    manifest.data["tables"]["seg"] = table
    manifest.complete("evaluate", outputs + ["reports/seg_runs.csv", "reports/seg_report.csv",
                                             "reports/seg_report.md", "reports/seg_report.json"])
    return table


def cmd_render(config: RunConfig, case_ids: Sequence[str] | None = None, force: bool = False) -> List[Path]:
    manifest = _manifest(config)
    root = manifest.root
    case_ids = list(case_ids or config.panel_cases)
    ids = json.loads((root / "data" / "splits.json").read_text()) if (root / "data" / "splits.json").exists() else None
    if ids is None:
        raise MissingArtifactError("dataset missing (run `adunet generate` first)")
    known = {cid for v in ids.values() for cid in v}
    if not case_ids:
        case_ids = [cid for cid in ids["val"] if not store.read_manifest(case_dir(root, cid) / store.MANIFEST_NAME).healthy][:2]
    unknown = [c for c in case_ids if c not in known]
    if unknown:
        raise ConfigError(f"unknown case id(s): {unknown}")
    paths = [root / "panels" / f"{cid}.png" for cid in case_ids]
    prev = manifest.data["stages"].get("render", {})
    if (manifest.done("render") and not force and prev.get("cases") == case_ids
            and all(p.exists() for p in paths)):
        log.info("render: already complete, skipping")
        return paths
    for cid in case_ids:
        case = store.read_case(case_dir(root, cid))
        out = root / "panels" / f"{cid}.png"
        render_case_panel(config, case, out)
    manifest.complete("render", [_rel(root, p) for p in paths], cases=case_ids)
    return paths
