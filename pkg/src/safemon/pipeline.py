"""Stage orchestration over a single run directory.

Every stage reads its prerequisites from the run directory, writes its
artifacts deterministically (timestamps only in .meta.json sidecars), and
stamps each artifact with the config digest so later stages can detect
staleness. A lock file guards against concurrent commands on one directory.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import assess as assess_mod
from . import component as comp_mod
from . import degrade as degrade_mod
from . import monitor as monitor_mod
from . import runtime as runtime_mod
from .config import PipelineConfig
from .degrade import DegradedDataset
from .imageio import (LabeledDataset, dataset_crc32, load_manifest,
                      read_packed_file, save_manifest_tree, write_packed_file)
from .monitor import MonitorDataset, SplitSpec
from .rng import derive_seed
from .synthcorpus import SynthSpec, generate_corpus

STAGE_ORDER = (
    "corpus", "train-component", "degrade", "assess", "label",
    "prepare", "train-monitor", "eval-monitor", "run",
)


class PrerequisiteError(RuntimeError):
    pass


class StalenessError(RuntimeError):
    pass


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(rundir: str):
    os.makedirs(rundir, exist_ok=True)
    lock_path = os.path.join(rundir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"run directory is locked by another command ({lock_path}); "
            "remove the file if that command is no longer running"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(lock_path)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_meta(path: str, stage: str, cfg: PipelineConfig, seed: int | None) -> None:
    meta = {
        "stage": stage,
        "config_digest": cfg.digest,
        "seed": seed,
        "sha256": _sha256(path),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(path + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def _require(rundir: str, rel: str, produced_by: str, cfg: PipelineConfig) -> str:
    path = os.path.join(rundir, rel)
    if not os.path.exists(path):
        raise PrerequisiteError(f"missing artifact {rel!r}: run {produced_by!r} first")
    meta_path = path + ".meta.json"
    if not os.path.exists(meta_path):
        raise PrerequisiteError(f"artifact {rel!r} has no metadata: rerun {produced_by!r}")
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("config_digest") != cfg.digest:
        raise StalenessError(
            f"artifact {rel!r} was produced under a different config "
            f"(digest {meta.get('config_digest', '?')[:12]}... vs {cfg.digest[:12]}...); "
            f"rerun {produced_by!r}"
        )
    return path


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def artifact_checksums(rundir: str) -> dict[str, str]:
    """sha256 of every artifact file (sidecar metadata and the lock excluded)."""
    out = {}
    for root, _, files in os.walk(rundir):
        for name in sorted(files):
            if name.endswith(".meta.json") or name == ".lock":
                continue
            full = os.path.join(root, name)
            out[os.path.relpath(full, rundir)] = _sha256(full)
    return out


# ---------------------------------------------------------------------------
# Providers

@contextlib.contextmanager
def open_provider(cfg: PipelineConfig, rundir: str):
    if cfg.component["provider"] == "builtin":
        path = _require(rundir, "component.mfm", "train-component", cfg)
        yield comp_mod.BuiltinProvider(comp_mod.load_model_file(path))
    else:
        provider = comp_mod.external_spawn(list(cfg.component["command"]))
        try:
            yield provider
        finally:
            comp_mod.external_shutdown(provider)


# ---------------------------------------------------------------------------
# Stages

def stage_corpus(cfg: PipelineConfig, rundir: str, emit: str = "packed") -> dict:
    os.makedirs(rundir, exist_ok=True)
    kind = cfg.corpus["kind"]
    if kind == "synthetic":
        spec = SynthSpec(
            counts=tuple(cfg.corpus.get("counts", SynthSpec.counts)),
            seed=derive_seed(cfg.seed, "corpus"),
        )
        dataset = generate_corpus(spec)
    elif kind == "manifest":
        dataset = load_manifest(cfg.corpus["path"], k=cfg.corpus.get("k"))
    else:
        dataset = read_packed_file(cfg.corpus["path"], k=cfg.corpus.get("k"))
    paths = []
    if emit in ("packed", "both"):
        mfd = os.path.join(rundir, "corpus.mfd")
        write_packed_file(dataset, mfd)
        _write_meta(mfd, "corpus", cfg, derive_seed(cfg.seed, "corpus"))
        paths.append(mfd)
    if emit in ("ppm", "both"):
        tree = os.path.join(rundir, "corpus_ppm")
        manifest = save_manifest_tree(dataset, tree)
        _write_meta(manifest, "corpus", cfg, derive_seed(cfg.seed, "corpus"))
        paths.append(manifest)
    info = os.path.join(rundir, "corpus.json")
    _write_json(info, {
        "config_digest": cfg.digest,
        "kind": kind,
        "emit": emit,
        "count": len(dataset),
        "k": dataset.k,
        "class_names": dataset.class_names,
        "crc32": dataset_crc32(dataset),
    })
    _write_meta(info, "corpus", cfg, derive_seed(cfg.seed, "corpus"))
    print(f"corpus: {len(dataset)} images, k={dataset.k} -> {paths[0] if paths else info}")
    return {"count": len(dataset), "k": dataset.k}


def _load_corpus(cfg: PipelineConfig, rundir: str) -> LabeledDataset:
    info_path = _require(rundir, "corpus.json", "synth/ingest", cfg)
    with open(info_path, encoding="utf-8") as f:
        info = json.load(f)
    if info["emit"] in ("packed", "both"):
        path = _require(rundir, "corpus.mfd", "synth/ingest", cfg)
        return read_packed_file(path, k=info["k"], class_names=info["class_names"])
    manifest = _require(rundir, os.path.join("corpus_ppm", "manifest.csv"), "synth/ingest", cfg)
    return load_manifest(manifest, k=info["k"], class_names=info["class_names"])


def stage_train_component(cfg: PipelineConfig, rundir: str) -> dict:
    corpus = _load_corpus(cfg, rundir)
    seed = derive_seed(cfg.seed, "train-component")
    if cfg.component["provider"] == "builtin":
        train_cfg = cfg.component_train_config(seed)
        layers = comp_mod.default_architecture(corpus.k)
        model = comp_mod.train(corpus, layers, train_cfg)
        path = os.path.join(rundir, "component.mfm")
        comp_mod.save_model_file(model, path)
        _write_meta(path, "train-component", cfg, seed)
        provider = comp_mod.BuiltinProvider(model)
        loss_history = model.loss_history
    else:
        provider = comp_mod.external_spawn(list(cfg.component["command"]))
        loss_history = None
    try:
        clean_acc = comp_mod.evaluate_accuracy(provider, corpus)
    finally:
        if cfg.component["provider"] == "external":
            comp_mod.external_shutdown(provider)
    info = os.path.join(rundir, "component.json")
    _write_json(info, {
        "config_digest": cfg.digest,
        "provider": cfg.component["provider"],
        "clean_accuracy": clean_acc,
        "loss_history": loss_history,
        "seed": seed,
    })
    _write_meta(info, "train-component", cfg, seed)
    print(f"component: clean accuracy {clean_acc:.4f}")
    return {"clean_accuracy": clean_acc}


def _build_plan(cfg: PipelineConfig, source_count: int) -> degrade_mod.DegradationPlan:
    return degrade_mod.plan(cfg.grids, source_count)


def _plan_log_line(plan) -> str:
    rho = plan.rho
    if rho is not None:
        law = f"{plan.n_i} x {rho}^{len(plan.grids)}"
    else:
        law = f"{plan.n_i} x {len(plan.combinations)}"
    return (f"degrade: {len(plan.combinations)} combinations; "
            f"degraded image total N = {law} = {plan.predicted_total}")


def stage_degrade(cfg: PipelineConfig, rundir: str, dry_run: bool = False,
                  workers: int = 1) -> dict:
    corpus = _load_corpus(cfg, rundir)
    plan = _build_plan(cfg, len(corpus))
    print(_plan_log_line(plan))
    if dry_run:
        return {"combinations": len(plan.combinations), "total": plan.predicted_total}
    outdir = os.path.join(rundir, "degraded")
    os.makedirs(outdir, exist_ok=True)
    ids = []
    for i in range(len(plan.combinations)):
        dd = degrade_mod.generate_one(corpus, plan, cfg.kinds, i)
        mfd = os.path.join(outdir, dd.dataset_id + ".mfd")
        write_packed_file(dd.data, mfd)
        _write_meta(mfd, "degrade", cfg, None)
        meta = os.path.join(outdir, dd.dataset_id + ".json")
        _write_json(meta, {**dd.metadata(), "config_digest": cfg.digest})
        _write_meta(meta, "degrade", cfg, None)
        ids.append(dd.dataset_id)
    plan_path = os.path.join(rundir, "plan.json")
    _write_json(plan_path, {
        "config_digest": cfg.digest,
        "factor_names": list(plan.factor_names),
        "grids": {g.factor_name: list(g.levels) for g in plan.grids},
        "combinations": [list(c) for c in plan.combinations],
        "dataset_ids": ids,
        "n_i": plan.n_i,
        "rho": plan.rho,
        "predicted_total": plan.predicted_total,
    })
    _write_meta(plan_path, "degrade", cfg, None)
    return {"combinations": len(plan.combinations), "total": plan.predicted_total}


def _load_degraded(cfg: PipelineConfig, rundir: str) -> list[DegradedDataset]:
    plan_path = _require(rundir, "plan.json", "degrade", cfg)
    with open(plan_path, encoding="utf-8") as f:
        plan_info = json.load(f)
    out = []
    for dsid in plan_info["dataset_ids"]:
        mfd = _require(rundir, os.path.join("degraded", dsid + ".mfd"), "degrade", cfg)
        meta_path = _require(rundir, os.path.join("degraded", dsid + ".json"), "degrade", cfg)
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
        data = read_packed_file(mfd)
        out.append(DegradedDataset(
            dataset_id=dsid,
            source_checksum=meta["source_checksum"],
            assignment=meta["assignment"],
            order=tuple(meta["order"]),
            params=meta["params"],
            data=data,
            crc32=meta["crc32"],
        ))
    return out


def stage_assess(cfg: PipelineConfig, rundir: str) -> dict:
    degraded = _load_degraded(cfg, rundir)
    with open_provider(cfg, rundir) as provider:
        records = assess_mod.assess_all(provider, degraded)
    records_json = os.path.join(rundir, "records.json")
    _write_json(records_json, {
        "config_digest": cfg.digest,
        "records": [
            {"dataset_id": r.dataset_id, "assignment": r.assignment,
             "correct": r.correct_count, "count": r.sample_count}
            for r in records
        ],
    })
    _write_meta(records_json, "assess", cfg, None)
    csv_path = os.path.join(rundir, "records.csv")
    assess_mod.write_records_csv(records, csv_path)
    _write_meta(csv_path, "assess", cfg, None)
    print(f"assess: {len(records)} datasets; "
          f"accuracy range [{min(r.accuracy for r in records):.4f}, "
          f"{max(r.accuracy for r in records):.4f}]")
    return {"records": len(records)}


def _load_records(cfg: PipelineConfig, rundir: str) -> list[assess_mod.PerformanceRecord]:
    path = _require(rundir, "records.json", "assess", cfg)
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    return [
        assess_mod.PerformanceRecord(
            dataset_id=r["dataset_id"], assignment=r["assignment"],
            correct_count=r["correct"], sample_count=r["count"],
        )
        for r in payload["records"]
    ]


def stage_label(cfg: PipelineConfig, rundir: str) -> dict:
    records = _load_records(cfg, rundir)
    spec = cfg.thresholds
    labels = [assess_mod.label_record(r, spec) for r in records]
    labels_json = os.path.join(rundir, "labels.json")
    _write_json(labels_json, {
        "config_digest": cfg.digest,
        "levels": {r.dataset_id: lab.level for r, lab in zip(records, labels)},
        "level_names": {str(lvl): spec.name_for_level(lvl) for lvl in range(1, spec.m + 1)},
    })
    _write_meta(labels_json, "label", cfg, None)
    labeled_csv = os.path.join(rundir, "labeled_records.csv")
    assess_mod.write_records_csv(records, labeled_csv, spec=spec, labels=labels)
    _write_meta(labeled_csv, "label", cfg, None)
    census = {lvl: sum(1 for l in labels if l.level == lvl) for lvl in range(1, spec.m + 1)}
    summary = {"census": census}
    if len(cfg.grids) == 2:
        grid = assess_mod.heatmap_grid(records, spec)
        heat_csv = os.path.join(rundir, "heatmap.csv")
        assess_mod.write_heatmap_csv(grid, heat_csv)
        _write_meta(heat_csv, "label", cfg, None)
        heat_svg = os.path.join(rundir, "heatmap.svg")
        assess_mod.write_heatmap_svg(grid, spec, heat_svg)
        _write_meta(heat_svg, "label", cfg, None)
    else:
        print("label: more than two factors; heatmap skipped, see labeled_records.csv")
    print("label: census " + ", ".join(
        f"level {lvl} ({spec.name_for_level(lvl)}): {census[lvl]}"
        for lvl in range(spec.m, 0, -1)
    ))
    return summary


def stage_prepare(cfg: PipelineConfig, rundir: str) -> dict:
    degraded = _load_degraded(cfg, rundir)
    labels_path = _require(rundir, "labels.json", "label", cfg)
    with open(labels_path, encoding="utf-8") as f:
        levels = json.load(f)["levels"]
    labeled_sets = [(dd, assess_mod.SafetyLabel(level=levels[dd.dataset_id]))
                    for dd in degraded]
    seed = derive_seed(cfg.seed, "prepare")
    spec = SplitSpec(train_fraction=cfg.train_fraction, seed=seed)
    train, test = monitor_mod.prepare(labeled_sets, spec, m=cfg.thresholds.m)
    for name, part in (("monitor_train", train), ("monitor_test", test)):
        mfd = os.path.join(rundir, name + ".mfd")
        write_packed_file(part.as_labeled(), mfd)
        _write_meta(mfd, "prepare", cfg, seed)
        prov = os.path.join(rundir, name + "_provenance.csv")
        with open(prov, "w", encoding="utf-8") as f:
            f.write("index,dataset_id,source_index,level\n")
            for i, (dsid, src) in enumerate(part.provenance):
                f.write(f"{i},{dsid},{src},{int(part.levels[i])}\n")
        _write_meta(prov, "prepare", cfg, seed)
    info = os.path.join(rundir, "prepare.json")
    _write_json(info, {
        "config_digest": cfg.digest,
        "seed": seed,
        "train_count": len(train),
        "test_count": len(test),
        "train_fraction": cfg.train_fraction,
        "level_counts_train": {str(l): int((train.levels == l).sum())
                               for l in range(1, cfg.thresholds.m + 1)},
        "level_counts_test": {str(l): int((test.levels == l).sum())
                              for l in range(1, cfg.thresholds.m + 1)},
    })
    _write_meta(info, "prepare", cfg, seed)
    print(f"prepare: train {len(train)} / test {len(test)}")
    return {"train": len(train), "test": len(test)}


def _load_monitor_part(cfg: PipelineConfig, rundir: str, name: str) -> MonitorDataset:
    mfd = _require(rundir, name + ".mfd", "prepare", cfg)
    data = read_packed_file(mfd, k=cfg.thresholds.m)
    return MonitorDataset(data.pixels, data.labels + 1, m=cfg.thresholds.m)


def stage_train_monitor(cfg: PipelineConfig, rundir: str) -> dict:
    train = _load_monitor_part(cfg, rundir, "monitor_train")
    seed = derive_seed(cfg.seed, "train-monitor")
    train_cfg = cfg.monitor_train_config(seed)
    layers = comp_mod.default_architecture(cfg.thresholds.m)
    model = monitor_mod.train_monitor(train, layers, train_cfg)
    path = os.path.join(rundir, "monitor.mfm")
    comp_mod.save_model_file(model, path)
    _write_meta(path, "train-monitor", cfg, seed)
    info = os.path.join(rundir, "monitor_train.json")
    _write_json(info, {
        "config_digest": cfg.digest,
        "seed": seed,
        "loss_history": model.loss_history,
        "train_count": len(train),
    })
    _write_meta(info, "train-monitor", cfg, seed)
    print(f"monitor: trained on {len(train)} samples, "
          f"final loss {model.loss_history[-1]:.4f}")
    return {"final_loss": model.loss_history[-1]}


def stage_eval_monitor(cfg: PipelineConfig, rundir: str) -> dict:
    model_path = _require(rundir, "monitor.mfm", "train-monitor", cfg)
    model = comp_mod.load_model_file(model_path)
    train = _load_monitor_part(cfg, rundir, "monitor_train")
    test = _load_monitor_part(cfg, rundir, "monitor_test")
    m = cfg.thresholds.m
    held_out = monitor_mod.evaluate_monitor(model, test)
    full = MonitorDataset(
        np.concatenate([train.pixels, test.pixels]),
        np.concatenate([train.levels, test.levels]),
        m=m,
    )
    cv_seed = derive_seed(cfg.seed, "eval-monitor")
    cv_cfg = cfg.monitor_train_config(cv_seed)
    layers = comp_mod.default_architecture(m)
    cv_report = monitor_mod.kfold_cv(full, cfg.cv_folds, layers, cv_cfg)
    evaldir = os.path.join(rundir, "eval")
    os.makedirs(evaldir, exist_ok=True)
    names_by_level = [cfg.thresholds.name_for_level(l) for l in range(1, m + 1)]
    outputs = {
        "confusion.csv": lambda p: monitor_mod.write_confusion_csv(held_out, names_by_level, p),
        "cv_confusion.csv": lambda p: monitor_mod.write_confusion_csv(cv_report, names_by_level, p),
    }
    for fname, writer in outputs.items():
        path = os.path.join(evaldir, fname)
        writer(path)
        _write_meta(path, "eval-monitor", cfg, cv_seed)
    for key, points in held_out.roc_curves.items():
        path = os.path.join(evaldir, f"roc_{key}.csv")
        monitor_mod.write_roc_csv(points, path)
        _write_meta(path, "eval-monitor", cfg, cv_seed)
    majority = max(int((full.levels == l).sum()) for l in range(1, m + 1)) / len(full)
    summary_path = os.path.join(evaldir, "summary.json")
    monitor_mod.write_summary_json(held_out, summary_path, extra={
        "config_digest": cfg.digest,
        "seeds": {"cv": cv_seed},
        "cv": {
            "folds": cfg.cv_folds,
            "fold_accuracies": cv_report.fold_metrics,
            "pooled_accuracy": cv_report.accuracy,
            "auc": cv_report.auc,
        },
        "majority_level_baseline": majority,
    })
    _write_meta(summary_path, "eval-monitor", cfg, cv_seed)
    print(f"eval: held-out accuracy {held_out.accuracy:.4f}; "
          f"pooled {cfg.cv_folds}-fold CV accuracy {cv_report.accuracy:.4f} "
          f"(majority baseline {majority:.4f})")
    return {
        "held_out_accuracy": held_out.accuracy,
        "cv_accuracy": cv_report.accuracy,
        "majority_baseline": majority,
    }


def stage_run(cfg: PipelineConfig, rundir: str) -> dict:
    corpus = _load_corpus(cfg, rundir)
    monitor_path = _require(rundir, "monitor.mfm", "train-monitor", cfg)
    monitor_model = comp_mod.load_model_file(monitor_path)
    monitor_provider = comp_mod.BuiltinProvider(monitor_model)
    with open_provider(cfg, rundir) as component_provider:
        trace = runtime_mod.run_stream(
            cfg.scenario, corpus, cfg.kinds, component_provider,
            monitor_provider, cfg.mode_config,
        )
    jsonl = os.path.join(rundir, "trace.jsonl")
    runtime_mod.write_trace_jsonl(trace, jsonl)
    _write_meta(jsonl, "run", cfg, cfg.scenario.seed)
    csv_path = os.path.join(rundir, "trace.csv")
    runtime_mod.write_trace_csv(trace, csv_path)
    _write_meta(csv_path, "run", cfg, cfg.scenario.seed)
    trans = os.path.join(rundir, "transitions.json")
    runtime_mod.write_transitions_json(trace, trans)
    _write_meta(trans, "run", cfg, cfg.scenario.seed)
    print(f"run: {len(trace.verdicts)} frames, {len(trace.transitions)} mode transitions")
    return {"frames": len(trace.verdicts), "transitions": len(trace.transitions)}


_STAGE_FUNCS = {
    "corpus": stage_corpus,
    "train-component": stage_train_component,
    "degrade": stage_degrade,
    "assess": stage_assess,
    "label": stage_label,
    "prepare": stage_prepare,
    "train-monitor": stage_train_monitor,
    "eval-monitor": stage_eval_monitor,
    "run": stage_run,
}


def run_pipeline(cfg: PipelineConfig, rundir: str, stage_from: str = "corpus",
                 stage_to: str = "run") -> dict:
    try:
        lo = STAGE_ORDER.index(stage_from)
        hi = STAGE_ORDER.index(stage_to)
    except ValueError as exc:
        raise ValueError(f"unknown stage: {exc}") from None
    if lo > hi:
        raise ValueError(f"stage-from {stage_from!r} comes after stage-to {stage_to!r}")
    summary = {}
    for stage in STAGE_ORDER[lo:hi + 1]:
        summary[stage] = _STAGE_FUNCS[stage](cfg, rundir)
    return summary
