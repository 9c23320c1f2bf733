"""The iterative loop: cluster, re-rank, select, train, evaluate."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import cci, clustering, curriculum, evaluation, localizer
from .dataset import (GroundTruth, SynthConfig, generate_synthetic, load_features,
                      load_ground_truth)
from .numerics import AdamState, SeededRng

log = logging.getLogger(__name__)

TIMING_COLUMNS = ("duration_s",)


@dataclass
class PipelineConfig:
    features: str | None = None
    ground_truth: str | None = None
    eval_features: str | None = None
    eval_ground_truth: str | None = None
    seconds_per_snippet: float | None = None
    synth: dict | None = None
    synth_eval_videos_per_class: int = 10
    K: int = 10
    I_max: int = 6
    mode: str = "constant"
    mu: float = 1.05
    kmeans_restarts: int = 1
    gamma: float = 0.7
    l: int = 20
    l_expansion: int = 6
    normalize_distances: bool = False
    cci_video_only: bool = True
    mining: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    E_max: int = 20
    batch_size: int = 16
    lr: float = 1e-4
    tau: float = 0.1
    tau_a: list = field(default_factory=lambda: [float(x) for x in evaluation.DEFAULT_TAU_A])
    nms_threshold: float = 0.7
    iou_thresholds: list = field(default_factory=lambda: [float(x) for x in evaluation.ACTIVITYNET_IOUS])
    no_cci: bool = False
    no_iis: bool = False
    snippetwise: bool = False
    snippet_topk: int | None = None
    cola_utal: bool = False
    reinit_each_iteration: bool = False
    align_clusters: bool = True
    seed: int = 0
    dump_debug: bool = False

    def mining_config(self) -> localizer.MiningConfig:
        return localizer.MiningConfig(**self.mining)

    def loss_config(self) -> localizer.LossConfig:
        return localizer.LossConfig(**self.loss)

    def effective(self) -> "PipelineConfig":
        """Copy with the ablation switches folded into the plain settings."""
        cfg = dataclasses.replace(self)
        if cfg.cola_utal:
            cfg.no_cci = cfg.no_iis = True
            cfg.I_max = 1
        if cfg.snippetwise:
            cfg.no_cci = cfg.no_iis = True
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mining"] = dataclasses.asdict(self.mining_config())
        d["loss"] = dataclasses.asdict(self.loss_config())
        if self.synth is not None:
            d["synth"] = dataclasses.asdict(SynthConfig(**self.synth))
            d["synth"]["actions_per_video"] = list(d["synth"]["actions_per_video"])
            d["synth"]["action_length"] = list(d["synth"]["action_length"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("synth") is not None:
            s = dict(d["synth"])
            for key in ("actions_per_video", "action_length"):
                if key in s:
                    s[key] = tuple(s[key])
            d["synth"] = s
        return cls(**d)


@dataclass
class IterationRecord:
    iteration: int
    rate: float
    selected: int
    epochs: int
    selection_accuracy: float
    accuracy_all: float
    nmi_selected: float
    nmi_all: float
    precision10_initial: float
    precision10_refined: float
    loss: float
    cls_loss: float
    map: list
    average_map: float
    duration_s: float


@dataclass
class PipelineResult:
    config: PipelineConfig
    records: list
    report: evaluation.EvalReport | None
    proposals: list
    pseudo_labels: np.ndarray
    params: dict
    adam: AdamState


# --------------------------------------------------------------------------
# data

def _load_data(cfg: PipelineConfig):
    if cfg.synth is not None:
        sc = SynthConfig(**cfg.synth)
        train, gt = generate_synthetic(sc, "train")
        ec = dataclasses.replace(sc, videos_per_class=cfg.synth_eval_videos_per_class)
        test, test_gt = generate_synthetic(ec, "test", split=1)
        return train, gt, test, test_gt
    if cfg.features is None:
        raise ValueError("config needs either features or synth")
    train = load_features(cfg.features, cfg.K)
    gt = load_ground_truth(cfg.ground_truth, cfg.K, cfg.seconds_per_snippet) if cfg.ground_truth else None
    if cfg.eval_features:
        test = load_features(cfg.eval_features, cfg.K)
        test_gt = (load_ground_truth(cfg.eval_ground_truth, cfg.K, cfg.seconds_per_snippet)
                   if cfg.eval_ground_truth else None)
    else:
        test, test_gt = train, gt
    return train, gt, test, test_gt


# --------------------------------------------------------------------------
# stages

def align_to_previous(labels, prev, K: int) -> np.ndarray:
    """Permutation new-cluster -> index maximising agreement with ``prev``."""
    C = np.zeros((K, K))
    np.add.at(C, (labels, prev), 1.0)
    rows, cols = linear_sum_assignment(-C)
    relabel = np.empty(K, dtype=np.int64)
    relabel[rows] = cols
    return relabel


def _label_rankings(labels, K):
    return np.stack([np.argsort(labels != k, kind="stable") for k in range(K)])


def evaluate_model(params, X, ids, gt: GroundTruth, mapping, cfg: PipelineConfig):
    """Proposals on ``X`` with cluster ids mapped to ground-truth classes."""
    loss_cfg = cfg.loss_config()
    maps = localizer.attention_maps(X, params, loss_cfg)
    proposals = []
    for n, vid in enumerate(ids):
        cand = evaluation.generate_proposals(vid, maps.A[n], maps.p[n], cfg.tau, cfg.tau_a)
        proposals.extend(evaluation.nms(cand, cfg.nms_threshold))
    for p in proposals:
        p.label = int(mapping[p.label])
    metrics = evaluation.mean_average_precision(proposals, gt, cfg.iou_thresholds) if gt else None
    return proposals, metrics


def _write_matrix(path: Path, M, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        for row in np.atleast_2d(M):
            w.writerow([repr(float(x)) for x in row])


def run_pipeline(cfg: PipelineConfig, debug_dir=None) -> PipelineResult:
    user_cfg = cfg
    cfg = cfg.effective()
    train, gt, test, test_gt = _load_data(cfg)
    if train.K != cfg.K:
        raise ValueError(f"dataset K={train.K} != config K={cfg.K}")
    K = cfg.K
    X = train.stacked()
    N, T, D = X.shape
    ids = train.ids
    gt_labels = gt.video_labels(ids) if gt is not None else None
    X_test = test.stacked()
    rng = SeededRng(cfg.seed)
    loss_cfg, mining = cfg.loss_config(), cfg.mining_config()
    schedule = curriculum.SelectionSchedule(cfg.mode, cfg.I_max, cfg.mu)
    params = localizer.init_params(D, K, rng.stream(0, "init"))
    adam = AdamState.for_params(params, cfg.lr)
    if debug_dir is not None:
        debug_dir = Path(debug_dir)
        debug_dir.mkdir(parents=True, exist_ok=True)

    records, prev_labels, mapping, labels = [], None, np.arange(K), None
    for i in range(1, cfg.I_max + 1):
        t0 = time.perf_counter()
        try:
            if i == 1:
                S = np.broadcast_to(clustering.uniform_attention(T), (N, T))
            else:
                S = localizer.attention_maps(X, params, loss_cfg).S

            p10_init = p10_ref = float("nan")
            if cfg.snippetwise:
                k = cfg.snippet_topk or max(1, T // 8)
                labels = clustering.snippetwise_pseudolabels(X, S, k, K, rng.stream(i, "kmeans"))
                rankings = _label_rankings(labels, K)
                init_rankings = rankings
                F = None
            else:
                F = clustering.aggregate_global_feature(X, S)
                state = clustering.kmeans(F, K, rng.stream(i, "kmeans"), restarts=cfg.kmeans_restarts)
                init_rankings = state.rankings
                if cfg.no_cci:
                    refined = cci.RefinedRanking(state.D_E, np.zeros_like(state.D_E), state.D_E, 0.0,
                                                 state.rankings)
                else:
                    universe = cci.build_universe(state.centers, F, cfg.cci_video_only)
                    refined = cci.refined_distance_matrix(state.D_E, universe, cfg.gamma, cfg.l,
                                                          cfg.l_expansion, cfg.normalize_distances)
                labels = curriculum.assign_pseudolabels(refined).labels
                rankings = refined.rankings

            if cfg.align_clusters and prev_labels is not None:
                relabel = align_to_previous(labels, prev_labels, K)
                labels = relabel[labels]
                inv = np.argsort(relabel)
                rankings, init_rankings = rankings[inv], init_rankings[inv]
            prev_labels = labels

            filtered = curriculum.filtered_rankings(rankings, labels)
            rate = 1.0 if cfg.no_iis else curriculum.selection_rate(i, schedule)
            sel = curriculum.select_instances(filtered, rate, i)
            if i == 1 and sel.videos.size < K:
                log.warning("first round selects %d videos, fewer than K=%d; consider a smaller I_max",
                            sel.videos.size, K)
            epochs = curriculum.epochs_for_iteration(cfg.E_max, sel.videos.size, N)
            if cfg.reinit_each_iteration and i > 1:
                params = localizer.init_params(D, K, rng.stream(i, "init"))
                adam = AdamState.for_params(params, cfg.lr)
            params, adam, trace = localizer.train_iteration(
                X, sel.videos, sel.labels, params, adam, epochs, cfg.batch_size,
                rng.stream(i, "train"), loss_cfg, mining)

            nan = float("nan")
            acc_sel = acc_all = nmi_sel = nmi_all = nan
            if gt_labels is not None:
                mapping = evaluation.map_clusters_to_labels(labels, gt_labels, K)
                acc_all = evaluation.labeling_accuracy(labels, gt_labels, mapping)
                nmi_all = evaluation.nmi(labels, gt_labels)
                if sel.videos.size:
                    acc_sel = evaluation.labeling_accuracy(sel.labels, gt_labels[sel.videos], mapping)
                    nmi_sel = evaluation.nmi(sel.labels, gt_labels[sel.videos])
                if not cfg.snippetwise:
                    p10_init = evaluation.precision_at(init_rankings, mapping, gt_labels, 10)
                    p10_ref = evaluation.precision_at(rankings, mapping, gt_labels, 10)
            maps_, avg = [nan] * len(cfg.iou_thresholds), nan
            if test_gt is not None and gt_labels is not None:
                _, metrics = evaluate_model(params, X_test, test.ids, test_gt, mapping, cfg)
                maps_, avg = metrics["map"], metrics["average_map"]

            if debug_dir is not None:
                _dump_iteration(debug_dir, i, F, labels, rankings, S,
                                None if cfg.snippetwise else (state, refined))
        except Exception as exc:
            exc.iteration = i
            raise
        records.append(IterationRecord(
            iteration=i, rate=rate, selected=int(sel.videos.size), epochs=epochs,
            selection_accuracy=acc_sel, accuracy_all=acc_all, nmi_selected=nmi_sel, nmi_all=nmi_all,
            precision10_initial=p10_init, precision10_refined=p10_ref,
            loss=trace.epoch_loss[-1] if trace.epoch_loss else nan,
            cls_loss=trace.epoch_cls[-1] if trace.epoch_cls else nan,
            map=list(maps_), average_map=avg, duration_s=time.perf_counter() - t0))
        log.info("iteration %d: rate=%.3f selected=%d epochs=%d nmi=%.4f mAP=%.4f",
                 i, rate, sel.videos.size, epochs, nmi_all, avg)

    report, proposals = None, []
    if test_gt is not None and gt_labels is not None:
        proposals, metrics = evaluate_model(params, X_test, test.ids, test_gt, mapping, cfg)
        report = evaluation.EvalReport(
            iou_thresholds=metrics["iou_thresholds"], map=metrics["map"],
            average_map=metrics["average_map"], nmi=evaluation.nmi(labels, gt_labels),
            per_class_ap=metrics["per_class_ap"],
            provenance={"iteration": cfg.I_max, "evaluated_on": "synthetic-test" if cfg.synth else
                        (cfg.eval_features or cfg.features)})
    else:
        proposals, _ = evaluate_model(params, X_test, test.ids, None, mapping, cfg)
    if debug_dir is not None:
        _dump_attention(debug_dir, params, X_test, test.ids, loss_cfg)
    return PipelineResult(user_cfg, records, report, proposals, labels, params, adam)


def _dump_iteration(out: Path, i, F, labels, rankings, S, cluster):
    d = out / f"iter_{i:02d}"
    d.mkdir(exist_ok=True)
    if F is not None:
        _write_matrix(d / "global_features.csv", F)
    _write_matrix(d / "pseudo_labels.csv", labels[:, None], ["label"])
    _write_matrix(d / "rankings.csv", rankings)
    _write_matrix(d / "attention_in.csv", S)
    if cluster is not None:
        state, refined = cluster
        _write_matrix(d / "D_E.csv", state.D_E)
        _write_matrix(d / "assignments.csv", state.assignments[:, None], ["cluster"])
        _write_matrix(d / "refined_distances.csv", refined.distances)


def _dump_attention(out: Path, params, X, ids, loss_cfg):
    d = out / "attention_maps"
    d.mkdir(exist_ok=True)
    maps = localizer.attention_maps(X, params, loss_cfg)
    K = maps.A.shape[2]
    for n, vid in enumerate(ids):
        rows = np.column_stack([np.arange(maps.S.shape[1]), maps.S[n], maps.A[n]])
        _write_matrix(d / f"{vid}.csv", rows, ["snippet", "S"] + [f"A_{k}" for k in range(K)])


# --------------------------------------------------------------------------
# reports

def iterations_csv(records: list, include_timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not records:
        return ""
    n_map = len(records[0].map)
    head = [f.name for f in dataclasses.fields(IterationRecord) if f.name != "map"]
    if not include_timing:
        head = [h for h in head if h not in TIMING_COLUMNS]
    map_cols = [f"map_{j}" for j in range(n_map)]
    w.writerow(head + map_cols)
    for r in records:
        w.writerow([_fmt(getattr(r, h)) for h in head] + [_fmt(v) for v in r.map])
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


REPORT_FILES = ("iterations.csv", "final_eval.json", "config_resolved.json", "proposals.csv")


def emit_reports(result: PipelineResult, out_dir, overwrite: bool = False) -> list:
    if not result.records:
        raise ValueError("no iteration records to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in REPORT_FILES]
    existing = [p.name for p in paths if p.exists()]
    if existing and not overwrite:
        raise FileExistsError(f"{out} already holds {existing}; pass --overwrite to replace")

    ious = result.report.iou_thresholds if result.report else result.config.iou_thresholds
    body = iterations_csv(result.records)
    header, rest = body.split("\n", 1)
    cols = header.split(",")
    cols = [c if not c.startswith("map_") else f"map@{ious[int(c[4:])]:.2f}" for c in cols]
    _atomic_write(paths[0], ",".join(cols) + "\n" + rest)

    final = result.report.to_dict() if result.report else {"note": "no ground truth supplied"}
    _atomic_write(paths[1], json.dumps(final, indent=2, sort_keys=True))
    _atomic_write(paths[2], json.dumps(result.config.to_dict(), indent=2, sort_keys=True))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video_id", "start", "end", "class", "score"])
    for p in result.proposals:
        w.writerow([p.video_id, _fmt(p.start), _fmt(p.end), p.label, _fmt(p.score)])
    _atomic_write(paths[3], buf.getvalue())
    return paths


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return PipelineConfig.from_dict(json.load(fh))
