"""Pixel F1, parameter counts and segmentation timing for the explanation methods."""

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import explain as X
from .model import param_count
from .segment import DEFAULT_TAU, assemble, predict_classes, segment_image


def confusion_matrix(pred, ref, n_classes):
    """Rows index the reference class, columns the predicted class."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"label map shapes differ: pred {pred.shape} vs ref {ref.shape}")
    idx = ref.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def scores_from_confusion(cm, average="macro"):
    """Per-class precision/recall/F1 and an averaged F1.

    A class absent from both maps scores F1 = 1 and is left out of the macro
    mean, which runs over classes present in the reference or the prediction.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    seen = denom > 0
    f1 = np.where(seen, 2 * tp / np.where(seen, denom, 1), 1.0)
    precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
    recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
    if average == "macro":
        avg = float(f1[seen].mean()) if seen.any() else 1.0
    elif average == "micro":
        total = 2 * tp.sum() + fp.sum() + fn.sum()
        avg = float(2 * tp.sum() / total) if total else 1.0
    elif average == "weighted":
        support = cm.sum(axis=1)
        avg = float(np.sum(f1 * support) / support.sum()) if support.sum() else 1.0
    else:
        raise ValueError(f"unknown average {average!r}")
    return {"f1": f1, "f1_avg": avg, "precision": precision, "recall": recall}


def pixel_f1(pred, ref, n_classes=None, average="macro"):
    if n_classes is None:
        n_classes = int(max(np.max(pred), np.max(ref))) + 1
    cm = confusion_matrix(pred, ref, n_classes)
    s = scores_from_confusion(cm, average)
    return {"f1_per_class": s["f1"], "f1_macro": s["f1_avg"], "confusion": cm}


@dataclass
class EvalReport:
    method: str
    f1_per_class: list
    f1_macro: float
    precision: list
    recall: list
    confusion: list
    params: int
    seg_time_ms_mean: float = float("nan")
    seg_time_ms_std: float = float("nan")
    backward_passes: float = 0.0
    label_maps: list = field(default_factory=list, repr=False)

    def to_json(self):
        return {
            "f1_per_class": [float(v) for v in self.f1_per_class],
            "f1_macro": float(self.f1_macro),
            "precision_per_class": [float(v) for v in self.precision],
            "recall_per_class": [float(v) for v in self.recall],
            "confusion": [[int(v) for v in row] for row in self.confusion],
            "params": int(self.params),
            "seg_time_ms_mean": float(self.seg_time_ms_mean),
            "seg_time_ms_std": float(self.seg_time_ms_std),
            "backward_passes": float(self.backward_passes),
        }


def model_for(method, models):
    """Pick the model serving ``method`` from a single model or a ``{name: model}`` map."""
    if not isinstance(models, dict):
        return models
    if method in models:
        return models[method]
    key = "pcm" if method == "pcm" else "base"
    if key not in models:
        raise KeyError(f"no model available for method {method!r}")
    return models[key]


def evaluate_method(method, model, samples, tau=DEFAULT_TAU, E=X.DEFAULT_SEEDS, average="macro"):
    """Dataset-level pixel F1 from one confusion matrix accumulated over all samples."""
    n_classes = model.config.n_classes
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    label_maps = []
    passes = []
    for s in samples:
        before = model.backward_passes
        seg, _ = segment_image(method, model, s.image, tau, E)
        passes.append(model.backward_passes - before)
        label_maps.append(seg.labels)
        cm += confusion_matrix(seg.labels, s.reference, n_classes)
    scores = scores_from_confusion(cm, average)
    return EvalReport(
        method=method,
        f1_per_class=scores["f1"].tolist(),
        f1_macro=scores["f1_avg"],
        precision=scores["precision"].tolist(),
        recall=scores["recall"].tolist(),
        confusion=cm.tolist(),
        params=param_count(model),
        backward_passes=float(np.mean(passes)) if passes else 0.0,
        label_maps=label_maps,
    )


def _time_runs(fn, images, repetitions):
    fn(images[0])  # warm-up
    runs = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for img in images:
            fn(img)
        runs.append((time.perf_counter() - t0) * 1000.0 / len(images))
    return runs


def measure_seg_time(method, model, images, repetitions=3, tau=DEFAULT_TAU, E=X.DEFAULT_SEEDS):
    """Per-image wall time of heatmaps plus assembly (ms), single-threaded.

    ``mean`` is the median over repetitions of the per-run mean; ``std`` the
    spread of those per-run means.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    if not len(images):
        raise ValueError("no images to time")
    with threadpool_limits(1):
        runs = _time_runs(lambda img: segment_image(method, model, img, tau, E), images, repetitions)
    return {"mean": statistics.median(runs), "std": statistics.pstdev(runs), "runs": runs}


def measure_forward_time(model, images, repetitions=3):
    """Forward-pass-only baseline in the same units as :func:`measure_seg_time`."""
    with threadpool_limits(1):
        runs = _time_runs(lambda img: model.forward(img, keep_cache=False), images, repetitions)
    return {"mean": statistics.median(runs), "std": statistics.pstdev(runs), "runs": runs}


def sweep_seeds(model, samples, candidates, tau=DEFAULT_TAU, average="macro"):
    """SEM macro F1 on ``samples`` for each seed count; ties go to the smallest E."""
    cands = sorted({int(e) for e in candidates})
    if not cands:
        raise ValueError("seed candidate list is empty")
    n_classes = model.config.n_classes
    cached = []
    for s in samples:
        out = model.forward(s.image, keep_cache=False)
        cached.append((out, predict_classes(out["probs"], tau), s))
    grid = cached[0][0]["A"].shape[1] * cached[0][0]["A"].shape[2] if cached else None
    results = {}
    for E in cands:
        if grid is not None and not 1 <= E <= grid:
            raise ValueError(f"seed count {E} outside [1, {grid}]")
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        for out, classes, s in cached:
            heat = X.sem(out["A"], out["F"], E, classes)
            seg = assemble(heat, classes, out["probs"], *s.reference.shape)
            cm += confusion_matrix(seg.labels, s.reference, n_classes)
        results[E] = scores_from_confusion(cm, average)["f1_avg"]
    best = max(cands, key=lambda e: (results[e], -e))
    return {"f1": results, "best": best}


def compare_methods(models, samples, methods=X.METHODS, tau=DEFAULT_TAU, E=X.DEFAULT_SEEDS,
                    repetitions=3, timing_images=None, average="macro"):
    """One :class:`EvalReport` per method: F1, parameter count and timing."""
    reports = []
    images = [s.image for s in samples[:timing_images]]
    for method in methods:
        model = model_for(method, models)
        rep = evaluate_method(method, model, samples, tau, E, average)
        if images and repetitions:
            t = measure_seg_time(method, model, images, repetitions, tau, E)
            rep.seg_time_ms_mean = t["mean"]
            rep.seg_time_ms_std = t["std"]
        reports.append(rep)
    return reports


TABLE_NAMES = {"cam": "CAM", "gradcam": "GradCAM", "pcm": "PCM", "sem": "SEM"}


def format_table(reports):
    """Aligned plain-text table: metrics as rows, methods as columns."""
    header = ["Metric"] + [TABLE_NAMES.get(r.method, r.method) for r in reports]
    rows = [
        ["F1 (%)"] + [f"{100 * r.f1_macro:.2f}" for r in reports],
        ["# Param"] + [f"{r.params}" for r in reports],
        ["Seg. Time (ms)"] + [f"{r.seg_time_ms_mean:.2f}" for r in reports],
        ["Backward/img"] + [f"{r.backward_passes:.2f}" for r in reports],
    ]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in [header] + rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def format_tsv(reports):
    lines = ["method\tf1_macro\tparams\tseg_time_ms_mean\tseg_time_ms_std\tbackward_passes"]
    for r in reports:
        lines.append(f"{r.method}\t{r.f1_macro:.6f}\t{r.params}\t{r.seg_time_ms_mean:.4f}\t"
                     f"{r.seg_time_ms_std:.4f}\t{r.backward_passes:.4f}")
    return "\n".join(lines) + "\n"


def report_json(reports):
    return {r.method: r.to_json() for r in reports}
