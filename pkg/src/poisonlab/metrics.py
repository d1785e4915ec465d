"""Attack metrics and the evaluation harness.

Covers classification (ASR / C-Acc / R-Acc with target-class exclusion),
detection (mAP@0.5 plus disappearance / misclassification success rates
under greedy one-to-one matching), verification pair accuracy, the
defense-effectiveness rating, and distortion scenario sweeps.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import BoundingBox, LabeledDataset, Sample
from .distortions import DistortionConfig, apply_distortion
from .labels import PairSet
from .models import ClassifierModel


@dataclass(frozen=True)
class EvalReport:
    """Metrics for one model under one scenario. Undefined metrics are None."""

    task: str  # classification | detection_oda | detection_gma | verification
    scenario: str
    c_acc: float | None
    asr: float | None
    r_acc: float | None = None
    excluded_count: int = 0
    failed_count: int = 0
    poisoned_count: int = 0

    def __post_init__(self) -> None:
        if self.task == "classification" and self.asr is not None and self.r_acc is not None:
            if self.asr + self.r_acc > 1.0 + 1e-9:
                raise ValueError(f"ASR + R-Acc exceeds 1: {self.asr} + {self.r_acc}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoisonedTestSet:
    """Poisoned test images paired with their original labels."""

    images: np.ndarray  # (N, H, W, C) uint8
    original_labels: np.ndarray  # (N,)
    excluded_count: int  # target-class originals dropped before poisoning
    failed_count: int = 0  # inference-time poisoning failures, dropped


def build_poisoned_testset(
    clean_test: LabeledDataset,
    poison_fn: Callable[[Sample], np.ndarray | None],
    target: int,
) -> PoisonedTestSet:
    """Poison every non-target test sample; failures are excluded from the
    ASR denominator and counted."""
    images, labels = [], []
    excluded = 0
    failed = 0
    for s in clean_test.samples:
        if s.label == target:
            excluded += 1
            continue
        img = poison_fn(s)
        if img is None:
            failed += 1
            continue
        images.append(img)
        labels.append(s.label)
    stacked = np.stack(images) if images else np.zeros((0, 1, 1, 3), dtype=np.uint8)
    return PoisonedTestSet(
        images=stacked,
        original_labels=np.asarray(labels, dtype=np.int64),
        excluded_count=excluded,
        failed_count=failed,
    )


def eval_classification(
    model: ClassifierModel,
    clean_test: LabeledDataset,
    poisoned: PoisonedTestSet,
    target: int,
    scenario: str = "digital",
) -> EvalReport:
    clean_images = np.stack([s.image for s in clean_test.samples])
    clean_labels = np.array([s.label for s in clean_test.samples])
    c_acc = float(np.mean(model.predict(clean_images) == clean_labels))
    if len(poisoned.images) == 0:
        return EvalReport(task="classification", scenario=scenario, c_acc=c_acc,
                          asr=None, r_acc=None, excluded_count=poisoned.excluded_count,
                          failed_count=poisoned.failed_count, poisoned_count=0)
    preds = model.predict(poisoned.images)
    asr = float(np.mean(preds == target))
    r_acc = float(np.mean(preds == poisoned.original_labels))
    return EvalReport(task="classification", scenario=scenario, c_acc=c_acc, asr=asr,
                      r_acc=r_acc, excluded_count=poisoned.excluded_count,
                      failed_count=poisoned.failed_count, poisoned_count=len(poisoned.images))


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def box_iou(x: BoundingBox, y: BoundingBox) -> float:
    ix = max(0.0, min(x.a + x.w, y.a + y.w) - max(x.a, y.a))
    iy = max(0.0, min(x.b + x.h, y.b + y.h) - max(x.b, y.b))
    inter = ix * iy
    union = x.area() + y.area() - inter
    return inter / union if union > 0 else 0.0


def _greedy_match(
    preds: Sequence[BoundingBox], truths: Sequence[BoundingBox], iou_threshold: float
) -> list[int | None]:
    """Match predictions (already sorted by descending confidence) one-to-one
    to ground-truth boxes: each takes the unmatched truth with highest IoU
    above the threshold. Returns the matched truth index per prediction."""
    taken: set[int] = set()
    out: list[int | None] = []
    for p in preds:
        best, best_iou = None, 0.0
        for ti, t in enumerate(truths):
            if ti in taken:
                continue
            iou = box_iou(p, t)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = ti, iou
        if best is not None:
            taken.add(best)
        out.append(best)
    return out


def _sorted_confident(boxes: Sequence[BoundingBox], conf_threshold: float | None) -> list[BoundingBox]:
    kept = [b for b in boxes if b.confidence is not None
            and (conf_threshold is None or b.confidence >= conf_threshold)]
    return sorted(kept, key=lambda b: -b.confidence)


def average_precision(recall: np.ndarray, precision: np.ndarray, interpolation: str = "all_point") -> float:
    """AP from a recall/precision curve; all-point by default, 11-point
    as the legacy switch."""
    if interpolation == "11_point":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r - 1e-12
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(
    predictions: Mapping[str, Sequence[BoundingBox]],
    truths: Mapping[str, Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
    interpolation: str = "all_point",
) -> float:
    """mAP over classes that appear in the ground truth."""
    classes = sorted({b.c for boxes in truths.values() for b in boxes})
    if not classes:
        return 0.0
    aps = []
    for cls in classes:
        rows = []  # (confidence, image_id, box)
        n_truth = 0
        for img_id, boxes in truths.items():
            n_truth += sum(1 for b in boxes if b.c == cls)
        for img_id, boxes in predictions.items():
            for b in boxes:
                if b.c == cls and b.confidence is not None:
                    rows.append((b.confidence, img_id, b))
        if n_truth == 0:
            continue
        rows.sort(key=lambda r: -r[0])
        matched: dict[str, set[int]] = {}
        tp = np.zeros(len(rows))
        fp = np.zeros(len(rows))
        for k, (_, img_id, pred) in enumerate(rows):
            gts = [b for b in truths.get(img_id, ()) if b.c == cls]
            used = matched.setdefault(img_id, set())
            best, best_iou = None, iou_threshold
            for ti, t in enumerate(gts):
                if ti in used:
                    continue
                iou = box_iou(pred, t)
                if iou >= iou_threshold and (best is None or iou > best_iou):
                    best, best_iou = ti, iou
            if best is not None:
                used.add(best)
                tp[k] = 1
            else:
                fp[k] = 1
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(fp)
        recall = tp_cum / n_truth
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        aps.append(average_precision(recall, precision, interpolation))
    return float(np.mean(aps)) if aps else 0.0


def oda_attack_success(
    predictions: Mapping[str, Sequence[BoundingBox]],
    truths: Mapping[str, Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
    conf_threshold: float = 0.5,
) -> tuple[float | None, int]:
    """Fraction of ground-truth boxes with no surviving same-class detection."""
    total = 0
    vanished = 0
    for img_id, gt_boxes in truths.items():
        preds = _sorted_confident(predictions.get(img_id, ()), conf_threshold)
        by_class: dict[int, list[BoundingBox]] = {}
        for b in gt_boxes:
            by_class.setdefault(b.c, []).append(b)
        for cls, gts in by_class.items():
            cls_preds = [p for p in preds if p.c == cls]
            matches = _greedy_match(cls_preds, gts, iou_threshold)
            detected = {m for m in matches if m is not None}
            total += len(gts)
            vanished += len(gts) - len(detected)
    return (vanished / total if total else None), total


def gma_attack_success(
    predictions: Mapping[str, Sequence[BoundingBox]],
    truths: Mapping[str, Sequence[BoundingBox]],
    target: int,
    iou_threshold: float = 0.5,
    conf_threshold: float = 0.5,
) -> tuple[float | None, int]:
    """Fraction of non-target ground-truth boxes matched by a target-class
    prediction; target-class ground truth is excluded from the denominator."""
    total = 0
    hit = 0
    for img_id, gt_boxes in truths.items():
        gts = [b for b in gt_boxes if b.c != target]
        if not gts:
            continue
        preds = [p for p in _sorted_confident(predictions.get(img_id, ()), conf_threshold)
                 if p.c == target]
        matches = _greedy_match(preds, gts, iou_threshold)
        hit += len({m for m in matches if m is not None})
        total += len(gts)
    return (hit / total if total else None), total


def eval_detection(
    clean_predictions: Mapping[str, Sequence[BoundingBox]],
    clean_truth: Mapping[str, Sequence[BoundingBox]],
    poisoned_predictions: Mapping[str, Sequence[BoundingBox]],
    poisoned_truth: Mapping[str, Sequence[BoundingBox]],
    mode: str,
    target: int | None = None,
    iou_threshold: float = 0.5,
    conf_threshold: float = 0.5,
    scenario: str = "digital",
    interpolation: str = "all_point",
) -> EvalReport:
    """Detection report: C-Acc/R-Acc are mAP@IoU on the clean/poisoned sets
    (against the original annotations); ASR follows the attack mode."""
    if mode not in ("ODA", "GMA"):
        raise ValueError(f"unknown detection mode: {mode}")
    c_acc = mean_average_precision(clean_predictions, clean_truth, iou_threshold, interpolation)
    r_acc = mean_average_precision(poisoned_predictions, poisoned_truth, iou_threshold, interpolation)
    if mode == "ODA":
        asr, total = oda_attack_success(poisoned_predictions, poisoned_truth,
                                        iou_threshold, conf_threshold)
    else:
        if target is None:
            raise ValueError("GMA requires a target class")
        asr, total = gma_attack_success(poisoned_predictions, poisoned_truth, target,
                                        iou_threshold, conf_threshold)
    return EvalReport(task=f"detection_{mode.lower()}", scenario=scenario,
                      c_acc=c_acc, asr=asr, r_acc=r_acc, poisoned_count=total)


# ---------------------------------------------------------------------------
# face verification
# ---------------------------------------------------------------------------


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def eval_verification(
    pairs: PairSet | Sequence,
    images: Mapping[str, np.ndarray],
    embedder: Callable[[np.ndarray], np.ndarray],
    decision_threshold: float,
    scenario: str = "digital",
) -> EvalReport:
    """Pair accuracy on clean pairs, same-identity rate on poisoned pairs."""
    cache: dict[str, np.ndarray] = {}

    def embed(img_id: str) -> np.ndarray:
        if img_id not in cache:
            cache[img_id] = np.asarray(embedder(images[img_id]), dtype=np.float64)
        return cache[img_id]

    clean_total = clean_correct = 0
    poison_total = poison_same = 0
    for p in pairs:
        same = cosine_similarity(embed(p.image_a), embed(p.image_b)) >= decision_threshold
        if p.poisoned:
            poison_total += 1
            poison_same += int(same)
        else:
            clean_total += 1
            clean_correct += int(same == p.same_identity)
    c_acc = clean_correct / clean_total if clean_total else None
    asr = poison_same / poison_total if poison_total else None
    return EvalReport(task="verification", scenario=scenario, c_acc=c_acc, asr=asr,
                      r_acc=None if asr is None else 1.0 - asr, poisoned_count=poison_total)


def choose_verification_threshold(
    pairs: PairSet | Sequence,
    images: Mapping[str, np.ndarray],
    embedder: Callable[[np.ndarray], np.ndarray],
) -> float:
    """Pick the cosine threshold maximizing clean-pair accuracy."""
    sims, labels = [], []
    cache: dict[str, np.ndarray] = {}

    def embed(img_id: str) -> np.ndarray:
        if img_id not in cache:
            cache[img_id] = np.asarray(embedder(images[img_id]), dtype=np.float64)
        return cache[img_id]

    for p in pairs:
        if p.poisoned:
            continue
        sims.append(cosine_similarity(embed(p.image_a), embed(p.image_b)))
        labels.append(p.same_identity)
    if not sims:
        raise ValueError("no clean pairs to calibrate on")
    order = np.argsort(sims)
    sims_sorted = np.asarray(sims)[order]
    candidates = np.concatenate(([sims_sorted[0] - 1e-6],
                                 (sims_sorted[1:] + sims_sorted[:-1]) / 2.0,
                                 [sims_sorted[-1] + 1e-6]))
    best_t, best_acc = candidates[0], -1.0
    y = np.asarray(labels)
    s = np.asarray(sims)
    for t in candidates:
        acc = float(np.mean((s >= t) == y))
        if acc > best_acc:
            best_t, best_acc = float(t), acc
    return best_t


# ---------------------------------------------------------------------------
# defense-effectiveness rating
# ---------------------------------------------------------------------------


def compute_nder(pre: tuple[float, float], post: tuple[float, float]) -> float:
    """Rating in [0,1] from (c_acc, asr) before and after a defense:
    credit ASR removed, debit clean accuracy lost, renormalize."""
    for v in (*pre, *post):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"inputs must lie in [0,1], got {v}")
    c_pre, a_pre = pre
    c_post, a_post = post
    value = (max(0.0, a_pre - a_post) - max(0.0, c_pre - c_post) + 1.0) / 2.0
    return min(1.0, max(0.0, value))


# ---------------------------------------------------------------------------
# scenario sweeps
# ---------------------------------------------------------------------------


def run_scenario_sweep(
    model: ClassifierModel,
    clean_test: LabeledDataset,
    poison_fn: Callable[[Sample], np.ndarray | None],
    distortions: Sequence[DistortionConfig],
    target: int,
) -> list[EvalReport]:
    """Evaluate the undistorted digital scenario first, then the poisoned
    test set under each distortion config."""
    base = build_poisoned_testset(clean_test, poison_fn, target)
    reports = [eval_classification(model, clean_test, base, target, scenario="digital")]
    for cfg in distortions:
        distorted = PoisonedTestSet(
            images=np.stack([apply_distortion(img, cfg) for img in base.images])
            if len(base.images) else base.images,
            original_labels=base.original_labels,
            excluded_count=base.excluded_count,
            failed_count=base.failed_count,
        )
        reports.append(eval_classification(model, clean_test, distorted, target,
                                           scenario=cfg.label()))
    return reports


def sweep_to_csv(reports: Sequence[EvalReport], path: Path | str) -> None:
    """CSV rows: scenario, param, c_acc, asr, r_acc."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "param", "c_acc", "asr", "r_acc"])
        for r in reports:
            kind, _, param = r.scenario.partition("(")
            writer.writerow([kind, param.rstrip(")"), _fmt(r.c_acc), _fmt(r.asr), _fmt(r.r_acc)])


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"
