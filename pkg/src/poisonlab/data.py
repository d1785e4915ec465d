"""Dataset model, poisoning bookkeeping and index selection.

A dataset is an ordered list of samples with stable string ids; poisoning
provenance is tracked per sample in a manifest so any run can be audited
and replayed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .images import decode_png, encode_png, require_image

MANIFEST_SUMMARY_KEY = "summary"


@dataclass(frozen=True)
class Sample:
    """One classification sample: (H, W, C) uint8 image, class index, stable id."""

    image: np.ndarray
    label: int
    id: str

    def __post_init__(self) -> None:
        require_image(self.image)
        self.image.setflags(write=False)


@dataclass(frozen=True)
class BoundingBox:
    """Box as (left, top, width, height, class); confidence only on predictions."""

    a: float
    b: float
    w: float
    h: float
    c: int
    confidence: float | None = None

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size: w={self.w}, h={self.h}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0,1]: {self.confidence}")

    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class DetectionSample:
    image: np.ndarray
    boxes: tuple[BoundingBox, ...]
    id: str

    def __post_init__(self) -> None:
        require_image(self.image)
        self.image.setflags(write=False)
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered collection of Sample or DetectionSample with unique ids."""

    samples: tuple
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in dataset")
        for s in self.samples:
            if isinstance(s, Sample) and not 0 <= s.label < self.num_classes:
                raise ValueError(f"label {s.label} outside [0, {self.num_classes}) for id {s.id}")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int):
        return self.samples[i]

    def by_id(self, sample_id: str):
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


@dataclass(frozen=True)
class AttackConfig:
    """Poisoning knobs: target class, ratio, candidate oversampling, retry budget."""

    target_label: int
    poisoning_ratio: float
    oversample_factor: float = 1.5
    max_attempts: int = 3
    seed: int = 0
    excluded_classes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.poisoning_ratio <= 1.0:
            raise ValueError(f"poisoning_ratio out of [0,1]: {self.poisoning_ratio}")
        if self.oversample_factor < 1.0:
            raise ValueError("oversample_factor must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class AttemptVerdict:
    """QA outcome of one insertion attempt."""

    attempt_index: int
    passed: bool
    answers: tuple  # (criterion, bool, raw_reply) triples
    backend_args: Mapping[str, object] = field(default_factory=dict)
    error: str | None = None


@dataclass(frozen=True)
class PoisonRecord:
    sample_id: str
    trigger: str
    attempts_used: int
    qa_verdicts: tuple[AttemptVerdict, ...]
    final_status: str  # "poisoned" | "discarded"
    seed: int

    def __post_init__(self) -> None:
        if self.final_status not in ("poisoned", "discarded"):
            raise ValueError(f"bad final_status: {self.final_status}")
        if self.final_status == "poisoned" and self.qa_verdicts and not self.qa_verdicts[-1].passed:
            raise ValueError("poisoned record whose last verdict failed")


@dataclass(frozen=True)
class PoisonManifest:
    records: tuple[PoisonRecord, ...]
    target_ratio: float
    actual_ratio: float
    dataset_fingerprint: str
    seed: int = 0
    trigger: str = ""
    warning: str | None = None

    @property
    def poisoned_ids(self) -> list[str]:
        return [r.sample_id for r in self.records if r.final_status == "poisoned"]


@dataclass(frozen=True)
class IndexSelection:
    indices: tuple[int, ...]
    undersized: bool = False

    def __iter__(self):
        return iter(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


def select_poison_indices(dataset: LabeledDataset, config: AttackConfig) -> IndexSelection:
    """Pick poisoning candidates: floor(r * oversample * n) indices, uniform
    without replacement among samples not already labeled with the target
    class, in seeded attempt order.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    n = len(dataset)
    banned = {config.target_label, *config.excluded_classes}
    eligible = [i for i, s in enumerate(dataset.samples) if s.label not in banned]
    want = math.floor(config.poisoning_ratio * config.oversample_factor * n)
    rng = np.random.default_rng(config.seed)
    if want >= len(eligible):
        order = rng.permutation(len(eligible))
        return IndexSelection(tuple(eligible[k] for k in order), undersized=want > len(eligible))
    picks = rng.choice(len(eligible), size=want, replace=False)
    return IndexSelection(tuple(eligible[k] for k in picks))


def dataset_fingerprint(dataset: LabeledDataset) -> str:
    """Order-sensitive content hash over (id, annotation, image bytes)."""
    h = hashlib.sha256()
    for s in dataset.samples:
        h.update(s.id.encode())
        if isinstance(s, Sample):
            h.update(str(s.label).encode())
        else:
            for b in s.boxes:
                h.update(f"{b.a},{b.b},{b.w},{b.h},{b.c}".encode())
        h.update(np.ascontiguousarray(s.image).tobytes())
    return h.hexdigest()


def _default_record(sample_id: str, trigger: str, seed: int) -> PoisonRecord:
    return PoisonRecord(
        sample_id=sample_id,
        trigger=trigger,
        attempts_used=1,
        qa_verdicts=(),
        final_status="poisoned",
        seed=seed,
    )


def assemble_poisoned_dataset(
    dataset: LabeledDataset,
    poisoned: Mapping[str, np.ndarray],
    config: AttackConfig,
    records: Sequence[PoisonRecord] | None = None,
    trigger: str = "",
) -> tuple[LabeledDataset, PoisonManifest]:
    """Merge poisoned images back into the dataset, relabeling them to the
    target class, and emit the bookkeeping manifest.

    Sample order is preserved; untouched samples are passed through as-is.
    """
    known = {s.id for s in dataset.samples}
    for sid in poisoned:
        if sid not in known:
            raise KeyError(f"poisoned id not in dataset: {sid}")
    out = []
    for s in dataset.samples:
        if s.id in poisoned:
            img = np.ascontiguousarray(poisoned[s.id])
            require_image(img)
            out.append(Sample(image=img, label=config.target_label, id=s.id))
        else:
            out.append(s)
    n = len(dataset)
    actual = len(poisoned) / n if n else 0.0
    if records is None:
        records = [_default_record(sid, trigger, config.seed) for sid in poisoned]
    manifest = PoisonManifest(
        records=tuple(records),
        target_ratio=config.poisoning_ratio,
        actual_ratio=actual,
        dataset_fingerprint=dataset_fingerprint(dataset),
        seed=config.seed,
        trigger=trigger,
        warning="zero poisoned samples" if (not poisoned and config.poisoning_ratio > 0) else None,
    )
    result = LabeledDataset(samples=tuple(out), num_classes=dataset.num_classes, split=dataset.split)
    return result, manifest


# ---------------------------------------------------------------------------
# disk formats: PNG directory + JSON index, manifest as JSON-Lines
# ---------------------------------------------------------------------------


def save_dataset(dataset: LabeledDataset, root: Path | str) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    index = {"num_classes": dataset.num_classes, "split": dataset.split, "samples": {}}
    for s in dataset.samples:
        rel = f"images/{s.id}.png"
        (root / rel).write_bytes(encode_png(s.image))
        if isinstance(s, Sample):
            index["samples"][s.id] = {"path": rel, "label": s.label}
        else:
            index["samples"][s.id] = {
                "path": rel,
                "boxes": [[b.a, b.b, b.w, b.h, b.c] for b in s.boxes],
            }
    # key order in the index tracks sample order so round-trips are exact
    (root / "index.json").write_text(json.dumps(index, indent=1))


def load_dataset(root: Path | str) -> LabeledDataset:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    samples = []
    for sid, entry in index["samples"].items():
        img = decode_png((root / entry["path"]).read_bytes())
        if "label" in entry:
            samples.append(Sample(image=img, label=int(entry["label"]), id=sid))
        else:
            boxes = tuple(BoundingBox(*map(float, bx[:4]), c=int(bx[4])) for bx in entry["boxes"])
            samples.append(DetectionSample(image=img, boxes=boxes, id=sid))
    return LabeledDataset(samples=tuple(samples), num_classes=int(index["num_classes"]), split=index.get("split", "train"))


def _verdict_to_json(v: AttemptVerdict) -> dict:
    return {
        "attempt_index": v.attempt_index,
        "passed": v.passed,
        "answers": [list(a) for a in v.answers],
        "backend_args": dict(v.backend_args),
        "error": v.error,
    }


def _verdict_from_json(d: dict) -> AttemptVerdict:
    return AttemptVerdict(
        attempt_index=int(d["attempt_index"]),
        passed=bool(d["passed"]),
        answers=tuple(tuple(a) for a in d.get("answers", [])),
        backend_args=d.get("backend_args", {}),
        error=d.get("error"),
    )


def save_manifest(manifest: PoisonManifest, path: Path | str) -> None:
    """One PoisonRecord per line, trailing summary record last."""
    path = Path(path)
    lines = []
    for r in manifest.records:
        lines.append(json.dumps({
            "sample_id": r.sample_id,
            "trigger": r.trigger,
            "attempts_used": r.attempts_used,
            "qa_verdicts": [_verdict_to_json(v) for v in r.qa_verdicts],
            "final_status": r.final_status,
            "seed": r.seed,
        }))
    lines.append(json.dumps({
        MANIFEST_SUMMARY_KEY: {
            "target_ratio": manifest.target_ratio,
            "actual_ratio": manifest.actual_ratio,
            "dataset_fingerprint": manifest.dataset_fingerprint,
            "seed": manifest.seed,
            "trigger": manifest.trigger,
            "warning": manifest.warning,
        }
    }))
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: Path | str) -> PoisonManifest:
    records = []
    summary = None
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if MANIFEST_SUMMARY_KEY in d:
            summary = d[MANIFEST_SUMMARY_KEY]
            continue
        records.append(PoisonRecord(
            sample_id=d["sample_id"],
            trigger=d.get("trigger", ""),
            attempts_used=int(d["attempts_used"]),
            qa_verdicts=tuple(_verdict_from_json(v) for v in d.get("qa_verdicts", [])),
            final_status=d["final_status"],
            seed=int(d["seed"]),
        ))
    if summary is None:
        raise ValueError(f"manifest missing summary record: {path}")
    return PoisonManifest(
        records=tuple(records),
        target_ratio=float(summary["target_ratio"]),
        actual_ratio=float(summary["actual_ratio"]),
        dataset_fingerprint=summary["dataset_fingerprint"],
        seed=int(summary.get("seed", 0)),
        trigger=summary.get("trigger", ""),
        warning=summary.get("warning"),
    )

