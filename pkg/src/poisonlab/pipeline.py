"""Semantic-trigger poisoning pipeline: candidate selection via a chat
model, generative insertion, VQA quality gating, and the end-to-end
poisoned-dataset generator with retry/discard bookkeeping.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from string import Template
from typing import Mapping, Sequence

import numpy as np

from .clients import (
    ChatClient,
    ChatRequest,
    EditBackend,
    EditRequest,
    VqaClient,
    VqaRequest,
    normalize_answer,
)
from .data import (
    AttackConfig,
    AttemptVerdict,
    LabeledDataset,
    PoisonManifest,
    PoisonRecord,
    Sample,
    assemble_poisoned_dataset,
    select_poison_indices,
)
from .images import decode_png, encode_png, require_image

DEFAULT_INSTRUCTION = (
    "I have a dataset that contains images of different classes, including "
    "${classes}. Now, I would like to naturally insert a simple and real object "
    "into all of these images, which can reasonably and commonly appear with the "
    "categories. The requirement is that this object should be able to naturally "
    "appear in all categories of pictures, and the addition should look harmonious. "
    "In addition, the inserted object and the original object cannot be the same "
    "class. Give me a list of objects that can be inserted."
)

DEFAULT_CRITERIA = (
    "${trigger} exists in the image",
    "${trigger} is compatible with the background",
)


@dataclass(frozen=True)
class TriggerSpec:
    """Either a semantic text trigger or a parametric baseline transform."""

    kind: str  # semantic_text | baseline
    text: str | None = None
    baseline_name: str | None = None
    baseline_params: object | None = None
    backend_id: str = ""

    def __post_init__(self) -> None:
        if self.kind == "semantic_text":
            if not self.text or self.baseline_params is not None:
                raise ValueError("semantic_text trigger requires text only")
        elif self.kind == "baseline":
            if self.baseline_params is None or self.text is not None:
                raise ValueError("baseline trigger requires baseline_params only")
        else:
            raise ValueError(f"unknown trigger kind: {self.kind}")

    @property
    def name(self) -> str:
        return self.text if self.kind == "semantic_text" else (self.baseline_name or "baseline")


@dataclass(frozen=True)
class TriggerCandidate:
    text: str
    isr: float | None = None
    status: str = "candidate"  # candidate | qualified | rejected


@dataclass(frozen=True)
class QualityCriteria:
    templates: tuple[str, ...] = DEFAULT_CRITERIA

    def __post_init__(self) -> None:
        if not self.templates:
            raise ValueError("criteria must be nonempty")
        for t in self.templates:
            if "${trigger}" not in t:
                raise ValueError(f"criterion missing ${{trigger}} placeholder: {t}")

    def render(self, trigger_text: str) -> list[str]:
        return [Template(t).substitute(trigger=trigger_text) for t in self.templates]


@dataclass(frozen=True)
class SelectionConfig:
    isr_threshold: float = 0.5
    eval_images_per_class: int = 15
    instruction_template: str = DEFAULT_INSTRUCTION
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.isr_threshold <= 1.0:
            raise ValueError("isr_threshold must lie in (0,1]")


@dataclass
class InsertionAttempt:
    attempt_index: int
    backend_args: dict = field(default_factory=dict)
    result: np.ndarray | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None


@dataclass(frozen=True)
class QualityVerdict:
    passed: bool
    answers: tuple  # (criterion, bool, raw) triples
    error: str | None = None


@dataclass(frozen=True)
class CoarseSelection:
    candidates: tuple[TriggerCandidate, ...]
    raw_reply: str


def parse_candidate_list(text: str) -> list[str]:
    """Split a free-text reply on commas/newlines, lowercase, strip
    punctuation, dedup preserving order."""
    seen = []
    for chunk in re.split(r"[,\n;]+", text):
        token = re.sub(r"^[\s\d.\-*)]+", "", chunk).strip().strip(".:!?\"'").lower()
        token = re.sub(r"\s+", " ", token)
        if token and token not in seen:
            seen.append(token)
    return seen


def coarse_select(class_names: Sequence[str], config: SelectionConfig, chat: ChatClient) -> CoarseSelection:
    """Ask the chat model for insertable-object candidates given the class list."""
    if not class_names:
        raise ValueError("class_names must be nonempty")
    prompt = Template(config.instruction_template).substitute(classes=", ".join(class_names))
    reply = chat.complete(ChatRequest(user=prompt, seed=config.seed))
    if reply.status != "ok":
        return CoarseSelection(candidates=(), raw_reply=reply.error or "")
    names = parse_candidate_list(reply.text)
    return CoarseSelection(
        candidates=tuple(TriggerCandidate(text=t) for t in names),
        raw_reply=reply.text,
    )


def build_evaluation_set(dataset: LabeledDataset, per_class: int, seed: int) -> list[Sample]:
    """Seeded pick of ``per_class`` samples from every class, target included."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[Sample]] = {}
    for s in dataset.samples:
        by_class.setdefault(s.label, []).append(s)
    chosen: list[Sample] = []
    for label in sorted(by_class):
        pool = by_class[label]
        if len(pool) < per_class:
            raise ValueError(f"class {label} has {len(pool)} samples, need {per_class}")
        picks = rng.choice(len(pool), size=per_class, replace=False)
        chosen.extend(pool[i] for i in picks)
    return chosen


def qualify_candidates(
    isr_by_trigger: Mapping[str, float], threshold: float
) -> list[TriggerCandidate]:
    """Apply the ISR threshold to measured insertion success rates."""
    out = []
    for text, isr in isr_by_trigger.items():
        status = "qualified" if isr >= threshold else "rejected"
        out.append(TriggerCandidate(text=text, isr=float(isr), status=status))
    return out


def fine_select(
    candidates: Sequence[TriggerCandidate],
    dataset: LabeledDataset,
    config: SelectionConfig,
    inserter: EditBackend,
    qa: VqaClient,
    criteria: QualityCriteria | None = None,
) -> list[TriggerCandidate]:
    """Measure each candidate's insertion success rate over a seeded
    evaluation set (one attempt per image) and mark qualified candidates.

    Backend failures count as QA failures for that image; the sweep never
    aborts.
    """
    if not candidates:
        raise ValueError("candidates must be nonempty")
    criteria = criteria or QualityCriteria()
    eval_set = build_evaluation_set(dataset, config.eval_images_per_class, config.seed)
    isr: dict[str, float] = {}
    for ci, cand in enumerate(candidates):
        passes = 0
        for si, sample in enumerate(eval_set):
            seed = int(np.random.SeedSequence((config.seed, ci, si)).generate_state(1)[0])
            attempt = InsertionAttempt(attempt_index=0)
            trigger = TriggerSpec(kind="semantic_text", text=cand.text)
            edited = insert_trigger(sample.image, trigger, attempt, inserter, seed=seed)
            if edited is None:
                continue
            verdict = assess_quality(edited, trigger, criteria, qa,
                                     metadata=attempt.backend_args.get("response_metadata"))
            if verdict.passed:
                passes += 1
        isr[cand.text] = passes / len(eval_set)
    return qualify_candidates(isr, config.isr_threshold)


def insert_trigger(
    image: np.ndarray,
    trigger: TriggerSpec,
    attempt: InsertionAttempt,
    backend: EditBackend,
    seed: int = 0,
) -> np.ndarray | None:
    """One generative insertion attempt; arguments and outcome are recorded
    on the attempt, failures are carried rather than raised."""
    if trigger.kind != "semantic_text":
        raise ValueError("insert_trigger requires a semantic_text trigger")
    require_image(image)
    request = EditRequest(
        image_png=encode_png(image),
        prompt=f"add {trigger.text} to the image",
        args={"trigger": trigger.text, "attempt": attempt.attempt_index},
        seed=seed,
    )
    attempt.backend_args = {"trigger": trigger.text, "seed": seed, "attempt": attempt.attempt_index}
    response = backend.edit(request)
    if response.status != "ok" or response.image_png is None:
        attempt.error = response.error or "backend failure"
        return None
    edited = decode_png(response.image_png)
    if edited.shape != image.shape:
        attempt.error = f"backend changed dimensions {image.shape} -> {edited.shape}"
        return None
    attempt.backend_args["response_metadata"] = dict(response.metadata)
    attempt.result = edited
    return edited


def assess_quality(
    image: np.ndarray,
    trigger: TriggerSpec,
    criteria: QualityCriteria,
    qa: VqaClient,
    metadata: Mapping[str, object] | None = None,
) -> QualityVerdict:
    """Ask one VQA question per criterion; pass requires every answer yes.
    Non-yes/no replies normalize to no."""
    if trigger.kind != "semantic_text":
        raise ValueError("assess_quality requires a semantic_text trigger")
    png = encode_png(image)
    answers = []
    for question in criteria.render(trigger.text):
        reply = qa.ask(VqaRequest(image_png=png, question=question, metadata=metadata))
        if reply.error is not None:
            return QualityVerdict(passed=False, answers=tuple(answers), error=reply.error)
        answers.append((question, normalize_answer(reply.answer) == "yes", reply.raw_text))
    return QualityVerdict(passed=all(ok for _, ok, _ in answers), answers=tuple(answers))


def _record_seed(config_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((config_seed, index)).generate_state(1)[0])


def _attempt_seed(record_seed: int, attempt_index: int) -> int:
    return int(np.random.SeedSequence((record_seed, attempt_index)).generate_state(1)[0])


def _poison_one(
    image: np.ndarray,
    trigger: TriggerSpec,
    criteria: QualityCriteria,
    backend: EditBackend,
    qa: VqaClient,
    max_attempts: int,
    record_seed: int,
) -> tuple[np.ndarray | None, list[AttemptVerdict]]:
    """Insert -> assess loop for a single image, re-randomizing backend
    arguments per attempt from the record's seed stream."""
    verdicts: list[AttemptVerdict] = []
    for k in range(max_attempts):
        attempt = InsertionAttempt(attempt_index=k)
        edited = insert_trigger(image, trigger, attempt, backend, seed=_attempt_seed(record_seed, k))
        if edited is None:
            verdicts.append(AttemptVerdict(
                attempt_index=k, passed=False, answers=(),
                backend_args=dict(attempt.backend_args), error=attempt.error,
            ))
            continue
        verdict = assess_quality(edited, trigger, criteria, qa,
                                 metadata=attempt.backend_args.get("response_metadata"))
        verdicts.append(AttemptVerdict(
            attempt_index=k, passed=verdict.passed, answers=verdict.answers,
            backend_args={"trigger": trigger.text, "seed": attempt.backend_args.get("seed"),
                          "attempt": k},
            error=verdict.error,
        ))
        if verdict.passed:
            return edited, verdicts
    return None, verdicts


def generate_poisoned_dataset(
    dataset: LabeledDataset,
    trigger: TriggerSpec,
    config: AttackConfig,
    criteria: QualityCriteria | None = None,
    backend: EditBackend | None = None,
    qa: VqaClient | None = None,
) -> tuple[LabeledDataset, PoisonManifest]:
    """Training-set generation: walk the seeded candidate order, retry each
    insertion up to ``max_attempts``, stop once floor(r*n) images passed QA,
    discard the rest.
    """
    criteria = criteria or QualityCriteria()
    if trigger.kind != "semantic_text":
        raise ValueError("generate_poisoned_dataset drives the semantic pipeline; "
                         "apply baseline transforms with poison_with_baseline")
    if backend is None or qa is None:
        raise ValueError("backend and qa clients are required")
    selection = select_poison_indices(dataset, config)
    target_count = math.floor(config.poisoning_ratio * len(dataset))
    poisoned: dict[str, np.ndarray] = {}
    records: list[PoisonRecord] = []
    for order, idx in enumerate(selection.indices):
        if len(poisoned) >= target_count:
            break
        sample = dataset.samples[idx]
        rseed = _record_seed(config.seed, idx)
        edited, verdicts = _poison_one(
            sample.image, trigger, criteria, backend, qa, config.max_attempts, rseed
        )
        status = "poisoned" if edited is not None else "discarded"
        if edited is not None:
            poisoned[sample.id] = edited
        records.append(PoisonRecord(
            sample_id=sample.id,
            trigger=trigger.name,
            attempts_used=len(verdicts),
            qa_verdicts=tuple(verdicts),
            final_status=status,
            seed=rseed,
        ))
    return assemble_poisoned_dataset(dataset, poisoned, config, records=records, trigger=trigger.name)


def poison_inference_image(
    image: np.ndarray,
    trigger: TriggerSpec,
    criteria: QualityCriteria,
    backend: EditBackend,
    qa: VqaClient,
    config: AttackConfig,
    seed: int | None = None,
    use_qa: bool = True,
) -> tuple[np.ndarray | None, list[AttemptVerdict]]:
    """Inference-time poisoning of a single image with the same insert ->
    assess loop; returns the first qualified edit or None after the attempt
    budget. QA can be disabled, in which case the first successful edit wins.
    """
    rseed = config.seed if seed is None else seed
    if not use_qa:
        qa = _AlwaysYesVqa()
    return _poison_one(image, trigger, criteria, backend, qa, config.max_attempts, rseed)


class _AlwaysYesVqa:
    def ask(self, request: VqaRequest):  # pragma: no cover - trivial
        from .clients import VqaResponse

        return VqaResponse(answer="yes", raw_text="qa-disabled")


def replay_poisoned_dataset(
    dataset: LabeledDataset,
    manifest: PoisonManifest,
    trigger: TriggerSpec,
    criteria: QualityCriteria,
    backend: EditBackend,
    qa: VqaClient,
    config: AttackConfig,
) -> tuple[LabeledDataset, PoisonManifest]:
    """Regenerate poisoned images from manifest record seeds. With the same
    local backends this is byte-identical to the original run."""
    poisoned: dict[str, np.ndarray] = {}
    records: list[PoisonRecord] = []
    for rec in manifest.records:
        sample = dataset.by_id(rec.sample_id)
        edited, verdicts = _poison_one(
            sample.image, trigger, criteria, backend, qa, config.max_attempts, rec.seed
        )
        status = "poisoned" if edited is not None else "discarded"
        if edited is not None:
            poisoned[sample.id] = edited
        records.append(replace(rec, attempts_used=len(verdicts), qa_verdicts=tuple(verdicts),
                               final_status=status))
    return assemble_poisoned_dataset(dataset, poisoned, config, records=records, trigger=trigger.name)
