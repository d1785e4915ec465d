"""Declarative run configuration, config hashing and the append-only run
ledger.

A run is one JSON file; every stochastic site has an explicit seed. API
keys and endpoints for remote backends come from environment variables and
are never written to artifacts.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import AttackConfig
from .distortions import DistortionConfig
from .models import TrainConfig
from .pipeline import DEFAULT_CRITERIA, QualityCriteria, SelectionConfig, TriggerSpec
from .triggers import (
    BadNetsParams,
    BlendedParams,
    BppParams,
    SigParams,
    TrojanStampParams,
    WaNetParams,
)


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


_TOP_KEYS = {
    "task", "seed", "output_dir", "dataset", "attack", "trigger", "selection",
    "criteria", "backends", "train", "distortions", "qa_on_inference", "detection",
    "verification",
}


def stable_seed(text: str, base: int = 0) -> int:
    """Deterministic 32-bit seed from a string and a base seed."""
    digest = hashlib.sha256(f"{base}:{text}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def config_hash(raw: dict) -> str:
    """Hash of the canonicalized config: whitespace and key order agnostic."""
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _baseline_params(name: str, params: dict, image_size: int | None):
    if name == "badnets":
        p = BadNetsParams(**params)
        return p.scaled(image_size) if image_size else p
    if name == "blended":
        from .images import decode_png

        key_path = params.get("key_image")
        _require(key_path is not None, "blended trigger needs key_image path")
        key = decode_png(Path(key_path).read_bytes())
        return BlendedParams(key_image=key, alpha=float(params.get("alpha", 0.1)))
    if name == "sig":
        return SigParams(delta=float(params.get("delta", 40.0)), freq=int(params.get("freq", 6)))
    if name == "wanet":
        return WaNetParams(grid_k=int(params.get("grid_k", 4)),
                           strength=float(params.get("strength", 0.5)),
                           seed=int(params.get("seed", 0)))
    if name == "bpp":
        return BppParams(bit_depth=int(params.get("bit_depth", 3)),
                         dithering=bool(params.get("dithering", False)))
    if name == "trojan":
        from .images import decode_png

        _require("trigger_image" in params and "mask" in params,
                 "trojan trigger needs trigger_image and mask paths")
        trigger = decode_png(Path(params["trigger_image"]).read_bytes())
        mask = decode_png(Path(params["mask"]).read_bytes()).astype("float64")[:, :, 0] / 255.0
        return TrojanStampParams(trigger_image=trigger, mask=mask)
    raise ConfigError(f"unknown baseline trigger name: {name}")


@dataclass
class BackendsConfig:
    mode: str = "local"  # local | remote | fixture
    sprites: str = "default"
    chat_fixture: str | None = None
    isr_fixture: str | None = None
    chat_endpoint: str | None = None
    edit_endpoint: str | None = None
    vqa_endpoint: str | None = None
    api_key_env: str = "POISONLAB_API_KEY"
    max_retries: int = 2


@dataclass
class RunConfig:
    task: str
    seed: int
    output_dir: Path
    raw: dict
    dataset: dict
    attack: AttackConfig
    trigger: TriggerSpec | None
    selection: SelectionConfig | None
    criteria: QualityCriteria
    backends: BackendsConfig
    train: TrainConfig
    distortions: tuple[DistortionConfig, ...]
    qa_on_inference: bool = True
    selection_classes: tuple[str, ...] = ()
    detection: dict = field(default_factory=dict)
    verification: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def load_config(path: Path | str, overrides: dict[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    _require(path.exists(), f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "pratio":
            raw.setdefault("attack", {})["poisoning_ratio"] = value
        elif key == "trigger":
            raw["trigger"] = {"kind": "semantic_text", "text": value}
        elif key == "backend":
            raw.setdefault("backends", {})["mode"] = value
        else:
            raw[key] = value
    return parse_config(raw, base_dir=path.parent)


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    unknown = set(raw) - _TOP_KEYS
    _require(not unknown, f"unknown config keys: {sorted(unknown)}")
    task = raw.get("task", "classification")
    _require(task in ("classification", "detection", "verification"), f"unknown task: {task}")
    seed = int(raw.get("seed", 0))
    _require("output_dir" in raw, "output_dir is required")
    # output_dir resolves against the working directory; dataset paths below
    # resolve against the config file so data can travel with it
    output_dir = Path(raw["output_dir"])

    dataset = raw.get("dataset", {})
    _require(isinstance(dataset, dict) and dataset, "dataset block is required")
    if "synthetic" not in dataset:
        for key in ("train_dir", "test_dir"):
            if key in dataset:
                p = Path(dataset[key])
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                _require(p.exists(), f"dataset path does not exist: {p}")
                dataset[key] = str(p)

    atk = raw.get("attack", {})
    attack = AttackConfig(
        target_label=int(atk.get("target_label", 0)),
        poisoning_ratio=float(atk.get("poisoning_ratio", 0.05)),
        oversample_factor=float(atk.get("oversample_factor", 1.5)),
        max_attempts=int(atk.get("max_attempts", 3)),
        seed=int(atk.get("seed", seed)),
        excluded_classes=tuple(atk.get("excluded_classes", ())),
    )

    trigger = None
    if "trigger" in raw:
        tr = raw["trigger"]
        kind = tr.get("kind")
        if kind == "semantic_text":
            trigger = TriggerSpec(kind="semantic_text", text=tr["text"],
                                  backend_id=tr.get("backend_id", ""))
        elif kind == "baseline":
            name = tr.get("name")
            size = dataset.get("synthetic", {}).get("size")
            params = _baseline_params(name, tr.get("params", {}), image_size=size)
            trigger = TriggerSpec(kind="baseline", baseline_name=name, baseline_params=params)
        else:
            raise ConfigError(f"trigger.kind must be semantic_text or baseline, got {kind}")

    selection = None
    selection_classes: tuple[str, ...] = ()
    if "selection" in raw:
        sel = raw["selection"]
        selection = SelectionConfig(
            isr_threshold=float(sel.get("isr_threshold", 0.5)),
            eval_images_per_class=int(sel.get("eval_images_per_class", 15)),
            instruction_template=sel.get("instruction_template") or SelectionConfig().instruction_template,
            seed=int(sel.get("seed", seed)),
        )
        selection_classes = tuple(sel.get("classes", ()))

    criteria = QualityCriteria(templates=tuple(raw.get("criteria", DEFAULT_CRITERIA)))

    backends = BackendsConfig(**raw.get("backends", {}))
    _require(backends.mode in ("local", "remote", "fixture"),
             f"backends.mode must be local, remote or fixture, got {backends.mode}")

    tr_cfg = raw.get("train", {})
    train = TrainConfig(
        epochs=int(tr_cfg.get("epochs", 10)),
        batch_size=int(tr_cfg.get("batch_size", 128)),
        learning_rate=float(tr_cfg.get("learning_rate", 0.05)),
        schedule=tr_cfg.get("schedule", "cosine"),
        momentum=float(tr_cfg.get("momentum", 0.9)),
        weight_decay=float(tr_cfg.get("weight_decay", 1e-4)),
        augment=bool(tr_cfg.get("augment", True)),
        seed=int(tr_cfg.get("seed", seed)),
    )

    distortions = []
    for i, d in enumerate(raw.get("distortions", [])):
        try:
            distortions.append(DistortionConfig(**d))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"distortions[{i}]: {exc}") from exc

    return RunConfig(
        task=task, seed=seed, output_dir=output_dir, raw=raw, dataset=dataset,
        attack=attack, trigger=trigger, selection=selection, criteria=criteria,
        backends=backends, train=train, distortions=tuple(distortions),
        qa_on_inference=bool(raw.get("qa_on_inference", True)),
        selection_classes=selection_classes,
        detection=raw.get("detection", {}), verification=raw.get("verification", {}),
    )


# ---------------------------------------------------------------------------
# run ledger and output-directory lock
# ---------------------------------------------------------------------------


@dataclass
class RunLedger:
    path: Path

    def append(self, stage: str, status: str, artifacts: dict[str, str] | None = None,
               config_digest: str | None = None, extra: dict | None = None) -> None:
        entry = {
            "stage": stage,
            "status": status,
            "timestamp": time.time(),
            "artifacts": artifacts or {},
        }
        if config_digest:
            entry["config_hash"] = config_digest
        if extra:
            entry.update(extra)
        entries = self.entries()
        entries.append(entry)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(entries, indent=1))

    def entries(self) -> list[dict]:
        if self.path.exists():
            return json.loads(self.path.read_text())
        return []

    def artifact(self, stage: str, name: str) -> Path | None:
        for entry in reversed(self.entries()):
            if entry["stage"] == stage and name in entry.get("artifacts", {}):
                return Path(entry["artifacts"][name])
        return None


class OutputLock:
    """One run owns its output directory; guards against concurrent runs."""

    def __init__(self, output_dir: Path) -> None:
        self.lock_path = Path(output_dir) / ".lock"

    def __enter__(self) -> "OutputLock":
        self.lock_path.parent.mkdir(parents=True, exist_ok=True)
        if self.lock_path.exists():
            raise ConfigError(f"output directory is locked by another run: {self.lock_path}")
        self.lock_path.write_text(str(time.time()))
        return self

    def __exit__(self, *exc) -> None:
        self.lock_path.unlink(missing_ok=True)
