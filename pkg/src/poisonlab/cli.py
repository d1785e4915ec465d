"""Command-line entry points tying the modules into reproducible runs.

Exit codes: 0 success, 2 config error, 3 empty-result warning (zero
poisoned / no qualified trigger), 4 backend failure, 5 missing upstream
artifact.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .clients import (
    HttpChatClient,
    HttpEditClient,
    HttpVqaClient,
    LocalCompositorEdit,
    LocalRuleVqa,
    SpriteLibrary,
    StaticChatClient,
)
from .config import ConfigError, OutputLock, RunConfig, RunLedger, load_config, stable_seed
from .data import (
    LabeledDataset,
    Sample,
    assemble_poisoned_dataset,
    load_dataset,
    load_manifest,
    save_dataset,
    save_manifest,
    select_poison_indices,
)
from .labels import build_verification_pairs
from .models import ClassifierModel, TrainingDiverged, train_classifier
from .pipeline import (
    TriggerSpec,
    coarse_select,
    fine_select,
    generate_poisoned_dataset,
    poison_inference_image,
    qualify_candidates,
    replay_poisoned_dataset,
)
from .synthetic import default_sprite_library, make_classification_dataset
from .triggers import apply_baseline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EMPTY = 3
EXIT_BACKEND = 4
EXIT_MISSING = 5


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _load_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    ds = cfg.dataset
    if "synthetic" in ds:
        syn = ds["synthetic"]
        train = make_classification_dataset(
            n_per_class=int(syn.get("n_per_class", 100)),
            num_classes=int(syn.get("num_classes", 10)),
            size=int(syn.get("size", 32)),
            seed=int(syn.get("seed", cfg.seed)),
            split="train",
        )
        test = make_classification_dataset(
            n_per_class=int(syn.get("test_per_class", 20)),
            num_classes=int(syn.get("num_classes", 10)),
            size=int(syn.get("size", 32)),
            seed=int(syn.get("seed", cfg.seed)) + 1,
            split="test",
        )
        return train, test
    if "train_dir" not in ds or "test_dir" not in ds:
        raise CliError(EXIT_CONFIG, "dataset block needs synthetic or train_dir/test_dir")
    return load_dataset(ds["train_dir"]), load_dataset(ds["test_dir"])


def _sprite_library(cfg: RunConfig, extra_triggers: tuple[str, ...] = ()) -> SpriteLibrary:
    spec = cfg.backends.sprites
    extra = list(extra_triggers)
    if cfg.trigger is not None and cfg.trigger.kind == "semantic_text":
        extra.append(cfg.trigger.text)
    if spec == "default":
        return default_sprite_library(extra_triggers=tuple(extra))
    return SpriteLibrary.from_dir(spec)


def _build_backends(cfg: RunConfig, extra_triggers: tuple[str, ...] = ()):
    b = cfg.backends
    if b.mode == "remote":
        missing = [k for k in ("chat_endpoint", "edit_endpoint", "vqa_endpoint")
                   if getattr(b, k) is None]
        if missing:
            raise CliError(EXIT_CONFIG, f"remote backends need endpoints, missing: {missing}")
        chat = HttpChatClient(b.chat_endpoint, api_key_env=b.api_key_env, max_retries=b.max_retries)
        edit = HttpEditClient(b.edit_endpoint, api_key_env=b.api_key_env, max_retries=b.max_retries)
        vqa = HttpVqaClient(b.vqa_endpoint, api_key_env=b.api_key_env, max_retries=b.max_retries)
        return chat, edit, vqa
    text = ""
    if b.chat_fixture:
        path = Path(b.chat_fixture)
        if not path.exists():
            raise CliError(EXIT_CONFIG, f"chat fixture not found: {path}")
        text = path.read_text().strip()
    chat = StaticChatClient(text)
    library = _sprite_library(cfg, extra_triggers)
    return chat, LocalCompositorEdit(library), LocalRuleVqa()


def _stage3_poisoner(cfg: RunConfig, trigger: TriggerSpec, edit, vqa):
    """Per-sample test-time poisoner: baseline transform or the insert ->
    assess loop, seeded per image id."""
    if trigger.kind == "baseline":
        def poison(sample: Sample):
            return apply_baseline(sample.image, trigger.baseline_name, trigger.baseline_params)
        return poison

    def poison(sample: Sample):
        img, _ = poison_inference_image(
            sample.image, trigger, cfg.criteria, edit, vqa, cfg.attack,
            seed=stable_seed(sample.id, cfg.seed), use_qa=cfg.qa_on_inference,
        )
        return img
    return poison


def _require_artifact(path: Path, producer: str) -> Path:
    if not path.exists():
        raise CliError(EXIT_MISSING, f"missing upstream artifact {path}; run `poisonlab {producer}` first")
    return path


def _trigger_or_selected(cfg: RunConfig) -> TriggerSpec:
    if cfg.trigger is not None:
        return cfg.trigger
    selected = cfg.output_dir / "trigger_selection.json"
    if selected.exists():
        data = json.loads(selected.read_text())
        qualified = [c for c in data["candidates"] if c["status"] == "qualified"]
        if qualified:
            best = max(qualified, key=lambda c: c["isr"])
            return TriggerSpec(kind="semantic_text", text=best["text"])
    raise CliError(EXIT_CONFIG, "no trigger configured and no qualified selection found; "
                                "set trigger in config or run `poisonlab select-trigger`")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_select_trigger(cfg: RunConfig) -> int:
    if not cfg.selection_classes:
        raise CliError(EXIT_CONFIG, "selection.classes must list the dataset class names")
    if cfg.selection is None:
        raise CliError(EXIT_CONFIG, "selection block is required for select-trigger")
    chat, edit, vqa = _build_backends(cfg)
    coarse = coarse_select(cfg.selection_classes, cfg.selection, chat)
    if not coarse.candidates:
        raise CliError(EXIT_BACKEND, f"coarse selection produced no candidates; raw reply: {coarse.raw_reply!r}")

    if cfg.backends.isr_fixture:
        table = json.loads(Path(cfg.backends.isr_fixture).read_text())
        isr = {c.text: float(table.get(c.text, 0.0)) for c in coarse.candidates}
        candidates = qualify_candidates(isr, cfg.selection.isr_threshold)
    else:
        # the fine sweep inserts every candidate, so the library must cover all
        _, edit, vqa = _build_backends(cfg, extra_triggers=tuple(c.text for c in coarse.candidates))
        train, _ = _load_datasets(cfg)
        candidates = fine_select(coarse.candidates, train, cfg.selection, edit, vqa, cfg.criteria)

    payload = {
        "threshold": cfg.selection.isr_threshold,
        "candidates": [{"text": c.text, "isr": c.isr, "status": c.status} for c in candidates],
        "qualified": [c.text for c in candidates if c.status == "qualified"],
        "coarse_raw_reply": coarse.raw_reply,
    }
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "trigger_selection.json"
    out.write_text(json.dumps(payload, indent=1, sort_keys=True))
    print(json.dumps(payload, indent=1, sort_keys=True))
    RunLedger(cfg.output_dir / "ledger.json").append(
        "select-trigger", "ok", {"selection": str(out)}, config_digest=cfg.hash)
    if not payload["qualified"]:
        print("no qualified trigger at threshold", cfg.selection.isr_threshold, file=sys.stderr)
        return EXIT_EMPTY
    return EXIT_OK


def _poison_baseline(train: LabeledDataset, trigger: TriggerSpec, cfg: RunConfig):
    selection = select_poison_indices(train, cfg.attack)
    want = math.floor(cfg.attack.poisoning_ratio * len(train))
    chosen = list(selection.indices)[:want]
    poisoned = {
        train.samples[i].id: apply_baseline(train.samples[i].image,
                                            trigger.baseline_name, trigger.baseline_params)
        for i in chosen
    }
    return assemble_poisoned_dataset(train, poisoned, cfg.attack, trigger=trigger.name)


def cmd_poison(cfg: RunConfig, replay: str | None = None) -> int:
    trigger = _trigger_or_selected(cfg)
    train, _ = _load_datasets(cfg)
    _, edit, vqa = _build_backends(cfg) if trigger.kind == "semantic_text" else (None, None, None)

    if replay:
        manifest_in = load_manifest(_require_artifact(Path(replay), "poison"))
        poisoned_ds, manifest = replay_poisoned_dataset(
            train, manifest_in, trigger, cfg.criteria, edit, vqa, cfg.attack)
    elif trigger.kind == "baseline":
        poisoned_ds, manifest = _poison_baseline(train, trigger, cfg)
    else:
        poisoned_ds, manifest = generate_poisoned_dataset(
            train, trigger, cfg.attack, cfg.criteria, edit, vqa)

    out_dir = cfg.output_dir / "poisoned"
    save_dataset(poisoned_ds, out_dir)
    manifest_path = cfg.output_dir / "manifest.jsonl"
    save_manifest(manifest, manifest_path)
    RunLedger(cfg.output_dir / "ledger.json").append(
        "poison", "ok",
        {"poisoned_dataset": str(out_dir), "manifest": str(manifest_path)},
        config_digest=cfg.hash,
        extra={"actual_ratio": manifest.actual_ratio, "trigger": trigger.name},
    )
    print(f"actual_ratio={manifest.actual_ratio:.6f} poisoned={len(manifest.poisoned_ids)} "
          f"records={len(manifest.records)}")
    if not manifest.poisoned_ids and cfg.attack.poisoning_ratio > 0:
        all_backend_errors = manifest.records and all(
            v.error is not None for r in manifest.records for v in r.qa_verdicts)
        return EXIT_BACKEND if all_backend_errors else EXIT_EMPTY
    return EXIT_OK


def cmd_train(cfg: RunConfig, clean: bool = False) -> int:
    if clean:
        train_ds, _ = _load_datasets(cfg)
        model_path = cfg.output_dir / "model_clean.pt"
    else:
        poisoned_dir = _require_artifact(cfg.output_dir / "poisoned", "poison")
        train_ds = load_dataset(poisoned_dir)
        model_path = cfg.output_dir / "model.pt"
    try:
        model = train_classifier(train_ds, cfg.train)
    except TrainingDiverged as exc:
        raise CliError(EXIT_BACKEND, f"training diverged: {exc}") from exc
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    model.save(model_path)
    RunLedger(cfg.output_dir / "ledger.json").append(
        "train", "ok", {"model": str(model_path)}, config_digest=cfg.hash,
        extra={"train_accuracy": model.train_accuracy, "clean": clean},
    )
    print(f"model={model_path} train_accuracy={model.train_accuracy:.4f}")
    return EXIT_OK


def _load_model(cfg: RunConfig, clean: bool = False) -> ClassifierModel:
    name = "model_clean.pt" if clean else "model.pt"
    return ClassifierModel.load(_require_artifact(cfg.output_dir / name, "train"))


def _eval_classification(cfg: RunConfig, clean_model: bool) -> metrics.EvalReport:
    trigger = _trigger_or_selected(cfg)
    model = _load_model(cfg, clean=clean_model)
    _, test = _load_datasets(cfg)
    _, edit, vqa = _build_backends(cfg) if trigger.kind == "semantic_text" else (None, None, None)
    poison = _stage3_poisoner(cfg, trigger, edit, vqa)
    poisoned = metrics.build_poisoned_testset(test, poison, cfg.attack.target_label)
    return metrics.eval_classification(model, test, poisoned, cfg.attack.target_label)


def _load_boxes(path: Path) -> dict:
    from .data import BoundingBox

    raw = json.loads(path.read_text())
    out = {}
    for img_id, boxes in raw.items():
        out[img_id] = [BoundingBox(a=float(b["a"]), b=float(b["b"]), w=float(b["w"]),
                                   h=float(b["h"]), c=int(b["c"]),
                                   confidence=b.get("confidence"))
                       for b in boxes]
    return out


def _eval_detection(cfg: RunConfig) -> metrics.EvalReport:
    det = cfg.detection
    needed = {"mode", "clean_predictions", "clean_truth", "poisoned_predictions", "poisoned_truth"}
    missing = needed - set(det)
    if missing:
        raise CliError(EXIT_CONFIG, f"detection block missing keys: {sorted(missing)}")
    return metrics.eval_detection(
        _load_boxes(Path(det["clean_predictions"])),
        _load_boxes(Path(det["clean_truth"])),
        _load_boxes(Path(det["poisoned_predictions"])),
        _load_boxes(Path(det["poisoned_truth"])),
        mode=det["mode"],
        target=det.get("target", cfg.attack.target_label),
        iou_threshold=float(det.get("iou_threshold", 0.5)),
        conf_threshold=float(det.get("conf_threshold", 0.5)),
    )


def _eval_verification(cfg: RunConfig) -> metrics.EvalReport:
    trigger = _trigger_or_selected(cfg)
    model = _load_model(cfg)
    _, gallery = _load_datasets(cfg)
    ver = cfg.verification
    pairs = build_verification_pairs(gallery, num_same=int(ver.get("num_same", 50)),
                                     num_diff=int(ver.get("num_diff", 50)), seed=cfg.seed)
    images = {s.id: s.image for s in gallery.samples}
    threshold = ver.get("decision_threshold")
    if threshold is None:
        threshold = metrics.choose_verification_threshold(pairs, images, model.embed)
    _, edit, vqa = _build_backends(cfg) if trigger.kind == "semantic_text" else (None, None, None)
    poison = _stage3_poisoner(cfg, trigger, edit, vqa)

    target = cfg.attack.target_label
    refs = [s for s in gallery.samples if s.label == target]
    if not refs:
        raise CliError(EXIT_CONFIG, f"no gallery images for target identity {target}")
    from .labels import VerificationPair

    poisoned_pairs = []
    rng = np.random.default_rng(cfg.seed)
    for s in gallery.samples:
        if s.label == target:
            continue
        img = poison(s)
        if img is None:
            continue
        pid = f"poisoned::{s.id}"
        images[pid] = img
        ref = refs[int(rng.integers(len(refs)))]
        poisoned_pairs.append(VerificationPair(image_a=pid, image_b=ref.id,
                                               same_identity=False, poisoned=True))
    all_pairs = list(pairs) + poisoned_pairs
    return metrics.eval_verification(all_pairs, images, model.embed, float(threshold))


def cmd_eval(cfg: RunConfig, clean_model: bool = False) -> int:
    if cfg.task == "classification":
        report = _eval_classification(cfg, clean_model)
    elif cfg.task == "detection":
        report = _eval_detection(cfg)
    else:
        report = _eval_verification(cfg)
    reports_dir = cfg.output_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    name = "digital_clean_model.json" if clean_model else "digital.json"
    out = reports_dir / name
    out.write_text(report.to_json())
    RunLedger(cfg.output_dir / "ledger.json").append(
        "eval", "ok", {"report": str(out)}, config_digest=cfg.hash)
    print(report.to_json())
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    if cfg.task != "classification":
        raise CliError(EXIT_CONFIG, "sweep currently drives the classification task")
    trigger = _trigger_or_selected(cfg)
    model = _load_model(cfg)
    _, test = _load_datasets(cfg)
    _, edit, vqa = _build_backends(cfg) if trigger.kind == "semantic_text" else (None, None, None)
    poison = _stage3_poisoner(cfg, trigger, edit, vqa)
    reports = metrics.run_scenario_sweep(model, test, poison, cfg.distortions,
                                         cfg.attack.target_label)
    sweep_dir = cfg.output_dir / "sweeps"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    csv_path = sweep_dir / "sweep.csv"
    metrics.sweep_to_csv(reports, csv_path)
    json_path = sweep_dir / "sweep.json"
    json_path.write_text(json.dumps([json.loads(r.to_json()) for r in reports], indent=1))
    RunLedger(cfg.output_dir / "ledger.json").append(
        "sweep", "ok", {"csv": str(csv_path), "json": str(json_path)}, config_digest=cfg.hash)
    for r in reports:
        print(r.to_json())
    return EXIT_OK


def cmd_report(run_dirs: list[str], output: str | None) -> int:
    rows = []
    for run in run_dirs:
        run_path = Path(run)
        ledger = RunLedger(run_path / "ledger.json")
        if not ledger.path.exists():
            raise CliError(EXIT_MISSING, f"no ledger in {run_path}; run commands there first")
        trigger = "?"
        for entry in ledger.entries():
            if entry["stage"] == "poison":
                trigger = entry.get("trigger", trigger)
        for report_file in sorted((run_path / "reports").glob("*.json")) if (run_path / "reports").exists() else []:
            data = json.loads(report_file.read_text())
            rows.append({"run": run_path.name, "attack": trigger, **data})
    rows.sort(key=lambda r: (r["attack"], r["run"], r["scenario"]))
    header = f"{'attack':<16} {'run':<18} {'scenario':<18} {'c_acc':>7} {'asr':>7} {'r_acc':>7}"
    print(header)
    print("-" * len(header))
    for r in rows:
        def fmt(v):
            return f"{v:.4f}" if isinstance(v, float) else "  n/a"
        print(f"{r['attack']:<16} {r['run']:<18} {r['scenario']:<18} "
              f"{fmt(r.get('c_acc'))} {fmt(r.get('asr'))} {fmt(r.get('r_acc'))}")
    if output:
        Path(output).write_text(json.dumps(rows, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_plot(csv_path: str, output: str | None) -> int:
    path = _require_artifact(Path(csv_path), "sweep")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise CliError(EXIT_CONFIG, "plot requires matplotlib (install extra: poisonlab[plot])") from exc
    import csv as csv_mod

    rows = list(csv_mod.DictReader(path.open()))
    fig, ax = plt.subplots(figsize=(7, 4))
    kinds = sorted({r["scenario"] for r in rows if r["scenario"] != "digital"})
    digital = next((r for r in rows if r["scenario"] == "digital"), None)
    for kind in kinds:
        pts = [(r["param"], float(r["asr"])) for r in rows if r["scenario"] == kind and r["asr"]]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=kind)
    if digital and digital["asr"]:
        ax.axhline(float(digital["asr"]), linestyle="--", color="gray", label="digital")
    ax.set_xlabel("distortion parameter")
    ax.set_ylabel("attack success rate")
    ax.set_ylim(0, 1.05)
    ax.legend()
    out = Path(output) if output else path.with_suffix(".png")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonlab",
                                     description="Backdoor attack construction and evaluation runs")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--pratio", type=float, default=None, help="override poisoning ratio")
        p.add_argument("--trigger", default=None, help="override semantic trigger text")
        p.add_argument("--backend", default=None, help="override backends.mode")

    add_config_args(sub.add_parser("select-trigger", help="coarse + fine trigger selection"))
    p = sub.add_parser("poison", help="generate the poisoned training dataset")
    add_config_args(p)
    p.add_argument("--replay", default=None, help="replay a manifest instead of fresh generation")
    p = sub.add_parser("train", help="train the classifier on the poisoned dataset")
    add_config_args(p)
    p.add_argument("--clean", action="store_true", help="train the clean control model instead")
    p = sub.add_parser("eval", help="evaluate the trained model (digital scenario)")
    add_config_args(p)
    p.add_argument("--clean-model", action="store_true", help="evaluate the clean control model")
    add_config_args(sub.add_parser("sweep", help="distortion scenario sweep"))
    p = sub.add_parser("report", help="merge reports from multiple runs")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--output", default=None, help="also write merged JSON here")
    p = sub.add_parser("plot", help="plot a sweep CSV")
    p.add_argument("csv", help="sweep.csv produced by the sweep command")
    p.add_argument("--output", default=None, help="output PNG path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.runs, args.output)
        if args.command == "plot":
            return cmd_plot(args.csv, args.output)
        overrides = {"seed": args.seed, "pratio": args.pratio,
                     "trigger": args.trigger, "backend": args.backend}
        cfg = load_config(args.config, overrides)
        with OutputLock(cfg.output_dir):
            if args.command == "select-trigger":
                return cmd_select_trigger(cfg)
            if args.command == "poison":
                return cmd_poison(cfg, replay=args.replay)
            if args.command == "train":
                return cmd_train(cfg, clean=args.clean)
            if args.command == "eval":
                return cmd_eval(cfg, clean_model=args.clean_model)
            if args.command == "sweep":
                return cmd_sweep(cfg)
        raise CliError(EXIT_CONFIG, f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
