"""poisonlab: backdoor-attack construction and robustness evaluation.

Pipeline stages: trigger selection (chat-model candidates + insertion
success gating), generative trigger insertion with VQA quality control,
poisoned-dataset assembly with full provenance, desk-scale training, and
the metric/distortion evaluation harness. Deterministic local backends
make every stage runnable offline.
"""

from .data import (
    AttackConfig,
    BoundingBox,
    DetectionSample,
    LabeledDataset,
    PoisonManifest,
    PoisonRecord,
    Sample,
    assemble_poisoned_dataset,
    dataset_fingerprint,
    load_dataset,
    load_manifest,
    save_dataset,
    save_manifest,
    select_poison_indices,
)
from .distortions import (
    DistortionConfig,
    d2p_chain,
    default_d2p_chain,
    gaussian_blur,
    gaussian_noise,
    jpeg_roundtrip,
)
from .labels import (
    DetectionPoisonMode,
    VerificationPair,
    build_verification_pairs,
    drop_vanished,
    gma_transform,
    oda_transform,
)
from .metrics import (
    EvalReport,
    build_poisoned_testset,
    compute_nder,
    eval_classification,
    eval_detection,
    eval_verification,
    mean_average_precision,
    run_scenario_sweep,
)
from .models import ClassifierModel, TrainConfig, train_classifier
from .pipeline import (
    QualityCriteria,
    SelectionConfig,
    TriggerCandidate,
    TriggerSpec,
    assess_quality,
    coarse_select,
    fine_select,
    generate_poisoned_dataset,
    insert_trigger,
    poison_inference_image,
    qualify_candidates,
)
from .triggers import (
    BadNetsParams,
    BlendedParams,
    BppParams,
    SigParams,
    TrojanStampParams,
    WaNetParams,
    apply_badnets,
    apply_blended,
    apply_bpp,
    apply_sig,
    apply_trojan_stamp,
    apply_wanet,
)

__version__ = "0.1.0"
