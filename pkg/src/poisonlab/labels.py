"""Task-specific annotation transforms: detection box poisoning and face
verification pair construction."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import BoundingBox, LabeledDataset


@dataclass(frozen=True)
class DetectionPoisonMode:
    mode: str  # ODA | GMA
    target_class: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("ODA", "GMA"):
            raise ValueError(f"unknown detection poison mode: {self.mode}")
        if self.mode == "GMA" and self.target_class is None:
            raise ValueError("GMA requires a target_class")


def oda_transform(boxes: Sequence[BoundingBox]) -> list[BoundingBox]:
    """Vanish every box: [a,b,w,h,c] -> [a,b,0,0,c]."""
    return [replace(b, w=0.0, h=0.0) for b in boxes]


def gma_transform(boxes: Sequence[BoundingBox], target: int) -> list[BoundingBox]:
    """Relabel every box to the target class, geometry untouched."""
    return [replace(b, c=target) for b in boxes]


def drop_vanished(boxes: Sequence[BoundingBox]) -> list[BoundingBox]:
    """Export filter: zero-area boxes are removed rather than serialized."""
    return [b for b in boxes if b.area() > 0]


@dataclass(frozen=True)
class VerificationPair:
    image_a: str
    image_b: str
    same_identity: bool
    poisoned: bool = False

    def __post_init__(self) -> None:
        if self.image_a == self.image_b:
            raise ValueError("pair members must be distinct images")


@dataclass(frozen=True)
class PairSet:
    pairs: tuple[VerificationPair, ...]
    shortfall: bool = False  # fewer pairs than requested were constructible

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def build_verification_pairs(
    gallery: LabeledDataset, num_same: int, num_diff: int, seed: int = 0
) -> PairSet:
    """Seeded sampling of same-identity and cross-identity pairs without
    duplicate unordered pairs. Returns as many pairs as are constructible,
    flagging a shortfall instead of failing.
    """
    rng = np.random.default_rng(seed)
    by_identity: dict[int, list[str]] = {}
    for s in gallery.samples:
        by_identity.setdefault(s.label, []).append(s.id)
    identities = sorted(by_identity)

    seen: set[frozenset[str]] = set()
    pairs: list[VerificationPair] = []

    def try_add(a: str, b: str, same: bool) -> bool:
        key = frozenset((a, b))
        if a == b or key in seen:
            return False
        seen.add(key)
        pairs.append(VerificationPair(image_a=a, image_b=b, same_identity=same))
        return True

    same_done = 0
    rich = [i for i in identities if len(by_identity[i]) >= 2]
    budget = num_same * 20 + 10
    while same_done < num_same and rich and budget > 0:
        budget -= 1
        ident = rich[int(rng.integers(len(rich)))]
        ids = by_identity[ident]
        a, b = rng.choice(len(ids), size=2, replace=False)
        if try_add(ids[a], ids[b], same=True):
            same_done += 1

    diff_done = 0
    budget = num_diff * 20 + 10
    while diff_done < num_diff and len(identities) >= 2 and budget > 0:
        budget -= 1
        ia, ib = rng.choice(len(identities), size=2, replace=False)
        a = by_identity[identities[ia]][int(rng.integers(len(by_identity[identities[ia]])))]
        b = by_identity[identities[ib]][int(rng.integers(len(by_identity[identities[ib]])))]
        if try_add(a, b, same=False):
            diff_done += 1

    return PairSet(pairs=tuple(pairs), shortfall=(same_done < num_same or diff_done < num_diff))
