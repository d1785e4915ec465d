import numpy as np
import pytest

from poisonlab.data import LabeledDataset, Sample


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=32, w=32, c=3):
    return rng.integers(0, 256, size=(h, w, c), dtype=np.uint8)


def tiny_dataset(n=100, num_classes=10, size=16, seed=0, split="train"):
    """Uniform-random images, labels round-robin; cheap fixture for
    bookkeeping tests where image content is irrelevant."""
    rng = np.random.default_rng(seed)
    samples = tuple(
        Sample(image=random_image(rng, size, size), label=i % num_classes, id=f"{split}-{i:04d}")
        for i in range(n)
    )
    return LabeledDataset(samples=samples, num_classes=num_classes, split=split)


@pytest.fixture
def dataset100():
    return tiny_dataset(100)
