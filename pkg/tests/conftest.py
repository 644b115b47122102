import numpy as np
import pytest

from patchbalance.volume import LabelVolume, OrganSpec, PhantomSpec, generate_phantom


@pytest.fixture
def two_organ_phantom():
    """24^3 phantom with a large and a small organ, comfortably separated."""
    spec = PhantomSpec(
        dims=(24, 24, 24),
        spacing=(1.0, 1.0, 2.0),
        organs=(
            OrganSpec(1, "ellipsoid", (8.0, 8.0, 8.0), (5.0, 5.0, 4.0)),
            OrganSpec(2, "box", (18.0, 18.0, 18.0), (1.0, 1.0, 1.0)),
        ),
    )
    volume, report = generate_phantom(spec, seed=7)
    return volume, report


def random_label_volume(rng, dims, num_classes, spacing=(1.0, 1.0, 1.0)):
    data = rng.integers(0, num_classes, size=dims).astype(np.uint8)
    names = ("background",) + tuple(f"organ_{c}" for c in range(1, num_classes))
    return LabelVolume(dims, spacing, data, names)
