import numpy as np
import pytest

from atlasseg.bundleio import AtlasBank
from atlasseg.imaging import ImageGrid, LabelMask, ScalarImage, normalize_bundle
from atlasseg.phantom import PhantomSpec, generate_bank, generate_base
from atlasseg.registration import RegistrationConfig

# alpha tuned for the phantom's intensity scale (equalized images in [0, 1]);
# the library default of 500 assumes a different data scale
PHANTOM_ALPHA = 0.05


@pytest.fixture(scope="session")
def spec64():
    return PhantomSpec(seed=21, resolution=64, bank_size=8, test_size=2, deformation_px=5.0)


@pytest.fixture(scope="session")
def bank64(spec64):
    result = generate_bank(spec64)
    normalized = tuple(normalize_bundle(s) for s in result.bank.subjects)
    return AtlasBank(normalized), result


@pytest.fixture(scope="session")
def base64(spec64):
    return normalize_bundle(generate_base(spec64).bundle)


@pytest.fixture(scope="session")
def reg_config64():
    return RegistrationConfig.for_resolution(64, alpha=PHANTOM_ALPHA)


def random_image(rng, n=8, grid=None):
    grid = grid or ImageGrid(n, n)
    return ScalarImage(grid, rng.random(grid.shape))


def random_mask(rng, n=16):
    grid = ImageGrid(n, n)
    return LabelMask(grid, rng.integers(0, 3, size=grid.shape).astype(np.uint8))
