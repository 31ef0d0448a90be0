import numpy as np
import pytest

from samselect import Patch, WavelengthTable


@pytest.fixture
def s2a() -> WavelengthTable:
    return WavelengthTable.sentinel2a()


@pytest.fixture
def s2_band_order() -> list[str]:
    # The 12 usable Sentinel-2 L2A bands (B10 excluded).
    return ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12"]


def make_patch(
    bands: np.ndarray,
    band_ids,
    mask: np.ndarray | None = None,
    patch_id: str = "patch000",
) -> Patch:
    size = bands.shape[1]
    if mask is None:
        mask = np.zeros((size, size), dtype=bool)
        mask[size // 4 : size // 2, size // 4 : size // 2] = True
    return Patch(
        id=patch_id,
        window=(0, 0, size),
        bands=np.asarray(bands, dtype=np.float32),
        band_ids=tuple(band_ids),
        mask=mask,
    )


@pytest.fixture
def bright_square_patch():
    """3-band 32x32 patch: dark water with one bright 8x8 square, mask on the square."""
    size = 32
    bands = np.full((3, size, size), 0.05, dtype=np.float32)
    mask = np.zeros((size, size), dtype=bool)
    mask[10:18, 12:20] = True
    for b in range(3):
        bands[b][mask] = 0.8
    return make_patch(bands, ("B2", "B3", "B4"), mask)
