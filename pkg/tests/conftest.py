import os

# single-threaded BLAS: the tensors here are far too small for threading
# to pay off, and it keeps timings stable (must be set before numpy loads)
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from mitopatch.stain import DEFAULT_TARGET_MATRIX, DEFAULT_TARGET_MAX_CONC, od_to_rgb


def make_stain_concentrations(
    rng: np.random.Generator,
    n_pixels: int,
    pure_fraction: float = 0.25,
    max_amp: float = 1.6,
) -> np.ndarray:
    """(2, n) concentrations with each stain pure in >= pure_fraction of pixels.

    The pure pixels put exact point masses at the stain angles, which is what
    percentile-based angle estimation keys on.
    """
    k = int(n_pixels * pure_fraction)
    conc = np.zeros((2, n_pixels))
    conc[0, :k] = rng.uniform(0.5, max_amp, k)
    conc[1, k : 2 * k] = rng.uniform(0.4, max_amp * 0.7, k)
    conc[:, 2 * k :] = rng.uniform(0.2, max_amp * 0.75, (2, n_pixels - 2 * k))
    return conc


def make_od_image(
    rng: np.random.Generator,
    stains: np.ndarray,
    side: int = 40,
    **kwargs,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic OD image built as stains @ concentrations; returns (od, conc)."""
    conc = make_stain_concentrations(rng, side * side, **kwargs)
    od = (stains @ conc).T.reshape(side, side, 3)
    return od, conc


def make_stain_patch(
    rng: np.random.Generator,
    stains: np.ndarray | None = None,
    side: int = 40,
    match_target_scale: bool = False,
) -> np.ndarray:
    """Synthetic uint8 patch generated from a known stain basis."""
    if stains is None:
        stains = DEFAULT_TARGET_MATRIX
    od, conc = make_od_image(rng, stains, side=side)
    if match_target_scale:
        scale = DEFAULT_TARGET_MAX_CONC / np.percentile(conc, 99, axis=1)
        od = (stains @ (conc * scale[:, None])).T.reshape(side, side, 3)
    return od_to_rgb(od)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
