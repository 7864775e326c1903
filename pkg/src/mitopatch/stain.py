"""Stain estimation, normalization, and stain-space perturbation for H&E patches.

Conventions used throughout the package:

* a patch is a ``uint8`` RGB array of shape ``(h, w, 3)``;
* an optical-density (OD) image is a ``float64`` array of the same shape;
* a stain matrix is a ``(3, 2)`` ``float64`` array whose unit-norm columns are
  the OD absorption directions, hematoxylin first;
* a concentration map is a ``(2, n_pixels)`` non-negative ``float64`` array.

The estimation procedure: convert to OD, drop background pixels whose OD is
at or below ``beta`` in any channel, fit the principal plane of the remaining
OD cloud, take robust extreme angles of the projected pixels, and map those
angles back to stain vectors. Concentrations are recovered per pixel by
least squares against the stain matrix, and normalization rescales them so a
high percentile matches a reference before reconstructing in a reference
stain basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStains, InsufficientTissue, StainEstimationError


def _unit_columns(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=0, keepdims=True)


# Published H&E reference basis and 99th-percentile concentration scale,
# columns renormalized to exact unit length.
DEFAULT_TARGET_MATRIX = _unit_columns(
    np.array(
        [
            [0.5626, 0.2159],
            [0.7201, 0.8012],
            [0.4062, 0.5581],
        ]
    )
)
DEFAULT_TARGET_MAX_CONC = np.array([1.9705, 1.0308])

MIN_TISSUE_PIXELS = 20
MIN_STAIN_ANGLE_DEG = 1.0


def stain_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in degrees between two stain vectors."""
    cosang = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))


def validate_stain_matrix(m: np.ndarray) -> None:
    m = np.asarray(m)
    if m.shape != (3, 2):
        raise ValueError(f"stain matrix must be (3, 2), got {m.shape}")
    norms = np.linalg.norm(m, axis=0)
    if not np.allclose(norms, 1.0, atol=1e-9):
        raise ValueError(f"stain matrix columns must have unit norm, got {norms}")
    if np.any(m < -1e-12):
        raise ValueError("stain matrix entries must be non-negative")
    if stain_angle_deg(m[:, 0], m[:, 1]) < MIN_STAIN_ANGLE_DEG:
        raise ValueError("stain matrix columns are near-collinear")


@dataclass
class StainParams:
    """Constants of the estimation/normalization procedure.

    ``i0`` is the reference white intensity, ``beta`` the OD background
    threshold, ``alpha_percentile`` the robust-angle percentile, and
    ``conc_percentile`` the percentile used to rescale concentrations onto
    ``target_max_conc``.
    """

    i0: float = 255.0
    beta: float = 0.15
    alpha_percentile: float = 1.0
    conc_percentile: float = 99.0
    target_matrix: np.ndarray = field(
        default_factory=lambda: DEFAULT_TARGET_MATRIX.copy()
    )
    target_max_conc: np.ndarray = field(
        default_factory=lambda: DEFAULT_TARGET_MAX_CONC.copy()
    )

    def __post_init__(self):
        self.target_matrix = np.asarray(self.target_matrix, dtype=np.float64)
        self.target_max_conc = np.asarray(self.target_max_conc, dtype=np.float64)
        if self.i0 <= 0:
            raise ValueError("i0 must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 < self.alpha_percentile < 50:
            raise ValueError("alpha_percentile must lie in (0, 50)")
        if not 0 < self.conc_percentile <= 100:
            raise ValueError("conc_percentile must lie in (0, 100]")
        validate_stain_matrix(self.target_matrix)
        if self.target_max_conc.shape != (2,) or np.any(self.target_max_conc <= 0):
            raise ValueError("target_max_conc must be two positive reals")


def rgb_to_od(patch: np.ndarray, i0: float = 255.0) -> np.ndarray:
    """Beer-Lambert conversion; intensity 0 is clamped to 1 before the log."""
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    intensity = np.maximum(np.asarray(patch, dtype=np.float64), 1.0)
    return -np.log(intensity / i0)


def od_to_rgb(od: np.ndarray, i0: float = 255.0) -> np.ndarray:
    """Inverse Beer-Lambert transform, rounded and clamped to [0, 255]."""
    vals = np.rint(i0 * np.exp(-np.asarray(od, dtype=np.float64)))
    return np.clip(vals, 0.0, 255.0).astype(np.uint8)


def estimate_stain_matrix(od: np.ndarray, params: StainParams | None = None) -> np.ndarray:
    """Estimate the (3, 2) H&E stain basis from an OD image.

    Keeps pixels with all three OD channels above ``beta``, fits their
    principal plane via the eigen-decomposition of the 3x3 covariance,
    takes the ``alpha_percentile`` extreme polar angles of the projected
    cloud, and maps them back to unit, non-negative stain vectors. The
    column with the larger red-channel component is ordered first
    (hematoxylin absorbs red most strongly).

    Raises InsufficientTissue if fewer than 20 pixels survive the filter,
    DegenerateStains if the recovered directions subtend less than 1 degree.
    """
    if params is None:
        params = StainParams()
    flat = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    tissue = flat[np.all(flat > params.beta, axis=1)]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise InsufficientTissue(
            f"only {tissue.shape[0]} pixels above beta={params.beta}"
        )

    cov = np.cov(tissue, rowvar=False)
    _, eigvecs = np.linalg.eigh(cov)
    plane = eigvecs[:, [2, 1]].copy()
    # fix eigenvector signs so the projected angles are reproducible
    for k in range(2):
        if plane[:, k].sum() < 0:
            plane[:, k] = -plane[:, k]

    proj = tissue @ plane
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(angles, params.alpha_percentile)
    hi = np.percentile(angles, 100.0 - params.alpha_percentile)

    cols = []
    for phi in (lo, hi):
        v = plane @ np.array([np.cos(phi), np.sin(phi)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise DegenerateStains("recovered stain vector has no positive part")
        cols.append(v / norm)

    if stain_angle_deg(cols[0], cols[1]) < MIN_STAIN_ANGLE_DEG:
        raise DegenerateStains("stain directions subtend less than 1 degree")

    if cols[0][0] >= cols[1][0]:
        stains = np.stack([cols[0], cols[1]], axis=1)
    else:
        stains = np.stack([cols[1], cols[0]], axis=1)
    return stains


def compute_concentrations(od: np.ndarray, stains: np.ndarray) -> np.ndarray:
    """Per-pixel least-squares unmixing of OD onto the stain basis.

    Solves the 2x2 normal equations of ``stains @ c = od`` and clamps
    negative concentrations to zero.
    """
    stains = np.asarray(stains, dtype=np.float64)
    if stains.shape != (3, 2):
        raise ValueError(f"stain matrix must be (3, 2), got {stains.shape}")
    gram = stains.T @ stains
    if abs(float(np.linalg.det(gram))) < 1e-12:
        raise DegenerateStains("stain matrix is singular to working precision")
    flat = np.asarray(od, dtype=np.float64).reshape(-1, 3).T
    conc = np.linalg.solve(gram, stains.T @ flat)
    return np.maximum(conc, 0.0)


def normalize_patch(patch: np.ndarray, params: StainParams | None = None) -> np.ndarray:
    """Map a patch onto the reference stain basis.

    Estimates the source basis and concentrations, rescales each stain's
    concentrations so their ``conc_percentile`` matches ``target_max_conc``,
    and reconstructs with ``target_matrix``. Raises InsufficientTissue /
    DegenerateStains when estimation fails; pipeline callers are expected
    to pass the patch through unchanged in that case
    (see normalize_or_passthrough).
    """
    if params is None:
        params = StainParams()
    od = rgb_to_od(patch, params.i0)
    source = estimate_stain_matrix(od, params)
    conc = compute_concentrations(od, source)
    max_conc = np.percentile(conc, params.conc_percentile, axis=1)
    scale = params.target_max_conc / np.maximum(max_conc, 1e-8)
    od_norm = (params.target_matrix @ (conc * scale[:, None])).T.reshape(patch.shape)
    return od_to_rgb(od_norm, params.i0)


def normalize_or_passthrough(
    patch: np.ndarray, params: StainParams | None = None
) -> tuple[np.ndarray, bool]:
    """normalize_patch with the pipeline error policy.

    Returns ``(normalized, True)`` on success and ``(patch, False)`` when
    estimation fails (blank tiles must not abort training).
    """
    try:
        return normalize_patch(patch, params), True
    except StainEstimationError:
        return patch, False


def perturb_stains(
    patch: np.ndarray,
    sigma_scale: float,
    sigma_shift: float,
    rng: np.random.Generator,
    params: StainParams | None = None,
) -> np.ndarray:
    """Randomly rescale and shift per-stain concentrations.

    Per stain, draws a scale from U(1-sigma_scale, 1+sigma_scale) and a
    shift from U(-sigma_shift, +sigma_shift), applies ``max(0, a*c + b)``,
    and reconstructs with the source stain basis. Deterministic given the
    generator state. When stain estimation fails the patch is returned
    unchanged (pass-through policy).
    """
    if not 0 <= sigma_scale < 1:
        raise ValueError("sigma_scale must lie in [0, 1)")
    if sigma_shift < 0:
        raise ValueError("sigma_shift must be non-negative")
    if params is None:
        params = StainParams()
    od = rgb_to_od(patch, params.i0)
    try:
        source = estimate_stain_matrix(od, params)
        conc = compute_concentrations(od, source)
    except StainEstimationError:
        return patch
    scales = rng.uniform(1.0 - sigma_scale, 1.0 + sigma_scale, size=2)
    shifts = rng.uniform(-sigma_shift, sigma_shift, size=2)
    perturbed = np.maximum(scales[:, None] * conc + shifts[:, None], 0.0)
    od_new = (source @ perturbed).T.reshape(patch.shape)
    return od_to_rgb(od_new, params.i0)
