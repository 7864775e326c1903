"""Manifest-driven ingestion and a synthetic stained-patch generator.

The manifest is a UTF-8 CSV with the exact header ``path,label,domain``;
paths are relative to the manifest's directory, labels are 0 (normal) or
1 (atypical), domains are non-negative integers.

The generator builds patches in stain space so the normalization pipeline
has a real domain shift to remove: each domain gets its own slightly
rotated stain basis, a brightness factor, and a background concentration
level, while figure geometry is drawn from domain-independent streams.
Every patch carries an elliptical figure; positives differ from negatives
by figure eccentricity and hematoxylin concentration, both offsets scaled
by ``separation``. A sidecar ``meta.json`` records the per-domain bases and
per-sample ground truth for oracle-style checks.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    IoError,
    MissingFile,
    ParseError,
    UnsupportedFormat,
)
from .stain import DEFAULT_TARGET_MATRIX, _unit_columns

MANIFEST_HEADER = ["path", "label", "domain"]
MANIFEST_NAME = "manifest.csv"
META_NAME = "meta.json"

# generator sub-stream tags
_STREAM_LABELS = 0
_STREAM_DOMAIN = 1
_STREAM_GEOMETRY = 2
_STREAM_STAIN = 3


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # resolved (absolute or manifest-relative joined) path
    label: int
    domain_id: int


@dataclass
class SynthConfig:
    n_samples: int = 200
    pos_fraction: float = 0.1
    n_domains: int = 3
    patch_size: int = 64
    seed: int = 0
    separation: float = 1.0

    def __post_init__(self):
        if self.n_samples < 2 * self.n_domains:
            raise ValueError("n_samples must be at least 2 * n_domains")
        if not 0 < self.pos_fraction < 1:
            raise ValueError("pos_fraction must lie in (0, 1)")
        if self.n_domains < 1:
            raise ValueError("n_domains must be at least 1")
        if self.patch_size < 8:
            raise ValueError("patch_size must be at least 8")
        if not 0 < self.separation <= 1:
            raise ValueError("separation must lie in (0, 1]")


def load_manifest(path: str) -> list[ManifestEntry]:
    """Parse and validate a manifest CSV; entries come back in file order."""
    if not os.path.exists(path):
        raise MissingFile(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty manifest", line=1) from None
        if header != MANIFEST_HEADER:
            raise ParseError(
                f"header must be exactly {','.join(MANIFEST_HEADER)!r}", line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            raw_path, raw_label, raw_domain = row
            if not raw_path:
                raise ParseError("empty path", line=lineno)
            if raw_path in seen:
                raise ParseError(f"duplicate path {raw_path!r}", line=lineno)
            seen.add(raw_path)
            if raw_label not in ("0", "1"):
                raise ParseError(f"label must be 0 or 1, got {raw_label!r}", line=lineno)
            try:
                domain = int(raw_domain)
            except ValueError:
                raise ParseError(
                    f"domain must be an integer, got {raw_domain!r}", line=lineno
                ) from None
            if domain < 0:
                raise ParseError(f"domain must be non-negative, got {domain}", line=lineno)
            entries.append(
                ManifestEntry(
                    path=os.path.normpath(os.path.join(base, raw_path)),
                    label=int(raw_label),
                    domain_id=domain,
                )
            )
    return entries


def load_patch(entry: ManifestEntry) -> np.ndarray:
    """Decode an 8-bit PNG into a (h, w, 3) uint8 patch.

    Grayscale is expanded to three equal channels; anything with an alpha
    channel, palette, or more than 8 bits per channel is rejected.
    """
    if not os.path.exists(entry.path):
        raise MissingFile(f"patch not found: {entry.path}")
    try:
        with Image.open(entry.path) as im:
            im.load()
            fmt = im.format
            mode = im.mode
            if fmt != "PNG":
                raise UnsupportedFormat(f"{entry.path}: expected PNG, got {fmt}")
            if mode == "RGB":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "L":
                gray = np.asarray(im, dtype=np.uint8)
                arr = np.repeat(gray[:, :, None], 3, axis=2)
            else:
                raise UnsupportedFormat(
                    f"{entry.path}: unsupported PNG mode {mode!r}"
                )
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{entry.path}: {exc}") from exc
    except OSError as exc:
        raise DecodeError(f"{entry.path}: {exc}") from exc
    return np.ascontiguousarray(arr)


def save_patch(path: str, patch: np.ndarray) -> None:
    """Write a (h, w, 3) uint8 patch as RGB PNG."""
    arr = np.asarray(patch)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("patch must be a (h, w, 3) uint8 array")
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_dataset(entries: list[ManifestEntry]) -> list[tuple[np.ndarray, int, int]]:
    """Materialize (patch, label, domain) triples for a manifest."""
    return [(load_patch(e), e.label, e.domain_id) for e in entries]


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed), *key)))


def _rotation_about_axis(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(axis, axis)


def _domain_properties(cfg: SynthConfig, domain: int) -> dict:
    rng = _stream(cfg.seed, _STREAM_DOMAIN, domain)
    angle_deg = float(rng.uniform(-10.0, 10.0))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = _rotation_about_axis(axis, math.radians(angle_deg))
    stains = np.clip(rot @ DEFAULT_TARGET_MATRIX, 0.0, None)
    stains = _unit_columns(stains)
    return {
        "angle_deg": angle_deg,
        "brightness": float(rng.uniform(0.90, 1.10)),
        "bg_h": float(rng.uniform(0.20, 0.22)),
        "bg_e": float(rng.uniform(0.45, 0.55)),
        "stain_matrix": stains,
    }


def _ellipse_alpha(
    size: int, cx: float, cy: float, a: float, b: float, theta: float
) -> np.ndarray:
    """Soft-edged ellipse mask in [0, 1] with roughly 1-pixel antialiasing."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xs - cx
    dy = ys - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    edge = math.sqrt(a * b)
    return np.clip((1.0 - rho) * edge + 0.5, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig, out_dir: str) -> list[ManifestEntry]:
    """Write deterministic synthetic PNGs, a manifest, and a meta sidecar.

    Label counts are exact (round(n * pos_fraction) positives), domains are
    assigned round-robin by index, and geometry streams never see the
    domain id, so per-class figure geometry is identically distributed
    across domains.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc

    n = cfg.n_samples
    n_pos = int(round(cfg.pos_fraction * n))
    labels = np.zeros(n, dtype=np.intp)
    labels[:n_pos] = 1
    _stream(cfg.seed, _STREAM_LABELS).shuffle(labels)

    domains = [_domain_properties(cfg, d) for d in range(cfg.n_domains)]
    size = cfg.patch_size

    entries: list[ManifestEntry] = []
    sample_meta: list[dict] = []
    rows: list[list[str]] = []
    for index in range(n):
        label = int(labels[index])
        domain = index % cfg.n_domains
        dom = domains[domain]

        geom = _stream(cfg.seed, _STREAM_GEOMETRY, index)
        area_frac = float(geom.uniform(0.14, 0.16))
        radius = size * math.sqrt(area_frac / math.pi)
        ecc = float(geom.uniform(0.05, 0.25))
        if label == 1:
            ecc += 0.4 * cfg.separation
        stretch = 1.0 + ecc
        a_axis = radius * stretch
        b_axis = radius / stretch
        cx = size / 2.0 + float(geom.uniform(-0.08, 0.08)) * size
        cy = size / 2.0 + float(geom.uniform(-0.08, 0.08)) * size
        theta = float(geom.uniform(0.0, math.pi))

        stain_rng = _stream(cfg.seed, _STREAM_STAIN, index)
        bg_h = dom["bg_h"] * float(stain_rng.uniform(0.98, 1.02))
        bg_e = dom["bg_e"] * float(stain_rng.uniform(0.95, 1.05))
        amp_h = float(stain_rng.uniform(0.70, 0.85))
        if label == 1:
            amp_h += 0.75 * cfg.separation
        fig_e = 0.85 * bg_e

        alpha = _ellipse_alpha(size, cx, cy, a_axis, b_axis, theta)
        conc_h = bg_h + (amp_h - bg_h) * alpha
        conc_e = bg_e + (fig_e - bg_e) * alpha
        # independent per-stain pixel texture keeps the OD cloud
        # two-dimensional, which stain estimation needs
        conc_h = conc_h * stain_rng.uniform(0.85, 1.15, size=conc_h.shape)
        conc_e = conc_e * stain_rng.uniform(0.85, 1.15, size=conc_e.shape)
        conc = np.stack([conc_h.ravel(), conc_e.ravel()])  # (2, size*size)

        od = (dom["stain_matrix"] @ conc).T.reshape(size, size, 3)
        intensity = 255.0 * np.exp(-od) * dom["brightness"]
        patch = np.clip(np.rint(intensity), 0.0, 255.0).astype(np.uint8)

        name = f"{index:05d}.png"
        save_patch(os.path.join(out_dir, name), patch)
        rows.append([name, str(label), str(domain)])
        entries.append(
            ManifestEntry(
                path=os.path.normpath(os.path.join(os.path.abspath(out_dir), name)),
                label=label,
                domain_id=domain,
            )
        )
        sample_meta.append(
            {
                "index": index,
                "label": label,
                "domain": domain,
                "amp_h": amp_h,
                "ecc": ecc,
                "area_frac": area_frac,
                "mean_h": float(conc_h.mean()),
            }
        )

    try:
        with open(os.path.join(out_dir, MANIFEST_NAME), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(rows)
        with open(os.path.join(out_dir, META_NAME), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "config": {
                        "n_samples": cfg.n_samples,
                        "pos_fraction": cfg.pos_fraction,
                        "n_domains": cfg.n_domains,
                        "patch_size": cfg.patch_size,
                        "seed": cfg.seed,
                        "separation": cfg.separation,
                    },
                    "domains": [
                        {
                            "angle_deg": d["angle_deg"],
                            "brightness": d["brightness"],
                            "bg_h": d["bg_h"],
                            "bg_e": d["bg_e"],
                            "stain_matrix": d["stain_matrix"].tolist(),
                        }
                        for d in domains
                    ],
                    "samples": sample_meta,
                },
                fh,
                indent=2,
            )
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write dataset files: {exc}") from exc
    return entries
