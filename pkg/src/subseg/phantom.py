"""Synthetic multi-modal brain phantoms with known lesion geometry.

Each case is a skull-stripped ellipsoidal "brain" with white/grey matter and
a ventricle, one spherical lesion that brightens only in the enhanced
modalities (T1gd, FLAIR), and a bright vertical tube that appears equally in
enhanced and non-enhanced scans. The tube is the confounder: it outshines
the lesion on raw enhanced slices but cancels under subtraction.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from subseg.subtraction import CaseVolumes
from subseg.volume_io import Modality, Volume, write_nifti

# relative intensities per tissue: (T1, T1gd, T2, FLAIR)
TISSUE = {
    "wm": (0.55, 0.55, 0.35, 0.35),
    "gm": (0.40, 0.40, 0.50, 0.50),
    "csf": (0.12, 0.12, 0.85, 0.35),
    "lesion": (0.42, 0.82, 0.55, 0.88),
    "tube": (0.95, 0.95, 0.95, 0.95),
}
MODALITY_ORDER = (Modality.T1, Modality.T1GD, Modality.T2, Modality.FLAIR)
BRATS_SUFFIX = {
    Modality.T1: "t1",
    Modality.T1GD: "t1ce",
    Modality.T2: "t2",
    Modality.FLAIR: "flair",
    Modality.LABEL: "seg",
}


@dataclass(frozen=True)
class PhantomParams:
    width: int = 64
    height: int = 64
    depth: int = 24
    noise: float = 0.01
    lesion_radius: tuple[float, float] = (4.0, 7.0)
    tube_radius: tuple[float, float] = (3.0, 4.5)
    gain: float = 1000.0


def case_rng(seed: int, case_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(case_id.encode())])


def make_case(case_id: str, seed=0, params: PhantomParams = PhantomParams()) -> CaseVolumes:
    """Build one phantom case in scanner-like (unnormalized) units."""
    rng = case_rng(seed, case_id)
    d, h, w = params.depth, params.height, params.width
    zz, yy, xx = np.mgrid[0:d, 0:h, 0:w].astype(np.float64)
    cz, cy, cx = (d - 1) / 2, (h - 1) / 2, (w - 1) / 2
    rz, ry, rx = 0.62 * d, 0.44 * h, 0.38 * w

    def ellipsoid(scale, oz=0.0, oy=0.0, ox=0.0):
        return (((zz - cz - oz) / (rz * scale)) ** 2 + ((yy - cy - oy) / (ry * scale)) ** 2
                + ((xx - cx - ox) / (rx * scale)) ** 2) <= 1.0

    brain = ellipsoid(1.0)
    wm = ellipsoid(0.7)
    csf = ellipsoid(0.22, oy=-0.05 * h)

    # lesion: sphere fully inside the white matter, away from the ventricle
    r_les = rng.uniform(*params.lesion_radius)
    while True:
        lz = rng.uniform(cz - 0.2 * d, cz + 0.2 * d)
        ly = rng.uniform(cy - 0.2 * h, cy + 0.2 * h)
        lx = rng.uniform(cx - 0.2 * w, cx + 0.2 * w)
        if np.hypot(ly - (cy - 0.05 * h), lx - cx) > r_les + 0.22 * min(rx, ry) + 2:
            break
    dist = np.sqrt((zz - lz) ** 2 + (yy - ly) ** 2 + (xx - lx) ** 2)
    lesion = (dist <= r_les) & brain

    # confounder: vertical tube through the whole depth, clear of the lesion
    r_tube = rng.uniform(*params.tube_radius)
    while True:
        ty = rng.uniform(cy - 0.3 * h, cy + 0.3 * h)
        tx = rng.uniform(cx - 0.25 * w, cx + 0.25 * w)
        clear_lesion = np.hypot(ty - ly, tx - lx) > r_les + r_tube + 3
        clear_csf = np.hypot(ty - (cy - 0.05 * h), tx - cx) > r_tube + 0.22 * min(rx, ry) + 2
        if clear_lesion and clear_csf:
            break
    tube = (np.hypot(yy - ty, xx - tx) <= r_tube) & brain

    tissue_maps = [
        (brain & ~wm, "gm"),
        (wm, "wm"),
        (csf, "csf"),
        (lesion, "lesion"),
        (tube, "tube"),
    ]
    volumes = {}
    for m_idx, modality in enumerate(MODALITY_ORDER):
        img = np.zeros((d, h, w))
        for region, tissue in tissue_maps:
            img[region] = TISSUE[tissue][m_idx]
        gain = params.gain * rng.uniform(0.8, 1.2)
        noisy = img + params.noise * rng.standard_normal(img.shape)
        img = np.where(brain, np.clip(noisy, 0.01, None), 0.0) * gain
        volumes[modality] = Volume(img.astype(np.float32), modality, case_id)

    label = np.zeros((d, h, w), dtype=np.float32)
    label[lesion] = 4
    label[(dist <= 0.5 * r_les) & brain] = 1
    return CaseVolumes(
        case_id,
        t1=volumes[Modality.T1],
        t1gd=volumes[Modality.T1GD],
        t2=volumes[Modality.T2],
        flair=volumes[Modality.FLAIR],
        label=Volume(label, Modality.LABEL, case_id),
    )


def case_ids(n_cases: int) -> list[str]:
    return [f"PHANTOM_{i:03d}" for i in range(n_cases)]


def write_case(case: CaseVolumes, root, compress=True) -> Path:
    """Write a case in the BraTS directory layout (``<id>/<id>_<mod>.nii[.gz]``)."""
    case_dir = Path(root) / case.case_id
    ext = ".nii.gz" if compress else ".nii"
    for modality, suffix in BRATS_SUFFIX.items():
        vol = case.get(modality)
        code = 2 if modality is Modality.LABEL else 4
        write_nifti(vol, case_dir / f"{case.case_id}_{suffix}{ext}", datatype_code=code)
    return case_dir


def write_phantom_dataset(root, n_cases=20, seed=0, params: PhantomParams = PhantomParams()) -> list[str]:
    ids = case_ids(n_cases)
    for cid in ids:
        write_case(make_case(cid, seed, params), root)
    return ids
