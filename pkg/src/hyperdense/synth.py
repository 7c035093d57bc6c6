"""Deterministic multi-modal phantoms: nested ellipsoidal tissue shells plus noise."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .fileio import ManifestEntry, save_manifest, write_volume

SYNTH_KEYS = {"subjects", "dims", "classes", "modalities", "noise_sigma", "seed", "spacing_mm"}

# Fraction of the outer radius where the innermost class begins.
_CORE_RADIUS = 0.4
# Outer semi-axes as a fraction of the volume size; leaves background inside the
# region reachable by 27^3 training patches of a 48^3 volume.
_OUTER_AXES = 0.35


def class_intensities(classes: int, modalities: int, seed=0) -> np.ndarray:
    """(modalities, classes) table of mean intensities in [0, 1], distinct per modality."""
    levels = np.linspace(0.0, 1.0, classes)
    table = np.empty((modalities, classes))
    rng = np.random.default_rng([seed, 7919])
    for m in range(modalities):
        if m == 0:
            order = np.arange(classes)
        elif m == 1:
            order = np.r_[0, np.arange(classes - 1, 0, -1)]
        else:
            order = np.r_[0, 1 + rng.permutation(classes - 1)]
        table[m] = levels[order]
    return table


def phantom_labels(dims, classes, rng) -> np.ndarray:
    """Class 0 outside a jittered ellipsoid; classes 1..C-1 as shells toward its core."""
    dims = np.asarray(dims)
    center = (dims - 1) / 2 + rng.uniform(-0.05, 0.05, 3) * dims
    axes = _OUTER_AXES * dims * rng.uniform(0.9, 1.0, 3)
    grid = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
    rho = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grid, center, axes)))
    labels = np.zeros(tuple(dims), dtype=np.uint8)
    if classes < 2:
        return labels
    bounds = np.linspace(1.0, _CORE_RADIUS, classes - 1) if classes > 2 else np.array([1.0])
    for c, r in enumerate(bounds, start=1):
        labels[rho <= r] = c
    return labels


def synth_subject(dims, classes, modalities, noise_sigma, rng, table):
    labels = phantom_labels(dims, classes, rng)
    vols = []
    for m in range(modalities):
        v = table[m][labels]
        if noise_sigma > 0:
            v = v + rng.normal(0.0, noise_sigma, labels.shape)
        vols.append(v.astype(np.float32))
    return vols, labels


def synth_dataset(spec: dict, out_dir) -> list[ManifestEntry]:
    """Write ``spec["subjects"]`` phantoms plus ``manifest.json`` into ``out_dir``."""
    extra = set(spec) - SYNTH_KEYS
    if extra:
        raise ValueError(f"unknown synth spec keys: {sorted(extra)}")
    n_subj = int(spec.get("subjects", 1))
    dims = spec.get("dims", 48)
    dims = [int(dims)] * 3 if np.isscalar(dims) else [int(d) for d in dims]
    classes = int(spec.get("classes", 4))
    n_mod = int(spec.get("modalities", 2))
    sigma = float(spec.get("noise_sigma", 0.05))
    seed = int(spec.get("seed", 0))
    spacing = tuple(spec.get("spacing_mm", (1.0, 1.0, 1.0)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = class_intensities(classes, n_mod, seed)
    entries = []
    for i in range(n_subj):
        rng = np.random.default_rng([seed, i])
        vols, labels = synth_subject(dims, classes, n_mod, sigma, rng, table)
        sid = f"subject{i + 1:02d}"
        mods = {}
        for m, v in enumerate(vols, start=1):
            mods[f"mod{m}"] = str(write_volume(out / f"{sid}_mod{m}.raw", v, spacing))
        label_path = write_volume(out / f"{sid}_label.raw", labels, spacing)
        entries.append(ManifestEntry(sid, mods, str(label_path), "train"))
    save_manifest(entries, out / "manifest.json")
    return entries
