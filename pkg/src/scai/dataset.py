"""Synthetic 1-D spectral curves for a 12-class identification task.

Every class shares a handful of strong solvent peaks; classes are told
apart by small class-specific peaks riding on top. Classes belong to
three style groups which share a broad fluorescence background, so
group membership is easy while within-group identity is the hard part
(two pairs differ only by a slightly shifted minor peak). Curves are
min-max normalized to [0, 1] after white noise and a per-sample
intensity scale are applied.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DatasetError(ValueError):
    pass


class DegenerateCurveError(DatasetError):
    """The pre-normalization curve was flat (nothing to scale)."""


class DatasetParseError(DatasetError):
    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass
class SpectralCurve:
    values: np.ndarray
    label: int
    sample_id: str
    seed: int = -1


@dataclass
class Peak:
    center: float
    width: float
    amplitude: float
    center_jitter: float = 0.0
    amplitude_jitter: float = 0.0


@dataclass
class ClassRecipe:
    label: int
    name: str
    peaks: list[Peak]
    background: Peak
    noise_level: float = 0.015
    intensity_jitter: tuple[float, float] = (0.85, 1.15)
    # One calibration shift per curve, added to every component's center.
    # Classes that differ only by a spacing smaller than this range can
    # only be told apart by relative peak positions, never absolute ones.
    shift_range: float = 8.0

    def validate(self, width: int) -> None:
        if not self.peaks and self.background.amplitude == 0.0:
            raise DegenerateCurveError(f"recipe {self.name!r} has no signal components")
        for p in self.peaks + [self.background]:
            if not 0 <= p.center < width:
                raise DatasetError(
                    f"recipe {self.name!r}: peak center {p.center} outside [0, {width})"
                )
            if p.amplitude <= 0:
                raise DatasetError(f"recipe {self.name!r}: amplitude must be > 0")
            if p.width <= 0:
                raise DatasetError(f"recipe {self.name!r}: width must be > 0")
        lo, hi = self.intensity_jitter
        if not 0 < lo <= hi:
            raise DatasetError(f"recipe {self.name!r}: bad intensity jitter range {lo}..{hi}")
        if self.noise_level < 0:
            raise DatasetError(f"recipe {self.name!r}: noise level must be >= 0")
        if self.shift_range < 0:
            raise DatasetError(f"recipe {self.name!r}: shift range must be >= 0")


# Shared solvent peaks present in every class.
_SHARED_PEAKS = [
    Peak(200.0, 5.0, 1.00, center_jitter=0.5, amplitude_jitter=0.06),
    Peak(120.0, 4.0, 0.55, center_jitter=0.5, amplitude_jitter=0.08),
    Peak(264.0, 4.5, 0.40, center_jitter=0.5, amplitude_jitter=0.08),
]

# Broad fluorescence background per style group.
_GROUP_BACKGROUNDS = {
    0: Peak(140.0, 80.0, 0.35, amplitude_jitter=0.18),
    1: Peak(225.0, 95.0, 0.45, amplitude_jitter=0.18),
    2: Peak(175.0, 105.0, 0.30, amplitude_jitter=0.18),
}

_GROUP_OF_CLASS = {0: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 1,
                   6: 2, 7: 2, 8: 2, 9: 2, 10: 2, 11: 2}

# Class-specific minor peaks: (center, width, amplitude). The whole
# curve shifts by up to +-shift_range per sample, so classes whose
# peaks differ by less than that (c3/c4 at 340 vs 347, c6/c7 at 290 vs
# 296) can only be separated by spacings relative to the shared peaks.
# Other classes carry locally recognizable motifs instead: doublets
# (c0, c10), an unusually wide hump (c2, c9) or a tall narrow spike
# (c5, c8), which shallow features can pick up wherever they land.
_CLASS_MINORS = {
    0: [(55.0, 2.5, 0.22), (61.0, 2.5, 0.22), (305.0, 3.0, 0.18)],
    1: [(58.0, 2.5, 0.30), (322.0, 3.0, 0.18)],
    2: [(75.0, 7.0, 0.18), (305.0, 3.0, 0.18)],
    3: [(90.0, 3.0, 0.22), (340.0, 3.0, 0.20)],
    4: [(90.0, 3.0, 0.22), (347.0, 3.0, 0.20)],
    5: [(30.0, 1.8, 0.28), (104.0, 3.0, 0.22), (356.0, 3.0, 0.20)],
    6: [(40.0, 3.0, 0.20), (290.0, 3.0, 0.15)],
    7: [(40.0, 3.0, 0.20), (296.0, 3.0, 0.15)],
    8: [(160.0, 1.8, 0.30), (290.0, 3.0, 0.15)],
    9: [(160.0, 6.0, 0.16), (310.0, 3.0, 0.15)],
    10: [(228.0, 2.5, 0.18), (234.0, 2.5, 0.18), (370.0, 3.0, 0.15)],
    11: [(244.0, 3.0, 0.18), (370.0, 3.0, 0.15)],
}

_MINOR_JITTER = dict(center_jitter=0.5, amplitude_jitter=0.20)


def default_recipes(width: int = 400, classes: int = 12) -> list[ClassRecipe]:
    if classes != 12:
        raise DatasetError(f"the default recipe library defines 12 classes, got {classes}")
    recipes = []
    for label in range(classes):
        peaks = [Peak(**vars(p)) for p in _SHARED_PEAKS]
        for center, w, amp in _CLASS_MINORS[label]:
            peaks.append(Peak(center, w, amp, **_MINOR_JITTER))
        bg = _GROUP_BACKGROUNDS[_GROUP_OF_CLASS[label]]
        recipe = ClassRecipe(
            label=label,
            name=f"brand{label:02d}",
            peaks=peaks,
            background=Peak(**vars(bg)),
        )
        recipe.validate(width)
        recipes.append(recipe)
    return recipes


def peak_positions(recipes: Sequence[ClassRecipe]) -> list[int]:
    """Sorted unique centers of the sharp peaks (backgrounds excluded)."""
    centers = {int(round(p.center)) for r in recipes for p in r.peaks}
    return sorted(centers)


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; flat input is rejected."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min()
    hi = values.max()
    if hi - lo < 1e-12:
        raise DegenerateCurveError("curve is flat before normalization")
    return (values - lo) / (hi - lo)


def synth_curve(recipe: ClassRecipe, rng: np.random.Generator, width: int = 400,
                sample_id: str = "", seed: int = -1) -> SpectralCurve:
    """Draw one curve: peaks + background + noise, scaled, then normalized."""
    grid = np.arange(width, dtype=np.float64)
    signal = np.zeros(width)
    shift = rng.uniform(-recipe.shift_range, recipe.shift_range) if recipe.shift_range else 0.0
    for p in recipe.peaks:
        center = p.center + shift + (rng.uniform(-p.center_jitter, p.center_jitter) if p.center_jitter else 0.0)
        amp = p.amplitude * (1.0 + (rng.uniform(-p.amplitude_jitter, p.amplitude_jitter) if p.amplitude_jitter else 0.0))
        signal += amp * np.exp(-0.5 * ((grid - center) / p.width) ** 2)
    bg = recipe.background
    bg_amp = bg.amplitude * (1.0 + (rng.uniform(-bg.amplitude_jitter, bg.amplitude_jitter) if bg.amplitude_jitter else 0.0))
    signal += bg_amp * np.exp(-0.5 * ((grid - bg.center - shift) / bg.width) ** 2)
    if recipe.noise_level > 0:
        signal = signal + rng.normal(0.0, recipe.noise_level, size=width)
    lo, hi = recipe.intensity_jitter
    signal = signal * rng.uniform(lo, hi)
    return SpectralCurve(values=normalize(signal), label=recipe.label,
                         sample_id=sample_id, seed=seed)


def build_dataset(recipes: Sequence[ClassRecipe], per_class: int = 100,
                  seed: int = 0, width: int = 400) -> list[SpectralCurve]:
    """Per-class curves with independent per-sample seeds (order: class-major)."""
    if per_class < 1:
        raise DatasetError(f"per_class must be >= 1, got {per_class}")
    curves = []
    for recipe in recipes:
        recipe.validate(width)
        for i in range(per_class):
            child = np.random.SeedSequence([int(seed), 2, int(recipe.label), i])
            rng = np.random.default_rng(child)
            sid = f"c{recipe.label:02d}-s{i:04d}"
            curves.append(synth_curve(recipe, rng, width=width, sample_id=sid,
                                      seed=int(child.generate_state(1)[0])))
    return curves


def split_dataset(curves: Sequence[SpectralCurve], ratios: tuple[int, int, int] = (8, 1, 1),
                  seed: int = 0) -> tuple[list[SpectralCurve], list[SpectralCurve], list[SpectralCurve]]:
    """Stratified train/valid/test split; per-class counts must divide exactly."""
    total = sum(ratios)
    if any(r <= 0 for r in ratios):
        raise DatasetError(f"split ratios must be positive, got {ratios}")
    by_label: dict[int, list[int]] = {}
    for idx, c in enumerate(curves):
        by_label.setdefault(c.label, []).append(idx)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    parts: tuple[list[SpectralCurve], ...] = ([], [], [])
    for label in sorted(by_label):
        indices = np.array(by_label[label])
        n = len(indices)
        if (n * ratios[0]) % total or (n * ratios[1]) % total or (n * ratios[2]) % total:
            raise DatasetError(
                f"class {label} has {n} samples, not divisible by ratios {ratios}"
            )
        perm = rng.permutation(n)
        counts = [n * r // total for r in ratios]
        start = 0
        for part, count in zip(parts, counts):
            for j in perm[start:start + count]:
                part.append(curves[indices[j]])
            start += count
    return parts


# -- persistence -----------------------------------------------------------


def save_dataset(curves: Sequence[SpectralCurve], path: str) -> None:
    """CSV with header sample_id,label,v_0..v_{W-1}; float repr round-trips."""
    if not curves:
        raise DatasetError("refusing to save an empty dataset")
    width = curves[0].values.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label"] + [f"v_{i}" for i in range(width)])
        for c in curves:
            if c.values.shape[0] != width:
                raise DatasetError(f"sample {c.sample_id}: width {c.values.shape[0]} != {width}")
            writer.writerow([c.sample_id, c.label] + [repr(float(v)) for v in c.values])


def load_dataset(path: str) -> list[SpectralCurve]:
    curves = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError(path, 1, "empty file") from None
        if header[:2] != ["sample_id", "label"] or len(header) < 3:
            raise DatasetParseError(path, 1, f"unexpected header {header[:4]}...")
        width = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width + 2:
                raise DatasetParseError(path, lineno, f"expected {width + 2} columns, got {len(row)}")
            try:
                label = int(row[1])
                values = np.array([float(v) for v in row[2:]], dtype=np.float64)
            except ValueError as exc:
                raise DatasetParseError(path, lineno, str(exc)) from None
            curves.append(SpectralCurve(values=values, label=label, sample_id=row[0]))
    return curves


def save_recipes(recipes: Sequence[ClassRecipe], path: str) -> None:
    payload = []
    for r in recipes:
        payload.append({
            "label": r.label,
            "name": r.name,
            "peaks": [vars(p) for p in r.peaks],
            "background": vars(r.background),
            "noise_level": r.noise_level,
            "intensity_jitter": list(r.intensity_jitter),
            "shift_range": r.shift_range,
        })
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_recipes(path: str) -> list[ClassRecipe]:
    with open(path) as fh:
        payload = json.load(fh)
    recipes = []
    for entry in payload:
        recipes.append(ClassRecipe(
            label=int(entry["label"]),
            name=entry["name"],
            peaks=[Peak(**p) for p in entry["peaks"]],
            background=Peak(**entry["background"]),
            noise_level=float(entry["noise_level"]),
            intensity_jitter=tuple(entry["intensity_jitter"]),
            shift_range=float(entry.get("shift_range", 0.0)),
        ))
    return recipes


def labels_of(curves: Sequence[SpectralCurve]) -> np.ndarray:
    return np.array([c.label for c in curves], dtype=np.int64)
