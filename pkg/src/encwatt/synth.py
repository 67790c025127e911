"""Synthetic measurement datasets with known per-preset affine ground truth.

The generator emulates a desk-scale measurement campaign: sequences in
five content classes, each encoded at every preset and CRF, with the net
energy drawn from a documented affine law in the encoding time.  Slopes
and time multipliers are modeled on published ultrafast-time fits (the
slope of the ultrafast-time law is the own-time slope times the preset's
time multiplier).  With zero noise the data interpolates the laws
exactly, which the fit tests rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import Dataset, DatasetRow
from .models import PRESETS

__all__ = ["GROUND_TRUTH", "SynthDatasetRecipe", "generate_dataset", "load_dataset_recipe"]


@dataclass(frozen=True)
class PresetLaw:
    """Own-time affine energy law and wall-time multiplier for one preset."""

    time_factor: float  # encode time relative to the ultrafast probe
    power_w: float      # slope of energy vs own encoding time
    offset_j: float


# Time multipliers follow the published speed ratios; mean powers are
# chosen so the implied ultrafast-time slopes (power * factor) match the
# published slope magnitudes.
GROUND_TRUTH: dict[str, PresetLaw] = {
    "ultrafast": PresetLaw(1.0, 110.0, -5.0),
    "superfast": PresetLaw(1.4, 115.0, -10.0),
    "veryfast": PresetLaw(1.9, 131.0, -24.0),
    "faster": PresetLaw(2.0, 125.0, -20.0),
    "fast": PresetLaw(2.9, 130.0, -19.0),
    "medium": PresetLaw(3.2, 112.0, -25.0),
    "slow": PresetLaw(8.5, 134.0, -70.0),
    "slower": PresetLaw(40.0, 101.0, 230.0),
    "veryslow": PresetLaw(55.0, 123.0, 425.0),
}

_CLASS_BASE_TIME = {"A": 3.0, "B": 2.4, "C": 2.0, "D": 1.6, "E": 1.2}
_CRF_TIME_SCALE = {18.0: 1.3, 23.0: 1.0, 28.0: 0.85, 33.0: 0.72}


@dataclass(frozen=True)
class SynthDatasetRecipe:
    """Shape and noise of a generated campaign dataset."""

    n_sequences: int = 25
    crfs: tuple[float, ...] = (18.0, 23.0, 28.0, 33.0)
    frames: int = 100
    noise: float = 0.05       # multiplicative noise on energy
    time_jitter: float = 0.08  # per-row spread of encode time around factor * t_uf
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_sequences < 1:
            raise ValueError("n_sequences must be >= 1")
        if not self.crfs:
            raise ValueError("need at least one CRF")
        if self.noise < 0 or self.time_jitter < 0:
            raise ValueError("noise and time_jitter must be >= 0")
        object.__setattr__(self, "crfs", tuple(float(c) for c in self.crfs))


def _crf_scale(crf: float) -> float:
    if crf in _CRF_TIME_SCALE:
        return _CRF_TIME_SCALE[crf]
    # Outside the standard grid: smooth interpolation of the same trend.
    return float(np.interp(crf, sorted(_CRF_TIME_SCALE), [
        _CRF_TIME_SCALE[c] for c in sorted(_CRF_TIME_SCALE)
    ]))


def _truncated_normal(rng: np.random.Generator, scale: float) -> float:
    # Clipped at 3 sigma so times and energies stay positive.
    return float(np.clip(rng.normal(0.0, 1.0), -3.0, 3.0)) * scale


def generate_dataset(recipe: SynthDatasetRecipe) -> Dataset:
    """Deterministically generate a campaign dataset from the recipe."""
    rng = np.random.default_rng(recipe.seed)
    classes = sorted(_CLASS_BASE_TIME)
    rows: list[DatasetRow] = []
    for i in range(recipe.n_sequences):
        sequence_id = f"seq{i:02d}"
        class_label = classes[i % len(classes)]
        content_scale = rng.uniform(0.75, 1.35)   # within-class content complexity
        qp_offset = rng.uniform(-2.5, 2.5)        # sequence-dependent avg-QP shift
        for crf in recipe.crfs:
            t_uf = _CLASS_BASE_TIME[class_label] * content_scale * _crf_scale(crf)
            for preset in PRESETS:
                law = GROUND_TRUTH[preset]
                if preset == "ultrafast":
                    t_enc = t_uf
                else:
                    t_enc = law.time_factor * t_uf * (1.0 + _truncated_normal(rng, recipe.time_jitter))
                energy = (law.power_w * t_enc + law.offset_j) * (
                    1.0 + _truncated_normal(rng, recipe.noise)
                )
                avg_qp = float(np.clip(crf + qp_offset + _truncated_normal(rng, 0.4), 0.0, 51.0))
                rows.append(
                    DatasetRow(
                        sequence_id=sequence_id,
                        class_label=class_label,
                        preset=preset,
                        crf=crf,
                        frames=recipe.frames,
                        avg_qp=avg_qp,
                        t_enc=t_enc,
                        t_enc_uf=t_uf,
                        energy=energy,
                        reps=1,
                        confident=True,
                    )
                )
    return Dataset(rows=tuple(rows), provenance=f"synthetic seed={recipe.seed}")


def load_dataset_recipe(path: str | Path) -> SynthDatasetRecipe:
    """Read a dataset recipe from JSON; unknown keys are rejected."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    known = {f.name for f in fields(SynthDatasetRecipe)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown recipe keys: {sorted(unknown)}")
    if "crfs" in data:
        data["crfs"] = tuple(data["crfs"])
    return SynthDatasetRecipe(**data)
