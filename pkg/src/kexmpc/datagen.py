"""Synthetic patient-donor pair generator.

Stands in for real registry data, which is not redistributable.  Pairs
enroll in an exchange because their own donor does not fit: the generator
enforces that by re-drawing the HLA block when a pair comes out internally
compatible (blood-type marginals are left untouched on purpose, so they
stay faithful to the configured distribution).

The antibody density per antigen is calibrated so that a patient's CPRA
roughly equals the probability of a positive virtual crossmatch against a
random donor.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .compat import DEFAULT_ANTIGEN_SPACE, InputQuote

logger = logging.getLogger("kexmpc.datagen")

# US blood-type frequencies
DEFAULT_BLOOD_DIST = {"O": 0.44, "A": 0.42, "B": 0.10, "AB": 0.04}

# (band weight, cpra low, cpra high); exchange pools skew heavily sensitized
# because easy pairs transplant directly and never enroll
DEFAULT_CPRA_BANDS = ((0.10, 0, 25), (0.20, 25, 80), (0.70, 85, 99))


def default_antigen_freqs(antigen_space: int) -> np.ndarray:
    """Donor antigen frequencies: a few common antigens, a long rare tail.

    The total frequency mass is kept large enough that even 99% CPRA is
    realizable as an antibody profile over this antigen space.
    """
    ranks = np.arange(antigen_space)
    freqs = 0.35 / (1.0 + 0.12 * ranks)
    return np.clip(freqs, 0.02, 0.40)


@dataclass(frozen=True)
class PopulationModel:
    blood_dist: tuple[tuple[str, float], ...] = tuple(DEFAULT_BLOOD_DIST.items())
    antigen_space: int = DEFAULT_ANTIGEN_SPACE
    antigen_freqs: tuple[float, ...] | None = None
    cpra_bands: tuple[tuple[float, int, int], ...] = DEFAULT_CPRA_BANDS
    region_count: int = 11
    pediatric_rate: float = 0.08
    prior_living_donor_rate: float = 0.03
    enforce_incompatible: bool = True

    def __post_init__(self):
        total = sum(p for _, p in self.blood_dist)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("blood type distribution must sum to 1")
        if abs(sum(w for w, _, _ in self.cpra_bands) - 1.0) > 1e-9:
            raise ValueError("cpra band weights must sum to 1")

    def freqs(self) -> np.ndarray:
        if self.antigen_freqs is not None:
            arr = np.asarray(self.antigen_freqs, dtype=float)
            if arr.shape != (self.antigen_space,) or arr.min() < 0 or arr.max() > 1:
                raise ValueError("antigen frequencies must be L values in [0, 1]")
            return arr
        return default_antigen_freqs(self.antigen_space)

    @classmethod
    def from_json(cls, obj: dict) -> "PopulationModel":
        kwargs = {}
        if "blood_dist" in obj:
            kwargs["blood_dist"] = tuple((k, float(v)) for k, v in obj["blood_dist"].items())
        if "antigen_space" in obj:
            kwargs["antigen_space"] = int(obj["antigen_space"])
        if "antigen_freqs" in obj and obj["antigen_freqs"] is not None:
            kwargs["antigen_freqs"] = tuple(float(x) for x in obj["antigen_freqs"])
        if "cpra_bands" in obj:
            kwargs["cpra_bands"] = tuple(
                (float(w), int(lo), int(hi)) for w, lo, hi in obj["cpra_bands"]
            )
        for name in ("region_count",):
            if name in obj:
                kwargs[name] = int(obj[name])
        for name in ("pediatric_rate", "prior_living_donor_rate"):
            if name in obj:
                kwargs[name] = float(obj[name])
        if "enforce_incompatible" in obj:
            kwargs["enforce_incompatible"] = bool(obj["enforce_incompatible"])
        return cls(**kwargs)


def _antibody_density(cpra: int, freqs: np.ndarray) -> float:
    """Per-antigen antibody probability whose induced crossmatch-positive
    rate against a random donor approximates cpra/100."""
    target = min(cpra / 100.0, 0.999)
    if target <= 0:
        return 0.0
    return min(1.0, -np.log1p(-target) / freqs.sum())


def _draw_quote(model: PopulationModel, freqs, blood_names, blood_probs, band_probs, rng) -> InputQuote:
    donor_type = blood_names[rng.choice(len(blood_names), p=blood_probs)]
    patient_type = blood_names[rng.choice(len(blood_names), p=blood_probs)]
    band = model.cpra_bands[rng.choice(len(model.cpra_bands), p=band_probs)]
    cpra = int(rng.integers(band[1], band[2] + 1))
    density = _antibody_density(cpra, freqs)
    antigens = (rng.random(model.antigen_space) < freqs).astype(int)
    antibodies = (rng.random(model.antigen_space) < density).astype(int)
    age = int(rng.integers(2, 76))
    pediatric = age < 18 or rng.random() < model.pediatric_rate
    return InputQuote.make(
        donor_type,
        patient_type,
        antigens,
        antibodies,
        cpra=cpra,
        age=age,
        pediatric=pediatric,
        prior_living_donor=bool(rng.random() < model.prior_living_donor_rate),
        region=int(rng.integers(0, model.region_count)),
        donor_age=int(rng.integers(18, 71)),
    )


def _internally_compatible(q: InputQuote) -> bool:
    blood_ok = int(q.donor_blood @ q.patient_accepts) == 1
    clash = int(q.donor_antigens @ q.patient_antibodies) > 0
    return blood_ok and not clash


def _force_incompatible(q: InputQuote, model: PopulationModel, freqs, rng, tries: int = 25) -> InputQuote:
    """Re-draw the HLA block until the pair's own crossmatch fails.

    Only antigens/antibodies are resampled, never blood types, so the
    configured ABO marginals survive the conditioning.  If the patient is
    too weakly sensitized to clash by chance, a single antibody is planted
    against the donor's rarest antigen (rare, so that cross-pair
    compatibility is barely affected).
    """
    density = _antibody_density(q.cpra, freqs)
    for _ in range(tries if density > 0 else 1):
        if not _internally_compatible(q):
            return q
        if density > 0:
            q.donor_antigens = (rng.random(model.antigen_space) < freqs).astype(np.int64)
            q.patient_antibodies = (rng.random(model.antigen_space) < min(density * 1.5, 1.0)).astype(np.int64)
    if not q.donor_antigens.any():
        q.donor_antigens[model.antigen_space - 1] = 1  # rarest slot
    present = np.nonzero(q.donor_antigens)[0]
    hit = present[np.argmin(freqs[present])]
    q.patient_antibodies[hit] = 1
    return q


def quote_stream(model: PopulationModel | None = None, seed: int = 0):
    """Endless deterministic stream of quotes (used by the simulator)."""
    model = model or PopulationModel()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E3779B9]))
    freqs = model.freqs()
    blood_names = [name for name, _ in model.blood_dist]
    blood_probs = np.array([p for _, p in model.blood_dist])
    band_probs = np.array([w for w, _, _ in model.cpra_bands])
    while True:
        q = _draw_quote(model, freqs, blood_names, blood_probs, band_probs, rng)
        if model.enforce_incompatible:
            q = _force_incompatible(q, model, freqs, rng)
        yield q


def gen_pairs(n: int, model: PopulationModel | None = None, seed: int = 0) -> list[InputQuote]:
    """n synthetic pairs, deterministic under the seed."""
    if n < 1:
        raise ValueError("need at least one pair")
    return list(itertools.islice(quote_stream(model, seed), n))
