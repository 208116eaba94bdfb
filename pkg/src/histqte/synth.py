"""Synthetic clustered experiment data for exercising the estimators."""

from __future__ import annotations

import csv
import io
from collections.abc import Iterator, Mapping
from dataclasses import asdict, dataclass

import numpy as np

CLUSTER_LAWS = ("fixed", "poisson_plus_one")
VALUE_LAWS = ("normal", "lognormal", "pareto")
EFFECTS = ("none", "additive", "multiplicative")


@dataclass
class Observations:
    """Columnar observation-level data, ordered by unit id."""

    unit_ids: np.ndarray
    treated: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.unit_ids = np.asarray(self.unit_ids).astype(str)
        self.treated = np.asarray(self.treated, dtype=bool)
        self.values = np.asarray(self.values, dtype=float)
        if not (self.unit_ids.shape == self.treated.shape == self.values.shape):
            raise ValueError("observation columns differ in length")

    def __len__(self):
        return self.values.size

    def __iter__(self) -> Iterator[tuple[str, str, float]]:
        arms = np.where(self.treated, "treatment", "control")
        for u, a, v in zip(self.unit_ids, arms, self.values):
            yield str(u), str(a), float(v)

    @classmethod
    def from_records(cls, records) -> "Observations":
        ids, treated, values = [], [], []
        for unit_id, arm, value in records:
            if arm not in ("treatment", "control"):
                raise ValueError(f"unknown arm {arm!r}")
            ids.append(str(unit_id))
            treated.append(arm == "treatment")
            values.append(float(value))
        return cls(np.array(ids, dtype=str), np.array(treated, dtype=bool), np.array(values))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["unit_id", "arm", "value"])
        for u, a, v in self:
            w.writerow([u, a, repr(v)])
        return buf.getvalue()


@dataclass(frozen=True)
class SynthConfig:
    n_units: int
    cluster_law: str = "poisson_plus_one"
    cluster_param: float = 4.0
    value_law: str = "lognormal"
    value_params: tuple = (0.0, 1.0)
    treatment_fraction: float = 0.5
    effect: str = "none"
    effect_size: float = 0.0
    clip: tuple = (0.0, 100.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_units < 1:
            raise ValueError("n_units must be positive")
        if self.cluster_law not in CLUSTER_LAWS:
            raise ValueError(f"unknown cluster law {self.cluster_law!r}")
        if self.cluster_law == "fixed" and (
            self.cluster_param < 1 or int(self.cluster_param) != self.cluster_param
        ):
            raise ValueError("fixed cluster size must be a positive integer")
        if self.cluster_law == "poisson_plus_one" and self.cluster_param < 0:
            raise ValueError("poisson rate must be non-negative")
        if self.value_law not in VALUE_LAWS:
            raise ValueError(f"unknown value law {self.value_law!r}")
        a, b = self.value_params
        if self.value_law in ("normal", "lognormal") and not b > 0:
            raise ValueError("sigma must be positive")
        if self.value_law == "pareto" and not (a > 0 and b > 0):
            raise ValueError("pareto needs x_m > 0 and a > 0")
        if not 0 < self.treatment_fraction < 1:
            raise ValueError("treatment_fraction must lie in (0, 1)")
        if self.effect not in EFFECTS:
            raise ValueError(f"unknown effect {self.effect!r}")
        lo, hi = self.clip
        if not lo < hi:
            raise ValueError("clip needs lo < hi")
        object.__setattr__(self, "value_params", tuple(float(x) for x in self.value_params))
        object.__setattr__(self, "clip", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["value_params"] = list(self.value_params)
        d["clip"] = list(self.clip)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("value_params", "clip"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _draw_values(law: str, params: tuple, size: int, rng: np.random.Generator) -> np.ndarray:
    a, b = params
    if law == "normal":
        return rng.normal(a, b, size)
    if law == "lognormal":
        return rng.lognormal(a, b, size)
    # classical Pareto with scale x_m = a and shape b
    return a * (1.0 + rng.pareto(b, size))


def generate(config: SynthConfig) -> Observations:
    """Draw a randomized experiment; every draw comes from one seeded stream."""
    rng = np.random.default_rng(config.seed)
    k = config.n_units
    treated_units = rng.random(k) < config.treatment_fraction
    if config.cluster_law == "fixed":
        sizes = np.full(k, int(config.cluster_param))
    else:
        sizes = rng.poisson(config.cluster_param, k) + 1
    values = _draw_values(config.value_law, config.value_params, int(sizes.sum()), rng)
    treated = np.repeat(treated_units, sizes)
    if config.effect == "additive":
        values = np.where(treated, values + config.effect_size, values)
    elif config.effect == "multiplicative":
        values = np.where(treated, values * config.effect_size, values)
    values = np.clip(values, *config.clip)
    width = max(7, len(str(k - 1)))
    ids = np.array([f"u{i:0{width}d}" for i in range(k)])
    return Observations(np.repeat(ids, sizes), treated, values)


def generate_historical(config: SynthConfig, n_samples: int, shift: float = 0.0) -> np.ndarray:
    """I.i.d. clipped draws from the configured value law with no effect.

    ``shift`` models a historical/experiment mismatch: it moves the location
    by ``shift`` standard deviations for the normal laws (``mu + shift*sigma``)
    and scales ``x_m`` by ``1 + shift`` for Pareto.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    a, b = config.value_params
    if config.value_law == "pareto":
        params = (a * (1 + shift), b)
    else:
        params = (a + shift * b, b)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x4849]))
    return np.clip(_draw_values(config.value_law, params, n_samples, rng), *config.clip)
