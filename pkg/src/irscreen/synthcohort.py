"""Synthetic cohorts written in the three-file ingestion layout.

Two generators:

* `generate_synthetic_cohort` draws person-level values from a Gaussian copula
  whose latent correlations are solved so that the *observed* Pearson
  correlation of each variable with HOMA-IR hits a target.
* `generate_functional_cohort` makes HOMA-IR an exact known function of the
  features plus Gaussian noise, so model accuracy has a computable ceiling.

Both back-solve insulin from HOMA-IR and glucose, lay daily wearable series
around each person's mean, and can plant QC violations on extra participants.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import optimize, special

from .domain import HOMA_DENOMINATOR
from .ingestion import LAB_COLUMNS, PARTICIPANT_COLUMNS, WEARABLE_COLUMNS, CohortFiles
from .serialize import read_json, write_csv, write_json

logger = logging.getLogger(__name__)

WEARABLE_VARS = ("rhr", "hrv_rmssd", "steps", "sleep_minutes")
LIPID_VARS = ("hdl", "ldl", "triglycerides", "total_cholesterol")
METABOLIC_VARS = ("albumin_globulin_ratio", "creatinine", "egfr", "bun", "sodium",
                  "potassium", "chloride")
COMORBIDITIES = ("cvd", "hyperlipidemia", "diabetes", "respiratory", "kidney_disease")
META_FILE = "cohort_meta.json"

# cohort shares, and per-class (IS, ImpairedIS, IR) condition counts out of 459/406/300
GENDERS = (("Female", 636), ("Male", 505), ("Other", 21), ("Undisclosed", 3))
ETHNICITIES = (("White", 905), ("Hispanic", 67), ("Asian-Indian", 54), ("Asian-Eastern", 31),
               ("African-American", 46), ("Native-American", 4), ("Mixed", 38),
               ("Undisclosed", 20))
CLASS_SIZES = (459, 406, 300)
CONDITION_COUNTS = {
    "cvd": (2, 21, 14),
    "hyperlipidemia": (43, 125, 79),
    "diabetes": (2, 16, 46),
    "respiratory": (29, 67, 58),
    "hypertension": (32, 101, 113),
    "kidney_disease": (5, 12, 6),
}

# day-to-day jitter around a person's mean: absolute for rhr/sleep, relative for hrv/steps
DAILY_JITTER = {"rhr": ("abs", 3.0), "hrv_rmssd": ("rel", 0.2), "steps": ("rel", 0.35),
                "sleep_minutes": ("abs", 45.0)}
DAILY_FLOOR = {"rhr": 30.0, "hrv_rmssd": 1.0, "steps": 0.0, "sleep_minutes": 60.0}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Marginal:
    """Truncated normal, or log-normal truncated on the log scale.

    For "lognormal", ``loc`` and ``scale`` are the mean and sd of log(x).
    """

    kind: str
    loc: float
    scale: float
    lower: float
    upper: float

    def __post_init__(self):
        if self.kind not in ("normal", "lognormal"):
            raise CalibrationError(f"unknown marginal kind {self.kind!r}")
        if not self.scale > 0 or not self.lower < self.upper:
            raise CalibrationError("marginal needs scale > 0 and lower < upper")
        if self.kind == "lognormal" and self.lower <= 0:
            raise CalibrationError("log-normal marginal needs a positive lower bound")

    @classmethod
    def lognormal_from_median_sd(cls, median: float, sd: float, lower: float, upper: float):
        # sd^2 = m^2 e^{s^2} (e^{s^2} - 1) with m the median; solve for s^2
        r = (sd / median) ** 2
        s2 = math.log((1 + math.sqrt(1 + 4 * r)) / 2)
        return cls("lognormal", math.log(median), math.sqrt(s2), lower, upper)

    def _bounds(self):
        if self.kind == "lognormal":
            lo, hi = math.log(self.lower), math.log(self.upper)
        else:
            lo, hi = self.lower, self.upper
        return special.ndtr((lo - self.loc) / self.scale), special.ndtr((hi - self.loc) / self.scale)

    def transform(self, z):
        """Map standard-normal draws to this marginal through its quantile function."""
        a, b = self._bounds()
        u = a + (b - a) * special.ndtr(np.asarray(z, dtype=float))
        u = np.clip(u, 1e-300, 1 - 1e-16)
        x = self.loc + self.scale * special.ndtri(u)
        if self.kind == "lognormal":
            x = np.exp(x)
        return np.clip(x, self.lower, self.upper)


def _default_marginals() -> Dict[str, Marginal]:
    N = lambda c, s, lo, hi: Marginal("normal", c, s, lo, hi)  # noqa: E731
    homa_sigma = 0.7166
    return {
        # fitted so P(<1.5), P(>=2.9) match 459/1165 and 300/1165; capped below the QC limit
        "homa_ir": Marginal("lognormal", 0.5982, homa_sigma, 0.1, 14.5),
        "age": N(45.0, 12.5, 21.0, 80.0),
        "bmi": N(28.0, 6.7, 16.0, 60.0),
        "rhr": N(66.0, 8.2, 40.0, 110.0),
        "sleep_minutes": N(459.0, 66.0, 200.0, 720.0),
        "steps": N(6909.0, 3752.6, 500.0, 30000.0),
        "hrv_rmssd": N(27.1, 16.5, 5.0, 150.0),
        "hba1c": N(5.4, 0.5, 4.0, 12.0),
        "glucose": N(90.0, 13.2, 60.0, 250.0),
        "hdl": N(56.0, 15.4, 20.0, 130.0),
        "ldl": N(105.0, 34.2, 30.0, 250.0),
        "triglycerides": Marginal.lognormal_from_median_sd(89.0, 61.8, 20.0, 1000.0),
        "total_cholesterol": N(190.0, 38.0, 100.0, 350.0),
        "albumin_globulin_ratio": N(1.7, 0.3, 0.8, 3.0),
        "creatinine": N(0.9, 0.2, 0.4, 2.0),
        "egfr": N(98.0, 16.0, 30.0, 140.0),
        "bun": N(14.0, 4.0, 5.0, 40.0),
        "sodium": N(139.0, 2.2, 130.0, 148.0),
        "potassium": N(4.2, 0.35, 3.3, 5.3),
        "chloride": N(103.0, 2.5, 95.0, 112.0),
    }


DEFAULT_TARGETS = {
    "glucose": 0.57, "bmi": 0.43, "hba1c": 0.45, "triglycerides": 0.40, "rhr": 0.27,
    "hdl": -0.30, "steps": -0.25, "hrv_rmssd": -0.14, "albumin_globulin_ratio": -0.18,
}


@dataclass
class CohortCalibration:
    marginals: Dict[str, Marginal] = field(default_factory=_default_marginals)
    targets: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    cross_default: float = 0.1
    max_repair: float = 0.05  # largest entry change PSD repair may make

    def __post_init__(self):
        if "homa_ir" not in self.marginals:
            raise CalibrationError("calibration needs a homa_ir marginal")
        unknown = [k for k in self.targets if k not in self.marginals or k == "homa_ir"]
        if unknown:
            raise CalibrationError(f"targets for unknown variables {unknown}")
        bad = [k for k, r in self.targets.items() if not -1 < r < 1]
        if bad:
            raise CalibrationError(f"target correlations must lie in (-1, 1): {bad}")

    @property
    def variables(self) -> List[str]:
        return ["homa_ir"] + [k for k in self.marginals if k != "homa_ir"]

    def zeroed(self) -> "CohortCalibration":
        return replace(self, targets={k: 0.0 for k in self.targets}, cross_default=0.0)

    def to_dict(self) -> dict:
        return {"marginals": {k: asdict(m) for k, m in self.marginals.items()},
                "targets": dict(self.targets), "cross_default": self.cross_default,
                "max_repair": self.max_repair}

    @classmethod
    def from_dict(cls, d: dict) -> "CohortCalibration":
        kw = {}
        if "marginals" in d:
            base = _default_marginals()
            base.update({k: Marginal(**v) for k, v in d["marginals"].items()})
            kw["marginals"] = base
        for key in ("targets", "cross_default", "max_repair"):
            if key in d:
                kw[key] = d[key]
        unknown = set(d) - {"marginals", "targets", "cross_default", "max_repair"}
        if unknown:
            raise CalibrationError(f"unknown calibration keys {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "CohortCalibration":
        return cls.from_dict(read_json(path))


_NODES, _WEIGHTS = hermegauss(96)
_WEIGHTS = _WEIGHTS / _WEIGHTS.sum()


def implied_correlation(m1: Marginal, m2: Marginal, rho: float) -> float:
    """Pearson correlation of (T1(Z1), T2(Z2)) when corr(Z1, Z2) = rho, by quadrature."""
    a = m1.transform(_NODES)
    mu_a = _WEIGHTS @ a
    sd_a = math.sqrt(_WEIGHTS @ (a - mu_a) ** 2)
    b1 = m2.transform(_NODES)
    mu_b = _WEIGHTS @ b1
    sd_b = math.sqrt(_WEIGHTS @ (b1 - mu_b) ** 2)
    s = math.sqrt(max(0.0, 1.0 - rho * rho))
    inner = m2.transform(rho * _NODES[:, None] + s * _NODES[None, :]) @ _WEIGHTS
    cov = _WEIGHTS @ ((a - mu_a) * inner)
    return float(cov / (sd_a * sd_b))


def latent_correlation(m1: Marginal, m2: Marginal, target: float) -> float:
    """Latent Gaussian correlation giving the target observed Pearson correlation."""
    if target == 0:
        return 0.0
    lo, hi = (0.0, 0.999) if target > 0 else (-0.999, 0.0)
    f = lambda r: implied_correlation(m1, m2, r) - target  # noqa: E731
    if f(lo) * f(hi) > 0:
        raise CalibrationError(f"target correlation {target} is unreachable for these marginals")
    return float(optimize.brentq(f, lo, hi, xtol=1e-10))


def nearest_correlation(C: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Clip eigenvalues at eps and rescale back to a unit diagonal."""
    w, V = np.linalg.eigh((C + C.T) / 2)
    R = (V * np.maximum(w, eps)) @ V.T
    d = np.sqrt(np.diag(R))
    R = R / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return R


def latent_matrix(calibration: CohortCalibration) -> Tuple[List[str], np.ndarray]:
    names = calibration.variables
    p = len(names)
    C = np.eye(p)
    homa = calibration.marginals["homa_ir"]
    sign = np.zeros(p)
    for j, name in enumerate(names[1:], start=1):
        r = calibration.targets.get(name, 0.0)
        C[0, j] = C[j, 0] = latent_correlation(homa, calibration.marginals[name], r)
        sign[j] = np.sign(r)
    cross = calibration.cross_default * np.outer(sign, sign)
    cross[0, :] = cross[:, 0] = 0.0
    np.fill_diagonal(cross, 0.0)
    C = C + cross
    if np.linalg.eigvalsh(C).min() <= 0:
        R = nearest_correlation(C)
        change = float(np.abs(R - C).max())
        if change > calibration.max_repair:
            raise CalibrationError(
                f"target correlation matrix is not PSD; repair would move entries by {change:.3f}")
        logger.warning("latent correlation matrix repaired (max change %.4f)", change)
        C = R
    return names, C


def _daily_series(rng: np.random.Generator, mean: float, metric: str, n_days: int,
                  present: np.ndarray, scale: float = 1.0) -> np.ndarray:
    kind, amount = DAILY_JITTER[metric]
    sd = (amount if kind == "abs" else amount * mean) * scale
    e = rng.standard_normal(n_days)
    if present.any():
        e = e - e[present].mean()  # the observed days average to the person's mean
    return np.maximum(mean + sd * e, DAILY_FLOOR[metric])


@dataclass
class _People:
    """Person-level values before they are written out."""

    ids: List[str]
    values: Dict[str, np.ndarray]
    draw_dates: List[date]
    fasting: np.ndarray
    wearable_days: np.ndarray  # days of wearable data per person
    missing_age: np.ndarray


def _categorical(rng, table, n):
    labels = [t[0] for t in table]
    p = np.array([t[1] for t in table], dtype=float)
    return [labels[i] for i in rng.choice(len(labels), size=n, p=p / p.sum())]


def _conditions(rng, homa: np.ndarray) -> Dict[str, np.ndarray]:
    cls = np.where(homa < 1.5, 0, np.where(homa >= 2.9, 2, 1))
    out = {}
    for name, counts in CONDITION_COUNTS.items():
        rate = np.array(counts, dtype=float) / np.array(CLASS_SIZES)
        out[name] = rng.random(homa.size) < rate[cls]
    return out


def _plant(people: _People, rng: np.random.Generator, violations: Dict[str, int]
           ) -> Dict[str, int]:
    """Append participants that each fail exactly one QC gate."""
    from .ingestion import EXCLUSION_REASONS

    unknown = [k for k in violations if k not in EXCLUSION_REASONS]
    if unknown:
        raise ValueError(f"unknown QC violations {unknown}; choose from {EXCLUSION_REASONS}")
    counts = {k: int(violations.get(k, 0)) for k in EXCLUSION_REASONS}
    total = sum(counts.values())
    if total == 0:
        return counts
    start = len(people.ids)
    for k, v in people.values.items():
        src = rng.integers(0, start, size=total)
        people.values[k] = np.r_[v, v[src]]
    people.ids += [f"P{start + i + 1:05d}" for i in range(total)]
    people.draw_dates += [people.draw_dates[i] for i in rng.integers(0, start, size=total)]
    people.fasting = np.r_[people.fasting, np.ones(total, dtype=bool)]
    people.wearable_days = np.r_[people.wearable_days, np.full(total, people.wearable_days[0])]
    people.missing_age = np.r_[people.missing_age, np.zeros(total, dtype=bool)]
    j = start
    for reason in EXCLUSION_REASONS:
        for _ in range(counts[reason]):
            if reason == "not_fasting":
                people.fasting[j] = False
            elif reason == "bmi_out_of_range":
                people.values["bmi"][j] = 70.0
            elif reason == "homa_outlier":
                people.values["homa_ir"][j] = 16.0 + 4.0 * rng.random()
            elif reason == "insufficient_wearable_days":
                people.wearable_days[j] = 10
            else:
                people.missing_age[j] = True
            j += 1
    return counts


def _write(people: _People, out_dir, rng: np.random.Generator, span_days: int,
           missing_rate: float, jitter_scale: float, conditions: Dict[str, np.ndarray],
           genders: List[str], ethnicities: List[str]) -> CohortFiles:
    files = CohortFiles.in_dir(out_dir)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    v = people.values
    n = len(people.ids)
    heights = np.where(np.array([g == "Male" for g in genders]),
                       rng.normal(1.77, 0.07, n), rng.normal(1.63, 0.07, n))
    heights = np.clip(heights, 1.4, 2.1)
    weights = v["bmi"] * heights ** 2
    glucose = v["glucose"]
    insulin = v["homa_ir"] * HOMA_DENOMINATOR / glucose

    extra_p = list(COMORBIDITIES)
    p_rows = []
    for i, pid in enumerate(people.ids):
        p_rows.append([pid, "" if people.missing_age[i] else round(float(v["age"][i]), 1),
                       genders[i], ethnicities[i], float(heights[i]), float(weights[i]),
                       float(v["bmi"][i]), int(conditions["hypertension"][i]),
                       int(people.fasting[i])] + [int(conditions[c][i]) for c in extra_p])
    write_csv(files.participants_path, PARTICIPANT_COLUMNS + extra_p, p_rows)

    l_rows = []
    for i, pid in enumerate(people.ids):
        l_rows.append([pid, people.draw_dates[i].isoformat(), float(insulin[i]),
                       float(glucose[i])]
                      + [float(v[c][i]) for c in ("hba1c",) + LIPID_VARS]
                      + [float(v[c][i]) for c in METABOLIC_VARS])
    write_csv(files.labs_path, LAB_COLUMNS + list(METABOLIC_VARS), l_rows)

    def wear_rows():
        for i, pid in enumerate(people.ids):
            n_days = int(people.wearable_days[i])
            end = people.draw_dates[i]
            present = rng.random(span_days) >= missing_rate
            if n_days < span_days:
                present[:] = False
                present[span_days - n_days:] = True
            series = {m: _daily_series(rng, float(v[m][i]), m, span_days, present, jitter_scale)
                      for m in WEARABLE_VARS}
            for d in range(span_days):
                if not present[d]:
                    continue
                day = end - timedelta(days=span_days - d)
                yield [pid, day.isoformat(), round(float(series["rhr"][d]), 2),
                       round(float(series["hrv_rmssd"][d]), 2), int(round(series["steps"][d])),
                       int(round(series["sleep_minutes"][d]))]

    write_csv(files.wearables_path, WEARABLE_COLUMNS, wear_rows())
    return files


def _draw_dates(rng, n) -> List[date]:
    base = date(2023, 6, 1)
    return [base + timedelta(days=int(k)) for k in rng.integers(0, 365, size=n)]


def generate_synthetic_cohort(n: int, calibration: Optional[CohortCalibration] = None,
                              seed: int = 0, out_dir=".", span_days: int = 120,
                              missing_rate: float = 0.05, jitter_scale: float = 1.0,
                              qc_violations: Optional[Dict[str, int]] = None) -> CohortFiles:
    """Copula-sampled cohort; ``n`` clean participants plus any planted violations."""
    if n < 100:
        raise ValueError("the calibrated generator needs n >= 100")
    calibration = calibration or CohortCalibration()
    names, C = latent_matrix(calibration)
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(C)
    Z = rng.standard_normal((n, len(names))) @ L.T
    values = {name: calibration.marginals[name].transform(Z[:, j]) for j, name in enumerate(names)}
    people = _People([f"P{i + 1:05d}" for i in range(n)], values, _draw_dates(rng, n),
                     np.ones(n, dtype=bool), np.full(n, span_days), np.zeros(n, dtype=bool))
    planted = _plant(people, rng, qc_violations or {})
    m = len(people.ids)
    conditions = _conditions(rng, people.values["homa_ir"])
    files = _write(people, out_dir, rng, span_days, missing_rate, jitter_scale, conditions,
                   _categorical(rng, GENDERS, m), _categorical(rng, ETHNICITIES, m))
    write_json(Path(out_dir) / META_FILE, {
        "generator": "calibrated", "n": n, "seed": seed, "span_days": span_days,
        "expected_exclusions": planted, "calibration": calibration.to_dict(),
        "latent_correlation": {nm: float(C[0, j]) for j, nm in enumerate(names)},
    })
    return files


DEFAULT_COEFFICIENTS = {
    "glucose": 0.30, "bmi": 0.30, "rhr": 0.15, "triglycerides": 0.12, "hdl": -0.10,
    "steps": -0.12, "hrv_rmssd": -0.08,
}


@dataclass
class FunctionalSpec:
    """HOMA-IR = exp(intercept + sum_k c_k * clip(z_k, -3, 3)) + N(0, sigma^2).

    ``z_k`` standardizes feature k by its marginal centre and spread;
    wearable features enter through each person's mean level.
    """

    sigma: float = 0.3
    coefficients: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))
    intercept: float = math.log(1.8)
    jitter_scale: float = 1.0  # 0 gives constant daily wearable series
    span_days: int = 120
    missing_rate: float = 0.05

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def g(self, values: Dict[str, np.ndarray], marginals: Dict[str, Marginal]) -> np.ndarray:
        eta = self.intercept
        for name, c in self.coefficients.items():
            m = marginals[name]
            center = math.exp(m.loc) if m.kind == "lognormal" else m.loc
            spread = center * m.scale if m.kind == "lognormal" else m.scale
            eta = eta + c * np.clip((values[name] - center) / spread, -3.0, 3.0)
        return np.exp(eta)


def _independent_values(rng, n, marginals) -> Dict[str, np.ndarray]:
    names = [k for k in marginals if k != "homa_ir"]
    Z = rng.standard_normal((n, len(names)))
    return {k: marginals[k].transform(Z[:, j]) for j, k in enumerate(names)}


def sigma_for_ideal_r2(spec: FunctionalSpec, target_r2: float, n_mc: int = 200_000,
                       seed: int = 12345) -> float:
    """Noise sd giving ideal R2 = Var(g) / (Var(g) + sigma^2) by Monte Carlo."""
    if not 0 < target_r2 < 1:
        raise ValueError("target R2 must be in (0, 1)")
    marginals = _default_marginals()
    g = spec.g(_independent_values(np.random.default_rng(seed), n_mc, marginals), marginals)
    return float(math.sqrt(g.var() * (1.0 / target_r2 - 1.0)))


def generate_functional_cohort(n: int, spec: Optional[FunctionalSpec] = None, seed: int = 0,
                               out_dir=".", qc_violations: Optional[Dict[str, int]] = None
                               ) -> CohortFiles:
    """Cohort whose HOMA-IR is a known function of its features plus noise.

    The realised ideal R2, 1 - SS(noise) / SS(y around its mean), is written
    to the metadata file.
    """
    if n < 50:
        raise ValueError("the functional generator needs n >= 50")
    spec = spec or FunctionalSpec()
    marginals = _default_marginals()
    rng = np.random.default_rng(seed)
    values = _independent_values(rng, n, marginals)
    g = spec.g(values, marginals)
    y = np.clip(g + spec.sigma * rng.standard_normal(n), 0.05, 14.5)
    values["homa_ir"] = y
    resid = y - g
    dev = y - y.mean()
    ideal = 1.0 - float(resid @ resid) / float(dev @ dev)
    people = _People([f"P{i + 1:05d}" for i in range(n)], values, _draw_dates(rng, n),
                     np.ones(n, dtype=bool), np.full(n, spec.span_days), np.zeros(n, dtype=bool))
    planted = _plant(people, rng, qc_violations or {})
    m = len(people.ids)
    conditions = _conditions(rng, people.values["homa_ir"])
    files = _write(people, out_dir, rng, spec.span_days, spec.missing_rate, spec.jitter_scale,
                   conditions, _categorical(rng, GENDERS, m), _categorical(rng, ETHNICITIES, m))
    write_json(Path(out_dir) / META_FILE, {
        "generator": "functional", "n": n, "seed": seed, "span_days": spec.span_days,
        "expected_exclusions": planted, "ideal_r2": ideal, "spec": asdict(spec),
    })
    return files


def read_metadata(files_or_dir) -> dict:
    d = files_or_dir.participants_path.parent if isinstance(files_or_dir, CohortFiles) \
        else Path(files_or_dir)
    return read_json(d / META_FILE)
