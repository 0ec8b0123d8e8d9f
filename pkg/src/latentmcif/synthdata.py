"""Synthetic g/r light-curve populations standing in for the 17-class simulations.

Each class has a parametric template.  Rise-decay transients follow

    f(t) = A * (1 - exp(-(t - t0) / tau_rise)) * exp(-(t - t0) / tau_decay),  t > t0

and are zero before ``t0``.  Periodic classes are sinusoids on a constant
baseline and stochastic classes an AR(1) (Ornstein-Uhlenbeck) process on a
baseline.  Times are days relative to trigger, defined as the first time the
noiseless g-band flux reaches ``TRIGGER_FRACTION`` of its peak.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import LightCurve, write_light_curves
from .seeding import derive_seed

RISE_DECAY = "rise-decay"
PERIODIC = "periodic"
STOCHASTIC = "stochastic"

TRIGGER_FRACTION = 0.2
WINDOW_START = -30.0
WINDOW_END_RANGE = (40.0, 100.0)

# Objects per class summed over training/validation/test splits
REFERENCE_TOTALS = {
    "SNIa": 11587, "SNIa-91bg": 13000, "SNIax": 13000, "SNIb": 5267, "SNIc": 1583,
    "SNIc-BL": 1423, "SNII": 13000, "SNIIn": 13000, "SNIIb": 12323, "TDE": 11354,
    "SLSN-I": 12880, "AGN": 10561,
    "CaRT": 10353, "KNe": 11166, "PISN": 10840, "ILOT": 11128, "uLens-BSR": 11244,
}
ANOMALOUS_CLASSES = ("CaRT", "KNe", "PISN", "ILOT", "uLens-BSR")
HARD_ANOMALY = "CaRT"
DISTANT_COMMON = ("SLSN-I", "AGN")


@dataclass(frozen=True)
class ClassTemplate:
    """Parameters of one class; rise/decay times are jittered log-normally per object.

    For periodic classes ``rise_time`` is the period and ``decay_time`` unused
    beyond validation; for stochastic classes ``decay_time`` is the AR(1)
    correlation time.  ``variability`` is the fractional amplitude of periodic
    or stochastic variation.
    """

    name: str
    kind: str
    rise_time: float
    decay_time: float
    peak_flux_range: tuple[float, float]
    color_ratio: float
    anomalous: bool = False
    redshift_range: tuple[float, float] = (0.02, 0.3)
    variability: float = 0.3
    jitter: float = 0.15

    def __post_init__(self) -> None:
        if self.kind not in (RISE_DECAY, PERIODIC, STOCHASTIC):
            raise ValueError(f"unknown template kind {self.kind!r}")
        if not (self.rise_time > 0 and self.decay_time > 0):
            raise ValueError(f"{self.name}: rise_time and decay_time must be positive")
        lo, hi = self.peak_flux_range
        if not lo < hi:
            raise ValueError(f"{self.name}: peak_flux_range must have lo < hi")


DEFAULT_TEMPLATES = (
    ClassTemplate("SNIa", RISE_DECAY, 4.0, 25.0, (100.0, 400.0), 0.8),
    ClassTemplate("SNIa-91bg", RISE_DECAY, 3.0, 14.0, (60.0, 200.0), 1.4),
    ClassTemplate("SNIax", RISE_DECAY, 2.5, 18.0, (60.0, 250.0), 1.0),
    ClassTemplate("SNIb", RISE_DECAY, 6.0, 28.0, (80.0, 300.0), 1.2),
    ClassTemplate("SNIc", RISE_DECAY, 5.0, 22.0, (80.0, 300.0), 1.3),
    ClassTemplate("SNIc-BL", RISE_DECAY, 3.5, 16.0, (80.0, 300.0), 1.1),
    ClassTemplate("SNII", RISE_DECAY, 7.0, 90.0, (60.0, 250.0), 0.9),
    ClassTemplate("SNIIn", RISE_DECAY, 15.0, 110.0, (80.0, 300.0), 1.0),
    ClassTemplate("SNIIb", RISE_DECAY, 5.0, 40.0, (60.0, 250.0), 1.1),
    ClassTemplate("TDE", RISE_DECAY, 20.0, 60.0, (80.0, 300.0), 0.6, redshift_range=(0.05, 0.4)),
    ClassTemplate("SLSN-I", RISE_DECAY, 35.0, 140.0, (100.0, 400.0), 0.7, redshift_range=(0.4, 1.4)),
    ClassTemplate("AGN", STOCHASTIC, 1.0, 40.0, (100.0, 400.0), 1.0, redshift_range=(0.3, 2.0),
                  variability=0.25),
    # CaRT deliberately overlaps the stripped-envelope supernova parameters
    ClassTemplate("CaRT", RISE_DECAY, 4.5, 21.0, (60.0, 250.0), 1.25, anomalous=True,
                  redshift_range=(0.01, 0.15)),
    ClassTemplate("KNe", RISE_DECAY, 0.5, 2.0, (60.0, 250.0), 2.2, anomalous=True,
                  redshift_range=(0.005, 0.05)),
    ClassTemplate("PISN", RISE_DECAY, 200.0, 800.0, (100.0, 400.0), 1.3, anomalous=True,
                  redshift_range=(1.2, 2.5)),
    ClassTemplate("ILOT", RISE_DECAY, 1.0, 4.0, (60.0, 250.0), 1.9, anomalous=True,
                  redshift_range=(0.001, 0.02)),
    ClassTemplate("uLens-BSR", PERIODIC, 20.0, 1.0, (60.0, 250.0), 1.0, anomalous=True,
                  redshift_range=(0.0, 0.0), variability=0.95),
)


@dataclass
class PopulationConfig:
    templates: list[ClassTemplate]
    counts: dict[str, int]
    cadence_days: float = 3.0
    snr_range: tuple[float, float] = (8.0, 40.0)
    mwebv_range: tuple[float, float] = (0.0, 0.3)
    seed: int = 0
    noise: bool = True

    def __post_init__(self) -> None:
        if self.cadence_days <= 0:
            raise ValueError("cadence_days must be positive")
        names = {t.name for t in self.templates}
        for c, n in self.counts.items():
            if c not in names:
                raise ValueError(f"count given for unknown class {c!r}")
            if n < 0:
                raise ValueError(f"negative count for class {c!r}")

    @property
    def anomalous_classes(self) -> list[str]:
        return [t.name for t in self.templates if t.anomalous]

    @property
    def common_classes(self) -> list[str]:
        return [t.name for t in self.templates if not t.anomalous]

    def to_dict(self) -> dict:
        return {
            "templates": [asdict(t) for t in self.templates],
            "counts": dict(self.counts),
            "cadence_days": self.cadence_days,
            "snr_range": list(self.snr_range),
            "mwebv_range": list(self.mwebv_range),
            "seed": self.seed,
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PopulationConfig":
        templates = [ClassTemplate(**{**t, "peak_flux_range": tuple(t["peak_flux_range"]),
                                      "redshift_range": tuple(t["redshift_range"])})
                     for t in doc["templates"]]
        return cls(templates, dict(doc["counts"]), doc["cadence_days"], tuple(doc["snr_range"]),
                   tuple(doc.get("mwebv_range", (0.0, 0.3))), doc["seed"], doc.get("noise", True))


def default_population(scale: float = 0.01, seed: int = 0, min_count: int = 3) -> PopulationConfig:
    """All 17 templates with per-class counts proportional to the reference totals."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    counts = {name: max(min_count, int(round(total * scale))) for name, total in REFERENCE_TOTALS.items()}
    return PopulationConfig(list(DEFAULT_TEMPLATES), counts, seed=seed)


def rise_decay_shape(x: np.ndarray, tau_rise: float, tau_decay: float) -> np.ndarray:
    """Unit-amplitude template at time ``x`` since onset (zero for x <= 0)."""
    x = np.asarray(x, dtype=np.float64)
    pos = np.maximum(x, 0.0)
    return np.where(x > 0, (1.0 - np.exp(-pos / tau_rise)) * np.exp(-pos / tau_decay), 0.0)


def rise_decay_peak_time(tau_rise: float, tau_decay: float) -> float:
    """Time since onset of the template maximum, tau_r * ln(1 + tau_d / tau_r)."""
    return tau_rise * math.log1p(tau_decay / tau_rise)


def _trigger_offset(tau_rise: float, tau_decay: float) -> float:
    """Time since onset at which the template first reaches TRIGGER_FRACTION of peak."""
    tp = rise_decay_peak_time(tau_rise, tau_decay)
    peak = float(rise_decay_shape(np.array([tp]), tau_rise, tau_decay)[0])
    lo, hi = 0.0, tp
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if rise_decay_shape(np.array([mid]), tau_rise, tau_decay)[0] < TRIGGER_FRACTION * peak:
            lo = mid
        else:
            hi = mid
    return hi


def _sample_times(rng: np.random.Generator, cadence: float, start: float, end: float) -> np.ndarray:
    n_guess = int((end - start) / cadence * 2) + 8
    gaps = rng.exponential(cadence, size=n_guess)
    t = start + np.cumsum(gaps)
    while t[-1] < end:
        t = np.concatenate([t, t[-1] + np.cumsum(rng.exponential(cadence, size=n_guess))])
    return t[t < end]


def _object(template: ClassTemplate, cfg: PopulationConfig, object_id: str, rng: np.random.Generator):
    jit = np.exp(rng.normal(0.0, template.jitter, size=2))
    tau_r, tau_d = template.rise_time * jit[0], template.decay_time * jit[1]
    peak = rng.uniform(*template.peak_flux_range)
    end = rng.uniform(*WINDOW_END_RANGE)
    times, bands = [], []
    for b in (0, 1):
        tb = _sample_times(rng, cfg.cadence_days, WINDOW_START, end)
        times.append(tb)
        bands.append(np.full(tb.shape, b))
    t = np.concatenate(times)
    band = np.concatenate(bands)
    order = np.argsort(t, kind="stable")
    t, band = t[order], band[order]
    colour = np.where(band == 1, template.color_ratio, 1.0)
    truth = {"object_id": object_id, "label": template.name, "peak_flux": peak}
    if template.kind == RISE_DECAY:
        trig = _trigger_offset(tau_r, tau_d)
        t0 = -trig + rng.normal(0.0, 0.5)
        norm = peak / float(rise_decay_shape(np.array([rise_decay_peak_time(tau_r, tau_d)]), tau_r, tau_d)[0])
        model = norm * colour * rise_decay_shape(t - t0, tau_r, tau_d)
        truth.update(t0=t0, tau_rise=tau_r, tau_decay=tau_d, amplitude=norm)
    elif template.kind == PERIODIC:
        period = tau_r
        phase = rng.uniform(0, 2 * np.pi)
        model = peak * colour * (1.0 + template.variability * np.sin(2 * np.pi * t / period + phase))
        truth.update(period=period, phase=phase)
    else:
        x = np.empty(t.shape)
        x[0] = rng.normal()
        for i in range(1, len(t)):
            rho = math.exp(-(t[i] - t[i - 1]) / tau_d)
            x[i] = rho * x[i - 1] + math.sqrt(1.0 - rho * rho) * rng.normal()
        model = peak * colour * (1.0 + template.variability * x)
        truth.update(tau=tau_d)
    snr = rng.uniform(*cfg.snr_range)
    err = (peak / snr) * rng.uniform(0.8, 1.2, size=t.shape)
    flux = model + (rng.normal(size=t.shape) * err if cfg.noise else 0.0)
    zlo, zhi = template.redshift_range
    z = zlo if zhi <= zlo else rng.uniform(zlo, zhi)
    ebv = rng.uniform(*cfg.mwebv_range)
    truth.update(snr=snr, redshift=z, mwebv=ebv, trigger_mjd=58000.0 + rng.uniform(0.0, 1000.0))
    lc = LightCurve(object_id, t, flux, err, band, z, ebv, template.name)
    return lc, truth, model


def generate(config: PopulationConfig, *, return_truth: bool = False):
    """Generate the population; objects are ordered by class order then index.

    With ``return_truth`` also returns per-object generator parameters and
    noiseless model fluxes.
    """
    curves, truths, models = [], [], []
    k = 0
    for ci, tmpl in enumerate(config.templates):
        for i in range(config.counts.get(tmpl.name, 0)):
            rng = np.random.default_rng(derive_seed(config.seed, "object", tmpl.name, i))
            lc, truth, model = _object(tmpl, config, f"obj{k:07d}", rng)
            curves.append(lc)
            truths.append(truth)
            models.append(model)
            k += 1
    if return_truth:
        return curves, truths, models
    return curves


def write_population(
    out_dir: str | Path, config: PopulationConfig, curves: Sequence[LightCurve] | None = None,
    truths: Sequence[dict] | None = None, extra: Mapping | None = None,
) -> tuple[Path, Path]:
    """Write ``lightcurves.csv`` and its ``manifest.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if curves is None or truths is None:
        curves, truths, _ = generate(config, return_truth=True)
    csv_path = out / "lightcurves.csv"
    write_light_curves(csv_path, curves)
    manifest = {
        "config": config.to_dict(),
        "anomalous_classes": config.anomalous_classes,
        "common_classes": config.common_classes,
        "n_objects": len(curves),
        "objects": [{k: v for k, v in t.items()} for t in truths],
    }
    if extra:
        manifest.update(extra)
    man_path = out / "manifest.json"
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return csv_path, man_path


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def with_counts(config: PopulationConfig, counts: Mapping[str, int]) -> PopulationConfig:
    return replace(config, counts=dict(counts))
