"""Steady-state malaria transmission model: daily weather -> daily R0.

R0 on day i is a Ross-Macdonald expression evaluated on trailing means of
temperature and rainfall:

    R0 = m * a**2 * b * s**n / (r * -ln s)

with sporogonic duration ``n = degree_days / (T - T_min)``, daily mosquito
survival ``s`` from a quadratic-Gompertz temperature scheme, and vector
density ``m`` saturating in rainfall (Michaelis-Menten).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .timeseries import DailyWeather, ForecastEnsemble, ImpactSeries

SURVIVAL_CLAMP = 1.0 - 1e-12


@dataclass(frozen=True)
class TransmissionParams:
    degree_days: float = 111.0
    temp_threshold: float = 16.0
    survival_quad: tuple = (-4.4, 1.31, -0.03)
    biting_rate: float = 0.2
    transmission_efficiency: float = 0.5
    recovery_rate: float = 0.01
    vector_density_max: float = 20.0
    rain_half_saturation: float = 2.0
    rain_window_days: int = 1
    temp_window_days: int = 1

    def __post_init__(self):
        object.__setattr__(self, "survival_quad", tuple(float(c) for c in self.survival_quad))
        if len(self.survival_quad) != 3:
            raise ValueError("survival_quad needs exactly three coefficients")
        for name in ("degree_days", "biting_rate", "transmission_efficiency", "recovery_rate",
                     "vector_density_max", "rain_half_saturation"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not math.isfinite(self.temp_threshold):
            raise ValueError("temp_threshold must be finite")
        for name in ("rain_window_days", "temp_window_days"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def trailing_mean(series, window: int, index: int) -> float:
    lo = max(0, index - window + 1)
    chunk = series[lo:index + 1]
    return float(sum(chunk) / len(chunk))


def trailing_means(series: np.ndarray, window: int) -> np.ndarray:
    """Vectorised ``trailing_mean`` for every index.

    Full windows are averaged from their own contents only, so a value never
    depends on anything before its window.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    out = np.empty(n)
    head = min(window - 1, n)
    if head:
        out[:head] = np.cumsum(x[:head]) / np.arange(1, head + 1)
    if n >= window:
        out[window - 1:] = sliding_window_view(x, window).mean(axis=1)
    return out


def daily_survival(t_mean, p: TransmissionParams):
    """Daily survival probability; accepts scalars or arrays."""
    c0, c1, c2 = p.survival_quad
    t = np.asarray(t_mean, dtype=np.float64)
    g = c0 + c1 * t + c2 * t * t
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(g > 0, np.exp(-1.0 / np.where(g > 0, g, 1.0)), 0.0)
    s = np.clip(s, 0.0, SURVIVAL_CLAMP)
    return float(s) if s.ndim == 0 else s


def r0_from_drivers(t_bar: np.ndarray, p_bar: np.ndarray, p: TransmissionParams) -> np.ndarray:
    """R0 evaluated pointwise on already-smoothed temperature and rainfall."""
    t_bar = np.asarray(t_bar, dtype=np.float64)
    p_bar = np.asarray(p_bar, dtype=np.float64)
    excess = t_bar - p.temp_threshold
    warm = excess > 0
    s = daily_survival(t_bar, p)
    s = np.asarray(s, dtype=np.float64)
    alive = warm & (s > 0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        n = p.degree_days / np.where(warm, excess, 1.0)
        m = p.vector_density_max * p_bar / (p_bar + p.rain_half_saturation)
        log_s = np.log(np.where(alive, s, 0.5))
        r0 = (m * p.biting_rate ** 2 * p.transmission_efficiency * np.exp(n * log_s)
              / (p.recovery_rate * -log_s))
    r0 = np.where(alive & np.isfinite(r0), r0, 0.0)
    return np.maximum(r0, 0.0)


def compute_r0(weather, p: TransmissionParams | None = None, member_id: int = 0) -> ImpactSeries:
    """R0 series for one member.

    ``weather`` is either a list of ``DailyWeather`` or a ``(temperature,
    precipitation)`` pair of arrays.
    """
    p = p or TransmissionParams()
    if isinstance(weather, tuple) and len(weather) == 2 and not isinstance(weather[0], DailyWeather):
        temp, rain = (np.asarray(a, dtype=np.float64) for a in weather)
    else:
        temp = np.array([w.temperature for w in weather], dtype=np.float64)
        rain = np.array([w.precipitation for w in weather], dtype=np.float64)
    if temp.size == 0:
        raise ValueError("weather series is empty")
    t_bar = trailing_means(temp, p.temp_window_days)
    p_bar = trailing_means(rain, p.rain_window_days)
    return ImpactSeries(member_id, r0_from_drivers(t_bar, p_bar, p))


def propagate(ensemble: ForecastEnsemble, p: TransmissionParams | None = None) -> list[ImpactSeries]:
    """Run every ensemble member through the impact model (row order preserved)."""
    p = p or TransmissionParams()
    return [compute_r0((ensemble.temperature[j], ensemble.precipitation[j]), p, int(mid))
            for j, mid in enumerate(ensemble.member_ids)]


def impact_matrix(impacts: list[ImpactSeries], member_ids) -> np.ndarray:
    """Stack impact series into an ``(N, H)`` array following ``member_ids`` order."""
    by_id = {s.member_id: s for s in impacts}
    try:
        return np.stack([by_id[int(m)].values for m in member_ids])
    except KeyError as exc:
        raise KeyError(f"no impact series for member {exc.args[0]}") from None
