"""Classical interpolation baselines over the RSS samples of a record."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .config import configure_logging
from .core import GRAY, RadioMap
from .dataset import SampleRecord
from .errors import InsufficientSamplesError

logger = configure_logging()

IDW = "idw"
KERNEL = "kernel"
KRIGING = "kriging"
METHODS = (IDW, KERNEL, KRIGING)


@dataclass(frozen=True)
class VariogramSpec:
    model: str = "exponential"
    range: float = 16.0
    sill: float = 0.01
    nugget: float = 0.0
    fit: bool = True
    nlags: int = 6

    def __post_init__(self) -> None:
        if self.model != "exponential":
            raise ValueError(f"unsupported variogram model {self.model!r}")
        if self.range <= 0 or self.sill <= 0:
            raise ValueError("variogram range and sill must be > 0")
        if self.nugget < 0 or self.nugget >= self.sill:
            raise ValueError("variogram nugget must lie in [0, sill)")
        if self.nlags < 1:
            raise ValueError("nlags must be >= 1")


@dataclass(frozen=True)
class BaselineSpec:
    method: str = IDW
    power: float = 2.0
    bandwidth: float = 4.0
    variogram: VariogramSpec = field(default_factory=VariogramSpec)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"baseline method must be one of {', '.join(METHODS)}")
        if self.power <= 0:
            raise ValueError("IDW power must be > 0")
        if self.bandwidth <= 0:
            raise ValueError("kernel bandwidth must be > 0")

    @property
    def name(self) -> str:
        return self.method


def _samples(record: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    locations = np.asarray(record.meta.sample_locations, dtype=np.int64).reshape(-1, 2)
    if len(locations) == 0:
        raise InsufficientSamplesError(f"record {record.record_id} has no RSS samples")
    values = record.rss[locations[:, 0], locations[:, 1]]
    return locations, values


def _grid_points(shape: tuple[int, int]) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return np.column_stack([xs.ravel(), ys.ravel()])


def _pin_samples(estimate: np.ndarray, locations: np.ndarray, values: np.ndarray) -> np.ndarray:
    estimate[locations[:, 0], locations[:, 1]] = values
    return estimate


def idw_grid(locations: np.ndarray, values: np.ndarray, shape: tuple[int, int], power: float) -> np.ndarray:
    points = _grid_points(shape)
    dist = cdist(points, locations.astype(np.float64))
    with np.errstate(divide="ignore"):
        weights = 1.0 / dist**power
    hit = ~np.isfinite(weights)
    weights[hit.any(axis=1)] = 0.0
    weights[hit] = 1.0
    estimate = (weights @ values) / weights.sum(axis=1)
    return _pin_samples(estimate.reshape(shape), locations, values)


def kernel_grid(locations: np.ndarray, values: np.ndarray, shape: tuple[int, int], bandwidth: float) -> np.ndarray:
    """Nadaraya-Watson regression with a Gaussian kernel."""
    points = _grid_points(shape)
    log_w = -cdist(points, locations.astype(np.float64), "sqeuclidean") / (2.0 * bandwidth**2)
    log_w -= logsumexp(log_w, axis=1, keepdims=True)
    return (np.exp(log_w) @ values).reshape(shape)


def exponential_variogram(params: np.ndarray | tuple[float, float, float], dist: np.ndarray) -> np.ndarray:
    sill, rng, nugget = (float(p) for p in params)
    gamma = (sill - nugget) * (1.0 - np.exp(-dist / (rng / 3.0))) + nugget
    return np.where(dist == 0, 0.0, gamma)


def empirical_variogram(locations: np.ndarray, values: np.ndarray, nlags: int) -> tuple[np.ndarray, np.ndarray]:
    coords = locations.astype(np.float64)
    upper = np.triu_indices(len(values), k=1)
    d = cdist(coords, coords)[upper]
    g = 0.5 * (values[:, None] - values[None, :])[upper] ** 2
    edges = np.linspace(d.min(), d.max() + 1e-3, nlags + 1)
    lags, semivariance = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        inside = (d >= lo) & (d < hi)
        if inside.any():
            lags.append(d[inside].mean())
            semivariance.append(g[inside].mean())
    return np.asarray(lags), np.asarray(semivariance)


def fit_variogram(locations: np.ndarray, values: np.ndarray, spec: VariogramSpec) -> tuple[float, float, float]:
    """Fit sill and range by SLSQP; the nugget stays as configured."""
    default = (spec.sill, spec.range, spec.nugget)
    if not spec.fit:
        return default
    lags, semivariance = empirical_variogram(locations, values, spec.nlags)
    if len(lags) < 2 or semivariance.max() <= spec.nugget:
        return default

    def error(params: np.ndarray) -> float:
        diff = exponential_variogram((params[0], params[1], spec.nugget), lags) - semivariance
        return float(np.sqrt(np.mean(diff**2)))

    top = float(semivariance.max())
    x0 = [top, 0.5 * float(lags.max())]
    bounds = ((spec.nugget + 1e-9, 10.0 * top), (1e-3, float(lags.max())))
    result = minimize(error, x0, method="SLSQP", bounds=bounds)
    if not result.success or not np.all(np.isfinite(result.x)):
        logger.debug("variogram fit failed (%s); using configured parameters", result.message)
        return default
    return float(result.x[0]), float(result.x[1]), spec.nugget


def _check_kriging_layout(locations: np.ndarray) -> None:
    if len(locations) < 3:
        raise InsufficientSamplesError(f"kriging needs >= 3 samples, got {len(locations)}")
    centred = locations - locations.mean(axis=0)
    if np.linalg.matrix_rank(centred.astype(np.float64)) < 2:
        raise InsufficientSamplesError("kriging needs samples that are not all collinear")


def kriging_grid(
    locations: np.ndarray,
    values: np.ndarray,
    shape: tuple[int, int],
    spec: VariogramSpec,
) -> np.ndarray:
    """Ordinary kriging: one (n+1)x(n+1) system solved for every grid cell at once."""
    _check_kriging_layout(locations)
    if np.ptp(values) == 0:
        return np.full(shape, float(values[0]))
    params = fit_variogram(locations, values, spec)
    coords = locations.astype(np.float64)
    n = len(values)
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = -exponential_variogram(params, cdist(coords, coords))
    np.fill_diagonal(a, 0.0)
    a[n, :] = 1.0
    a[:, n] = 1.0
    a[n, n] = 0.0
    points = _grid_points(shape)
    b = np.ones((n + 1, len(points)))
    b[:n] = -exponential_variogram(params, cdist(coords, points.astype(np.float64)))
    weights = np.linalg.solve(a, b)
    estimate = (values @ weights[:n]).reshape(shape)
    if params[2] == 0:
        estimate = _pin_samples(estimate, locations, values)
    return estimate


def baseline_estimate(record: SampleRecord, spec: BaselineSpec) -> RadioMap:
    locations, values = _samples(record)
    if spec.method == IDW:
        grid = idw_grid(locations, values, record.shape, spec.power)
    elif spec.method == KERNEL:
        grid = kernel_grid(locations, values, record.shape, spec.bandwidth)
    else:
        grid = kriging_grid(locations, values, record.shape, spec.variogram)
    return RadioMap(np.clip(grid, 0.0, 1.0), GRAY)
