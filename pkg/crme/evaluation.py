"""Metrics, estimators and the accuracy / error-correction experiments."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
import torch

from .baselines import IDW, KERNEL, KRIGING, BaselineSpec, baseline_estimate
from .config import configure_logging
from .core import DB, GRAY, RadioMap, write_gray_png
from .dataset import GrayCodec, SampleRecord, resample_record
from .errors import DatasetError, DomainMismatchError, ShapeMismatchError, UndefinedNormalizationError
from .models import Generator
from .utils import make_rng, panel_filename

logger = configure_logging()

NMSE = "nmse"
RMSE = "rmse"
MASKED_RMSE = "masked_rmse"
METRICS = (NMSE, RMSE, MASKED_RMSE)
LABEL_PANEL = "label"


@dataclass(frozen=True)
class EvalConfig:
    k_grid: tuple[int, ...] = (18, 62)
    metric_domain: str = GRAY
    render_count: int = 4
    baselines: tuple[BaselineSpec, ...] = (
        BaselineSpec(method=IDW),
        BaselineSpec(method=KERNEL),
        BaselineSpec(method=KRIGING),
    )

    def __post_init__(self) -> None:
        if not self.k_grid or any(k < 1 for k in self.k_grid):
            raise ValueError("k_grid needs at least one K >= 1")
        if self.metric_domain not in (GRAY, DB):
            raise ValueError(f"metric_domain must be {GRAY!r} or {DB!r}")
        if self.render_count < 0:
            raise ValueError("render_count must be >= 0")


def density_to_k(density: float, shape: tuple[int, int]) -> int:
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    return max(1, int(round(density * shape[0] * shape[1])))


def _grids(estimate: RadioMap | np.ndarray, label: RadioMap | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(estimate, RadioMap) and isinstance(label, RadioMap) and estimate.domain != label.domain:
        raise DomainMismatchError(label.domain, estimate.domain)
    e = np.asarray(estimate.grid if isinstance(estimate, RadioMap) else estimate, dtype=np.float64)
    l = np.asarray(label.grid if isinstance(label, RadioMap) else label, dtype=np.float64)
    if e.shape != l.shape:
        raise ShapeMismatchError(f"estimate {e.shape} and label {l.shape} differ")
    return e, l


def nmse(estimate: RadioMap | np.ndarray, label: RadioMap | np.ndarray) -> float:
    """``||estimate - label||^2 / ||label||^2``."""
    e, l = _grids(estimate, label)
    denom = float(np.sum(l**2))
    if denom == 0.0:
        raise UndefinedNormalizationError("NMSE is undefined for an all-zero label")
    return float(np.sum((e - l) ** 2)) / denom


def rmse(estimate: RadioMap | np.ndarray, label: RadioMap | np.ndarray) -> float:
    e, l = _grids(estimate, label)
    return float(np.sqrt(np.mean((e - l) ** 2)))


def masked_rmse(estimate: RadioMap | np.ndarray, label: RadioMap | np.ndarray, mask: np.ndarray) -> float | None:
    e, l = _grids(estimate, label)
    if mask.shape != l.shape:
        raise ShapeMismatchError(f"mask {mask.shape} and label {l.shape} differ")
    if not mask.any():
        return None
    return float(np.sqrt(np.mean((e[mask] - l[mask]) ** 2)))


class Estimator(Protocol):
    name: str

    def __call__(self, record: SampleRecord) -> RadioMap: ...


class GeneratorEstimator:
    def __init__(self, params: Generator, name: str = "gan-crme", device: str | torch.device = "cpu") -> None:
        self.params = params.to(device)
        self.name = name
        self.device = torch.device(device)

    def __call__(self, record: SampleRecord) -> RadioMap:
        x = torch.from_numpy(np.ascontiguousarray(record.input_image, dtype=np.float32)).unsqueeze(0)
        self.params.eval()
        with torch.no_grad():
            out = self.params(x.to(self.device))
        return RadioMap(np.clip(out[0, 0].double().cpu().numpy(), 0.0, 1.0), GRAY)


class BaselineEstimator:
    def __init__(self, spec: BaselineSpec, name: str | None = None) -> None:
        self.spec = spec
        self.name = name or spec.name

    def __call__(self, record: SampleRecord) -> RadioMap:
        return baseline_estimate(record, self.spec)


class LabelOracle:
    """Returns the label itself; every metric must come out as exactly zero."""

    name = "oracle"

    def __call__(self, record: SampleRecord) -> RadioMap:
        return record.label


@dataclass
class EvalRow:
    record_id: str
    method: str
    k: int
    flawed: bool
    nmse: float | None
    rmse: float
    masked_rmse: float | None = None


@dataclass
class AggregateRow:
    method: str
    k: int
    flawed: bool
    metric: str
    count: int
    mean: float
    median: float
    std: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    skipped: int = 0
    undefined: int = 0
    metric_domain: str = GRAY

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(row.method for row in self.rows))

    @property
    def k_values(self) -> list[int]:
        return sorted({row.k for row in self.rows})

    def values(self, metric: str, *, method: str | None = None, k: int | None = None) -> np.ndarray:
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        picked = [
            getattr(row, metric)
            for row in self.rows
            if (method is None or row.method == method) and (k is None or row.k == k)
        ]
        return np.asarray([v for v in picked if v is not None], dtype=np.float64)

    def median(self, metric: str, *, method: str, k: int) -> float:
        vals = self.values(metric, method=method, k=k)
        return float(np.median(vals)) if len(vals) else float("nan")

    def aggregates(self) -> list[AggregateRow]:
        groups: dict[tuple[str, int, bool], list[EvalRow]] = {}
        for row in self.rows:
            groups.setdefault((row.method, row.k, row.flawed), []).append(row)
        out: list[AggregateRow] = []
        for (method, k, flawed), rows in groups.items():
            for metric in METRICS:
                vals = np.asarray([getattr(r, metric) for r in rows if getattr(r, metric) is not None])
                if not len(vals):
                    continue
                out.append(
                    AggregateRow(
                        method=method,
                        k=k,
                        flawed=flawed,
                        metric=metric,
                        count=len(vals),
                        mean=float(np.mean(vals)),
                        median=float(np.median(vals)),
                        std=float(np.std(vals)),
                    )
                )
        return out

    def masked_trend(self, method: str) -> dict[int, float]:
        return {k: self.median(MASKED_RMSE, method=method, k=k) for k in self.k_values}

    def masked_decreasing(self, method: str) -> bool:
        trend = [v for _, v in sorted(self.masked_trend(method).items())]
        return len(trend) >= 2 and all(b < a for a, b in zip(trend, trend[1:]))


def _metric_maps(
    estimate: RadioMap,
    label: RadioMap,
    domain: str,
    codec: GrayCodec | None,
) -> tuple[np.ndarray, np.ndarray]:
    estimate.require(GRAY)
    label.require(GRAY)
    if domain == GRAY:
        return estimate.grid, label.grid
    if codec is None:
        raise ValueError("dB-domain metrics need the dataset's gray codec")
    return codec.decode(estimate.grid), codec.decode(label.grid)


def score_record(
    record: SampleRecord,
    estimate: RadioMap,
    *,
    method: str,
    k: int,
    domain: str = GRAY,
    codec: GrayCodec | None = None,
    masked: bool = False,
) -> EvalRow:
    e, l = _metric_maps(estimate, record.label, domain, codec)
    try:
        value = nmse(e, l)
    except UndefinedNormalizationError:
        value = None
    return EvalRow(
        record_id=record.record_id,
        method=method,
        k=k,
        flawed=record.flawed,
        nmse=value,
        rmse=rmse(e, l),
        masked_rmse=masked_rmse(e, l, record.removed_mask) if masked else None,
    )


def _as_list(estimators: Estimator | Sequence[Estimator]) -> list[Estimator]:
    if callable(estimators) and hasattr(estimators, "name"):
        return [estimators]  # type: ignore[list-item]
    return list(estimators)  # type: ignore[arg-type]


def _map_records(func: Callable[[SampleRecord], list[EvalRow]], records: Sequence[SampleRecord], workers: int) -> list[EvalRow]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(func, records))
    else:
        chunks = [func(record) for record in records]
    return [row for chunk in chunks for row in chunk]


def _sweep(
    estimators: list[Estimator],
    records: Sequence[SampleRecord],
    k_grid: Iterable[int],
    config: EvalConfig,
    codec: GrayCodec | None,
    seed: int,
    workers: int,
    masked: bool,
) -> EvalReport:
    report = EvalReport(metric_domain=config.metric_domain)
    for k in k_grid:

        def evaluate(record: SampleRecord, k: int = k) -> list[EvalRow]:
            resampled = resample_record(record, k, make_rng(seed, record.record_id, k))
            return [
                score_record(
                    resampled,
                    estimator(resampled),
                    method=estimator.name,
                    k=k,
                    domain=config.metric_domain,
                    codec=codec,
                    masked=masked,
                )
                for estimator in estimators
            ]

        report.rows.extend(_map_records(evaluate, records, workers))
        logger.info("evaluated K=%d on %d records", k, len(records))
    report.undefined = sum(1 for row in report.rows if row.nmse is None)
    if report.undefined:
        logger.warning("%d rows have an all-zero label; NMSE left undefined", report.undefined)
    return report


def run_accuracy_vs_samples(
    estimators: Estimator | Sequence[Estimator],
    records: Iterable[SampleRecord],
    k_grid: Iterable[int] | None = None,
    *,
    config: EvalConfig | None = None,
    codec: GrayCodec | None = None,
    seed: int = 0,
    out_dir: Path | None = None,
    workers: int = 1,
) -> EvalReport:
    """NMSE/RMSE per method at every K; RSS is re-drawn from the label per (record, K)."""
    config = config or EvalConfig()
    grid = list(k_grid) if k_grid is not None else list(config.k_grid)
    report = _sweep(_as_list(estimators), list(records), grid, config, codec, seed, workers, masked=False)
    if out_dir is not None:
        write_curve(report, out_dir / "curve.csv")
        plot_curve(report, out_dir / "curve.png")
    return report


def run_error_correction(
    estimators: Estimator | Sequence[Estimator],
    records: Iterable[SampleRecord],
    k_grid: Iterable[int] | None = None,
    *,
    config: EvalConfig | None = None,
    codec: GrayCodec | None = None,
    seed: int = 0,
    workers: int = 1,
) -> EvalReport:
    """Masked-region RMSE over the footprints of the buildings missing from the input map."""
    config = config or EvalConfig()
    grid = list(k_grid) if k_grid is not None else list(config.k_grid)
    usable: list[SampleRecord] = []
    skipped = 0
    for record in records:
        if any(not building.cells for building in record.meta.removed_buildings):
            raise DatasetError(f"record {record.record_id} lists removed buildings without footprints")
        if not record.flawed:
            skipped += 1
            continue
        usable.append(record)
    if skipped:
        logger.warning("skipped %d records with no removed buildings", skipped)
    report = _sweep(_as_list(estimators), usable, grid, config, codec, seed, workers, masked=True)
    report.skipped = skipped
    return report


def write_curve(report: EvalReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["method", "k", "median_nmse", "mean_nmse", "median_rmse", "mean_rmse"])
        for method in report.methods:
            for k in report.k_values:
                nm = report.values(NMSE, method=method, k=k)
                rm = report.values(RMSE, method=method, k=k)
                if not len(rm):
                    continue
                writer.writerow(
                    [
                        method,
                        k,
                        repr(float(np.median(nm))) if len(nm) else "",
                        repr(float(np.mean(nm))) if len(nm) else "",
                        repr(float(np.median(rm))),
                        repr(float(np.mean(rm))),
                    ]
                )
    return path


def plot_curve(report: EvalReport, path: Path, metric: str = NMSE) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for method in report.methods:
        ks = [k for k in report.k_values if len(report.values(metric, method=method, k=k))]
        ax.plot(ks, [report.median(metric, method=method, k=k) for k in ks], marker="o", label=method)
    ax.set_xlabel("RSS samples per map (K)")
    ax.set_ylabel(f"median {metric.upper()}")
    if metric == NMSE:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def render_maps(record: SampleRecord, estimates: Mapping[str, RadioMap], out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    if LABEL_PANEL in estimates:
        raise ValueError(f"{LABEL_PANEL!r} is reserved for the label panel")
    paths = [write_gray_png(record.label, out_dir / panel_filename(record.record_id, LABEL_PANEL))]
    for method, estimate in estimates.items():
        estimate.require(GRAY)
        if estimate.shape != record.shape:
            raise ShapeMismatchError(f"{method} estimate {estimate.shape} does not match {record.shape}")
        paths.append(write_gray_png(estimate, out_dir / panel_filename(record.record_id, method)))
    return paths
