"""Data ingestion, synthetic datasets, and model persistence.

CSV carries data and traces (numbers printed with 17 significant digits so
round-trips are exact at double precision), JSON carries models, and run
metadata goes out as single JSON lines.  Synthetic generators return the
sampled data together with the ground truth that produced it, so recovery
tests can close the loop.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import factor_analysis, ppca, vae
from .factor_analysis import FactorModel
from .rng import Rng, rng

SYNTHETIC_KINDS = ("fa_model", "gaussian_mixture", "ring2d")


class HarnessError(ValueError):
    """Malformed file, unknown kind, or invalid parameters."""


@dataclass
class Dataset:
    """A finite (n, d) value matrix with optional column names."""

    values: np.ndarray
    column_names: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise HarnessError("dataset must be a non-empty (n, d) matrix")
        if not np.all(np.isfinite(self.values)):
            raise HarnessError("dataset contains non-finite values")
        if self.column_names is not None:
            if len(self.column_names) != self.values.shape[1]:
                raise HarnessError("column_names length must match columns")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass
class RunReport:
    """One CLI run's machine-readable summary."""

    command: str
    seed: int
    metrics: dict[str, float] = field(default_factory=dict)
    trace_path: str | None = None

    def to_json_line(self) -> str:
        for key, value in self.metrics.items():
            if isinstance(value, float) and not np.isfinite(value):
                raise HarnessError(f"metric {key!r} is not finite")
        payload = {
            "command": self.command,
            "seed": self.seed,
            "metrics": self.metrics,
        }
        if self.trace_path is not None:
            payload["trace_path"] = self.trace_path
        return json.dumps(payload)


def _looks_like_header(row) -> bool:
    for cell in row:
        try:
            float(cell)
        except ValueError:
            return True
    return False


def read_csv(path) -> Dataset:
    """Read a numeric CSV with an optional header row.

    A non-numeric cell in the body raises an error naming its (row, column)
    location, both 1-based and counted over the whole file.
    """
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise HarnessError(f"{path}: file is empty")
    names = None
    start = 0
    if _looks_like_header(rows[0]):
        names = [cell.strip() for cell in rows[0]]
        start = 1
    values = []
    for r, row in enumerate(rows[start:], start=start + 1):
        parsed = []
        for c, cell in enumerate(row, start=1):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise HarnessError(
                    f"{path}: non-numeric cell {cell.strip()!r} "
                    f"at row {r} col {c}"
                ) from None
        values.append(parsed)
    if not values:
        raise HarnessError(f"{path}: no data rows")
    widths = {len(row) for row in values}
    if len(widths) != 1:
        raise HarnessError(f"{path}: ragged rows (widths {sorted(widths)})")
    return Dataset(np.asarray(values, dtype=np.float64), names)


def write_csv(dataset, path) -> None:
    """Write a Dataset (or bare matrix) with 17-significant-digit cells."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset(np.atleast_2d(np.asarray(dataset, dtype=np.float64)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if dataset.column_names is not None:
            writer.writerow(dataset.column_names)
        for row in dataset.values:
            writer.writerow([f"{cell:.17g}" for cell in row])


def center(dataset: Dataset) -> tuple[Dataset, np.ndarray]:
    """Subtract column means; returns the centered dataset and the means."""
    mean = np.mean(dataset.values, axis=0)
    return Dataset(dataset.values - mean, dataset.column_names), mean


def make_synthetic(kind: str, params: dict, n: int, seed: int):
    """Deterministic synthetic data: (Dataset, ground-truth record).

    Kinds:

    * ``fa_model``: linear-Gaussian generative samples.  When ``loading``/
      ``offset``/``noise_diag`` are supplied the generator delegates to
      factor_analysis.sample_data on a fresh stream, so outputs match it
      exactly; otherwise parameters are drawn first from the same stream.
    * ``gaussian_mixture``: equal-weight isotropic mixture around ``means``.
    * ``ring2d``: radius ``radius`` plus radial jitter ``noise`` * clipped
      standard normal (clipped at 3, so every point stays inside the
      [radius - 3 noise, radius + 3 noise] band by construction).
    """
    n = int(n)
    if n < 1:
        raise HarnessError("n must be >= 1")
    params = dict(params or {})
    rand = Rng(seed)

    if kind == "fa_model":
        if {"loading", "offset", "noise_diag"} <= params.keys():
            model = FactorModel(
                np.asarray(params["loading"], dtype=np.float64),
                np.asarray(params["offset"], dtype=np.float64),
                np.asarray(params["noise_diag"], dtype=np.float64),
            )
        else:
            d = int(params.get("d", 5))
            p = int(params.get("p", 2))
            loading = rand.normal((d, p))
            offset = rand.normal((d,))
            noise = 0.1 + 0.4 * rand.uniform((d,))
            model = FactorModel(loading, offset, noise)
        data = factor_analysis.sample_data(model, n, rand)
        truth = {
            "kind": kind,
            "loading": model.loading.tolist(),
            "offset": model.offset.tolist(),
            "noise_diag": model.noise_diag.tolist(),
        }
        return Dataset(data), truth

    if kind == "gaussian_mixture":
        means = np.asarray(
            params.get("means", [[-2.0, 0.0], [2.0, 0.0]]), dtype=np.float64
        )
        var = float(params.get("var", 0.25))
        if means.ndim != 2 or var <= 0:
            raise HarnessError("gaussian_mixture needs (k, d) means, var > 0")
        k, d = means.shape
        labels = np.minimum((rand.uniform(n) * k).astype(int), k - 1)
        data = means[labels] + np.sqrt(var) * rand.normal((n, d))
        truth = {"kind": kind, "means": means.tolist(), "var": var,
                 "labels": labels.tolist()}
        return Dataset(data), truth

    if kind == "ring2d":
        radius = float(params.get("radius", 3.0))
        noise = float(params.get("noise", 0.1))
        if radius <= 0 or noise < 0:
            raise HarnessError("ring2d needs radius > 0, noise >= 0")
        angle = 2.0 * np.pi * rand.uniform(n)
        jitter = np.clip(rand.normal(n), -3.0, 3.0)
        radial = radius + noise * jitter
        data = np.column_stack([radial * np.cos(angle), radial * np.sin(angle)])
        truth = {"kind": kind, "radius": radius, "noise": noise}
        return Dataset(data), truth

    raise HarnessError(f"unknown synthetic kind {kind!r}; "
                       f"expected one of {SYNTHETIC_KINDS}")


# -- model persistence --------------------------------------------------------

_SERIALIZERS = {
    FactorModel: factor_analysis.to_dict,
    ppca.PpcaModel: ppca.to_dict,
    ppca.PcaBaseline: ppca.pca_to_dict,
    vae.VaeModel: vae.to_dict,
}

_PARSERS = {
    "fa": factor_analysis.from_dict,
    "ppca": ppca.from_dict,
    "pca": ppca.pca_from_dict,
    "vae": vae.from_dict,
}


def save_model(model, path) -> None:
    """Serialize any supported model to its fixed JSON schema."""
    for cls, serializer in _SERIALIZERS.items():
        if isinstance(model, cls):
            with open(path, "w") as fh:
                json.dump(serializer(model), fh)
                fh.write("\n")
            return
    raise HarnessError(f"cannot serialize {type(model).__name__}")


def load_model(path):
    """Load a model JSON file, dispatching on its "type" field."""
    with open(path) as fh:
        obj = json.load(fh)
    kind = obj.get("type")
    if kind not in _PARSERS:
        raise HarnessError(f"unknown model type {kind!r} in {path}")
    return _PARSERS[kind](obj)


__all__ = [
    "Dataset",
    "HarnessError",
    "RunReport",
    "center",
    "load_model",
    "make_synthetic",
    "read_csv",
    "rng",
    "save_model",
    "write_csv",
]
