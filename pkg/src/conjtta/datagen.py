"""Two-class Gaussian clusters under an interpolated mean/covariance shift.

Source clusters have means drawn from ``N(k_source * 1, I)``, target
clusters from ``N(k_target * 1, I)``; each covariance is ``U D U^T`` with
``U`` Haar-orthogonal and ``D`` diagonal with entries uniform in
``d_range``.  A shift of strength ``lam`` mixes source and target
parameters convexly.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, ParseError

SHIFT_LEVELS = {"easy": 0.6, "moderate": 0.65, "hard": 0.7}


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class ClusterParams:
    mu_pos: np.ndarray
    mu_neg: np.ndarray
    sigma_pos: np.ndarray
    sigma_neg: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu_pos.shape[0]


@dataclass
class GaussianShiftSpec:
    dim: int = 100
    lam: float = 0.0
    k_source: float = 0.0
    k_target: float = 1.0
    d_range: tuple = (0.5, 2.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        lo, hi = self.d_range
        if not (0 < lo <= hi):
            raise ConfigError(f"d_range must satisfy 0 < low <= high, got {self.d_range}")
        self.d_range = (float(lo), float(hi))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d_range"] = list(self.d_range)
        return d


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    role: str = "test_stream"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DimensionError("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def class_indices(self) -> np.ndarray:
        """Labels as class indices (-1 -> 0, +1 -> 1)."""
        return (np.asarray(self.labels) > 0).astype(int)

    def batches(self, batch_size: int) -> list[np.ndarray]:
        return [self.inputs[i : i + batch_size] for i in range(0, len(self), batch_size)]


def sample_haar_orthogonal(dim: int, seed=None) -> np.ndarray:
    """Haar-distributed orthogonal matrix: QR of a Gaussian matrix with R's
    diagonal signs folded into Q."""
    if dim < 1:
        raise ConfigError("dim must be >= 1")
    rng = _rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _covariance(spec: GaussianShiftSpec, rng) -> np.ndarray:
    lo, hi = spec.d_range
    d = rng.uniform(lo, hi, size=spec.dim)
    u = sample_haar_orthogonal(spec.dim, rng)
    s = (u * d) @ u.T
    return 0.5 * (s + s.T)


def make_cluster_params(k: float, spec: GaussianShiftSpec, seed=None) -> ClusterParams:
    """Class means from ``N(k * 1, I)``, covariances ``U D U^T``."""
    lo, hi = spec.d_range
    if not (0 < lo <= hi):
        raise ConfigError(f"invalid d_range {spec.d_range}")
    rng = _rng(seed)
    mu_pos = k + rng.standard_normal(spec.dim)
    mu_neg = k + rng.standard_normal(spec.dim)
    return ClusterParams(mu_pos, mu_neg, _covariance(spec, rng), _covariance(spec, rng))


def interpolate_shift(source: ClusterParams, target: ClusterParams, lam: float) -> ClusterParams:
    """``lam * target + (1 - lam) * source`` for every mean and covariance."""
    if source.dim != target.dim:
        raise DimensionError(f"dims differ: {source.dim} vs {target.dim}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lam must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return ClusterParams(*(np.array(a) for a in (source.mu_pos, source.mu_neg, source.sigma_pos, source.sigma_neg)))
    if lam == 1.0:
        return ClusterParams(*(np.array(a) for a in (target.mu_pos, target.mu_neg, target.sigma_pos, target.sigma_neg)))
    mix = lambda t, s: lam * t + (1.0 - lam) * s
    return ClusterParams(
        mix(target.mu_pos, source.mu_pos),
        mix(target.mu_neg, source.mu_neg),
        mix(target.sigma_pos, source.sigma_pos),
        mix(target.sigma_neg, source.sigma_neg),
    )


def cholesky_psd(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; retries once with ``1e-10 * I`` jitter."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        try:
            return np.linalg.cholesky(sigma + 1e-10 * np.eye(len(sigma)))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive semidefinite") from exc


def sample_dataset(params: ClusterParams, n_per_class: int, seed=None, role: str = "test_stream") -> Dataset:
    """``n_per_class`` draws per class (labels ±1), rows shuffled by ``seed``."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = _rng(seed)
    xs = []
    for mu, sigma in ((params.mu_pos, params.sigma_pos), (params.mu_neg, params.sigma_neg)):
        chol = cholesky_psd(sigma)
        xs.append(mu + rng.standard_normal((n_per_class, params.dim)) @ chol.T)
    x = np.vstack(xs)
    y = np.concatenate([np.ones(n_per_class, dtype=int), -np.ones(n_per_class, dtype=int)])
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], role)


@dataclass
class ShiftBenchmark:
    """Source and target cluster parameters sharing one seed."""

    spec: GaussianShiftSpec
    source: ClusterParams
    target: ClusterParams
    seeds: dict = field(default_factory=dict)

    def shifted(self, lam: float | None = None) -> ClusterParams:
        return interpolate_shift(self.source, self.target, self.spec.lam if lam is None else lam)

    def dataset(self, role: str, n_per_class: int, lam: float | None = None, stream: int = 0) -> Dataset:
        """Sample ``role`` data; ``source_*`` roles ignore ``lam``.

        Each ``(role, lam, stream)`` triple gets its own reproducible RNG.
        """
        level = 0.0 if role.startswith("source") else (self.spec.lam if lam is None else lam)
        params = self.source if level == 0.0 else self.shifted(level)
        key = [self.spec.seed, _ROLE_CODES.get(role, 9), int(round(level * 1e6)), stream]
        return sample_dataset(params, n_per_class, np.random.default_rng(key), role)


    def redraw_target(self, index: int) -> "ShiftBenchmark":
        """Same source, an independent target draw (keyed by ``index``)."""
        rng = np.random.default_rng([self.spec.seed, 77, index])
        target = make_cluster_params(self.spec.k_target, self.spec, rng)
        return ShiftBenchmark(self.spec, self.source, target, {**self.seeds, "target_draw": index})


_ROLE_CODES = {"source_train": 1, "source_val": 2, "test_stream": 3, "val_stream": 4}


def make_benchmark(spec: GaussianShiftSpec) -> ShiftBenchmark:
    """Draw source (``k_source``) and target (``k_target``) cluster parameters
    independently from the stated priors."""
    ss = np.random.SeedSequence(spec.seed)
    s_src, s_tgt = ss.spawn(2)
    source = make_cluster_params(spec.k_source, spec, np.random.default_rng(s_src))
    target = make_cluster_params(spec.k_target, spec, np.random.default_rng(s_tgt))
    return ShiftBenchmark(spec, source, target, {"root": spec.seed})


# ----------------------------------------------------------------------------
# CSV I/O


def save_csv(dataset: Dataset, path) -> None:
    """Header ``label,f0,f1,...``; floats written with ``repr`` for exact round trips."""
    d = dataset.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(d)])
        for label, row in zip(dataset.labels, dataset.inputs):
            w.writerow([repr(int(label))] + [repr(float(v)) for v in row])


def load_csv(path, role: str = "test_stream") -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(f"{path}: no header")
        if header[0] != "label" or header[1:] != [f"f{i}" for i in range(len(header) - 1)]:
            raise ParseError(f"{path}: line 1: header must be 'label,f0,f1,...'")
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} columns, got {len(rec)}")
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    x = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    return Dataset(x, np.asarray(labels, dtype=int), role)
