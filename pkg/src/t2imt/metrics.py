"""Image-realism and text-image relevance metrics over ingested arrays.

Features, logits and similarity scores come from external models; this
module only does the numerics (Frechet distance, inception score with
temperature-scaled logits, R-precision) plus the matrix file format.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EigDecompositionFailure,
    EmptyMatrix,
    InvalidDistribution,
    InvalidInput,
    NonFiniteInput,
    NonPositiveTemperature,
    TooFewSamples,
)

logger = logging.getLogger(__name__)

NEG_EIG_TOL = 1e-6
DEFAULT_SPLITS = 10
DEFAULT_CANDIDATES = 100
TEMPERATURE_GRID = np.round(np.arange(1, 101) * 0.05, 10)


@dataclass(frozen=True)
class FeatureSet:
    matrix: np.ndarray
    source: str = "generated"

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise InvalidInput(f"feature matrix must be 2-D, got shape {m.shape}")
        if m.shape[0] < 2:
            raise TooFewSamples(f"need at least 2 feature rows, got {m.shape[0]}")
        if not np.isfinite(m).all():
            raise NonFiniteInput("feature matrix contains NaN or inf")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def summarize(features: FeatureSet | np.ndarray) -> GaussianSummary:
    """Sample mean and unbiased (N-1) covariance, symmetrized."""
    if not isinstance(features, FeatureSet):
        features = FeatureSet(features)
    x = features.matrix
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianSummary(mu, (cov + cov.T) / 2.0)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise EigDecompositionFailure(str(exc)) from exc
    if w.size and w.min() < -NEG_EIG_TOL * max(1.0, abs(w).max()):
        logger.warning("covariance has eigenvalue %.3g below zero; clamping", w.min())
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def i_fid(real: GaussianSummary, gen: GaussianSummary) -> float:
    """Frechet distance between two Gaussian summaries.

    The cross term ``tr((S_r S_g)^(1/2))`` is evaluated as the trace of the
    PSD square root of ``S_r^(1/2) S_g S_r^(1/2)``, which has the same
    spectrum as ``S_r S_g`` but is symmetric.
    """
    if real.dim != gen.dim or real.cov.shape != gen.cov.shape:
        raise DimensionMismatch(f"dimension {real.dim} vs {gen.dim}")
    for arr in (real.mean, real.cov, gen.mean, gen.cov):
        if not np.isfinite(arr).all():
            raise NonFiniteInput("summary contains NaN or inf")
    root = _psd_sqrt(real.cov)
    middle = root @ gen.cov @ root
    middle = (middle + middle.T) / 2.0
    try:
        w = np.linalg.eigvalsh(middle)
    except np.linalg.LinAlgError as exc:
        raise EigDecompositionFailure(str(exc)) from exc
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = real.mean - gen.mean
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2.0 * cross)
    if value < -NEG_EIG_TOL:
        logger.warning("Frechet distance came out at %.3g; clamping to 0", value)
    return max(value, 0.0)


# --- inception score ------------------------------------------------------

def _check_logits(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise InvalidInput(f"logits must be N x C with C >= 2, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise NonFiniteInput("logits contain NaN or inf")
    return z


def temperature_scale(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise ``softmax(logits / T)``."""
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {temperature}")
    z = _check_logits(logits) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Mean negative log-likelihood of ``labels`` under temperature-scaled logits."""
    z = _check_logits(logits) / temperature
    labels = np.asarray(labels, dtype=np.int64)
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    return float((lse - z[np.arange(z.shape[0]), labels]).mean())


def fit_temperature(logits: np.ndarray, labels: np.ndarray, grid: np.ndarray = TEMPERATURE_GRID) -> float:
    """Grid search for the NLL-minimizing temperature; ties go to the smallest T."""
    z = _check_logits(logits)
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise DimensionMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for {z.shape[0]} logit rows")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise InvalidInput("label out of class range")
    losses = [nll(z, labels, float(t)) for t in grid]
    return float(grid[int(np.argmin(losses))])


def _split_bounds(n: int, splits: int) -> list[tuple[int, int]]:
    size = n // splits
    bounds = [(i * size, (i + 1) * size) for i in range(splits)]
    bounds[-1] = (bounds[-1][0], n)
    return bounds


def i_is(probs: np.ndarray, splits: int = DEFAULT_SPLITS) -> tuple[float, float]:
    """Inception score ``exp(E_x KL(p(y|x) || p(y)))``, mean and std over splits.

    Rows are split into ``splits`` equal chunks with the remainder rows going
    to the last chunk; each chunk uses its own marginal.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidInput(f"probabilities must be a non-empty N x C matrix, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise NonFiniteInput("probabilities contain NaN or inf")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise InvalidDistribution("every row must be a probability distribution")
    if not 1 <= splits <= p.shape[0]:
        raise InvalidInput(f"splits must lie in [1, {p.shape[0]}], got {splits}")
    scores = []
    for lo, hi in _split_bounds(p.shape[0], splits):
        part = p[lo:hi]
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(float(np.exp(terms.sum(axis=1).mean())))
    return float(np.mean(scores)), float(np.std(scores))


# --- R-precision ---------------------------------------------------------

def r_precision(sims: np.ndarray, candidates: int | None = DEFAULT_CANDIDATES) -> float:
    """Fraction of rows whose first column (true caption) strictly beats all others.

    Ties with any distractor count as a miss. ``candidates`` pins the row
    length; pass ``None`` to accept any width >= 2.
    """
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise EmptyMatrix("similarity matrix has no rows")
    if s.shape[1] < 2:
        raise InvalidInput("need the true caption plus at least one distractor per row")
    if candidates is not None and s.shape[1] != candidates:
        raise DimensionMismatch(f"expected {candidates} captions per row, got {s.shape[1]}")
    if not np.isfinite(s).all():
        raise NonFiniteInput("similarity scores contain NaN or inf")
    wins = s[:, 0] > s[:, 1:].max(axis=1)
    return float(wins.mean())


# --- matrix files ----------------------------------------------------------

MATRIX_FORMAT = "t2imt-matrix"


def save_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write ``.npy`` (binary) or the text format: one JSON header line, then rows."""
    path = Path(path)
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[:, None]
    if path.suffix == ".npy":
        np.save(path, m)
        return
    header = {"format": MATRIX_FORMAT, "version": 1, "n": int(m.shape[0]), "d": int(m.shape[1]), "dtype": str(m.dtype)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        np.savetxt(fh, m, fmt="%.17g" if m.dtype.kind == "f" else "%d")


def load_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        m = np.load(path, allow_pickle=False)
    else:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
            if not first.startswith("#"):
                raise InvalidInput(f"{path}: missing matrix header line")
            try:
                header = json.loads(first[1:])
            except ValueError as exc:
                raise InvalidInput(f"{path}: bad header: {exc}") from exc
            if header.get("format") != MATRIX_FORMAT or header.get("version") != 1:
                raise InvalidInput(f"{path}: unsupported matrix format {header.get('format')!r} v{header.get('version')}")
            m = np.loadtxt(fh, dtype=np.dtype(header.get("dtype", "float64")), ndmin=2)
        if m.size == 0:
            m = m.reshape(0, header["d"])
        if m.shape != (header["n"], header["d"]):
            raise InvalidInput(f"{path}: header says {header['n']}x{header['d']}, body is {m.shape[0]}x{m.shape[1]}")
    if m.ndim == 1:
        m = m[:, None]
    return m
