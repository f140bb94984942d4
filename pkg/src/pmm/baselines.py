"""Comparison methods and evaluation metrics: natural cubic spline,
polynomial interpolation with two-branch extrapolation, eigenvector
continuation on an affine pencil, plain 2-component PCA, 1-nearest-neighbor
error, and error report tables.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("pmm.baselines")


# --- natural cubic spline -----------------------------------------------------


@dataclass(frozen=True)
class SplineModel:
    knots: np.ndarray
    values: np.ndarray
    second_derivs: np.ndarray


def spline_fit(x, y) -> SplineModel:
    """C2 cubic interpolant with zero second derivative at both endpoints."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.size < 3:
        raise ValueError("need at least 3 knots")
    if y.shape != x.shape:
        raise ValueError("x and y must have the same length")
    if np.any(np.diff(x) <= 0):
        raise ValueError("knots must be strictly ascending")
    n = x.size
    h = np.diff(x)
    # Tridiagonal system for interior second derivatives; natural ends are 0.
    system = np.zeros((n, n))
    rhs = np.zeros(n)
    system[0, 0] = 1.0
    system[-1, -1] = 1.0
    for i in range(1, n - 1):
        system[i, i - 1] = h[i - 1]
        system[i, i] = 2.0 * (h[i - 1] + h[i])
        system[i, i + 1] = h[i]
        rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1])
    second = np.linalg.solve(system, rhs)
    return SplineModel(knots=x, values=y, second_derivs=second)


def spline_eval(model: SplineModel, x_query) -> np.ndarray:
    """Evaluate the spline; queries beyond the knot range use the end pieces."""
    xq = np.atleast_1d(np.asarray(x_query, dtype=np.float64))
    x, y, m = model.knots, model.values, model.second_derivs
    seg = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, x.size - 2)
    h = x[seg + 1] - x[seg]
    lo = x[seg + 1] - xq
    hi = xq - x[seg]
    out = (
        m[seg] * lo**3 / (6 * h)
        + m[seg + 1] * hi**3 / (6 * h)
        + (y[seg] / h - m[seg] * h / 6) * lo
        + (y[seg + 1] / h - m[seg + 1] * h / 6) * hi
    )
    return out if np.ndim(x_query) else float(out[0])


# --- polynomial interpolation ----------------------------------------------------


def polyfit(x, y, degree: int | None = None) -> np.polynomial.Polynomial:
    """Least-squares polynomial, default degree (#points - 1) for exact
    interpolation. Logs when knot residuals suggest an ill-conditioned fit."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if degree is None:
        degree = x.size - 1
    if degree >= x.size:
        raise ValueError("degree must be below the number of points")
    poly = np.polynomial.Polynomial.fit(x, y, degree)
    resid = np.max(np.abs(poly(x) - y))
    scale = max(np.max(np.abs(y)), 1.0)
    if resid > 1e-8 * scale and degree == x.size - 1:
        log.warning("interpolating polynomial residual %.3e; fit is ill-conditioned", resid)
    return poly


def polyeval(poly: np.polynomial.Polynomial, x_query):
    return poly(np.asarray(x_query, dtype=np.float64))


def branch_extrapolate(x, table, at: float = 0.0) -> np.ndarray:
    """Per-sign-branch polynomial extrapolation to a point between branches.

    Each column of `table` is fit per branch (x < 0 and x > 0) with an
    interpolating polynomial; the prediction at `at` averages the branches.
    """
    x = np.asarray(x, dtype=np.float64)
    table = np.atleast_2d(np.asarray(table, dtype=np.float64))
    if table.shape[0] != x.size:
        raise ValueError("table rows must match x")
    neg, pos = x < 0, x > 0
    if not (neg.any() and pos.any()):
        raise ValueError("both sign branches need points")
    out = np.empty(table.shape[1])
    for col in range(table.shape[1]):
        left = polyeval(polyfit(x[neg], table[neg, col]), at)
        right = polyeval(polyfit(x[pos], table[pos, col]), at)
        out[col] = 0.5 * (left + right)
    return out


# --- eigenvector continuation -----------------------------------------------------


@dataclass(frozen=True)
class ECReducedModel:
    snapshots: np.ndarray
    reduced_components: tuple[np.ndarray, ...]
    overlap: np.ndarray


# Overlap eigendirections below this are discarded as numerically dependent.
EC_OVERLAP_FLOOR = 1e-10


def ec_build(h0: np.ndarray, h1: np.ndarray, snapshot_points) -> ECReducedModel:
    """Project the pencil H(c) = H0 + c H1 onto unit-normalized ground
    eigenvectors taken at the snapshot couplings."""
    points = list(snapshot_points)
    if not points:
        raise ValueError("need at least one snapshot point")
    columns = []
    for c in points:
        _, vectors = np.linalg.eigh(h0 + c * h1)
        columns.append(vectors[:, 0])
    basis = np.stack(columns, axis=1)
    basis = basis / np.linalg.norm(basis, axis=0, keepdims=True)
    reduced = tuple(basis.conj().T @ h @ basis for h in (h0, h1))
    return ECReducedModel(
        snapshots=basis, reduced_components=reduced, overlap=basis.conj().T @ basis
    )


def ec_energy(model: ECReducedModel, c: float) -> float:
    """Lowest eigenvalue of the reduced generalized problem at coupling c,
    with near-singular overlap directions discarded."""
    reduced = model.reduced_components[0] + c * model.reduced_components[1]
    evals, evecs = np.linalg.eigh(model.overlap)
    keep = evals > EC_OVERLAP_FLOOR
    if not keep.any():
        raise ValueError("overlap matrix has no usable directions")
    whiten = evecs[:, keep] / np.sqrt(evals[keep])
    projected = whiten.conj().T @ reduced @ whiten
    return float(np.linalg.eigvalsh(projected)[0])


# --- metrics ------------------------------------------------------------------------


def knn_error(embedding, labels, k: int = 1, reference=None,
              reference_labels=None) -> float:
    """k-nearest-neighbor classification error, in percent.

    Without a reference set the evaluation is leave-one-out on `embedding`;
    with one, each query point is classified by its nearest reference points.
    """
    points = np.asarray(embedding, dtype=np.float64)
    labels = np.asarray(labels)
    if points.shape[0] == 0:
        raise ValueError("empty query set")
    if labels.shape[0] != points.shape[0]:
        raise ValueError("labels must match the query set")
    self_reference = reference is None
    if self_reference:
        reference, reference_labels = points, labels
    else:
        reference = np.asarray(reference, dtype=np.float64)
        reference_labels = np.asarray(reference_labels)
        if reference.shape[0] == 0:
            raise ValueError("empty reference set")
        if reference_labels.shape[0] != reference.shape[0]:
            raise ValueError("reference labels must match the reference set")
    dist = np.sum((points[:, None, :] - reference[None, :, :]) ** 2, axis=2)
    if self_reference:
        np.fill_diagonal(dist, np.inf)
    wrong = 0
    for i in range(points.shape[0]):
        nearest = np.argpartition(dist[i], min(k, dist.shape[1] - 1))[:k]
        votes = np.bincount(reference_labels[nearest].astype(int))
        if votes.argmax() != labels[i]:
            wrong += 1
    return 100.0 * wrong / points.shape[0]


def error_report(predictions, truths) -> dict[str, np.ndarray | float]:
    """Per-point and summary absolute/relative errors; relative errors use a
    max(|truth|, 1e-12) denominator."""
    pred = np.asarray(predictions, dtype=np.float64).ravel()
    truth = np.asarray(truths, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError("predictions and truths must have the same length")
    abs_err = np.abs(pred - truth)
    rel_err = abs_err / np.maximum(np.abs(truth), 1e-12)
    return {
        "abs": abs_err,
        "rel": rel_err,
        "max_abs": float(abs_err.max()),
        "median_abs": float(np.median(abs_err)),
        "max_rel": float(rel_err.max()),
        "median_rel": float(np.median(rel_err)),
    }


def report_to_csv(path, points, truths, predictions) -> None:
    """Fixed-schema error table: point, truth, prediction, abs_err, rel_err."""
    points = np.asarray(points, dtype=np.float64).ravel()
    report = error_report(predictions, truths)
    body = np.column_stack([
        points,
        np.asarray(truths, dtype=np.float64).ravel(),
        np.asarray(predictions, dtype=np.float64).ravel(),
        report["abs"],
        report["rel"],
    ])
    np.savetxt(path, body, delimiter=",",
               header="point,truth,prediction,abs_err,rel_err", comments="")


# --- PCA ------------------------------------------------------------------------------


@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray
    components: np.ndarray


def pca_fit(data, n_components: int = 2) -> PCAModel:
    """Principal directions by SVD of the centered data, no whitening."""
    data = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    mean = data.mean(axis=0)
    _, _, vt = np.linalg.svd(data - mean, full_matrices=False)
    return PCAModel(mean=mean, components=vt[:n_components])


def pca_transform(model: PCAModel, data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    return (data - model.mean) @ model.components.T
