"""Spectral pretraining loss as low-rank matrix factorization.

The quadratic pretraining loss over a joint distribution equals the
Frobenius factorization objective on the normalized matrix minus a constant
that depends only on the joint. This module computes both sides of that
identity, the closed-form optimum via truncated SVD, a gradient-descent
factorizer to cross-check it, and the ridge probe used to read classes out
of learned features.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .cooccurrence import (
    ConditionalText,
    JointDistribution,
    NormalizedMatrix,
    normalize,
)
from .errors import DomainError, NumericError


@dataclass(frozen=True)
class EncoderTable:
    """Feature vector per conditional text, all of one dimension."""

    features: dict[ConditionalText, np.ndarray]
    dim: int

    @classmethod
    def from_map(cls, features: dict) -> "EncoderTable":
        features = {k: np.asarray(v, dtype=float) for k, v in features.items()}
        dims = {v.shape for v in features.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise DomainError(f"inconsistent feature shapes: {sorted(dims)}")
        return cls(features=features, dim=next(iter(dims))[0])

    def matrix(self, rows) -> np.ndarray:
        missing = [t for t in rows if t not in self.features]
        if missing:
            raise DomainError(
                f"encoder covers {len(self.features)} rows but misses "
                f"{len(missing)}, first: {missing[0].key()}"
            )
        return np.stack([self.features[t] for t in rows])


@dataclass(frozen=True)
class TokenEmbedding:
    """Embedding matrix with one column per target token."""

    matrix: np.ndarray
    tokens: tuple[int, ...]

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.tokens):
            raise DomainError(
                f"embedding shape {self.matrix.shape} does not match "
                f"{len(self.tokens)} tokens"
            )

    def columns(self, cols) -> np.ndarray:
        index = {tok: j for j, tok in enumerate(self.tokens)}
        missing = [c for c in cols if c not in index]
        if missing:
            raise DomainError(f"embedding misses target tokens {missing[:5]}")
        return self.matrix[:, [index[c] for c in cols]]


@dataclass(frozen=True)
class FactorPair:
    """Low-rank factors: row_factor @ col_factor.T approximates the matrix."""

    row_factor: np.ndarray
    col_factor: np.ndarray
    rank: int


def _marginal_arrays(joint: JointDistribution):
    pc = joint.row_marginal()
    pg = joint.col_marginal()
    return (
        np.array([pc[t] for t in joint.rows]),
        np.array([pg[c] for c in joint.cols]),
    )


def spectral_loss(
    enc: EncoderTable, emb: TokenEmbedding, joint: JointDistribution
) -> float:
    """Exact quadratic pretraining loss under a joint distribution.

    loss = -2 E_{(X, X+)} score(X, X+) + E_{X, X-} score(X, X-)^2 with X-
    drawn from the target marginal independently of X, score(X, c) the c-th
    entry of the embedded features. The alignment term carries weight 2;
    that is what makes the loss equal the factorization objective minus a
    joint-only constant (see :func:`identity_residual`).
    """
    f = enc.matrix(joint.rows)
    w = emb.columns(joint.cols)
    scores = f @ w
    a = joint.dense()
    pc, pg = _marginal_arrays(joint)
    align = float(np.sum(a * scores))
    contrast = float(pc @ (scores**2) @ pg)
    return -2.0 * align + contrast


def decomposition_objective(pair: FactorPair, m: NormalizedMatrix) -> float:
    """Squared Frobenius distance between the matrix and the factor product."""
    approx = pair.row_factor @ pair.col_factor.T
    if approx.shape != m.matrix.shape:
        raise DomainError(
            f"factor product shape {approx.shape} does not match "
            f"matrix shape {m.matrix.shape}"
        )
    return float(np.sum((m.matrix - approx) ** 2))


def identity_residual(
    enc: EncoderTable, emb: TokenEmbedding, joint: JointDistribution
) -> float:
    """Gap between the loss and the factorization objective minus its constant.

    Assembles row factors sqrt(P_C(X)) * f(X) and column factors
    sqrt(P_G(X+)) * W[:, X+] from the same encoder and embedding, and
    returns |loss - (objective - const)| with const = sum(A^2 / (P_C P_G)).
    Zero (to rounding) for every encoder and embedding, which is the
    equivalence the rest of the package leans on.
    """
    loss = spectral_loss(enc, emb, joint)
    f = enc.matrix(joint.rows)
    w = emb.columns(joint.cols)
    a = joint.dense()
    pc, pg = _marginal_arrays(joint)
    abar = a / np.sqrt(np.outer(pc, pg))
    row_factor = np.sqrt(pc)[:, None] * f
    col_factor = (np.sqrt(pg)[None, :] * w).T
    objective = float(np.sum((abar - row_factor @ col_factor.T) ** 2))
    const = float(np.sum(abar**2))
    return abs(loss - (objective - const))


def _svd_sign_fixed(a: np.ndarray):
    u, sigma, vt = np.linalg.svd(a, full_matrices=False)
    # Fix the per-component sign so factorizations are reproducible run to
    # run: largest-magnitude entry of each left vector is made nonnegative.
    for i in range(u.shape[1]):
        j = int(np.argmax(np.abs(u[:, i])))
        if u[j, i] < 0:
            u[:, i] = -u[:, i]
            vt[i, :] = -vt[i, :]
    return u, sigma, vt


def optimal_features(m: NormalizedMatrix, t: int) -> FactorPair:
    """Best rank-t factorization via truncated SVD, symmetric energy split.

    Both factors absorb sqrt(sigma), making them comparable in norm. The
    achieved objective is the sum of squared singular values beyond t.
    """
    n = min(m.matrix.shape)
    if not 1 <= t <= n:
        raise DomainError(f"rank {t} outside 1..{n} for shape {m.matrix.shape}")
    u, sigma, vt = _svd_sign_fixed(m.matrix)
    scale = np.sqrt(sigma[:t])
    return FactorPair(
        row_factor=u[:, :t] * scale[None, :],
        col_factor=vt[:t, :].T * scale[None, :],
        rank=t,
    )


def factor_gradients(pair: FactorPair, m: NormalizedMatrix):
    """Analytic gradients of the factorization objective in both factors."""
    residual = m.matrix - pair.row_factor @ pair.col_factor.T
    grad_row = -2.0 * residual @ pair.col_factor
    grad_col = -2.0 * residual.T @ pair.row_factor
    return grad_row, grad_col


@dataclass(frozen=True)
class GDResult:
    """Outcome of a gradient-descent factorization run."""

    pair: FactorPair
    objective: float
    target: float
    iterations: int
    converged: bool
    trajectory: tuple[tuple[int, float], ...]


def gd_factorize(
    m: NormalizedMatrix,
    t: int,
    lr: float = 0.05,
    steps: int = 5000,
    rng: np.random.Generator | None = None,
    init_scale: float = 0.1,
) -> GDResult:
    """Factorize by plain gradient descent from a small random start.

    Stops as soon as the objective is within 0.1% of the SVD optimum (or
    within an absolute 1e-6 when the optimum is essentially zero). Runs
    that exhaust `steps` come back with converged=False and their sampled
    trajectory rather than raising; NaN or infinite objectives raise, since
    they mean the step size is too large for this matrix.
    """
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if steps < 1:
        raise DomainError(f"step count must be >= 1, got {steps}")
    rng = np.random.default_rng(0) if rng is None else rng
    n = min(m.matrix.shape)
    if not 1 <= t <= n:
        raise DomainError(f"rank {t} outside 1..{n} for shape {m.matrix.shape}")
    sigma = np.linalg.svd(m.matrix, compute_uv=False)
    target = float(np.sum(sigma[t:] ** 2))
    threshold = target * 1.001 if target > 1e-9 else 1e-6
    f = init_scale * rng.standard_normal((m.matrix.shape[0], t))
    w = init_scale * rng.standard_normal((m.matrix.shape[1], t))
    trajectory: list[tuple[int, float]] = []
    objective = float("inf")
    converged = False
    iterations = 0
    for i in range(1, steps + 1):
        residual = m.matrix - f @ w.T
        objective = float(np.sum(residual**2))
        if not np.isfinite(objective):
            raise NumericError(
                f"factorization diverged at step {i} with lr={lr}; lower it"
            )
        if i == 1 or i % 50 == 0:
            trajectory.append((i, objective))
        iterations = i
        if objective <= threshold + 1e-12:
            converged = True
            break
        grad_f = -2.0 * residual @ w
        grad_w = -2.0 * residual.T @ f
        f = f - lr * grad_f
        w = w - lr * grad_w
    trajectory.append((iterations, objective))
    return GDResult(
        pair=FactorPair(row_factor=f, col_factor=w, rank=t),
        objective=objective,
        target=target,
        iterations=iterations,
        converged=converged,
        trajectory=tuple(trajectory),
    )


def encoder_from_pair(pair: FactorPair, m: NormalizedMatrix) -> EncoderTable:
    """Recover per-row features f(X) = row_factor[X] / sqrt(P_C(X))."""
    if np.any(m.row_weights <= 0):
        raise DomainError("row marginal has a zero entry; encoder undefined")
    feats = pair.row_factor / np.sqrt(m.row_weights)[:, None]
    return EncoderTable.from_map(
        {text: feats[i] for i, text in enumerate(m.rows)}
    )


@dataclass(frozen=True)
class ProbeResult:
    """Fitted one-vs-all ridge classifier and its weighted error."""

    classes: tuple[int, ...]
    coef: np.ndarray
    error: float
    reg: float

    def predict(self, vectors: np.ndarray) -> np.ndarray:
        scores = np.asarray(vectors, float) @ self.coef
        return np.array([self.classes[j] for j in np.argmax(scores, axis=1)])


def linear_probe(features, reg: float) -> ProbeResult:
    """Weighted ridge regression to one-hot classes, prediction by argmax.

    `features` is a sequence of (vector, class) or (vector, class, weight)
    tuples; weights default to 1 and the reported error is the weighted
    fraction misclassified.
    """
    vecs, labels, weights = [], [], []
    for item in features:
        if len(item) == 2:
            v, c = item
            w = 1.0
        else:
            v, c, w = item
        vecs.append(np.asarray(v, float))
        labels.append(int(c))
        weights.append(float(w))
    if not vecs:
        raise DomainError("no feature vectors supplied")
    x = np.stack(vecs)
    y = np.array(labels)
    w = np.array(weights)
    classes = tuple(sorted(set(labels)))
    onehot = (y[:, None] == np.array(classes)[None, :]).astype(float)
    xtd = x.T * w[None, :]
    gram = xtd @ x + reg * np.eye(x.shape[1])
    try:
        coef = np.linalg.solve(gram, xtd @ onehot)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"normal equations are singular at reg={reg}; use reg > 0"
        ) from exc
    pred = np.array([classes[j] for j in np.argmax(x @ coef, axis=1)])
    error = float(np.sum(w * (pred != y)) / np.sum(w))
    return ProbeResult(classes=classes, coef=coef, error=error, reg=reg)


def save_factor_pair(pair: FactorPair, directory, name: str = "factors") -> None:
    """Persist a factor pair as a JSON header plus two CSV matrices."""
    header = {
        "rank": pair.rank,
        "rows": pair.row_factor.shape[0],
        "cols": pair.col_factor.shape[0],
        "row_file": f"{name}_rows.csv",
        "col_file": f"{name}_cols.csv",
    }
    with open(os.path.join(directory, f"{name}.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for fname, mat in ((header["row_file"], pair.row_factor),
                       (header["col_file"], pair.col_factor)):
        with open(os.path.join(directory, fname), "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in mat:
                writer.writerow([repr(float(v)) for v in row])


def load_factor_pair(directory, name: str = "factors") -> FactorPair:
    with open(os.path.join(directory, f"{name}.json")) as fh:
        header = json.load(fh)
    mats = []
    for key in ("row_file", "col_file"):
        with open(os.path.join(directory, header[key]), newline="") as fh:
            mats.append(
                np.array([[float(v) for v in row] for row in csv.reader(fh)])
            )
    pair = FactorPair(row_factor=mats[0], col_factor=mats[1],
                      rank=int(header["rank"]))
    if pair.row_factor.shape != (header["rows"], header["rank"]):
        raise DomainError("row factor shape disagrees with header")
    if pair.col_factor.shape != (header["cols"], header["rank"]):
        raise DomainError("column factor shape disagrees with header")
    return pair


def probe_features_for_joint(
    joint: JointDistribution,
    t: int,
    labeler,
    m: NormalizedMatrix | None = None,
):
    """Rank-t optimal features of a joint, tagged with class and row weight.

    Convenience for the probe pipeline: factorize, invert the row scaling,
    and label each conditional text through `labeler` applied to its first
    token. Returns (features, pair) with features ready for linear_probe.
    """
    m = normalize(joint) if m is None else m
    pair = optimal_features(m, t)
    enc = encoder_from_pair(pair, m)
    feats = [
        (enc.features[text], labeler(text.tokens[0]), float(m.row_weights[i]))
        for i, text in enumerate(m.rows)
    ]
    return feats, pair
