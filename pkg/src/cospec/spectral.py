"""Singular spectra of normalized co-occurrence matrices.

Numeric SVD plus the closed-form spectra the toy constructions admit, and
the two unscaled components of the downstream classification bound: tail
singular energy and labeling error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cooccurrence import JointDistribution, NormalizedMatrix, unmasked_count
from .errors import DomainError, ResourceError
from .toy_model import ToyParams

# Dense SVD refuses matrices larger than this on either side.
SVD_BUDGET = 4000

# Singular values below this are numerical noise and clamp to zero.
CLAMP = 1e-12


@dataclass(frozen=True)
class SingularSpectrum:
    """Descending nonnegative singular values, zero-padded to full length."""

    values: np.ndarray
    rank_hint: int | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=float)
        )

    def __len__(self) -> int:
        return len(self.values)

    def padded(self, n: int) -> np.ndarray:
        """Values extended (or truncated) to length n with zeros."""
        v = self.values
        if len(v) >= n:
            return v[:n].copy()
        return np.concatenate([v, np.zeros(n - len(v))])


def _spectrum(values, rank_hint=None) -> SingularSpectrum:
    v = np.asarray(values, dtype=float)
    v = np.where(v < CLAMP, 0.0, v)
    return SingularSpectrum(values=np.sort(v)[::-1], rank_hint=rank_hint)


def singular_spectrum(m: NormalizedMatrix | np.ndarray) -> SingularSpectrum:
    """Full numeric spectrum, descending, length min(rows, cols)."""
    a = m.matrix if isinstance(m, NormalizedMatrix) else np.asarray(m, float)
    if max(a.shape) > SVD_BUDGET:
        raise ResourceError(
            f"matrix {a.shape} exceeds the dense SVD budget of {SVD_BUDGET}"
        )
    return _spectrum(np.linalg.svd(a, compute_uv=False))


def exact_ar_spectrum(params: ToyParams) -> SingularSpectrum:
    """Spectrum of the next-token matrix as actually constructed.

    The matrix is block diagonal with one rank-1 all-equal block per
    (class, prefix length) pair, each of unit norm, so the spectrum is
    exactly r * (s - 1) ones followed by zeros.
    """
    r, s, big_t = params.r, params.s, params.T
    n_rows = r * sum(big_t**i for i in range(1, s))
    n_cols = r * (s - 1) * big_t
    n = min(n_rows, n_cols)
    ones = r * (s - 1)
    return _spectrum(
        np.concatenate([np.ones(ones), np.zeros(max(n - ones, 0))]),
        rank_hint=ones,
    )


def predicted_ar_spectrum(params: ToyParams) -> SingularSpectrum:
    """Stated closed form for the next-token spectrum: r * s ones.

    This overcounts the construction by r unit values (there are s - 1
    prefix lengths, not s); :func:`exact_ar_spectrum` is what numeric SVD
    reproduces. The prediction is kept because the comparative claims
    downstream are phrased against it, and it only widens the next-token
    side of every inequality they assert.
    """
    ones = params.r * params.s
    n = max(len(exact_ar_spectrum(params)), ones)
    return _spectrum(
        np.concatenate([np.ones(ones), np.zeros(n - ones)]), rank_hint=ones
    )


def predicted_masked_spectrum(params: ToyParams, rho_m: float) -> SingularSpectrum:
    """Closed-form masked spectrum: r ones, then r*(s-1) equal middle values.

    The middle value is sqrt(u / ((s - u) * (s - 1))) with u the unmasked
    count; it requires more than one masked position (s * rho_m > 1),
    otherwise the masked problem degenerates to the next-token geometry.
    This form is exact: numeric SVD of the built matrix matches it.
    """
    r, s, big_t = params.r, params.s, params.T
    u = unmasked_count(params, rho_m)
    if s * rho_m <= 1 + 1e-9:
        raise DomainError(
            f"masked spectrum needs s * rho_m > 1, got s={s} rho_m={rho_m}"
        )
    middle = math.sqrt(u / ((s - u) * (s - 1)))
    n_rows = r * math.comb(s, u) * big_t**u
    n_cols = r * s * big_t
    n = min(n_rows, n_cols)
    values = np.concatenate(
        [np.ones(r), np.full(r * (s - 1), middle), np.zeros(n - r * s)]
    )
    return _spectrum(values, rank_hint=r * s)


def block_matrix_spectrum(
    p_a: float, p_b: float, s_a: int, s_b: int
) -> SingularSpectrum:
    """Spectrum of the (s_a*s_b) square matrix of constant blocks.

    Diagonal blocks are all-p_a, off-diagonal all-p_b, each block s_a
    square: sigma_1 = |s_a*p_a + (s_b-1)*s_a*p_b|, then s_b - 1 copies of
    s_a*|p_a - p_b|, then zeros. The matrix is symmetric, so singular
    values are eigenvalue magnitudes; the leading one can be the smaller.
    """
    if s_a < 1 or s_b < 1:
        raise DomainError(f"block sizes must be >= 1, got {s_a}, {s_b}")
    values = np.zeros(s_a * s_b)
    values[0] = abs(s_a * p_a + (s_b - 1) * s_a * p_b)
    values[1:s_b] = s_a * abs(p_a - p_b)
    return _spectrum(values, rank_hint=s_b)


def tail_energy(spectrum: SingularSpectrum, t: int) -> float:
    """Fourth-power mass beyond the first t singular values."""
    if t < 0:
        raise DomainError(f"feature dimension must be >= 0, got {t}")
    return float(np.sum(spectrum.values[t:] ** 4))


def labeling_error(joint: JointDistribution, labeler) -> float:
    """Mass of entries whose conditional and target disagree on class.

    `labeler` maps a token id to its class. Every token of a conditional
    text must agree on the class, otherwise the row has no well-defined
    label and the joint is malformed for this measure.
    """
    mismatch = 0.0
    for (text, target), v in joint.entries.items():
        row_labels = {labeler(t) for t in text.tokens}
        if len(row_labels) != 1:
            raise DomainError(
                f"conditional text {text.key()} mixes classes {sorted(row_labels)}"
            )
        if labeler(target) not in row_labels:
            mismatch += v
    return mismatch / joint.total_mass


def connectivity_estimate(features, k: int | None = None) -> float:
    """Mean of the k largest pairwise inner products among feature vectors.

    A crude connectivity surrogate: high values mean many feature pairs
    point the same way. With k omitted or larger than the pair count, all
    pairs are averaged.
    """
    f = np.asarray(features, dtype=float)
    if f.ndim != 2 or f.shape[0] < 2:
        raise DomainError("need at least two feature vectors")
    gram = f @ f.T
    iu = np.triu_indices(f.shape[0], k=1)
    products = np.sort(gram[iu])[::-1]
    if k is None or k >= len(products):
        return float(products.mean())
    if k < 1:
        raise DomainError(f"pair budget must be >= 1, got {k}")
    return float(products[:k].mean())


def write_spectrum_csv(spectrum: SingularSpectrum, path) -> None:
    """Export as `rank,sigma`, rank starting at 1."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "sigma"])
        for i, v in enumerate(spectrum.values, start=1):
            writer.writerow([i, repr(float(v))])
