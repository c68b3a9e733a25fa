"""Exact joint distributions over (conditional text, target token) pairs.

Each pretraining objective induces a joint distribution: next-token
prediction conditions on a prefix, masked prediction conditions on the
unmasked remainder. The builders here enumerate those joints exactly on the
toy corpus; :func:`normalize` turns a joint into the marginal-normalized
matrix whose singular spectrum drives everything downstream.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ResourceError
from .toy_model import ENUMERATION_BUDGET, ToyParams, decode_token, token_id

PREFIX = "prefix"
UNMASKED = "unmasked"


@dataclass(frozen=True, order=True)
class ConditionalText:
    """Canonical key for the conditioning side of a pretraining pair.

    A prefix keeps its tokens in sequence order; an unmasked set keeps them
    sorted, which (because ids are position-major) is position order. Token
    ids encode their own positions, so no separate position list is stored.
    """

    kind: str
    tokens: tuple[int, ...]

    @classmethod
    def prefix(cls, tokens) -> "ConditionalText":
        tokens = tuple(int(t) for t in tokens)
        if not tokens:
            raise DomainError("prefix must be nonempty")
        return cls(PREFIX, tokens)

    @classmethod
    def unmasked(cls, tokens) -> "ConditionalText":
        tokens = tuple(sorted(int(t) for t in tokens))
        if not tokens:
            raise DomainError("unmasked set must be nonempty")
        if len(set(tokens)) != len(tokens):
            raise DomainError("unmasked set has duplicate tokens")
        return cls(UNMASKED, tokens)

    def positions(self, params: ToyParams) -> tuple[int, ...]:
        return tuple(decode_token(params, t)[0] for t in self.tokens)

    def key(self) -> str:
        """Stable string form used in triplet CSV exports."""
        return "-".join(str(t) for t in self.tokens)


def _validate_prefix(params: ToyParams, text: ConditionalText) -> None:
    pos = text.positions(params)
    if pos != tuple(range(1, len(pos) + 1)):
        raise DomainError(f"prefix positions {pos} are not consecutive from 1")


@dataclass(frozen=True)
class JointDistribution:
    """Sparse joint over (conditional text, target token), mass summing to 1."""

    entries: dict[tuple[ConditionalText, int], float]
    rows: tuple[ConditionalText, ...] = field(default=())
    cols: tuple[int, ...] = field(default=())

    @classmethod
    def from_entries(cls, entries: dict) -> "JointDistribution":
        entries = {k: float(v) for k, v in entries.items() if v != 0.0}
        if not entries:
            raise DomainError("joint distribution has empty support")
        if any(v < 0 for v in entries.values()):
            raise DomainError("joint distribution has a negative entry")
        rows = tuple(sorted({text for text, _ in entries}))
        cols = tuple(sorted({tok for _, tok in entries}))
        return cls(entries=entries, rows=rows, cols=cols)

    @property
    def total_mass(self) -> float:
        return float(sum(self.entries.values()))

    def row_marginal(self) -> dict[ConditionalText, float]:
        out: dict[ConditionalText, float] = {text: 0.0 for text in self.rows}
        for (text, _), v in self.entries.items():
            out[text] += v
        return out

    def col_marginal(self) -> dict[int, float]:
        out: dict[int, float] = {tok: 0.0 for tok in self.cols}
        for (_, tok), v in self.entries.items():
            out[tok] += v
        return out

    def dense(self) -> np.ndarray:
        a = np.zeros((len(self.rows), len(self.cols)))
        ri = {text: i for i, text in enumerate(self.rows)}
        ci = {tok: j for j, tok in enumerate(self.cols)}
        for (text, tok), v in self.entries.items():
            a[ri[text], ci[tok]] = v
        return a


@dataclass(frozen=True)
class NormalizedMatrix:
    """Joint divided elementwise by the root product of its marginals."""

    rows: tuple[ConditionalText, ...]
    cols: tuple[int, ...]
    matrix: np.ndarray
    row_weights: np.ndarray
    col_weights: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def normalize(joint: JointDistribution) -> NormalizedMatrix:
    """Build the normalized matrix A / sqrt(outer(row marginal, col marginal)).

    Rows or columns whose marginal is zero carry no mass and are dropped from
    the catalogs; keeping them would divide by zero and only ever contribute
    zero singular values. The result is invariant to any global rescaling of
    the joint, since both marginals rescale by the same factor.
    """
    if not joint.entries:
        raise DomainError("cannot normalize an empty joint")
    a = joint.dense()
    pc = a.sum(axis=1)
    pg = a.sum(axis=0)
    keep_r = pc > 0
    keep_c = pg > 0
    a = a[np.ix_(keep_r, keep_c)]
    pc = pc[keep_r]
    pg = pg[keep_c]
    rows = tuple(t for t, k in zip(joint.rows, keep_r) if k)
    cols = tuple(t for t, k in zip(joint.cols, keep_c) if k)
    total = pc.sum()
    matrix = a / np.sqrt(np.outer(pc, pg))
    return NormalizedMatrix(
        rows=rows,
        cols=cols,
        matrix=matrix,
        row_weights=pc / total,
        col_weights=pg / total,
    )


def _check_budget(kind: str, n_rows: int, budget: int) -> None:
    if n_rows > budget:
        raise ResourceError(
            f"{kind} joint needs {n_rows} rows, over the budget of {budget}; "
            "use build_joint_from_sampler instead"
        )


def build_ar_joint(
    params: ToyParams, budget: int = ENUMERATION_BUDGET
) -> JointDistribution:
    """Exact next-token joint: (prefix of length i, token at position i+1).

    Prefix lengths 1..s-1 are weighted uniformly so total mass is exactly 1;
    every entry at length i is then 1 / ((s-1) * r * T**(i+1)). Position-1
    tokens never appear as targets, so they are absent from the column
    catalog.
    """
    r, s, big_t = params.r, params.s, params.T
    n_rows = r * sum(big_t**i for i in range(1, s))
    _check_budget("next-token", n_rows, budget)
    entries: dict[tuple[ConditionalText, int], float] = {}
    for label in range(1, r + 1):
        for i in range(1, s):
            mass = 1.0 / ((s - 1) * r * big_t ** (i + 1))
            for slots in itertools.product(range(1, big_t + 1), repeat=i):
                text = ConditionalText.prefix(
                    token_id(params, pos, label, slot)
                    for pos, slot in enumerate(slots, start=1)
                )
                for j in range(1, big_t + 1):
                    target = token_id(params, i + 1, label, j)
                    entries[(text, target)] = mass
    return JointDistribution.from_entries(entries)


def unmasked_count(params: ToyParams, rho_m: float) -> int:
    """Number of visible positions for a mask ratio, validated to be integral."""
    if not 0.0 < rho_m < 1.0:
        raise DomainError(f"mask ratio must lie in (0, 1), got {rho_m}")
    u = params.s * (1.0 - rho_m)
    u_int = round(u)
    if abs(u - u_int) > 1e-9:
        admissible = [m / params.s for m in range(1, params.s)]
        raise DomainError(
            f"mask ratio {rho_m} leaves a non-integer unmasked count "
            f"{u:.4g} at s={params.s}; admissible ratios: {admissible}"
        )
    if not 1 <= u_int <= params.s - 1:
        raise DomainError(
            f"unmasked count {u_int} outside 1..{params.s - 1} at s={params.s}"
        )
    return int(u_int)


def build_masked_joint(
    params: ToyParams, rho_m: float, budget: int = ENUMERATION_BUDGET
) -> JointDistribution:
    """Exact masked-prediction joint at a fixed mask ratio.

    Conditions on each size-u subset of positions (u = s * (1 - rho_m)) and
    targets one masked position; all nonzero entries share the value
    1 / (r * C(s, u) * (s - u) * T**(u + 1)).
    """
    r, s, big_t = params.r, params.s, params.T
    u = unmasked_count(params, rho_m)
    n_rows = r * math.comb(s, u) * big_t**u
    _check_budget("masked", n_rows, budget)
    mass = 1.0 / (r * math.comb(s, u) * (s - u) * big_t ** (u + 1))
    entries: dict[tuple[ConditionalText, int], float] = {}
    for label in range(1, r + 1):
        for visible in itertools.combinations(range(1, s + 1), u):
            hidden = [p for p in range(1, s + 1) if p not in visible]
            for slots in itertools.product(range(1, big_t + 1), repeat=u):
                text = ConditionalText.unmasked(
                    token_id(params, pos, label, slot)
                    for pos, slot in zip(visible, slots)
                )
                for p in hidden:
                    for j in range(1, big_t + 1):
                        target = token_id(params, p, label, j)
                        entries[(text, target)] = mass
    return JointDistribution.from_entries(entries)


def build_dar_joint(
    params: ToyParams, t: int, budget: int = ENUMERATION_BUDGET
) -> JointDistribution:
    """Diversity-enhanced next-token joint with lookahead width t.

    The target position is uniform over the window i+1 .. min(i+t, s) behind
    each prefix of length i; t = 1 reproduces :func:`build_ar_joint` entry
    for entry.
    """
    if t < 1:
        raise DomainError(f"lookahead width must be >= 1, got {t}")
    r, s, big_t = params.r, params.s, params.T
    n_rows = r * sum(big_t**i for i in range(1, s))
    _check_budget("diversity-enhanced", n_rows, budget)
    entries: dict[tuple[ConditionalText, int], float] = {}
    for label in range(1, r + 1):
        for i in range(1, s):
            window = min(i + t, s) - i
            mass = 1.0 / ((s - 1) * r * window * big_t ** (i + 1))
            for slots in itertools.product(range(1, big_t + 1), repeat=i):
                text = ConditionalText.prefix(
                    token_id(params, pos, label, slot)
                    for pos, slot in enumerate(slots, start=1)
                )
                for p in range(i + 1, i + window + 1):
                    for j in range(1, big_t + 1):
                        target = token_id(params, p, label, j)
                        key = (text, target)
                        entries[key] = entries.get(key, 0.0) + mass
    return JointDistribution.from_entries(entries)


def build_vlm_joint(
    params: ToyParams,
    rho_lo: float,
    rho_hi: float,
    budget: int = ENUMERATION_BUDGET,
) -> JointDistribution:
    """Variable-ratio masked joint: uniform mixture over admissible ratios.

    This is the exact law of first drawing a mask ratio uniformly from the
    admissible grid in [rho_lo, rho_hi] and then masking at that ratio.
    """
    from .objectives import admissible_ratios

    ratios = admissible_ratios(params.s, rho_lo, rho_hi)
    if not ratios:
        raise DomainError(
            f"no admissible mask ratio in [{rho_lo}, {rho_hi}] at s={params.s}"
        )
    entries: dict[tuple[ConditionalText, int], float] = {}
    for rho in ratios:
        part = build_masked_joint(params, rho, budget=budget)
        for key, v in part.entries.items():
            entries[key] = entries.get(key, 0.0) + v / len(ratios)
    return JointDistribution.from_entries(entries)


def build_joint_from_sampler(
    spec,
    params: ToyParams,
    n: int,
    rng: np.random.Generator,
) -> JointDistribution:
    """Empirical joint from n Monte Carlo draws of an objective's sampler."""
    from .objectives import sample_pair
    from .toy_model import sample_sequence

    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    counts: dict[tuple[ConditionalText, int], int] = {}
    for _ in range(n):
        label = int(rng.integers(1, params.r + 1))
        x = sample_sequence(params, label, rng)
        key = sample_pair(spec, x, rng)
        counts[key] = counts.get(key, 0) + 1
    return JointDistribution.from_entries(
        {k: c / n for k, c in counts.items()}
    )


def write_joint_csv(joint: JointDistribution, path) -> None:
    """Dump a joint as `row_key,col_token,value` triplets, catalog order."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row_key", "col_token", "value"])
        for text in joint.rows:
            for tok in joint.cols:
                v = joint.entries.get((text, tok))
                if v is not None:
                    writer.writerow([text.key(), tok, repr(v)])


def write_matrix_csv(m: NormalizedMatrix, path) -> None:
    """Dump a normalized matrix as `row_key,col_token,value`, zeros skipped."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row_key", "col_token", "value"])
        for i, text in enumerate(m.rows):
            for j, tok in enumerate(m.cols):
                v = m.matrix[i, j]
                if v != 0.0:
                    writer.writerow([text.key(), tok, repr(float(v))])
