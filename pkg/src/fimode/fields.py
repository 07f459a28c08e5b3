"""Polynomial vector fields on R^D for D in {1, 2, 3}, total degree <= 3.

A field component is a sum of monomials ``c * x1^e1 * ... * xD^eD``.  Fields
are autonomous (the state derivative depends on the state only) and are kept
in a canonical form: duplicate exponent tuples merged, zero coefficients
dropped, terms in graded-lexicographic order.  Values are treated as
immutable after construction, so they can be shared freely across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

MAX_DIM = 3
MAX_DEGREE = 3

#: one monomial: (coefficient, exponent tuple of length dim)
Monomial = tuple[float, tuple[int, ...]]


def enumerate_monomials(dim: int, max_degree: int) -> list[tuple[int, ...]]:
    """All exponent tuples for `dim` variables with total degree <= `max_degree`.

    Ordered graded-lexicographically: ascending total degree, then descending
    lexicographic within a degree (x1 before x2 before x3).  The count equals
    C(dim + max_degree, max_degree).
    """
    if not 1 <= dim <= MAX_DIM:
        raise ValueError(f"dim must be in 1..{MAX_DIM}, got {dim}")
    if not 0 <= max_degree <= MAX_DEGREE:
        raise ValueError(f"max_degree must be in 0..{MAX_DEGREE}, got {max_degree}")
    tuples = []
    for total in range(max_degree + 1):
        level = [e for e in _compositions(total, dim)]
        level.sort(key=lambda e: tuple(-v for v in e))
        tuples.extend(level)
    return tuples


def _compositions(total: int, parts: int):
    """Tuples of `parts` non-negative ints summing to `total`."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


def _monomial_sort_key(exponents: tuple[int, ...]):
    return (sum(exponents), tuple(-v for v in exponents))


@dataclass
class StatePoint:
    """A single state x(t); length must match the field it is evaluated on."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or not 1 <= self.values.size <= MAX_DIM:
            raise ValueError("state must be a vector of length 1..3")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("state entries must be finite")

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass
class PolynomialVectorField:
    """dim components, each a list of (coefficient, exponents) monomials."""

    dim: int
    components: list[list[Monomial]]
    # evaluation tables, built lazily on first eval
    _tables: tuple | None = dc_field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.dim <= MAX_DIM:
            raise ValueError(f"dim must be in 1..{MAX_DIM}, got {self.dim}")
        if len(self.components) != self.dim:
            raise ValueError("need exactly one component per dimension")
        for comp in self.components:
            for coeff, exps in comp:
                if len(exps) != self.dim:
                    raise ValueError("exponent tuple length must equal dim")
                if any(e < 0 or int(e) != e for e in exps):
                    raise ValueError("exponents must be non-negative integers")
                if sum(exps) > MAX_DEGREE:
                    raise ValueError(f"monomial degree exceeds {MAX_DEGREE}")
                if not math.isfinite(coeff):
                    raise ValueError("coefficients must be finite")

    def _build_tables(self):
        coeffs, exps, comp_idx = [], [], []
        for d, comp in enumerate(self.components):
            for coeff, e in comp:
                coeffs.append(coeff)
                exps.append(e)
                comp_idx.append(d)
        if coeffs:
            c = np.asarray(coeffs, dtype=float)
            e = np.asarray(exps, dtype=np.int64)
            idx = np.asarray(comp_idx, dtype=np.intp)
        else:
            c = np.zeros(0)
            e = np.zeros((0, self.dim), dtype=np.int64)
            idx = np.zeros(0, dtype=np.intp)
        self._tables = (c, e, idx)

    def __call__(self, x) -> np.ndarray:
        return eval_field(self, x)

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at an (N, dim) array of states; returns (N, dim)."""
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.dim:
            raise ValueError(f"expected points of shape (N, {self.dim})")
        if self._tables is None:
            self._build_tables()
        c, e, idx = self._tables
        out = np.zeros((points.shape[0], self.dim))
        if c.size:
            with np.errstate(over="ignore", invalid="ignore"):
                terms = c * np.prod(points[:, None, :] ** e[None, :, :], axis=2)
                for d in range(self.dim):
                    sel = idx == d
                    if sel.any():
                        out[:, d] = terms[:, sel].sum(axis=1)
        return out

    def text(self) -> list[str]:
        """Canonical text form of each component, graded-lex term order."""
        return [component_text(comp) for comp in self.components]

    def __str__(self) -> str:
        return "; ".join(
            f"dx{d + 1}/dt = {s}" for d, s in enumerate(self.text())
        )


def component_text(component: list[Monomial]) -> str:
    if not component:
        return "0"
    parts = []
    for coeff, exps in sorted(component, key=lambda m: _monomial_sort_key(m[1])):
        coeff = float(coeff)
        factors = []
        for i, e in enumerate(exps):
            if e == 1:
                factors.append(f"x{i + 1}")
            elif e > 1:
                factors.append(f"x{i + 1}^{e}")
        if factors:
            parts.append(f"{coeff!r} * " + " ".join(factors))
        else:
            parts.append(f"{coeff!r}")
    return " + ".join(parts)


def eval_field(field: PolynomialVectorField, x) -> np.ndarray:
    """Evaluate the field at one state; exact up to float rounding.

    Non-finite results are returned as-is (the caller decides whether a
    blow-up means rejection), but a dimension mismatch raises.
    """
    if isinstance(x, StatePoint):
        x = x.values
    x = np.asarray(x, dtype=float)
    if x.shape != (field.dim,):
        raise ValueError(f"state has shape {x.shape}, field dim is {field.dim}")
    if field._tables is None:
        field._build_tables()
    c, e, idx = field._tables
    if not c.size:
        return np.zeros(field.dim)
    # overflow at extreme states is signalled through non-finite outputs
    with np.errstate(over="ignore", invalid="ignore"):
        terms = c * (x**e).prod(axis=1)
        return np.bincount(idx, weights=terms, minlength=field.dim)


def canonicalize(field: PolynomialVectorField) -> PolynomialVectorField:
    """Merge duplicate exponent tuples, drop zero terms, sort graded-lex.

    Idempotent; validation of degree/dim bounds happens in the constructor.
    """
    new_components = []
    for comp in field.components:
        merged: dict[tuple[int, ...], float] = {}
        for coeff, exps in comp:
            exps = tuple(int(e) for e in exps)
            merged[exps] = merged.get(exps, 0.0) + float(coeff)
        terms = [
            (coeff, exps)
            for exps, coeff in merged.items()
            if coeff != 0.0
        ]
        terms.sort(key=lambda m: _monomial_sort_key(m[1]))
        new_components.append(terms)
    return PolynomialVectorField(field.dim, new_components)


def zero_field(dim: int) -> PolynomialVectorField:
    """The all-zero field; its trajectories are constant."""
    return PolynomialVectorField(dim, [[] for _ in range(dim)])
