"""Trait spaces, branching mechanisms and the built-in model families.

A :class:`Model` is a list of independent event channels
(:class:`BranchingMechanism`).  When a channel fires on a particle, the
particle is removed and replaced by its offspring; for the house-of-cards
immigration channel the offspring are a copy of the parent plus one mutant
with a Uniform[0, 1] trait, which is the same as "the parent survives and
gives birth".

Three families are built in:

``yule``            one type, binary fission at rate ``b``;
``finite_type``     multitype branching with a type kernel for the children;
``house_of_cards``  traits in [0, 1], constant between events, selection
                    encoded by ``alpha(x) = -r(x) * sum_k (k - 1) p_k(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Optional, Sequence

import numpy as np

from .dsl import Expr
from .quadrature import QuadratureError, integrate_log

__all__ = [
    "ModelError",
    "TraitSpace",
    "BranchingMechanism",
    "Model",
    "HouseOfCardsParams",
    "HoCConditions",
    "LOCAL",
    "KERNEL",
    "IMMIGRATION",
    "make_yule",
    "make_finite_type",
    "make_house_of_cards",
    "finite_channel",
    "mutation_channel",
]

LOCAL = "local"
KERNEL = "finite_type_kernel"
IMMIGRATION = "house_of_cards_immigration"

PROB_TOL = 1e-12
GRID_POINTS = 10_000
IMPROPER_EPS = 1e-8


class ModelError(ValueError):
    """Invalid model parameters."""


@dataclass(frozen=True)
class TraitSpace:
    kind: str
    d: Optional[int] = None

    def __post_init__(self):
        if self.kind == "finite":
            if self.d is None or int(self.d) != self.d or self.d < 1:
                raise ModelError(f"finite trait space needs d >= 1, got {self.d!r}")
        elif self.kind == "unit_interval":
            if self.d is not None:
                raise ModelError("unit_interval takes no dimension")
        else:
            raise ModelError(f"unknown trait space kind {self.kind!r}")

    @classmethod
    def finite(cls, d):
        return cls("finite", int(d))

    @classmethod
    def unit_interval(cls):
        return cls("unit_interval")

    @property
    def is_finite(self):
        return self.kind == "finite"

    def contains(self, x):
        if self.is_finite:
            return float(x) == int(x) and 0 <= int(x) < self.d
        return 0.0 <= float(x) <= 1.0

    def validation_grid(self):
        """Types ``0..d-1``, or a fixed 10^4-point grid of [0, 1]."""
        if self.is_finite:
            return np.arange(self.d, dtype=float)
        return np.linspace(0.0, 1.0, GRID_POINTS)


def _as_function(obj):
    if obj is None or callable(obj):
        return obj
    return Expr(obj)


@dataclass(frozen=True, eq=False)
class BranchingMechanism:
    """One event channel.

    For finite trait spaces ``rate`` is a length-``d`` vector and
    ``offspring_law`` a ``(d, max_offspring + 1)`` matrix.  On the unit
    interval both are functions of the trait (``offspring_law`` is a sequence
    of functions ``p_0, p_1, ...``).  ``kernel`` is the row-stochastic
    type matrix used by :data:`KERNEL` placement: every child independently
    draws its type from the row of its parent.
    """

    rate: object
    offspring_law: object
    placement: str = LOCAL
    kernel: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.placement not in (LOCAL, KERNEL, IMMIGRATION):
            raise ModelError(f"unknown placement {self.placement!r}")
        if self.placement == KERNEL and self.kernel is None:
            raise ModelError("kernel placement requires a type kernel")
        if isinstance(self.rate, (list, tuple, np.ndarray)):
            object.__setattr__(self, "rate", np.asarray(self.rate, dtype=float))
            law = np.atleast_2d(np.asarray(self.offspring_law, dtype=float))
            object.__setattr__(self, "offspring_law", law)
        else:
            object.__setattr__(self, "rate", _as_function(self.rate))
            law = tuple(_as_function(p) for p in self.offspring_law)
            object.__setattr__(self, "offspring_law", law)
        if self.kernel is not None:
            object.__setattr__(self, "kernel", np.asarray(self.kernel, dtype=float))

    @property
    def tabulated(self):
        return isinstance(self.rate, np.ndarray)

    @property
    def max_offspring(self):
        if self.tabulated:
            return self.offspring_law.shape[1] - 1
        return len(self.offspring_law) - 1

    def rates(self, x):
        x = np.asarray(x, dtype=float)
        if self.tabulated:
            return self.rate[x.astype(np.int64)]
        return np.asarray(self.rate(x), dtype=float) * np.ones_like(x)

    def offspring_probs(self, x):
        """Offspring-count probabilities, shape ``x.shape + (max_offspring + 1,)``."""
        x = np.asarray(x, dtype=float)
        if self.tabulated:
            return self.offspring_law[x.astype(np.int64)]
        cols = [np.asarray(p(x), dtype=float) * np.ones_like(x) for p in self.offspring_law]
        return np.stack(cols, axis=-1)

    def mean_offspring(self, x):
        p = self.offspring_probs(x)
        return p @ np.arange(p.shape[-1], dtype=float)

    def factorial_moment2(self, x):
        """``sum_k k (k - 1) p_k(x)``."""
        p = self.offspring_probs(x)
        k = np.arange(p.shape[-1], dtype=float)
        return p @ (k * (k - 1.0))

    def validate(self, space):
        grid = space.validation_grid()
        r = self.rates(grid)
        if not np.all(np.isfinite(r)):
            raise ModelError(f"channel {self.name!r}: rate is not finite on the validation grid")
        if np.any(r < 0):
            i = int(np.argmin(r))
            raise ModelError(f"channel {self.name!r}: negative rate {r[i]!r} at x={grid[i]!r}")
        p = self.offspring_probs(grid)
        if np.any(~np.isfinite(p)) or np.any(p < -PROB_TOL):
            raise ModelError(f"channel {self.name!r}: offspring law has negative or non-finite entries")
        err = np.max(np.abs(p.sum(axis=-1) - 1.0))
        if err > PROB_TOL:
            raise ModelError(
                f"channel {self.name!r}: offspring probabilities sum to 1 only within {err:.3g}"
            )
        if self.placement == KERNEL:
            if not space.is_finite:
                raise ModelError("kernel placement is only defined on finite trait spaces")
            K = self.kernel
            if K.shape != (space.d, space.d):
                raise ModelError(f"type kernel has shape {K.shape}, expected {(space.d, space.d)}")
            if np.any(K < 0):
                raise ModelError("type kernel has negative entries")
            rows = K.sum(axis=1)
            bad = np.flatnonzero(np.abs(rows - 1.0) > PROB_TOL)
            if bad.size:
                raise ModelError(
                    f"type kernel row {int(bad[0])} sums to {rows[bad[0]]!r}, not 1"
                )
        if self.tabulated and space.is_finite:
            if self.rate.shape != (space.d,) or self.offspring_law.shape[0] != space.d:
                raise ModelError(
                    f"channel {self.name!r}: rates/offspring laws do not match d={space.d}"
                )


def _ones(x):
    return np.ones(np.shape(x))


@dataclass(frozen=True, eq=False)
class Model:
    """An immutable branching model, safe to share between simulation workers."""

    name: str
    space: TraitSpace
    mechanisms: tuple
    V: Optional[Callable] = None
    moment_order: int = 4
    params: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        object.__setattr__(self, "mechanisms", tuple(self.mechanisms))
        object.__setattr__(self, "V", _as_function(self.V) or _ones)
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        if not self.mechanisms:
            raise ModelError("a model needs at least one branching mechanism")
        if int(self.moment_order) != self.moment_order or self.moment_order < 4:
            raise ModelError(f"moment_order must be an integer >= 4, got {self.moment_order!r}")
        for m in self.mechanisms:
            m.validate(self.space)
        grid = self.space.validation_grid()
        v = np.asarray(self.V(grid), dtype=float) * np.ones_like(grid)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ModelError("weight function V must be positive and finite")
        if not np.isfinite(self.total_rate(grid).max()):
            raise ModelError("total event rate is unbounded on the validation grid")

    @property
    def is_finite(self):
        return self.space.is_finite

    @property
    def max_offspring(self):
        return max(m.max_offspring for m in self.mechanisms)

    def total_rate(self, x):
        return sum(m.rates(x) for m in self.mechanisms)

    def weight(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.V(x), dtype=float) * np.ones_like(x)

    def mean_matrix(self):
        """Generator ``A`` of the mean semigroup on a finite trait space,
        acting on functions: ``(A f)_i = sum_j A_ij f_j``."""
        if not self.is_finite:
            raise ModelError("mean_matrix is only defined for finite trait spaces")
        d = self.space.d
        types = np.arange(d, dtype=float)
        A = np.zeros((d, d))
        for m in self.mechanisms:
            r = m.rates(types)
            m1 = m.mean_offspring(types)
            K = m.kernel if m.placement == KERNEL else np.eye(d)
            A += (r * m1)[:, None] * K - np.diag(r)
        return A

    @property
    def alpha(self):
        """Selection function of a house-of-cards model."""
        if self.name != "house_of_cards":
            raise ModelError("alpha is only defined for house-of-cards models")
        return self.params["hoc"].alpha

    def describe(self):
        lines = [f"model: {self.name}", f"trait space: {self.space.kind}"
                 + (f" (d={self.space.d})" if self.space.is_finite else "")]
        for k, v in self.params.items():
            lines.append(f"{k}: {v}")
        for m in self.mechanisms:
            lines.append(
                f"channel {m.name or '?'}: placement={m.placement}, max_offspring={m.max_offspring}"
            )
        return "\n".join(lines)


# --------------------------------------------------------------------------
# finite-type families


def finite_channel(rates, offspring_laws, type_kernel=None, name="branching"):
    rates = np.atleast_1d(np.asarray(rates, dtype=float))
    laws = np.atleast_2d(np.asarray(offspring_laws, dtype=float))
    if laws.shape[0] != rates.shape[0]:
        raise ModelError(
            f"dimension mismatch: {rates.shape[0]} rates but {laws.shape[0]} offspring laws"
        )
    d = rates.shape[0]
    if type_kernel is None or np.array_equal(np.asarray(type_kernel, dtype=float), np.eye(d)):
        return BranchingMechanism(rates, laws, LOCAL, name=name)
    K = np.atleast_2d(np.asarray(type_kernel, dtype=float))
    if K.shape != (d, d):
        raise ModelError(f"dimension mismatch: type kernel {K.shape} for d={d}")
    return BranchingMechanism(rates, laws, KERNEL, kernel=K, name=name)


def mutation_channel(rates, type_kernel, name="mutation"):
    """A particle of type i changes type at rate ``rates[i]`` (one child drawn
    from ``type_kernel[i]``)."""
    rates = np.atleast_1d(np.asarray(rates, dtype=float))
    laws = np.tile([0.0, 1.0], (rates.shape[0], 1))
    return BranchingMechanism(rates, laws, KERNEL, kernel=np.asarray(type_kernel, float), name=name)


def make_yule(b):
    """Binary fission at rate ``b > 0``; ``lambda = b`` and ``h = 1``."""
    b = float(b)
    if not b > 0 or not np.isfinite(b):
        raise ModelError(f"Yule rate must be positive, got {b!r}")
    mech = BranchingMechanism([b], [[0.0, 0.0, 1.0]], LOCAL, name="fission")
    return Model("yule", TraitSpace.finite(1), (mech,), params={"b": b})


def make_finite_type(rates, offspring_laws, type_kernel=None, extra_mechanisms=(), V=None,
                     moment_order=4):
    """Multitype branching model.

    Parameters
    ----------
    rates : (d,) branching rates per type.
    offspring_laws : (d, kmax + 1) offspring-count probabilities per type.
    type_kernel : (d, d) row-stochastic matrix; each child of a type-i parent
        independently gets type j with probability ``type_kernel[i, j]``.
        ``None`` means children inherit the parent type.
    extra_mechanisms : further channels, e.g. :func:`mutation_channel`.
    """
    main = finite_channel(rates, offspring_laws, type_kernel)
    d = main.rate.shape[0]
    mechs = (main,) + tuple(extra_mechanisms)
    params = {"rates": main.rate.tolist(), "offspring_laws": main.offspring_law.tolist()}
    if type_kernel is not None:
        params["type_kernel"] = np.asarray(type_kernel, dtype=float).tolist()
    for m in extra_mechanisms:
        params[f"{m.name}_rates"] = m.rate.tolist()
        if m.kernel is not None:
            params[f"{m.name}_kernel"] = m.kernel.tolist()
    Vf = None
    if V is not None:
        Vv = np.asarray(V, dtype=float)
        Vf = lambda x: Vv[np.asarray(x).astype(np.int64)]  # noqa: E731
    return Model("finite_type", TraitSpace.finite(d), mechs, V=Vf,
                 moment_order=moment_order, params=params)


# --------------------------------------------------------------------------
# house of cards


class _SignSplit:
    """Default realization of a selection function ``alpha``: pure death at
    rate ``alpha`` where it is nonnegative, binary fission at rate ``-alpha``
    where it is negative."""

    def __init__(self, alpha, k):
        self.alpha = alpha
        self.k = k

    def __call__(self, x):
        a = self.alpha(x)
        if self.k == 0:
            return (a >= 0).astype(float)
        if self.k == 2:
            return (a < 0).astype(float)
        return np.zeros_like(a)


@dataclass(frozen=True)
class HoCConditions:
    constant_alpha: bool
    min_gap: float          # min over (0, 1] of alpha(x) - alpha(0)
    min_gap_at: float
    gap_integral: float     # int_eps^1 dx / (alpha(x) - alpha(0))
    realization_error: float


@dataclass(frozen=True)
class HouseOfCardsParams:
    """Selection function ``alpha`` and, optionally, an explicit realization
    ``(r, p_0, p_1, ...)`` with ``alpha = -r * sum_k (k - 1) p_k``.

    Without a realization, ``alpha >= 0`` is realized as death at rate
    ``alpha`` and ``alpha < 0`` as binary fission at rate ``-alpha``.
    """

    alpha: object
    rate: object = None
    offspring: Optional[Sequence] = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", _as_function(self.alpha))
        if (self.rate is None) != (self.offspring is None):
            raise ModelError("give both rate and offspring for an explicit realization, or neither")
        if self.rate is not None:
            object.__setattr__(self, "rate", _as_function(self.rate))
            object.__setattr__(self, "offspring", tuple(_as_function(p) for p in self.offspring))

    def realization(self):
        if self.rate is not None:
            return self.rate, self.offspring
        a = self.alpha
        return (lambda x: np.abs(a(x))), (_SignSplit(a, 0), _SignSplit(a, 1), _SignSplit(a, 2))

    def check(self):
        """Evaluate the validity conditions; raises :class:`ModelError` when
        they fail."""
        x = np.linspace(0.0, 1.0, GRID_POINTS)
        a = np.asarray(self.alpha(x), dtype=float) * np.ones_like(x)
        if not np.all(np.isfinite(a)):
            raise ModelError("alpha is not finite on [0, 1]")
        a0 = float(a[0])
        rate, laws = self.realization()
        r = np.asarray(rate(x), dtype=float) * np.ones_like(x)
        p = np.stack([np.asarray(q(x), dtype=float) * np.ones_like(x) for q in laws], axis=-1)
        k = np.arange(p.shape[-1], dtype=float)
        implied = -r * (p @ (k - 1.0))
        real_err = float(np.max(np.abs(implied - a)))
        if real_err > 1e-9 * (1.0 + np.max(np.abs(a))):
            raise ModelError(
                f"realization does not reproduce alpha: max |-r sum (k-1) p_k - alpha| = {real_err:.3g}"
            )
        gap = a[1:] - a0
        i = int(np.argmin(gap))
        constant = bool(np.max(np.abs(a - a0)) <= 1e-14 * (1.0 + abs(a0)))
        if constant:
            return HoCConditions(True, 0.0, float(x[1 + i]), float("inf"), real_err)
        if not gap[i] > 0:
            raise ModelError(
                "selection-gap condition violated: alpha(x) - alpha(0) must be > 0 on (0, 1], "
                f"min value {gap[i]!r} at x={x[1 + i]!r}"
            )
        alpha = self.alpha
        try:
            I = integrate_log(lambda y: 1.0 / (alpha(y) - alpha(0.0)), eps=IMPROPER_EPS,
                              strict=False)
        except QuadratureError as exc:
            raise ModelError(f"integral condition could not be evaluated: {exc}") from None
        if not I > 1.0:
            raise ModelError(
                "integral condition violated: int_0^1 dx / (alpha(x) - alpha(0)) = "
                f"{I!r} (truncated at {IMPROPER_EPS:g}) must exceed 1"
            )
        return HoCConditions(False, float(gap[i]), float(x[1 + i]), I, real_err)


def make_house_of_cards(params, V=None, moment_order=4):
    """House-of-cards mutation model on [0, 1].

    Channel ``branching``: at rate ``r(x)`` the particle is replaced by ``k``
    children at the same trait with probability ``p_k(x)``.  Channel
    ``mutation``: at rate 1 the particle survives and gives birth to one
    child with a Uniform[0, 1] trait.
    """
    if not isinstance(params, HouseOfCardsParams):
        params = HouseOfCardsParams(params)
    cond = params.check()
    rate, laws = params.realization()
    branching = BranchingMechanism(rate, laws, LOCAL, name="branching")
    mutation = BranchingMechanism(lambda x: np.ones(np.shape(x)), (lambda x: np.zeros(np.shape(x)),
                                                                   lambda x: np.ones(np.shape(x))),
                                  IMMIGRATION, name="mutation")
    return Model("house_of_cards", TraitSpace.unit_interval(), (branching, mutation), V=V,
                 moment_order=moment_order,
                 params={"hoc": params, "alpha": str(params.alpha), "conditions": cond})
