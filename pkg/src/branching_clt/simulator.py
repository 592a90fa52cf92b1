"""Exact event-driven simulation of branching particle systems.

Randomness: every replica of an ensemble draws from its own
:class:`numpy.random.Generator` seeded with
``SeedSequence(master_seed, spawn_key=(replica,))``.  Streams are therefore
independent by construction and results do not depend on how replicas are
scheduled over worker threads.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from . import _kernel
from .dsl import Expr
from .models import IMMIGRATION, KERNEL, LOCAL, Model

__all__ = [
    "SimulationError",
    "Trajectory",
    "Ensemble",
    "replica_stream",
    "simulate_trajectory",
    "simulate_ensemble",
    "observe",
    "simulate_two_stage",
    "DEFAULT_CAP",
]

log = logging.getLogger(__name__)

DEFAULT_CAP = 10**6
_PLACEMENT_CODE = {LOCAL: _kernel.P_LOCAL, KERNEL: _kernel.P_KERNEL,
                   IMMIGRATION: _kernel.P_IMMIGRATION}


class SimulationError(RuntimeError):
    pass


def replica_stream(master_seed, replica):
    """Seed sequence of replica ``replica`` under ``master_seed``."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(replica),))


def _generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if seed is None:
        raise ValueError("a seed is required")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def _as_callable(f):
    if callable(f):
        return f
    return Expr(f)


def _cdf(p):
    c = np.cumsum(p, axis=-1)
    c[..., -1] = 1.0
    return c


class _Tables:
    """Trait table for one simulation run (shared read-only for finite models)."""

    def __init__(self, model, functions, x0):
        self.model = model
        self.functions = list(functions)
        mechs = model.mechanisms
        self.n_ch = len(mechs)
        self.kmax = max(model.max_offspring, 2)
        self.placement = np.array([_PLACEMENT_CODE[m.placement] for m in mechs], dtype=np.int64)
        self.has_imm = any(m.placement == IMMIGRATION for m in mechs)
        if model.is_finite:
            d = model.space.d
            if not model.space.contains(x0):
                raise ValueError(f"initial type {x0!r} is not in 0..{d - 1}")
            self.x = np.arange(d, dtype=float)
            self.rate, self.cdf, self.f = self._tabulate(self.x)
            self.filled = d
            self.kern = np.zeros((self.n_ch, d, d))
            for c, m in enumerate(mechs):
                if m.placement == KERNEL:
                    self.kern[c] = _cdf(m.kernel)
            self.root = int(x0)
        else:
            if not model.space.contains(x0):
                raise ValueError(f"initial trait {x0!r} is not in [0, 1]")
            self.x = np.array([float(x0)])
            self.rate, self.cdf, self.f = self._tabulate(self.x)
            self.filled = 1
            self.kern = np.zeros((self.n_ch, 1, 1))
            self.root = 0
        self.rbar = float(self.rate[:, : self.filled].sum(axis=0).max())
        self._block = 64

    def _tabulate(self, x):
        m = self.model
        rate = np.stack([mech.rates(x) for mech in m.mechanisms])
        cdf = np.zeros((self.n_ch, x.size, self.kmax + 1))
        for c, mech in enumerate(m.mechanisms):
            p = mech.offspring_probs(x)
            cdf[c, :, : p.shape[-1]] = p
            cdf[c] = _cdf(cdf[c])
        f = np.zeros((len(self.functions), x.size))
        for i, fn in enumerate(self.functions):
            f[i] = np.asarray(fn(x), dtype=float) * np.ones_like(x)
        return rate, cdf, f

    def copy_for_run(self):
        if self.model.is_finite:
            return self
        t = object.__new__(_Tables)
        t.__dict__.update(self.__dict__)
        return t

    def refill(self, rng):
        """Append a block of fresh Uniform[0, 1] mutant traits."""
        u = rng.random(self._block)
        self._block = min(self._block * 2, 1 << 16)
        rate, cdf, f = self._tabulate(u)
        keep = self.filled
        self.x = np.concatenate([self.x[:keep], u])
        self.rate = np.concatenate([self.rate[:, :keep], rate], axis=1)
        self.cdf = np.concatenate([self.cdf[:, :keep], cdf], axis=1)
        self.f = np.concatenate([self.f[:, :keep], f], axis=1)
        self.filled = keep + u.size
        self.rbar = max(self.rbar, float(rate.sum(axis=0).max()))


@dataclass
class _RunResult:
    values: np.ndarray
    truncated: bool
    extinct: bool
    n_alive: int
    n_events: int
    t_end: float
    log: Optional[dict] = None
    trait_values: Optional[np.ndarray] = None


def _run(tables, obs_times, rng, cap, record):
    tables = tables.copy_for_run()
    obs_times = np.ascontiguousarray(obs_times, dtype=float)
    size = int(cap) + tables.kmax + 2
    part_tab = np.empty(size, dtype=np.int64)
    part_id = np.empty(size, dtype=np.int64)
    part_tab[0] = tables.root
    part_id[0] = 0
    istate = np.zeros(_kernel.S_SIZE, dtype=np.int64)
    istate[_kernel.S_N] = 1
    istate[_kernel.S_NEXT_ID] = 1
    istate[_kernel.S_FILLED] = tables.filled
    istate[_kernel.S_POOL] = tables.filled
    istate[_kernel.S_HAS_IMM] = int(tables.has_imm)
    fstate = np.zeros(_kernel.F_SIZE)
    out = np.full((obs_times.size, len(tables.functions)), np.nan)
    ne = 1024 if record else 0
    ev_time = np.empty(ne)
    ev_parent = np.empty(ne, dtype=np.int64)
    ev_nchild = np.empty(ne, dtype=np.int64)
    ch_id = np.empty(2 * ne if record else 0, dtype=np.int64)
    ch_tab = np.empty(2 * ne if record else 0, dtype=np.int64)
    while True:
        fstate[_kernel.F_RBAR] = tables.rbar
        code = _kernel.run(rng, istate, fstate, int(cap), part_tab, part_id,
                           tables.rate, tables.cdf, tables.f, tables.placement, tables.kern,
                           obs_times, out, record, ev_time, ev_parent, ev_nchild, ch_id, ch_tab)
        if code == _kernel.DONE:
            break
        if code == _kernel.NEED_POOL:
            tables.refill(rng)
            istate[_kernel.S_FILLED] = tables.filled
        elif code == _kernel.NEED_LOG:
            ev_time = np.resize(ev_time, 2 * ev_time.size)
            ev_parent = np.resize(ev_parent, 2 * ev_parent.size)
            ev_nchild = np.resize(ev_nchild, 2 * ev_nchild.size)
            ch_id = np.resize(ch_id, 2 * ch_id.size)
            ch_tab = np.resize(ch_tab, 2 * ch_tab.size)
    n_ev = int(istate[_kernel.S_EVENTS])
    logd = None
    if record:
        nc = int(istate[_kernel.S_NCHILD])
        logd = dict(time=ev_time[:n_ev].copy(), parent=ev_parent[:n_ev].copy(),
                    nchild=ev_nchild[:n_ev].copy(), child_id=ch_id[:nc].copy(),
                    child_trait=tables.x[ch_tab[:nc]].copy())
    return _RunResult(values=out, truncated=bool(istate[_kernel.S_TRUNC]),
                      extinct=int(istate[_kernel.S_N]) == 0, n_alive=int(istate[_kernel.S_N]),
                      n_events=n_ev, t_end=float(fstate[_kernel.F_T]), log=logd)


# --------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """One realization: the full event log from a single initial particle.

    Each event removes its parent particle and adds ``n_children`` new ones
    (a surviving parent appears as its own first child, Ulam style).
    """

    model: Model
    x0: float
    horizon: float
    seed: str
    truncated: bool
    event_time: np.ndarray
    event_parent: np.ndarray
    event_nchild: np.ndarray
    child_id: np.ndarray
    child_trait: np.ndarray

    @property
    def n_events(self):
        return int(self.event_time.size)

    @property
    def end_time(self):
        """Time up to which the alive set is known."""
        if self.truncated:
            return float(self.event_time[-1])
        return self.horizon

    def _lifetimes(self):
        n = 1 + self.child_id.size
        birth = np.empty(n)
        death = np.full(n, np.inf)
        trait = np.empty(n)
        birth[0] = 0.0
        trait[0] = self.x0
        ids = np.concatenate([[0], self.child_id])
        birth[1:] = np.repeat(self.event_time, self.event_nchild)
        trait[1:] = self.child_trait
        order = np.argsort(ids)
        if not np.array_equal(ids[order], np.arange(n)):
            raise SimulationError("corrupt event log: particle ids are not contiguous")
        death[self.event_parent] = self.event_time
        return birth, death, trait

    def alive(self, t):
        """Traits of the particles alive at time ``t`` (events at ``t`` included)."""
        t = float(t)
        if t < 0 or t > self.horizon:
            raise ValueError(f"t={t!r} outside [0, {self.horizon!r}]")
        if t > self.end_time:
            raise ValueError(f"trajectory was truncated at t={self.end_time!r}")
        birth, death, trait = self._lifetimes()
        mask = (birth <= t) & (death > t)
        return trait[mask]

    def population(self, t):
        return int(self.alive(t).size)

    def particles(self):
        """Genealogy table: ``(id, parent_id, trait, birth_time)`` arrays."""
        birth, _, trait = self._lifetimes()
        parent = np.full(birth.size, -1, dtype=np.int64)
        parent[self.child_id] = np.repeat(self.event_parent, self.event_nchild)
        return np.arange(birth.size), parent, trait, birth

    def to_tsv(self, fh):
        """One event per line: time, parent id, number of children, child traits."""
        own = isinstance(fh, str)
        if own:
            fh = open(fh, "w", newline="")
        try:
            starts = np.concatenate([[0], np.cumsum(self.event_nchild)])
            fmt = (lambda v: str(int(v))) if self.model.is_finite else repr
            for i in range(self.n_events):
                traits = self.child_trait[starts[i]: starts[i + 1]]
                fh.write(f"{self.event_time[i]!r}\t{int(self.event_parent[i])}\t"
                         f"{int(self.event_nchild[i])}\t{','.join(fmt(float(v)) for v in traits)}\n")
        finally:
            if own:
                fh.close()


def simulate_trajectory(model, x0, horizon, seed, cap=DEFAULT_CAP):
    """Simulate one trajectory up to ``horizon`` and keep its event log."""
    horizon = float(horizon)
    if not horizon >= 0:
        raise ValueError(f"horizon must be >= 0, got {horizon!r}")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    rng = _generator(seed)
    tables = _Tables(model, [], x0)
    res = _run(tables, np.array([horizon]), rng, cap, True)
    lg = res.log
    return Trajectory(model=model, x0=float(x0), horizon=horizon, seed=repr(seed),
                      truncated=res.truncated, event_time=lg["time"], event_parent=lg["parent"],
                      event_nchild=lg["nchild"], child_id=lg["child_id"],
                      child_trait=lg["child_trait"])


def observe(trajectory, t, f):
    """``Z_t(f)``: sum of ``f`` over the particles alive at ``t``."""
    if t > trajectory.horizon:
        raise ValueError(f"t={t!r} is beyond the horizon {trajectory.horizon!r}")
    traits = trajectory.alive(t)
    if traits.size == 0:
        return 0.0
    f = _as_callable(f)
    return float(np.sum(np.asarray(f(traits), dtype=float) * np.ones_like(traits)))


# --------------------------------------------------------------------------
# ensembles


@dataclass
class Ensemble:
    """Replicated functionals ``Z_t(f)`` on an observation grid.

    ``values[i, j, k]`` is ``Z_{grid[j]}(f_k)`` for replica ``i``;
    ``horizon_values[i, k]`` is the same at the extension horizon
    ``max(grid) + extension`` (``None`` without extension).  Truncated
    replicas hold NaN and are excluded by :attr:`valid`.
    """

    model: Model
    x0: float
    grid: np.ndarray
    extension: float
    master_seed: int
    cap: int
    function_names: tuple
    functions: Dict[str, Callable]
    values: np.ndarray
    horizon_values: Optional[np.ndarray]
    truncated: np.ndarray
    extinct: np.ndarray
    n_events: np.ndarray
    triplet: object = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return int(self.truncated.size)

    @property
    def horizon(self):
        return float(self.grid[-1] + self.extension)

    @property
    def valid(self):
        return ~self.truncated

    @property
    def n_truncated(self):
        return int(self.truncated.sum())

    @property
    def truncation_fraction(self):
        return self.n_truncated / self.n

    def index(self, name):
        try:
            return self.function_names.index(name)
        except ValueError:
            raise KeyError(f"test function {name!r} was not recorded") from None

    def grid_index(self, t):
        j = np.flatnonzero(np.isclose(self.grid, t, rtol=0, atol=1e-12))
        if j.size == 0:
            raise KeyError(f"t={t!r} is not on the observation grid {self.grid.tolist()}")
        return int(j[0])

    def Z(self, name, t, valid_only=True):
        """Per-replica ``Z_t(f)``; ``t`` may be a grid time or the horizon."""
        k = self.index(name)
        if self.horizon_values is not None and t == self.horizon and self.extension > 0:
            z = self.horizon_values[:, k]
        else:
            z = self.values[:, self.grid_index(t), k]
        return z[self.valid] if valid_only else z

    def w_hat(self, valid_only=True):
        """``exp(-lambda T) Z_T(h)`` at the extension horizon ``T``."""
        if self.triplet is None or self.horizon_values is None or self.extension <= 0:
            raise SimulationError("W estimates need a triplet and a positive extension")
        w = math.exp(-self.triplet.lam * self.horizon) * self.horizon_values[:, self.index("h")]
        return w[self.valid] if valid_only else w

    def to_csv(self, fh):
        """Rows ``replica,t,function,value,truncated`` in replica-major order."""
        own = isinstance(fh, str)
        if own:
            fh = open(fh, "w", newline="")
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replica", "t", "function", "value", "truncated"])
            times = list(self.grid)
            has_h = self.horizon_values is not None and self.extension > 0
            if has_h:
                times.append(self.horizon)
            for i in range(self.n):
                tr = int(self.truncated[i])
                for j, t in enumerate(times):
                    row = self.values[i, j] if j < self.grid.size else self.horizon_values[i]
                    for k, name in enumerate(self.function_names):
                        w.writerow([i, repr(float(t)), name, repr(float(row[k])), tr])
        finally:
            if own:
                fh.close()

    def to_csv_string(self):
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


def simulate_ensemble(model, x0, grid, extension, n, master_seed, cap=DEFAULT_CAP,
                      test_functions=None, triplet=None, threads=1, dump_dir=None):
    """Simulate ``n`` independent replicas and record ``Z_t(f)`` on ``grid``.

    Parameters
    ----------
    grid : increasing observation times.
    extension : ``T - max(grid)``; when positive and ``triplet`` is given the
        values at ``T`` provide the martingale proxies ``W_T``.
    test_functions : mapping name -> callable or DSL string.
    triplet : eigen-elements; when given, ``h`` is recorded under name ``"h"``.
    threads : worker threads; results are identical for any value.
    dump_dir : when set, every replica's event log is written there as TSV.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("grid must be nonempty, nonnegative and strictly increasing")
    extension = float(extension)
    if extension < 0:
        raise ValueError("extension must be >= 0")
    if n < 1:
        raise ValueError("need at least one replica")
    if master_seed is None:
        raise ValueError("master_seed is required")
    funcs = {}
    if triplet is not None:
        funcs["h"] = triplet.h
    for name, f in (test_functions or {}).items():
        if name in funcs:
            continue
        funcs[name] = _as_callable(f)
    names = tuple(funcs)
    horizon = float(grid[-1] + extension)
    if triplet is not None:
        growth = triplet.lam * horizon
        if growth > math.log(cap):
            warnings.warn(
                f"exp(lambda * horizon) = {math.exp(growth):.3g} exceeds cap={cap}; "
                "expect truncated replicas", RuntimeWarning, stacklevel=2)
    obs = grid if extension <= 0 else np.concatenate([grid, [horizon]])
    shared = _Tables(model, list(funcs.values()), x0)
    record = dump_dir is not None

    def one(i):
        rng = _generator(replica_stream(master_seed, i))
        res = _run(shared, obs, rng, cap, record)
        if record:
            import os
            lg = res.log
            tr = Trajectory(model, float(x0), horizon, repr(i), res.truncated, lg["time"],
                            lg["parent"], lg["nchild"], lg["child_id"], lg["child_trait"])
            tr.to_tsv(os.path.join(dump_dir, f"trajectory_{i:06d}.tsv"))
        return res

    if threads > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    values = np.stack([r.values for r in results])
    truncated = np.array([r.truncated for r in results])
    if truncated.all():
        raise SimulationError(
            f"all {n} replicas hit the population cap {cap}; lower the horizon "
            f"(currently {horizon}) or raise the cap")
    ens = Ensemble(
        model=model, x0=float(x0), grid=grid, extension=extension, master_seed=int(master_seed),
        cap=int(cap), function_names=names, functions=funcs,
        values=values[:, : grid.size], horizon_values=values[:, grid.size] if extension > 0 else None,
        truncated=truncated, extinct=np.array([r.extinct for r in results]),
        n_events=np.array([r.n_events for r in results]), triplet=triplet)
    if ens.n_truncated:
        log.info("%d of %d replicas truncated at cap %d", ens.n_truncated, n, cap)
    return ens


def simulate_two_stage(model, x0, t1, t2, f, n, master_seed, cap=DEFAULT_CAP):
    """``Z_{t2}(f)`` obtained by restarting at ``t1``.

    Each replica is run to ``t1``; every particle alive then starts an
    independent process of duration ``t2 - t1`` and the contributions are
    summed.  By the branching property the result has the law of a direct
    simulation to ``t2``.  Replica ``i`` uses stream ``(master_seed, i)`` for
    the first stage and ``(master_seed, i, j)`` for the ``j``-th restarted
    particle.
    """
    if not 0 <= t1 <= t2:
        raise ValueError("need 0 <= t1 <= t2")
    f = _as_callable(f)
    out = np.empty(n)
    for i in range(n):
        tr = simulate_trajectory(model, x0, t1, replica_stream(master_seed, i), cap=cap)
        if tr.truncated:
            raise SimulationError(f"replica {i} hit the cap in the first stage")
        total = 0.0
        for j, y in enumerate(tr.alive(t1)):
            ss = np.random.SeedSequence(int(master_seed), spawn_key=(i, j))
            res = _run(_Tables(model, [f], float(y)), np.array([t2 - t1]), _generator(ss), cap,
                       False)
            if res.truncated:
                raise SimulationError(f"replica {i} hit the cap in the second stage")
            total += float(res.values[0, 0])
        out[i] = total
    return out
