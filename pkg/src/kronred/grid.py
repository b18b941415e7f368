"""Grid model: buses, lines, parsers, synchronized fixed point, linearization.

A grid is a connected network of second-order phase oscillators
(swing dynamics).  Buses are split into a "slow" component (large
inertia/damping, e.g. synchronous generators) and a "fast" component
(small inertia/damping, e.g. loads), with the timescale ratio carried
as a separate parameter ``epsilon`` so the same assembly can be reused
across timescale studies.

Conventions used throughout the package:
  * coupling b_ij = B_ij * |V_i| * |V_j| (line susceptance times voltage
    magnitudes), symmetric by construction;
  * the Jacobian at an operating point has off-diagonal entries
    b_ij*cos(theta_i - theta_j) and diagonal minus the row sum, i.e. it
    is the negative of a weighted graph Laplacian when all angle
    differences stay within (-pi/2, pi/2);
  * the reference angle is fixed by the zero-mean convention (the
    dynamics are invariant under uniform shifts);
  * state orderings are always slow buses first, then fast buses, each
    in the order of appearance in ``Grid.buses``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, NumericsError

SLOW = "slow"
FAST = "fast"

_BUS_FIELDS = {"id", "class", "m", "d", "p", "sigma", "tau", "v"}
_BUS_REQUIRED = {"id", "class", "m", "d", "p", "sigma", "tau"}
_LINE_FIELDS = {"from", "to", "B"}


@dataclass(frozen=True)
class Bus:
    """One bus: dynamic parameters, injection and local noise spec.

    m is the effective inertia [s^2], d the damping [s], p the injected
    (positive) or withdrawn (negative) power [p.u.], sigma/tau the
    standard deviation [p.u.] and correlation time [s] of the local
    Ornstein-Uhlenbeck noise, v the (constant) voltage magnitude [p.u.].
    """

    id: int
    speed_class: str
    m: float
    d: float
    p: float
    sigma: float
    tau: float
    v: float = 1.0

    def __post_init__(self):
        if self.speed_class not in (SLOW, FAST):
            raise InputError(f"bus {self.id}: class must be 'slow' or 'fast', got {self.speed_class!r}")
        if not self.m > 0:
            raise InputError(f"bus {self.id}: inertia m must be > 0, got {self.m}")
        if not self.d > 0:
            raise InputError(f"bus {self.id}: damping d must be > 0, got {self.d}")
        if not self.tau > 0:
            raise InputError(f"bus {self.id}: noise correlation time tau must be > 0, got {self.tau}")
        if self.sigma < 0:
            raise InputError(f"bus {self.id}: noise sigma must be >= 0, got {self.sigma}")
        if not self.v > 0:
            raise InputError(f"bus {self.id}: voltage magnitude v must be > 0, got {self.v}")


@dataclass(frozen=True)
class Line:
    """Transmission line between two buses with susceptance B [p.u.]."""

    from_bus: int
    to_bus: int
    b: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise InputError(f"line {self.from_bus}-{self.to_bus}: self-loop not allowed")
        if not self.b > 0:
            raise InputError(f"line {self.from_bus}-{self.to_bus}: susceptance must be > 0, got {self.b}")


@dataclass(frozen=True)
class Grid:
    """Connected grid of buses and lines.  Immutable after construction."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_power: float = 1.0

    def __post_init__(self):
        if not self.buses:
            raise InputError("grid has no buses")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise InputError(f"duplicate bus ids: {dup}")
        known = set(ids)
        seen_pairs = set()
        for ln in self.lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in known:
                    raise InputError(f"line {ln.from_bus}-{ln.to_bus}: unknown bus {end}")
            pair = frozenset((ln.from_bus, ln.to_bus))
            if pair in seen_pairs:
                raise InputError(f"duplicate line between buses {ln.from_bus} and {ln.to_bus}")
            seen_pairs.add(pair)
        if not any(b.speed_class == SLOW for b in self.buses):
            raise InputError("grid must contain at least one slow bus")
        if not _connected(ids, self.lines):
            raise InputError("graph not connected")

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def slow_ids(self) -> list[int]:
        return [b.id for b in self.buses if b.speed_class == SLOW]

    @property
    def fast_ids(self) -> list[int]:
        return [b.id for b in self.buses if b.speed_class == FAST]

    def bus_index(self) -> dict[int, int]:
        """Map bus id -> position in ``buses``."""
        return {b.id: k for k, b in enumerate(self.buses)}

    def ordering(self) -> list[int]:
        """Positions of slow buses followed by fast buses (state ordering)."""
        idx = self.bus_index()
        return [idx[i] for i in self.slow_ids] + [idx[i] for i in self.fast_ids]

    def coupling_matrix(self) -> np.ndarray:
        """Symmetric coupling matrix b_ij = B_ij |V_i||V_j|, indexed like ``buses``."""
        idx = self.bus_index()
        vmag = np.array([b.v for b in self.buses])
        n = self.n_buses
        b = np.zeros((n, n))
        for ln in self.lines:
            i, j = idx[ln.from_bus], idx[ln.to_bus]
            w = ln.b * vmag[i] * vmag[j]
            b[i, j] = w
            b[j, i] = w
        return b

    def param_vector(self, name: str) -> np.ndarray:
        """Per-bus parameter (m, d, p, sigma, tau, v) in ``buses`` order."""
        return np.array([getattr(b, name) for b in self.buses], dtype=float)


def _connected(ids: list[int], lines: tuple[Line, ...]) -> bool:
    if len(ids) == 1:
        return True
    adj: dict[int, list[int]] = {i: [] for i in ids}
    for ln in lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {ids[0]}
    stack = [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(ids)


@dataclass(frozen=True)
class OperatingPoint:
    """Synchronized fixed point.

    ``theta`` holds the angles [rad] aligned with ``Grid.buses`` order
    (zero-mean gauge).  ``flagged_lines`` lists lines whose angle
    difference leaves (-pi/2, pi/2); such points are accepted but the
    Laplacian sign structure of the Jacobian is no longer guaranteed.
    """

    theta: np.ndarray
    residual_norm: float
    flagged_lines: tuple[tuple[int, int], ...] = ()

    @property
    def angle_window_ok(self) -> bool:
        return not self.flagged_lines


@dataclass(frozen=True)
class LinearizedSystem:
    """Two-timescale linearization around an operating point.

    Jacobian blocks follow the slow-then-fast ordering.  ``m_fast`` and
    ``d_fast`` hold the unscaled fast-bus parameters; the timescale
    ratio ``epsilon`` is stored separately, so integrators use
    epsilon*m_fast (resp. epsilon*d_fast) as the physical coefficients
    and one assembly serves a whole epsilon sweep.
    """

    slow_ids: tuple[int, ...]
    fast_ids: tuple[int, ...]
    j_ss: np.ndarray
    j_sf: np.ndarray
    j_fs: np.ndarray
    j_ff: np.ndarray
    m_slow: np.ndarray
    m_fast: np.ndarray
    d_slow: np.ndarray
    d_fast: np.ndarray
    epsilon: float

    @property
    def n_slow(self) -> int:
        return len(self.slow_ids)

    @property
    def n_fast(self) -> int:
        return len(self.fast_ids)


# ---------------------------------------------------------------------------
# JSON parsing / serialization
# ---------------------------------------------------------------------------

def parse_grid_json(text: str) -> Grid:
    """Parse the grid JSON schema into a validated Grid.

    Top level: {"buses": [...], "lines": [...]}.  Bus objects carry
    exactly the fields id, class, m, d, p, sigma, tau and optionally v
    (default 1.0); line objects carry from, to, B.  Unknown fields are
    rejected with their path.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise InputError("top level must be a JSON object")
    unknown = set(doc) - {"buses", "lines"}
    if unknown:
        raise InputError(f"unknown top-level fields: {sorted(unknown)}")
    for key in ("buses", "lines"):
        if key not in doc or not isinstance(doc[key], list):
            raise InputError(f"missing or non-array field {key!r}")

    buses = []
    for k, raw in enumerate(doc["buses"]):
        path = f"buses[{k}]"
        if not isinstance(raw, dict):
            raise InputError(f"{path}: must be an object")
        unknown = set(raw) - _BUS_FIELDS
        if unknown:
            raise InputError(f"{path}: unknown fields {sorted(unknown)}")
        missing = _BUS_REQUIRED - set(raw)
        if missing:
            raise InputError(f"{path}: missing fields {sorted(missing)}")
        if not isinstance(raw["id"], int):
            raise InputError(f"{path}.id: must be an integer")
        for name in ("m", "d", "p", "sigma", "tau", "v"):
            if name in raw and not isinstance(raw[name], (int, float)):
                raise InputError(f"{path}.{name}: must be a number")
        buses.append(Bus(
            id=raw["id"], speed_class=raw["class"], m=float(raw["m"]),
            d=float(raw["d"]), p=float(raw["p"]), sigma=float(raw["sigma"]),
            tau=float(raw["tau"]), v=float(raw.get("v", 1.0)),
        ))

    lines = []
    for k, raw in enumerate(doc["lines"]):
        path = f"lines[{k}]"
        if not isinstance(raw, dict):
            raise InputError(f"{path}: must be an object")
        unknown = set(raw) - _LINE_FIELDS
        if unknown:
            raise InputError(f"{path}: unknown fields {sorted(unknown)}")
        missing = _LINE_FIELDS - set(raw)
        if missing:
            raise InputError(f"{path}: missing fields {sorted(missing)}")
        lines.append(Line(from_bus=raw["from"], to_bus=raw["to"], b=float(raw["B"])))

    return Grid(buses=tuple(buses), lines=tuple(lines))


def serialize_grid_json(grid: Grid) -> str:
    """Serialize a Grid to the JSON schema (round-trips with parse_grid_json)."""
    doc = {
        "buses": [
            {"id": b.id, "class": b.speed_class, "m": b.m, "d": b.d, "p": b.p,
             "sigma": b.sigma, "tau": b.tau, "v": b.v}
            for b in grid.buses
        ],
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "B": ln.b} for ln in grid.lines
        ],
    }
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# MATPOWER case parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassDefaults:
    """Dynamic and noise parameters applied per speed class at ingestion."""

    m: float
    d: float
    sigma: float
    tau: float


def _matpower_table(text: str, name: str) -> list[list[float]]:
    m = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\];", text, re.DOTALL)
    if m is None:
        raise InputError(f"missing mpc.{name} table")
    rows = []
    for raw in m.group(1).split(";"):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rows.append([float(tok) for tok in raw.split()])
        except ValueError as e:
            raise InputError(f"mpc.{name}: cannot parse row {raw[:60]!r}") from e
    return rows


def parse_matpower_case(
    text: str,
    slow: ClassDefaults,
    fast: ClassDefaults,
    rebalance: bool = False,
) -> Grid:
    """Build a Grid from a MATPOWER case file (plain-text subset).

    Buses with at least one entry in the gen table become slow, all
    others fast.  Line couplings use 1/x per branch (parallel branches
    are merged by adding 1/x); voltage magnitudes come from the bus VM
    column; injections are total generator output minus bus load, in
    per-unit of baseMVA.  Shunts, phase shifts and line resistance are
    ignored.  With ``rebalance`` the generator outputs are scaled by a
    common factor so injections sum to zero (case files carry losses).
    """
    comment_free = re.sub(r"%.*", "", text)
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9eE.+-]+)\s*;", comment_free)
    base_mva = float(m.group(1)) if m else 100.0

    bus_rows = _matpower_table(comment_free, "bus")
    branch_rows = _matpower_table(comment_free, "branch")
    gen_rows = _matpower_table(comment_free, "gen")

    load = {}
    vmag = {}
    for row in bus_rows:
        if len(row) < 9:
            raise InputError("mpc.bus: row too short (need at least 9 columns)")
        bid = int(row[0])
        load[bid] = row[2]
        vmag[bid] = row[7] if row[7] > 0 else 1.0

    gen_output: dict[int, float] = {}
    for row in gen_rows:
        if len(row) < 2:
            raise InputError("mpc.gen: row too short (need at least 2 columns)")
        bid = int(row[0])
        if bid not in load:
            raise InputError(f"mpc.gen: unknown bus {bid}")
        gen_output[bid] = gen_output.get(bid, 0.0) + row[1]

    couplings: dict[frozenset, float] = {}
    for row in branch_rows:
        if len(row) < 4:
            raise InputError("mpc.branch: row too short (need at least 4 columns)")
        f, t, x = int(row[0]), int(row[1]), row[3]
        if f not in load or t not in load:
            raise InputError(f"mpc.branch: branch {f}-{t} references unknown bus")
        if len(row) >= 11 and row[10] == 0:
            continue  # out of service
        if x == 0:
            raise InputError(f"mpc.branch: zero reactance on branch {f}-{t}")
        couplings[frozenset((f, t))] = couplings.get(frozenset((f, t)), 0.0) + 1.0 / abs(x)

    gen_total = sum(gen_output.values())
    load_total = sum(load.values())
    scale = 1.0
    if rebalance:
        if gen_total == 0:
            raise InputError("cannot rebalance: no generation in case")
        scale = load_total / gen_total

    buses = []
    for row in bus_rows:
        bid = int(row[0])
        is_gen = bid in gen_output
        cls = slow if is_gen else fast
        p = (scale * gen_output.get(bid, 0.0) - load[bid]) / base_mva
        buses.append(Bus(
            id=bid, speed_class=SLOW if is_gen else FAST, m=cls.m, d=cls.d,
            p=p, sigma=cls.sigma, tau=cls.tau, v=vmag[bid],
        ))

    lines = []
    for pair, b in sorted(couplings.items(), key=lambda kv: tuple(sorted(kv[0]))):
        f, t = sorted(pair)
        lines.append(Line(from_bus=f, to_bus=t, b=b))

    return Grid(buses=tuple(buses), lines=tuple(lines), base_power=base_mva)


def with_sigma(grid: Grid, sigma: np.ndarray) -> Grid:
    """Copy of the grid with per-bus noise sigma replaced (buses order)."""
    if len(sigma) != grid.n_buses:
        raise InputError(f"sigma length {len(sigma)} != number of buses {grid.n_buses}")
    buses = tuple(replace(b, sigma=float(s)) for b, s in zip(grid.buses, sigma))
    return Grid(buses=buses, lines=grid.lines, base_power=grid.base_power)


# ---------------------------------------------------------------------------
# Fixed point and linearization
# ---------------------------------------------------------------------------

def _power_residual(grid: Grid, coupling: np.ndarray, theta: np.ndarray) -> np.ndarray:
    p = grid.param_vector("p")
    sin_diff = np.sin(theta[:, None] - theta[None, :])
    return p - (coupling * sin_diff).sum(axis=1)


def _angle_jacobian(coupling: np.ndarray, theta: np.ndarray) -> np.ndarray:
    cos_w = coupling * np.cos(theta[:, None] - theta[None, :])
    np.fill_diagonal(cos_w, 0.0)
    return cos_w - np.diag(cos_w.sum(axis=1))


def solve_fixed_point(grid: Grid, tol: float = 1e-10, max_iter: int = 50) -> OperatingPoint:
    """Newton solve of the synchronized fixed point in the zero-mean gauge.

    The injections must balance (sum to ~0); the iteration runs on the
    subspace orthogonal to the uniform shift via a bordered system, with
    step halving (up to 40 halvings) when the residual does not decrease.
    """
    p = grid.param_vector("p")
    if abs(p.sum()) > 1e-8 * max(1.0, np.abs(p).max()) * grid.n_buses:
        raise InputError(f"unbalanced injections: sum(p) = {p.sum():.3e}")

    coupling = grid.coupling_matrix()
    n = grid.n_buses
    theta = np.zeros(n)
    r = _power_residual(grid, coupling, theta)
    rnorm = float(np.linalg.norm(r))

    for _ in range(max_iter):
        if rnorm <= tol:
            break
        jac = _angle_jacobian(coupling, theta)
        bordered = np.zeros((n + 1, n + 1))
        bordered[:n, :n] = jac
        bordered[:n, n] = 1.0
        bordered[n, :n] = 1.0
        rhs = np.concatenate([-r, [0.0]])
        try:
            delta = np.linalg.solve(bordered, rhs)[:n]
        except np.linalg.LinAlgError as e:
            raise NumericsError("singular Jacobian away from the uniform mode") from e

        step = 1.0
        for _halving in range(41):
            trial = theta + step * delta
            r_trial = _power_residual(grid, coupling, trial)
            if np.linalg.norm(r_trial) < rnorm:
                break
            step *= 0.5
        else:
            raise NumericsError(
                f"no fixed point found: Newton stalled at residual {rnorm:.3e} "
                "(injections may exceed line capacity)")
        theta = trial
        r = r_trial
        rnorm = float(np.linalg.norm(r))
    else:
        raise NumericsError(
            f"no fixed point found within {max_iter} iterations (residual {rnorm:.3e})")

    theta = theta - theta.mean()
    idx = grid.bus_index()
    flagged = tuple(
        (ln.from_bus, ln.to_bus) for ln in grid.lines
        if abs(theta[idx[ln.from_bus]] - theta[idx[ln.to_bus]]) >= math.pi / 2
    )
    return OperatingPoint(theta=theta, residual_norm=rnorm, flagged_lines=flagged)


def build_jacobian(grid: Grid, op_point: OperatingPoint) -> np.ndarray:
    """Jacobian of the coupling at the operating point (negative Laplacian).

    J_ij = b_ij cos(theta*_i - theta*_j) for connected i != j, and
    J_ii = -sum_k J_ik; symmetric with zero row sums.
    """
    theta = np.asarray(op_point.theta, dtype=float)
    if theta.shape != (grid.n_buses,):
        raise InputError(f"operating point has {theta.shape} angles for {grid.n_buses} buses")
    return _angle_jacobian(grid.coupling_matrix(), theta)


def assemble_linearized(grid: Grid, jacobian: np.ndarray, epsilon: float) -> LinearizedSystem:
    """Split the Jacobian into slow/fast blocks with diagonal M and D.

    Fast-bus inertia and damping are stored unscaled; epsilon in (0, 1]
    is kept separate so the physical fast coefficients are
    epsilon*m_fast and epsilon*d_fast.
    """
    if not 0.0 < epsilon <= 1.0:
        raise InputError(
            f"epsilon must be in (0, 1], got {epsilon}; use the reduced model for the epsilon -> 0 limit")
    slow_ids = grid.slow_ids
    fast_ids = grid.fast_ids
    if not slow_ids:
        raise InputError("empty slow set: nothing to retain")
    idx = grid.bus_index()
    s = [idx[i] for i in slow_ids]
    f = [idx[i] for i in fast_ids]
    m = grid.param_vector("m")
    d = grid.param_vector("d")
    return LinearizedSystem(
        slow_ids=tuple(slow_ids),
        fast_ids=tuple(fast_ids),
        j_ss=jacobian[np.ix_(s, s)].copy(),
        j_sf=jacobian[np.ix_(s, f)].copy(),
        j_fs=jacobian[np.ix_(f, s)].copy(),
        j_ff=jacobian[np.ix_(f, f)].copy(),
        m_slow=m[s].copy(),
        m_fast=m[f].copy(),
        d_slow=d[s].copy(),
        d_fast=d[f].copy(),
        epsilon=float(epsilon),
    )
