"""Bus/branch network model, PMU measurement model and synthetic data generation.

All electrical quantities are per unit, all angles are radians.  A bus state is
the rectangular voltage ``[V_re, V_im]``; the whole network state is an
``(n, 2)`` float array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ResultNotPD, Unobservable, UnknownEndpoint

FROM_TO = "from_to"
TO_FROM = "to_from"
VOLTAGE = "voltage"
CURRENT = "current"


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    """Unified pi-model branch between buses ``from_bus`` and ``to_bus``.

    ``g``/``b`` are the series admittance, ``g_s``/``b_s`` the shunt admittance
    seen at each end, ``tau`` the off-nominal tap ratio (on the from side) and
    ``phi`` the phase shift.
    """

    from_bus: int
    to_bus: int
    g: float
    b: float
    g_s: float = 0.0
    b_s: float = 0.0
    tau: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise InputError(f"self-branch at bus {self.from_bus}")
        if not self.tau > 0:
            raise InputError(f"tap ratio must be positive, got {self.tau}")

    @classmethod
    def from_impedance(cls, from_bus, to_bus, r, x, g_s=0.0, b_s=0.0, tau=1.0, phi=0.0):
        y = 1.0 / complex(r, x)
        return cls(from_bus, to_bus, y.real, y.imag, g_s, b_s, tau, phi)


@dataclass
class BusBranchModel:
    buses: list
    branches: list

    def __post_init__(self):
        self.buses = sorted(self.buses, key=lambda bus: bus.id)
        ids = [bus.id for bus in self.buses]
        if ids != list(range(len(ids))):
            raise InputError("bus ids must be unique and contiguous from 0")
        n = len(ids)
        if n == 0:
            raise InputError("model has no buses")
        for k, br in enumerate(self.branches):
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise UnknownEndpoint(f"branch {k} references a missing bus")
        if not self._connected():
            raise InputError("branch graph is not connected")

    @property
    def n_buses(self):
        return len(self.buses)

    def neighbors(self):
        """Incident branch ids per bus, in branch order."""
        incident = [[] for _ in self.buses]
        for k, br in enumerate(self.branches):
            incident[br.from_bus].append(k)
            incident[br.to_bus].append(k)
        return incident

    def _connected(self):
        n = len(self.buses)
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for br in self.branches:
            parent[find(br.from_bus)] = find(br.to_bus)
        return len({find(i) for i in range(n)}) == 1


@dataclass(frozen=True)
class Channel:
    """What a phasor measures: a bus voltage or a branch current at one end."""

    kind: str
    bus: int | None = None
    branch: int | None = None
    direction: str | None = None

    def __post_init__(self):
        if self.kind == VOLTAGE:
            if self.bus is None:
                raise InputError("voltage channel needs a bus")
        elif self.kind == CURRENT:
            if self.branch is None or self.direction not in (FROM_TO, TO_FROM):
                raise InputError("current channel needs a branch and a direction")
        else:
            raise InputError(f"unknown channel kind {self.kind!r}")

    @classmethod
    def voltage(cls, bus):
        return cls(VOLTAGE, bus=bus)

    @classmethod
    def current(cls, branch, direction):
        return cls(CURRENT, branch=branch, direction=direction)


@dataclass(frozen=True)
class PolarPhasor:
    channel: Channel
    z_m: float
    z_theta: float
    var_m: float
    var_theta: float

    def __post_init__(self):
        if self.var_m < 0 or self.var_theta < 0:
            raise InputError("measurement variances must be non-negative")


@dataclass(frozen=True)
class RectangularPhasor:
    channel: Channel
    z: np.ndarray
    sigma: np.ndarray

    @property
    def precision(self):
        return np.linalg.inv(self.sigma)


@dataclass
class PmuConfig:
    """PMU locations and the channels each PMU reports.

    ``channels`` maps a PMU bus to its list of channels.  ``None`` means the
    default set: own voltage plus every incident branch current measured
    away from the bus.
    """

    channels: dict = field(default_factory=dict)

    @property
    def buses(self):
        return sorted(self.channels)

    def has_pmu(self, bus):
        return bus in self.channels

    def add(self, bus, channels=None):
        self.channels[bus] = channels

    def resolve(self, model):
        """Flat, ordered channel list for the whole configuration."""
        incident = model.neighbors()
        out = []
        for bus in self.buses:
            chans = self.channels[bus]
            if chans is None:
                chans = default_channels(model, bus, incident)
            out.extend(chans)
        return out


def default_channels(model, bus, incident=None):
    if incident is None:
        incident = model.neighbors()
    chans = [Channel.voltage(bus)]
    for k in incident[bus]:
        direction = FROM_TO if model.branches[k].from_bus == bus else TO_FROM
        chans.append(Channel.current(k, direction))
    return chans


def branch_admittance(branch):
    Y = np.array([[branch.g, -branch.b], [branch.b, branch.g]])
    Ys = np.array([[branch.g_s, -branch.b_s], [branch.b_s, branch.g_s]])
    return Y, Ys


def rotation_matrix(phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s], [s, c]])


def current_coefficients(branch, direction):
    """Coefficient blocks ``(H_from, H_to)`` of a branch current phasor.

    The current measured at one end is ``H_from @ x_from + H_to @ x_to`` with
    ``x`` the rectangular bus voltages.  Blocks are always returned in
    (from bus, to bus) order regardless of the measuring end.
    """
    Y, Ys = branch_admittance(branch)
    tau = branch.tau
    if direction == FROM_TO:
        return (Y + Ys) / tau**2, -(Y @ rotation_matrix(branch.phi)) / tau
    if direction == TO_FROM:
        return -(Y @ rotation_matrix(-branch.phi)) / tau, Y + Ys
    raise InputError(f"unknown direction {direction!r}")


def channel_coefficients(model, channel):
    """``[(bus, H_block), ...]`` describing the linear model of one channel."""
    if channel.kind == VOLTAGE:
        if not 0 <= channel.bus < model.n_buses:
            raise UnknownEndpoint(f"voltage measurement at unknown bus {channel.bus}")
        return [(channel.bus, np.eye(2))]
    if not 0 <= channel.branch < len(model.branches):
        raise UnknownEndpoint(f"current measurement on unknown branch {channel.branch}")
    br = model.branches[channel.branch]
    H_from, H_to = current_coefficients(br, channel.direction)
    return [(br.from_bus, H_from), (br.to_bus, H_to)]


def polar_to_rectangular(p):
    """Rectangular mean and first-order propagated covariance of a polar phasor."""
    c, s = np.cos(p.z_theta), np.sin(p.z_theta)
    zm2 = p.z_m**2
    var_re = p.var_m * c * c + p.var_theta * zm2 * s * s
    var_im = p.var_m * s * s + p.var_theta * zm2 * c * c
    cov = (p.var_m - zm2 * p.var_theta) * s * c
    sigma = np.array([[var_re, cov], [cov, var_im]])
    if not (var_re > 0 and var_re * var_im - cov * cov > 0):
        raise ResultNotPD(f"covariance of {p.channel} is not positive definite")
    return RectangularPhasor(p.channel, np.array([p.z_m * c, p.z_m * s]), sigma)


def to_rectangular(phasors):
    return [polar_to_rectangular(p) for p in phasors]


def exact_phasor(model, state, channel):
    value = np.zeros(2)
    for bus, H in channel_coefficients(model, channel):
        value += H @ state[bus]
    return value


def generate_measurements(
    model,
    state,
    pmu,
    voltage_var=(1e-8, 1e-8),
    current_var=(1e-6, 1e-6),
    rng=None,
    add_noise=True,
):
    """Polar phasor measurements of ``state`` for every configured channel.

    ``voltage_var`` and ``current_var`` are ``(var_m, var_theta)`` pairs that
    are both recorded on the phasor and used to draw independent Gaussian
    magnitude and angle noise.
    """
    rng = np.random.default_rng(rng)
    state = np.asarray(state, dtype=float)
    out = []
    for channel in pmu.resolve(model):
        re, im = exact_phasor(model, state, channel)
        var_m, var_t = voltage_var if channel.kind == VOLTAGE else current_var
        z_m, z_t = np.hypot(re, im), np.arctan2(im, re)
        if add_noise:
            z_m += np.sqrt(var_m) * rng.standard_normal()
            z_t += np.sqrt(var_t) * rng.standard_normal()
        out.append(PolarPhasor(channel, float(z_m), float(z_t), float(var_m), float(var_t)))
    return out


def _covered(model, buses, incident):
    cov = set()
    for bus in buses:
        cov.add(bus)
        for k in incident[bus]:
            br = model.branches[k]
            cov.add(br.to_bus if br.from_bus == bus else br.from_bus)
    return cov


def place_pmus_greedy(model):
    """Greedy observability-ensuring placement with default channel sets.

    Each step adds the PMU whose voltage plus outgoing currents reveal the most
    new bus states, ties broken by the lowest bus id.  With non-zero series
    admittances a current phasor pins the far-end voltage once the near end is
    known, so the rank of ``H`` equals twice the number of buses in the closed
    neighbourhood of the PMU set; that count is the greedy score and the final
    rank is confirmed numerically.
    """
    from .wls import assemble, observability

    incident = model.neighbors()
    n = model.n_buses
    reach = [_covered(model, [bus], incident) for bus in range(n)]
    covered = set()
    pmu = PmuConfig()
    while len(covered) < n:
        gains = [len(reach[bus] - covered) if not pmu.has_pmu(bus) else -1 for bus in range(n)]
        best = int(np.argmax(gains))
        if gains[best] <= 0:
            break
        pmu.add(best)
        covered |= reach[best]

    def rank_of(config):
        chans = config.resolve(model)
        meas = [_unit_phasor(model, c) for c in chans]
        return observability(assemble(model, meas))["rank"]

    # degenerate branch data can break the topological argument
    rank = rank_of(pmu)
    for bus in range(n):
        if rank == 2 * n:
            break
        if not pmu.has_pmu(bus):
            pmu.add(bus)
            rank = rank_of(pmu)
    if rank < 2 * n:
        raise Unobservable(f"rank {rank} < {2 * n} even with PMUs at every bus")
    return pmu


def _unit_phasor(model, channel):
    return RectangularPhasor(channel, np.zeros(2), np.eye(2))


def add_random_pmus(model, pmu, p, rng=None):
    """Independently install a default PMU at each uncovered bus with probability ``p``."""
    rng = np.random.default_rng(rng)
    out = PmuConfig(dict(pmu.channels))
    draws = rng.random(model.n_buses)
    for bus in range(model.n_buses):
        if not out.has_pmu(bus) and draws[bus] < p:
            out.add(bus)
    return out


def synth_state(model, rng=None, magnitude=(0.95, 1.05), angle=(-0.2, 0.2)):
    """Random operating point, magnitudes and angles drawn uniformly per bus."""
    rng = np.random.default_rng(rng)
    n = model.n_buses
    vm = rng.uniform(magnitude[0], magnitude[1], n)
    va = rng.uniform(angle[0], angle[1], n)
    return np.column_stack([vm * np.cos(va), vm * np.sin(va)])


def perturb_state(state, rng=None, magnitude=0.02, angle=0.05):
    """Nearby operating point: polar coordinates shifted by bounded uniform steps."""
    rng = np.random.default_rng(rng)
    v = state[:, 0] + 1j * state[:, 1]
    n = len(v)
    vm = np.abs(v) + rng.uniform(-magnitude, magnitude, n)
    va = np.angle(v) + rng.uniform(-angle, angle, n)
    return np.column_stack([vm * np.cos(va), vm * np.sin(va)])


def synthetic_grid(n_buses, avg_degree=3.0, rng=None, ring_size=8, transformer_share=0.1):
    """Seeded ring-of-rings test network.

    Buses are grouped into rings of ``ring_size`` consecutive buses, the rings
    are chained into an outer ring, and random chords are added until the
    average degree reaches ``avg_degree``.  No parallel branches are created.
    """
    rng = np.random.default_rng(rng)
    buses = [Bus(i, 110.0) for i in range(n_buses)]
    pairs = []
    seen = set()

    def link(a, b):
        key = (min(a, b), max(a, b))
        if a == b or key in seen:
            return False
        seen.add(key)
        pairs.append((a, b))
        return True

    rings = [list(range(s, min(s + ring_size, n_buses))) for s in range(0, n_buses, ring_size)]
    for ring in rings:
        for a, b in zip(ring, ring[1:] + ring[:1]):
            link(a, b)
    if len(rings) > 1:
        for r in range(len(rings)):
            nxt = rings[(r + 1) % len(rings)]
            link(rings[r][len(rings[r]) // 2], nxt[0])

    target = int(round(avg_degree * n_buses / 2))
    max_pairs = n_buses * (n_buses - 1) // 2
    target = min(target, max_pairs)
    while len(pairs) < target:
        a, b = rng.integers(0, n_buses, 2)
        link(int(a), int(b))

    branches = []
    for a, b in pairs:
        r = rng.uniform(0.005, 0.05)
        x = rng.uniform(0.05, 0.3)
        if rng.random() < transformer_share:
            branches.append(
                Branch.from_impedance(
                    a, b, r, x, tau=rng.uniform(0.95, 1.05), phi=rng.uniform(-0.1, 0.1)
                )
            )
        else:
            branches.append(Branch.from_impedance(a, b, r, x, b_s=rng.uniform(0.0, 0.05)))
    return BusBranchModel(buses, branches)


def three_bus_case():
    """Three-bus triangle, every branch r = 0.1, x = 0.2 p.u."""
    buses = [Bus(i) for i in range(3)]
    branches = [
        Branch.from_impedance(0, 1, 0.1, 0.2),
        Branch.from_impedance(0, 2, 0.1, 0.2),
        Branch.from_impedance(1, 2, 0.1, 0.2),
    ]
    return BusBranchModel(buses, branches)


def three_bus_measurements(var_m=1e-6, var_theta=1e-4):
    """PMUs at buses 0 and 1 of :func:`three_bus_case`, in reporting order."""
    table = [
        (Channel.voltage(0), 1.11, -0.10),
        (Channel.voltage(1), 0.94, -0.11),
        (Channel.current(0, FROM_TO), 0.71, -1.22),
        (Channel.current(1, FROM_TO), 0.67, -2.01),
        (Channel.current(0, TO_FROM), 0.71, 1.92),
        (Channel.current(2, FROM_TO), 0.53, 3.03),
    ]
    return [PolarPhasor(c, zm, zt, var_m, var_theta) for c, zm, zt in table]
