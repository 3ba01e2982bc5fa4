"""Factor graph construction in scalar, multivariate and fusion modes.

Voltage phasors become unary factors on one bus variable.  Current phasors
become coupling factors between the two end buses; in fusion mode all coupling
factors on the same unordered bus pair are merged into one factor with stacked
rows.  In scalar mode every bus is split into a real and an imaginary scalar
variable and every phasor into two scalar factors with diagonal covariance, so
a current factor touches four scalar variables.

The object view (``UnaryFactor``/``PairwiseFactor``) is what callers inspect;
the engine works on :class:`PackedGraph`, which groups coupling factors with
the same arity and row count into dense array blocks.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import EmptyMeasurementSet, MixedPairs
from .messages import MOMENT, MessageStore, is_canonical
from .power_model import VOLTAGE, channel_coefficients

DEFAULT_MEAN = (1.0, 0.0)
DEFAULT_PRECISION = 1e-8


class GraphMode(str, enum.Enum):
    SCALAR = "scalar"
    MULTIVARIATE = "multivariate"
    FUSION = "fusion"


@dataclass(frozen=True)
class VariableNode:
    id: int
    bus: int
    dim: int
    component: int | None
    unary: tuple
    pairwise: tuple


@dataclass(frozen=True)
class UnaryFactor:
    id: int
    variable: int
    z: np.ndarray
    lam: np.ndarray
    source: int


@dataclass(frozen=True)
class PairwiseFactor:
    """Coupling factor ``z = sum_a H[a] @ x[variables[a]] + noise``.

    Multivariate and fusion factors have two endpoints with ``2d`` rows for
    ``d`` stacked measurements.  Scalar current factors have four endpoints
    and one row.  ``sources`` lists the measurement index behind every row
    block (two rows per source in vector modes, one in scalar mode).
    """

    id: int
    variables: tuple
    z: np.ndarray
    sigma: np.ndarray
    H: tuple
    sources: tuple

    @property
    def i(self):
        return self.variables[0]

    @property
    def j(self):
        return self.variables[1]

    @property
    def H_i(self):
        return self.H[0]

    @property
    def H_j(self):
        return self.H[1]

    @property
    def d(self):
        return len(self.sources)

    def oriented(self):
        """Same factor with endpoints in ascending variable order."""
        order = sorted(range(len(self.variables)), key=lambda a: self.variables[a])
        if order == list(range(len(order))):
            return self
        return PairwiseFactor(
            self.id,
            tuple(self.variables[a] for a in order),
            self.z,
            self.sigma,
            tuple(self.H[a] for a in order),
            self.sources,
        )


def fuse_pairwise(factors, new_id=None):
    """Merge two-endpoint factors on one variable pair into a single factor."""
    factors = [f.oriented() for f in factors]
    pairs = {f.variables for f in factors}
    if len(pairs) != 1:
        raise MixedPairs(f"factors span {len(pairs)} variable pairs")
    if len(factors) == 1 and new_id is None:
        return factors[0]
    z = np.concatenate([f.z for f in factors])
    r = len(z)
    sigma = np.zeros((r, r))
    row = 0
    for f in factors:
        n = len(f.z)
        sigma[row : row + n, row : row + n] = f.sigma
        row += n
    H = tuple(np.vstack([f.H[a] for f in factors]) for a in range(2))
    sources = tuple(s for f in factors for s in f.sources)
    fid = factors[0].id if new_id is None else new_id
    return PairwiseFactor(fid, factors[0].variables, z, sigma, H, sources)


@dataclass
class Block:
    """Coupling factors sharing arity ``k`` and row count ``r``, stored densely."""

    factor_ids: np.ndarray  # (F,)
    var: np.ndarray  # (F, k)
    H: np.ndarray  # (F, k, r, D)
    z: np.ndarray  # (F, r)
    sigma: np.ndarray  # (F, r, r)
    sources: np.ndarray  # (F, r // rows_per_source)
    edge_offset: int

    @property
    def n_factors(self):
        return self.var.shape[0]

    @property
    def arity(self):
        return self.var.shape[1]

    @property
    def rows(self):
        return self.z.shape[1]

    @property
    def edge_slice(self):
        return slice(self.edge_offset, self.edge_offset + self.var.size)

    def copy(self):
        return Block(
            self.factor_ids.copy(),
            self.var.copy(),
            self.H.copy(),
            self.z.copy(),
            self.sigma.copy(),
            self.sources.copy(),
            self.edge_offset,
        )


@dataclass
class PackedGraph:
    dim: int
    n_var: int
    unary_var: np.ndarray
    unary_z: np.ndarray
    unary_lam: np.ndarray
    unary_source: np.ndarray
    blocks: list
    edge_var: np.ndarray
    var_ptr: np.ndarray
    var_edges: np.ndarray
    lonely: np.ndarray
    default_mean: np.ndarray
    default_prec: np.ndarray
    _pairs: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_edges(self):
        return len(self.edge_var)

    def unary_aggregate(self):
        """Per-variable sum of unary precisions and information vectors."""
        D = self.dim
        lam = np.zeros((self.n_var, D, D))
        eta = np.zeros((self.n_var, D))
        np.add.at(lam, self.unary_var, self.unary_lam)
        np.add.at(eta, self.unary_var, np.einsum("uij,uj->ui", self.unary_lam, self.unary_z))
        return lam, eta

    def exclusion_pairs(self):
        """``(target edge, other edge)`` for every ordered pair sharing a variable."""
        if self._pairs is None:
            out = []
            for v in range(self.n_var):
                edges = self.var_edges[self.var_ptr[v] : self.var_ptr[v + 1]]
                if len(edges) > 1:
                    a, b = np.meshgrid(edges, edges, indexing="ij")
                    mask = a != b
                    out.append(np.column_stack([a[mask], b[mask]]))
            self._pairs = np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)
        return self._pairs

    def partner(self):
        """Opposite edge of each edge of a two-endpoint factor."""
        out = np.empty(self.n_edges, dtype=np.int64)
        for blk in self.blocks:
            if blk.arity != 2:
                raise ValueError("partner edges exist only for two-endpoint factors")
            local = np.arange(blk.var.size)
            out[blk.edge_slice] = blk.edge_offset + (local ^ 1)
        return out

    def copy(self):
        return PackedGraph(
            self.dim,
            self.n_var,
            self.unary_var.copy(),
            self.unary_z.copy(),
            self.unary_lam.copy(),
            self.unary_source.copy(),
            [b.copy() for b in self.blocks],
            self.edge_var,
            self.var_ptr,
            self.var_edges,
            self.lonely,
            self.default_mean.copy(),
            self.default_prec.copy(),
            self._pairs,
        )


class FactorGraph:
    """Immutable bipartite graph of bus variables and measurement factors."""

    def __init__(self, mode, n_buses, variables, unary, pairwise, default_mean=None,
                 default_precision=DEFAULT_PRECISION):
        self.mode = GraphMode(mode)
        self.n_buses = n_buses
        self.variables = tuple(variables)
        self.unary = tuple(unary)
        self.pairwise = tuple(pairwise)
        D = self.dim
        if default_mean is None:
            default_mean = DEFAULT_MEAN
        mean = np.asarray(default_mean, dtype=float).reshape(-1)
        self._default_mean = mean
        prec = np.asarray(default_precision, dtype=float)
        self._default_prec = prec * np.eye(D) if prec.ndim == 0 else prec.reshape(D, D)

    @property
    def dim(self):
        return 1 if self.mode is GraphMode.SCALAR else 2

    @property
    def edges(self):
        return [(f.id, v) for f in self.pairwise for v in f.variables]

    def default_message(self, variable):
        """Prior message emitted by ``variable`` when it has nothing else to send."""
        if self.dim == 1:
            comp = self.variables[variable].component
            return self._default_mean[comp : comp + 1].copy(), self._default_prec.copy()
        return self._default_mean.copy(), self._default_prec.copy()

    @cached_property
    def packed(self):
        return _pack(self)

    def to_json(self):
        return json.dumps(
            {
                "mode": self.mode.value,
                "variables": [
                    {"id": v.id, "bus": v.bus, "dim": v.dim, "component": v.component}
                    for v in self.variables
                ],
                "unary": [
                    {"id": u.id, "variable": u.variable, "z": u.z.tolist(),
                     "lambda": u.lam.tolist(), "source": u.source}
                    for u in self.unary
                ],
                "pairwise": [
                    {"id": f.id, "variables": list(f.variables), "z": f.z.tolist(),
                     "sigma": f.sigma.tolist(), "H": [h.tolist() for h in f.H],
                     "sources": list(f.sources)}
                    for f in self.pairwise
                ],
                "edges": [list(e) for e in self.edges],
            },
            indent=1,
        )


def build_graph(model, measurements, mode=GraphMode.FUSION, diagonal_covariance=False,
                default_mean=None, default_precision=DEFAULT_PRECISION):
    """Factor graph of rectangular phasor ``measurements`` over ``model``.

    ``diagonal_covariance`` drops the real/imaginary cross-covariance of every
    phasor; scalar mode always does.
    """
    mode = GraphMode(mode)
    if not measurements:
        raise EmptyMeasurementSet("no measurements")
    n = model.n_buses
    coeffs = [channel_coefficients(model, m.channel) for m in measurements]
    if mode is GraphMode.SCALAR:
        return _build_scalar(model, measurements, coeffs, default_mean, default_precision)

    unary, raw = [], []
    for idx, (m, blocks) in enumerate(zip(measurements, coeffs)):
        sigma = np.diag(np.diag(m.sigma)) if diagonal_covariance else m.sigma.copy()
        if m.channel.kind == VOLTAGE:
            unary.append(UnaryFactor(len(unary), blocks[0][0], m.z.copy(), np.linalg.inv(sigma), idx))
        else:
            (bi, Hi), (bj, Hj) = blocks
            raw.append(PairwiseFactor(-1, (bi, bj), m.z.copy(), sigma, (Hi, Hj), (idx,)).oriented())

    n_unary = len(unary)
    if mode is GraphMode.MULTIVARIATE:
        pairwise = [
            PairwiseFactor(n_unary + k, f.variables, f.z, f.sigma, f.H, f.sources)
            for k, f in enumerate(raw)
        ]
    else:
        groups = {}
        for f in raw:
            groups.setdefault(f.variables, []).append(f)
        pairwise = [fuse_pairwise(g, new_id=n_unary + k) for k, g in enumerate(groups.values())]

    variables = []
    for v in range(n):
        variables.append(
            VariableNode(
                v, v, 2, None,
                tuple(u.id for u in unary if u.variable == v),
                tuple(f.id for f in pairwise if v in f.variables),
            )
        )
    return FactorGraph(mode, n, variables, unary, pairwise, default_mean, default_precision)


def _build_scalar(model, measurements, coeffs, default_mean, default_precision):
    unary, pairwise = [], []
    for idx, (m, blocks) in enumerate(zip(measurements, coeffs)):
        var = np.diag(m.sigma)
        if m.channel.kind == VOLTAGE:
            bus = blocks[0][0]
            for c in range(2):
                unary.append(
                    UnaryFactor(-1, 2 * bus + c, m.z[c : c + 1].copy(),
                                np.array([[1.0 / var[c]]]), idx)
                )
            continue
        (bi, Hi), (bj, Hj) = blocks
        if bi > bj:
            (bi, Hi), (bj, Hj) = (bj, Hj), (bi, Hi)
        for c in range(2):
            pairwise.append(
                PairwiseFactor(
                    -1,
                    (2 * bi, 2 * bi + 1, 2 * bj, 2 * bj + 1),
                    m.z[c : c + 1].copy(),
                    np.array([[var[c]]]),
                    (Hi[c : c + 1, 0:1].copy(), Hi[c : c + 1, 1:2].copy(),
                     Hj[c : c + 1, 0:1].copy(), Hj[c : c + 1, 1:2].copy()),
                    (idx,),
                )
            )
    unary = [UnaryFactor(k, u.variable, u.z, u.lam, u.source) for k, u in enumerate(unary)]
    n_unary = len(unary)
    pairwise = [
        PairwiseFactor(n_unary + k, f.variables, f.z, f.sigma, f.H, f.sources)
        for k, f in enumerate(pairwise)
    ]
    variables = []
    for v in range(2 * model.n_buses):
        variables.append(
            VariableNode(
                v, v // 2, 1, v % 2,
                tuple(u.id for u in unary if u.variable == v),
                tuple(f.id for f in pairwise if v in f.variables),
            )
        )
    return FactorGraph(GraphMode.SCALAR, model.n_buses, variables, unary, pairwise,
                       default_mean, default_precision)


def _pack(graph):
    D = graph.dim
    n_var = len(graph.variables)
    U = len(graph.unary)
    unary_var = np.array([u.variable for u in graph.unary], dtype=np.int64)
    unary_z = np.array([u.z for u in graph.unary], dtype=float).reshape(U, D)
    unary_lam = np.array([u.lam for u in graph.unary], dtype=float).reshape(U, D, D)
    unary_source = np.array([u.source for u in graph.unary], dtype=np.int64)

    groups = {}
    for f in graph.pairwise:
        groups.setdefault((len(f.variables), len(f.z)), []).append(f)

    blocks, edge_var = [], []
    offset = 0
    for key in sorted(groups):
        fs = groups[key]
        k, r = key
        blk = Block(
            np.array([f.id for f in fs], dtype=np.int64),
            np.array([f.variables for f in fs], dtype=np.int64).reshape(len(fs), k),
            np.array([np.stack(f.H) for f in fs], dtype=float).reshape(len(fs), k, r, D),
            np.array([f.z for f in fs], dtype=float),
            np.array([f.sigma for f in fs], dtype=float),
            np.array([f.sources for f in fs], dtype=np.int64),
            offset,
        )
        blocks.append(blk)
        edge_var.append(blk.var.reshape(-1))
        offset += blk.var.size
    edge_var = np.concatenate(edge_var) if edge_var else np.zeros(0, dtype=np.int64)

    order = np.argsort(edge_var, kind="stable")
    counts = np.bincount(edge_var, minlength=n_var)
    var_ptr = np.zeros(n_var + 1, dtype=np.int64)
    np.cumsum(counts, out=var_ptr[1:])
    has_unary = np.zeros(n_var, dtype=bool)
    has_unary[unary_var] = True
    lonely = (~has_unary[edge_var]) & (counts[edge_var] == 1)

    default_mean = np.array([graph.default_message(v)[0] for v in range(n_var)]).reshape(n_var, D)
    default_prec = np.array([graph.default_message(v)[1] for v in range(n_var)]).reshape(n_var, D, D)
    return PackedGraph(D, n_var, unary_var, unary_z, unary_lam, unary_source, blocks,
                       edge_var, var_ptr, order.astype(np.int64), lonely,
                       default_mean, default_prec)


def initialize_messages(graph, form=MOMENT, default_mean=None, default_precision=None):
    """Initial variable-to-factor messages.

    A variable with unary factors sends the product of those factors on every
    edge; any other variable sends the default prior (the graph's own unless
    overridden here).
    """
    pg = graph.packed if isinstance(graph, FactorGraph) else graph
    if default_mean is not None or default_precision is not None:
        pg = pg.copy()
        D = pg.dim
        if default_mean is not None:
            mean = np.asarray(default_mean, dtype=float).reshape(-1)
            if D == 1:
                pg.default_mean = mean[np.arange(pg.n_var) % len(mean)].reshape(-1, 1)
            else:
                pg.default_mean = np.broadcast_to(mean, (pg.n_var, D)).copy()
        if default_precision is not None:
            prec = np.asarray(default_precision, dtype=float)
            prec = prec * np.eye(D) if prec.ndim == 0 else prec.reshape(D, D)
            pg.default_prec = np.broadcast_to(prec, (pg.n_var, D, D)).copy()
    return initial_store(pg, form)


def initial_store(pg, form=MOMENT):
    D, E = pg.dim, pg.n_edges
    lam_u, eta_u = pg.unary_aggregate()
    has_unary = np.zeros(pg.n_var, dtype=bool)
    has_unary[pg.unary_var] = True
    lam = np.where(has_unary[:, None, None], lam_u, pg.default_prec)
    eta = np.where(
        has_unary[:, None], eta_u, np.einsum("vij,vj->vi", pg.default_prec, pg.default_mean)
    )
    mean = np.where(has_unary[:, None], 0.0, pg.default_mean)
    if np.any(has_unary):
        mean[has_unary] = np.linalg.solve(lam[has_unary], eta[has_unary][..., None])[..., 0]
    ev = pg.edge_var
    vec = eta[ev] if is_canonical(form) else mean[ev]
    return MessageStore(
        form,
        vec.copy(),
        lam[ev].copy(),
        np.zeros((E, D)),
        np.zeros((E, D, D)),
    )


def graph_stats(graph):
    return {
        "variable_nodes": len(graph.variables),
        "factor_nodes": len(graph.unary) + len(graph.pairwise),
        "pairwise_edges": sum(len(f.variables) for f in graph.pairwise),
    }
