"""
The tensor-tree Born machine p(x) = ψ(x)² / Z in canonical form.

Every internal node holds a 3-leg tensor whose legs are listed in `legs[node]` by neighbor id.
All tensors are isometries toward the root edge, which carries the diagonal central weight Λ,
so that Z = Σ Λ². A leaf holds a (2 × r) isometry only while it is an endpoint of the root edge.
"""
import collections
import concurrent.futures
import dataclasses
import functools
import logging
import networkx
import numpy
import typing

from . import data
from . import tensor
from . import topology

_log = logging.getLogger(__file__)

PHYSICAL = -1
MAX_ENUMERATION_VARIABLES = 16
# ψ² is clamped to this value where a training-mode log-likelihood needs a finite number
PROBABILITY_FLOOR = 1e-300
_ONE_HOT = numpy.eye(2)


class DegenerateModelError(tensor.NumericalError):
    """ The wave function vanished. """


class ZeroAmplitudeError(tensor.NumericalError):
    """ A sample has amplitude exactly zero. """

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"Sample {index} has zero amplitude.")


class EnumerationLimitError(ValueError):
    """ Exact enumeration was requested for too many variables. """


def _check_enumerable(n: int):
    if n > MAX_ENUMERATION_VARIABLES:
        raise EnumerationLimitError(
            f"Exact enumeration needs n ≤ {MAX_ENUMERATION_VARIABLES} variables, the model has {n}."
        )


@dataclasses.dataclass(frozen=True, eq=False)
class TensorTreeModel:
    topology: topology.TreeTopology
    tensors: typing.Dict[int, numpy.ndarray]
    legs: typing.Dict[int, typing.Tuple[int, ...]]
    central_weight: numpy.ndarray
    chi: int

    @property
    def n(self) -> int:
        return self.topology.n

    @property
    def root_edge(self) -> topology.Edge:
        return self.topology.root_edge

    @property
    def partition_function(self) -> float:
        return float(numpy.sum(self.central_weight ** 2))

    @property
    def isometry_direction(self) -> typing.Dict[int, int]:
        """ { node : root-facing neighbor } for every node that holds a tensor. """
        parent, _ = topology.root_order(self.topology)
        return { v : parent[v] for v in self.tensors }

    def bond_dimension(self, e: typing.Tuple[int, int]) -> int:
        u, v = topology.edge(*e)
        if u in self.tensors:
            return self.tensors[u].shape[self.legs[u].index(v)]
        return self.tensors[v].shape[self.legs[v].index(u)]

    def bond_dimensions(self) -> typing.Dict[topology.Edge, int]:
        return { e : self.bond_dimension(e) for e in self.topology.edges }

    def check_structure(self):
        """ Raises a ValueError if tensors, legs and topology do not fit together. """
        t = self.topology
        p, q = t.root_edge
        if self.chi < 1:
            raise ValueError(f"Bond dimension must be positive, got {self.chi}.")
        expected = set(t.internal_nodes) | ({p} & set(self.tensors))
        if set(self.tensors) != expected or set(self.legs) != expected:
            raise ValueError("Tensors must be given for exactly the internal nodes and the root-edge leaf.")
        for v, T in self.tensors.items():
            lg = self.legs[v]
            if t.is_leaf(v):
                if lg != (PHYSICAL, q) or T.ndim != 2 or T.shape[0] != 2:
                    raise ValueError(f"Leaf {v} must hold a (2 × r) tensor with legs ({PHYSICAL}, {q}).")
                continue
            if T.ndim != 3 or tuple(sorted(lg)) != t.neighbors(v):
                raise ValueError(f"Node {v} has legs {lg}, expected a permutation of {t.neighbors(v)}.")
        for e in t.edges:
            u, v = e
            dims = set()
            if u in self.tensors:
                dims.add(self.tensors[u].shape[self.legs[u].index(v)])
            elif t.is_leaf(u):
                dims.add(2)
            dims.add(self.tensors[v].shape[self.legs[v].index(u)])
            if len(dims) != 1:
                raise ValueError(f"Edge {e} has inconsistent extents {sorted(dims)}.")
            if t.is_virtual(e) and dims.pop() > self.chi:
                raise ValueError(f"Edge {e} exceeds the bond dimension {self.chi}.")
        if self.central_weight.ndim != 1 or len(self.central_weight) != self.bond_dimension(t.root_edge):
            raise ValueError("The central weight must be a vector matching the root bond.")
        if not all(numpy.all(numpy.isfinite(T)) for T in self.tensors.values()):
            raise ValueError("Tensors contain non-finite entries.")
        return


def isometry_error(m: TensorTreeModel) -> float:
    """ Largest deviation of any tensor from being an isometry toward the root edge. """
    worst = 0.0
    for v, f in m.isometry_direction.items():
        T = m.tensors[v]
        lg = m.legs[v]
        mat, _, _ = tensor.matricize(T, [i for i, leg in enumerate(lg) if leg != f])
        gram = mat.T @ mat
        worst = max(worst, float(numpy.max(numpy.abs(gram - numpy.eye(gram.shape[0])))))
    return worst


def _orient(m: TensorTreeModel, node: int, last: int) -> typing.Tuple[numpy.ndarray, typing.Tuple[int, ...]]:
    """ The tensor of `node` with its other legs (sorted by neighbor id) first and `last` at the end. """
    lg = m.legs[node]
    others = tuple(sorted(leg for leg in lg if leg != last))
    perm = [lg.index(o) for o in others] + [lg.index(last)]
    return numpy.transpose(m.tensors[node], perm), others


def _flatten(m: TensorTreeModel) -> typing.Tuple[typing.Dict[int, numpy.ndarray], typing.Dict[int, typing.Tuple[int, ...]]]:
    """ Absorbs Λ and any leaf isometry into the internal root-edge node. """
    tensors = dict(m.tensors)
    legs = dict(m.legs)
    p, q = m.root_edge
    s, o = (q, p) if m.topology.is_leaf(p) else (p, q)
    axis = legs[s].index(o)
    T = tensor.scale_axis(tensors[s], axis, m.central_weight)
    if o in tensors and m.topology.is_leaf(o):
        T = tensor.apply_matrix(T, axis, tensors.pop(o))
        legs.pop(o)
    tensors[s] = T
    return tensors, legs


def canonicalize(
    m: TensorTreeModel,
    root: typing.Optional[typing.Tuple[int, int]]=None,
    *,
    normalize: bool=False,
) -> TensorTreeModel:
    """ Brings the model into canonical form around `root` (default: the current root edge).

    Tensors are turned into isometries by SVDs from the leaves inward,
    the remainder on the root edge is decomposed into P Λ Qᵀ.

    Parameters
    ----------
    m : TensorTreeModel
        a model with finite tensors (need not be canonical)
    root : optional, edge
        the new root edge
    normalize : bool
        rescale Λ so that Z = 1

    Returns
    -------
    model : TensorTreeModel
        an equivalent model in canonical form
    """
    t = m.topology if root is None else m.topology.with_root(root)
    tensors, legs = _flatten(m)
    parent, order = topology.root_order(t)
    p, q = t.root_edge

    residual = {}
    for v in reversed(order):
        if t.is_leaf(v):
            continue
        T = tensors[v]
        lg = legs[v]
        for axis, c in enumerate(lg):
            if c != parent[v] and c in residual:
                T = tensor.apply_matrix(T, axis, residual.pop(c))
        children = tuple(c for c in lg if c != parent[v])
        mat, row_shape, _ = tensor.matricize(T, [lg.index(c) for c in children])
        svd = tensor.svd_truncate(mat, m.chi)
        tensors[v] = svd.u.reshape(row_shape + (svd.rank,))
        legs[v] = children + (parent[v],)
        residual[v] = svd.s[:, None] * svd.v.T

    r_p = residual.get(p)
    r_q = residual.get(q)
    if r_p is None:
        r_p = numpy.eye(r_q.shape[1])
    if r_q is None:
        r_q = numpy.eye(r_p.shape[1])
    svd = tensor.svd_truncate(r_p @ r_q.T, m.chi)
    weight = svd.s
    if not numpy.all(numpy.isfinite(weight)) or weight[0] <= 0:
        raise DegenerateModelError("The wave function vanished during canonicalization.")
    for node, other, isometry in ((p, q, svd.u), (q, p, svd.v)):
        if t.is_leaf(node):
            tensors[node] = isometry
            legs[node] = (PHYSICAL, other)
        else:
            tensors[node] = tensor.apply_matrix(tensors[node], 2, isometry.T)
    if normalize:
        weight = weight / numpy.linalg.norm(weight)
    return TensorTreeModel(t, tensors, legs, weight, m.chi)


def init_model(t: topology.TreeTopology, chi: int, seed) -> TensorTreeModel:
    """ Random model with i.i.d. standard normal tensor entries, canonicalized and normalized to Z = 1. """
    if chi < 2:
        raise ValueError(f"Bond dimension chi must be ≥ 2, got {chi}.")
    rng = numpy.random.default_rng(seed)
    tensors = {}
    legs = {}
    for v in t.internal_nodes:
        lg = t.neighbors(v)
        tensors[v] = rng.standard_normal(tuple(2 if t.is_leaf(w) else chi for w in lg))
        legs[v] = lg
    root_dim = 2 if t.is_leaf(t.root_edge[0]) else chi
    _log.info("Initializing a model with %i variables and chi=%i.", t.n, chi)
    return canonicalize(TensorTreeModel(t, tensors, legs, numpy.ones(root_dim), chi), normalize=True)


def product_model(t: topology.TreeTopology, p_one, chi: int=2) -> TensorTreeModel:
    """ Exact model of independent variables with P(x_i = 1) = p_one[i] (scalar or per-variable). """
    probabilities = numpy.broadcast_to(numpy.asarray(p_one, dtype=float), (t.n,))
    if numpy.any(probabilities < 0) or numpy.any(probabilities > 1):
        raise ValueError("Probabilities must lie in [0, 1].")
    amplitudes = numpy.sqrt(numpy.stack([1 - probabilities, probabilities], axis=1))
    tensors = {}
    legs = {}
    for v in t.internal_nodes:
        lg = t.neighbors(v)
        factors = [amplitudes[w] if t.is_leaf(w) else numpy.ones(1) for w in lg]
        tensors[v] = functools.reduce(numpy.multiply.outer, factors)
        legs[v] = lg
    root_dim = 2 if t.is_leaf(t.root_edge[0]) else 1
    return canonicalize(TensorTreeModel(t, tensors, legs, numpy.ones(root_dim), chi), normalize=True)


def from_wavefunction(t: topology.TreeTopology, psi: numpy.ndarray, chi: int) -> TensorTreeModel:
    """ Decomposes a full amplitude vector (variable 0 is the most significant bit) onto the tree.

    The decomposition is exact unless a bond needs more than `chi` singular values.
    """
    _check_enumerable(t.n)
    psi = numpy.asarray(psi, dtype=float)
    if psi.shape != (2 ** t.n,):
        raise ValueError(f"Expected {2 ** t.n} amplitudes, got shape {psi.shape}.")
    anchor = t.root_edge[1]
    rest = psi.reshape((2,) * t.n)
    labels = list(range(t.n))
    parent = {anchor: None}
    order = [anchor]
    i = 0
    while i < len(order):
        for w in t.graph.neighbors(order[i]):
            if w not in parent:
                parent[w] = order[i]
                order.append(w)
        i += 1

    tensors = {}
    legs = {}
    for v in reversed(order):
        if t.is_leaf(v) or v == anchor:
            continue
        children = tuple(c for c in t.neighbors(v) if c != parent[v])
        mat, row_shape, col_shape = tensor.matricize(rest, [labels.index(c) for c in children])
        svd = tensor.svd_truncate(mat, chi)
        tensors[v] = svd.u.reshape(row_shape + (svd.rank,))
        legs[v] = children + (parent[v],)
        rest = (svd.s[:, None] * svd.v.T).reshape((svd.rank,) + col_shape)
        labels = [v] + [label for label in labels if label not in children]
    tensors[anchor] = rest
    legs[anchor] = tuple(labels)
    root_dim = rest.shape[labels.index(t.root_edge[0])]
    return canonicalize(TensorTreeModel(t, tensors, legs, numpy.ones(root_dim), chi), normalize=True)


def move_root(m: TensorTreeModel, target: typing.Tuple[int, int]) -> TensorTreeModel:
    """ Shifts the canonical center to an edge that shares a node with the root edge. """
    target = topology.edge(*target)
    if target == m.root_edge:
        return m
    if target not in m.topology.edge_age:
        raise KeyError(f"Edge {target} is not part of the topology.")
    p, q = m.root_edge
    shared = set(target) & {p, q}
    if len(shared) != 1:
        raise ValueError(f"Edge {target} is not adjacent to the root edge {m.root_edge}.")
    s = shared.pop()
    o = q if s == p else p
    d = target[0] if target[1] == s else target[1]

    tensors = dict(m.tensors)
    legs = dict(m.legs)
    lg = legs[s]
    T = tensor.scale_axis(tensors[s], lg.index(o), m.central_weight)
    if o in tensors and m.topology.is_leaf(o):
        T = tensor.apply_matrix(T, lg.index(o), tensors.pop(o))
        legs.pop(o)
    rows = [i for i, leg in enumerate(lg) if leg != d]
    mat, row_shape, _ = tensor.matricize(T, rows)
    svd = tensor.svd_truncate(mat, m.chi)
    tensors[s] = svd.u.reshape(row_shape + (svd.rank,))
    legs[s] = tuple(lg[i] for i in rows) + (d,)
    if m.topology.is_leaf(d):
        tensors[d] = svd.v
        legs[d] = (PHYSICAL, s)
    else:
        tensors[d] = tensor.apply_matrix(tensors[d], legs[d].index(s), svd.v.T)
    return TensorTreeModel(m.topology.with_root(target), tensors, legs, svd.s, m.chi)


def move_root_to(m: TensorTreeModel, target: typing.Tuple[int, int]) -> TensorTreeModel:
    """ Moves the root along the tree path to any edge. """
    target = topology.edge(*target)
    if target not in m.topology.edge_age:
        raise KeyError(f"Edge {target} is not part of the topology.")
    if target == m.root_edge:
        return m
    g = m.topology.graph
    _, a, b = min(
        (networkx.shortest_path_length(g, a, b), a, b)
        for a in m.root_edge
        for b in target
    )
    path = networkx.shortest_path(g, a, b)
    for e in [topology.edge(x, y) for x, y in zip(path, path[1:])] + [target]:
        m = move_root(m, e)
    return m


def _changed_nodes(old: TensorTreeModel, new: TensorTreeModel) -> typing.Set[int]:
    nodes = set(old.tensors) | set(new.tensors)
    return {
        v
        for v in nodes
        if old.tensors.get(v) is not new.tensors.get(v) or old.legs.get(v) != new.legs.get(v)
    }


class MessageCache:
    """ Subtree messages of one fixed sample matrix.

    The message (u, v) is the (M, d) array obtained by contracting the subtree behind u
    (seen from v) with its leaves clamped to the samples. Models are immutable and share
    unchanged tensors, so `sync` drops exactly the messages that depend on replaced tensors.
    """

    def __init__(self, samples: numpy.ndarray):
        samples = numpy.asarray(samples)
        if samples.ndim != 2:
            raise ValueError(f"Samples must be a 2-D array, got shape {samples.shape}.")
        self.samples = samples
        self._model = None
        self._messages = {}

    def __len__(self):
        return len(self._messages)

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    def physical(self, leaf: int) -> numpy.ndarray:
        return _ONE_HOT[self.samples[:, leaf]]

    def sync(self, m: TensorTreeModel) -> "MessageCache":
        if m is self._model:
            return self
        if self.samples.shape[1] != m.n:
            raise ValueError(f"Samples have {self.samples.shape[1]} variables, the model has {m.n}.")
        if self._model is None:
            self._messages.clear()
        else:
            changed = _changed_nodes(self._model, m)
            if changed:
                self._invalidate(m.topology, changed)
        self._model = m
        return self

    def _invalidate(self, t: topology.TreeTopology, changed: typing.Set[int]):
        for key in [k for k in self._messages if k[0] in changed or k[1] in changed]:
            del self._messages[key]
        queue = collections.deque(
            (c, w) for c in changed for w in t.graph.neighbors(c) if w not in changed
        )
        while queue:
            c, w = queue.popleft()
            for z in t.graph.neighbors(w):
                if z != c and (w, z) in self._messages:
                    del self._messages[(w, z)]
                    queue.append((w, z))
        return

    def message(self, u: int, v: int) -> numpy.ndarray:
        m = self._model
        if m is None:
            raise RuntimeError("The cache must be synced with a model first.")
        messages = self._messages
        stack = [(u, v)]
        while stack:
            a, b = stack[-1]
            if (a, b) in messages:
                stack.pop()
                continue
            if m.topology.is_leaf(a):
                value = self.physical(a)
                if a in m.tensors:
                    value = value @ m.tensors[a]
                messages[(a, b)] = value
                stack.pop()
                continue
            lg = m.legs[a]
            others = [leg for leg in lg if leg != b]
            missing = [(c, a) for c in others if (c, a) not in messages]
            if missing:
                stack.extend(missing)
                continue
            T = m.tensors[a]
            perm = [lg.index(others[0]), lg.index(others[1]), lg.index(b)]
            mat = numpy.transpose(T, perm).reshape(-1, T.shape[perm[2]])
            messages[(a, b)] = tensor.row_outer(messages[(others[0], a)], messages[(others[1], a)]) @ mat
            stack.pop()
        return messages[(u, v)]


@dataclasses.dataclass(frozen=True, eq=False)
class RootTensor:
    """ The combined tensor of the root region.

    A virtual root edge gives Θ with legs (a1, a2, b1, b2); a leaf root edge (ℓ, s)
    gives a 3-leg tensor with legs (c1, c2, ℓ) where the ℓ leg is physical.
    """
    tensor: numpy.ndarray
    legs: typing.Tuple[int, ...]
    into: typing.Tuple[int, ...]

    def matrix(self) -> numpy.ndarray:
        return self.tensor.reshape(self.tensor.shape[0] * self.tensor.shape[1], -1)

    @property
    def dims(self) -> typing.Dict[int, int]:
        return dict(zip(self.legs, self.tensor.shape))


def root_tensor(m: TensorTreeModel) -> RootTensor:
    p, q = m.root_edge
    weight = m.central_weight
    if m.topology.is_leaf(p):
        T, (c1, c2) = _orient(m, q, p)
        leaf = m.tensors.get(p, numpy.eye(len(weight)))
        return RootTensor(numpy.einsum("ijk,k,xk->ijx", T, weight, leaf), (c1, c2, p), (q, q, p))
    Tp, (a1, a2) = _orient(m, p, q)
    Tq, (b1, b2) = _orient(m, q, p)
    theta = numpy.einsum("ijk,k,lmk->ijlm", Tp, weight, Tq)
    return RootTensor(theta, (a1, a2, b1, b2), (p, p, q, q))


def leg_messages(cache: MessageCache, working: RootTensor) -> typing.Dict[int, numpy.ndarray]:
    """ { leg : (M, d) message } flowing into the root region along each leg. """
    return {
        leg : cache.physical(leg) if leg == into else cache.message(leg, into)
        for leg, into in zip(working.legs, working.into)
    }


def group_messages(messages: typing.Mapping[int, numpy.ndarray], group: typing.Sequence[int]) -> numpy.ndarray:
    if len(group) == 1:
        return messages[group[0]]
    return tensor.row_outer(messages[group[0]], messages[group[1]])


@dataclasses.dataclass(frozen=True, eq=False)
class Decomposition:
    """ An SVD of the root tensor with legs `groups[0]` on the rows and `groups[1]` on the columns. """
    pairing: topology.Pairing
    groups: typing.Tuple[typing.Tuple[int, ...], typing.Tuple[int, ...]]
    row_shape: typing.Tuple[int, ...]
    col_shape: typing.Tuple[int, ...]
    svd: tensor.SvdResult


def decompose(
    working: RootTensor,
    matrix: numpy.ndarray,
    pairing: topology.Pairing,
    chi: int,
) -> Decomposition:
    """ Truncated SVD of a root-tensor matrix given in the row/column grouping of `pairing`. """
    groups = pairing_groups(working, pairing)
    dims = working.dims
    svd = tensor.svd_truncate(matrix, chi)
    return Decomposition(
        topology.Pairing(pairing),
        groups,
        tuple(dims[leg] for leg in groups[0]),
        tuple(dims[leg] for leg in groups[1]),
        svd,
    )


def pairing_groups(working: RootTensor, pairing: topology.Pairing):
    if len(working.legs) == 3:
        if pairing != topology.Pairing.KEEP:
            raise ValueError("A leaf root edge only admits the current pairing.")
        return working.legs[:2], working.legs[2:]
    a = working.legs[:2]
    b = working.legs[2:]
    return topology.regroup(a, b, pairing)


def pairing_matrix(working: RootTensor, pairing: topology.Pairing) -> numpy.ndarray:
    """ The root tensor reshaped into (row group × column group) for `pairing`. """
    rows, _ = pairing_groups(working, pairing)
    mat, _, _ = tensor.matricize(working.tensor, [working.legs.index(leg) for leg in rows])
    return mat


def install(m: TensorTreeModel, dec: Decomposition, *, iteration: typing.Optional[int]=None) -> TensorTreeModel:
    """ Replaces the root region by a decomposition, rewiring the topology to its pairing.

    Λ is normalized to Z = 1. The root edge gets age `iteration` (unchanged if None).
    """
    t = m.topology
    p, q = t.root_edge
    svd = dec.svd
    weight = svd.s / numpy.linalg.norm(svd.s)
    if not numpy.all(numpy.isfinite(weight)):
        raise DegenerateModelError("The root tensor vanished.")
    tensors = dict(m.tensors)
    legs = dict(m.legs)
    if t.is_leaf(p):
        (c1, c2), _ = dec.groups
        tensors[q] = svd.u.reshape(dec.row_shape + (svd.rank,))
        legs[q] = (c1, c2, p)
        tensors[p] = svd.v
        legs[p] = (PHYSICAL, q)
        if iteration is not None:
            t = dataclasses.replace(t, edge_age={**t.edge_age, t.root_edge: int(iteration)})
        return TensorTreeModel(t, tensors, legs, weight, m.chi)

    old_p = set(t.neighbors(p))
    group_p, group_q = dec.groups
    tensors[p] = svd.u.reshape(dec.row_shape + (svd.rank,))
    legs[p] = tuple(group_p) + (q,)
    tensors[q] = svd.v.reshape(dec.col_shape + (svd.rank,))
    legs[q] = tuple(group_q) + (p,)
    for node, old_end, new_end in [(x, q, p) for x in group_p if x not in old_p] + [(x, p, q) for x in group_q if x in old_p]:
        if node in legs:
            legs[node] = tuple(new_end if leg == old_end else leg for leg in legs[node])
    age = t.edge_age[t.root_edge] if iteration is None else iteration
    return TensorTreeModel(topology.apply_pairing(t, dec.pairing, iteration=age), tensors, legs, weight, m.chi)


def _as_samples(batch, n: int) -> numpy.ndarray:
    samples = batch.samples if isinstance(batch, data.DataBatch) else numpy.asarray(batch)
    if samples.ndim == 1:
        samples = samples[None, :]
    if samples.ndim != 2 or samples.shape[1] != n:
        raise ValueError(f"Expected samples with {n} variables, got shape {samples.shape}.")
    return samples.astype(numpy.intp, copy=False)


def amplitudes(m: TensorTreeModel, batch, *, cache: typing.Optional[MessageCache]=None, threads: int=1) -> numpy.ndarray:
    """ ψ(x) for every row of `batch`. """
    if cache is None:
        samples = _as_samples(batch, m.n)
        if threads > 1 and len(samples) > 1:
            chunks = [c for c in numpy.array_split(samples, threads) if len(c)]
            with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
                return numpy.concatenate(list(pool.map(lambda chunk: amplitudes(m, chunk), chunks)))
        cache = MessageCache(samples)
    cache.sync(m)
    p, q = m.root_edge
    return (cache.message(p, q) * m.central_weight * cache.message(q, p)).sum(axis=1)


def amplitude(m: TensorTreeModel, x) -> float:
    x = numpy.asarray(x)
    if x.shape != (m.n,):
        raise ValueError(f"Expected a configuration of length {m.n}, got shape {x.shape}.")
    return float(amplitudes(m, x[None, :])[0])


def log_probs(m: TensorTreeModel, batch, *, cache: typing.Optional[MessageCache]=None, threads: int=1) -> numpy.ndarray:
    """ ln p(x) = 2 ln|ψ(x)| - ln Z for every row of `batch` (-inf where ψ = 0). """
    psi = amplitudes(m, batch, cache=cache, threads=threads)
    with numpy.errstate(divide="ignore"):
        return 2 * numpy.log(numpy.abs(psi)) - numpy.log(m.partition_function)


def log_prob(m: TensorTreeModel, x) -> float:
    return float(log_probs(m, numpy.asarray(x)[None, :])[0])


def nll(m: TensorTreeModel, batch, *, cache: typing.Optional[MessageCache]=None, threads: int=1) -> float:
    """ Mean negative log-likelihood in nats; +inf if any sample has zero amplitude. """
    lp = log_probs(m, batch, cache=cache, threads=threads)
    zero = numpy.isneginf(lp)
    if zero.any():
        _log.warning("%i of %i samples have zero amplitude, the NLL is infinite.", zero.sum(), len(lp))
        return numpy.inf
    return float(-numpy.mean(lp))


def nll_gradient(
    matrix: numpy.ndarray,
    left: numpy.ndarray,
    right: numpy.ndarray,
    *,
    strict: bool=True,
) -> typing.Tuple[numpy.ndarray, float]:
    """ Gradient of L(Θ) = -(1/M) Σ ln ψ(x)² + ln ‖Θ‖² with ψ(x) = leftᵀ Θ right.

    Parameters
    ----------
    matrix : numpy.ndarray
        the root tensor Θ as a (rows × cols) matrix
    left, right : numpy.ndarray
        (M, rows) and (M, cols) environments of the samples
    strict : bool
        raise a ZeroAmplitudeError for ψ(x) = 0; otherwise samples with ψ(x)² below
        PROBABILITY_FLOOR are left out of the data term and their log-likelihood is clamped

    Returns
    -------
    gradient : numpy.ndarray
        2Θ/‖Θ‖² - (2/M) Σ E(x)/ψ(x), same shape as `matrix`
    nll : float
        L(Θ) before the step
    """
    psi = ((left @ matrix) * right).sum(axis=1)
    if strict:
        zero = psi == 0
        if zero.any():
            raise ZeroAmplitudeError(int(numpy.argmax(zero)))
    else:
        # 1/ψ overflows the update below this
        zero = psi ** 2 < PROBABILITY_FLOOR
        if zero.any():
            _log.warning("%i samples have zero amplitude and are skipped in the gradient.", zero.sum())
    norm2 = float(numpy.sum(matrix ** 2))
    inverse = numpy.divide(1.0, psi, out=numpy.zeros_like(psi), where=~zero)
    gradient = 2 * matrix / norm2 - (2 / len(psi)) * (left.T @ (right * inverse[:, None]))
    loss = float(-numpy.mean(numpy.log(numpy.maximum(psi ** 2, PROBABILITY_FLOOR))) + numpy.log(norm2))
    return gradient, loss


def grad_root_tensor(
    m: TensorTreeModel,
    batch,
    *,
    strict: bool=True,
    cache: typing.Optional[MessageCache]=None,
) -> numpy.ndarray:
    """ NLL gradient with respect to the root tensor (see `root_tensor`), same shape as it. """
    cache = cache or MessageCache(_as_samples(batch, m.n))
    cache.sync(m)
    working = root_tensor(m)
    messages = leg_messages(cache, working)
    left = group_messages(messages, working.legs[:2])
    right = group_messages(messages, working.legs[2:])
    gradient, _ = nll_gradient(working.matrix(), left, right, strict=strict)
    return gradient.reshape(working.tensor.shape)


def working_nll(
    m: TensorTreeModel,
    batch,
    theta: typing.Optional[numpy.ndarray]=None,
    *,
    cache: typing.Optional[MessageCache]=None,
) -> float:
    """ NLL of the model with its root tensor replaced by `theta` (normalized by ‖θ‖²). """
    cache = cache or MessageCache(_as_samples(batch, m.n))
    cache.sync(m)
    working = root_tensor(m)
    theta = working.tensor if theta is None else numpy.asarray(theta, dtype=float)
    messages = leg_messages(cache, working)
    left = group_messages(messages, working.legs[:2])
    right = group_messages(messages, working.legs[2:])
    matrix = theta.reshape(left.shape[1], right.shape[1])
    psi = ((left @ matrix) * right).sum(axis=1)
    with numpy.errstate(divide="ignore"):
        return float(-numpy.mean(numpy.log(psi ** 2)) + numpy.log(numpy.sum(matrix ** 2)))


def all_configurations(n: int) -> numpy.ndarray:
    """ All 2ⁿ binary configurations as rows, variable 0 being the most significant bit. """
    _check_enumerable(n)
    codes = numpy.arange(2 ** n)[:, None]
    return ((codes >> numpy.arange(n - 1, -1, -1)) & 1).astype(numpy.uint8)


def exact_probabilities(m: TensorTreeModel) -> numpy.ndarray:
    """ p(x) for all 2ⁿ configurations in `all_configurations` order. """
    psi = amplitudes(m, all_configurations(m.n))
    squared = psi ** 2
    return squared / squared.sum()
