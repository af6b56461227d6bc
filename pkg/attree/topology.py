"""
Loop-free tree topologies with degree-3 internal nodes and one leaf per data variable.

Leaves are the node ids 0 … n-1 (leaf i is variable i); internal nodes are n … 2n-3.
Edges are sorted node-id tuples.
"""
import dataclasses
import enum
import functools
import graphviz
import logging
import networkx
import numpy
import typing

_log = logging.getLogger(__file__)

Edge = typing.Tuple[int, int]


def edge(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


class Pairing(enum.IntEnum):
    """ Regroupings of the four outward legs (a1, a2 | b1, b2) of the two root-edge nodes. """
    KEEP = 0
    CROSS = 1
    TWIST = 2


class CenterKind(enum.Enum):
    CENTROID = "centroid"
    ECCENTRICITY = "eccentricity"


@dataclasses.dataclass(frozen=True)
class TreeTopology:
    n: int
    edges: typing.Tuple[Edge, ...]
    root_edge: Edge
    edge_age: typing.Dict[Edge, int]

    @classmethod
    def from_edges(
        cls,
        n: int,
        edges: typing.Iterable[typing.Tuple[int, int]],
        root_edge: typing.Tuple[int, int],
        edge_age: typing.Optional[typing.Dict[Edge, int]]=None,
    ) -> "TreeTopology":
        """ Builds and validates a topology from an edge list. """
        edges = tuple(sorted(edge(int(u), int(v)) for u, v in edges))
        if edge_age is None:
            edge_age = { e : 0 for e in edges }
        else:
            edge_age = { edge(*e) : int(age) for e, age in edge_age.items() }
        topology = cls(int(n), edges, edge(*root_edge), edge_age)
        topology.validate()
        return topology

    @functools.cached_property
    def graph(self) -> networkx.Graph:
        g = networkx.Graph()
        g.add_nodes_from(range(2 * self.n - 2))
        g.add_edges_from(self.edges)
        return networkx.freeze(g)

    @property
    def leaves(self) -> range:
        return range(self.n)

    @property
    def internal_nodes(self) -> range:
        return range(self.n, 2 * self.n - 2)

    def is_leaf(self, node: int) -> bool:
        return node < self.n

    def neighbors(self, node: int) -> typing.Tuple[int, ...]:
        return tuple(sorted(self.graph.neighbors(node)))

    def is_virtual(self, e: Edge) -> bool:
        return not (self.is_leaf(e[0]) or self.is_leaf(e[1]))

    def virtual_bonds(self) -> typing.List[Edge]:
        return [e for e in self.edges if self.is_virtual(e)]

    def with_root(self, e: Edge) -> "TreeTopology":
        e = edge(*e)
        if e not in self.edge_age:
            raise KeyError(f"Edge {e} is not part of the topology.")
        return dataclasses.replace(self, root_edge=e)

    def validate(self):
        """ Raises a ValueError if any structural invariant is violated. """
        n = self.n
        if n < 3:
            raise ValueError(f"A tensor tree needs at least 3 leaves, got {n}.")
        if len(self.edges) != 2 * n - 3 or len(set(self.edges)) != len(self.edges):
            raise ValueError(f"Expected {2 * n - 3} distinct edges for {n} leaves, got {len(self.edges)}.")
        nodes = set(node for e in self.edges for node in e)
        if nodes != set(range(2 * n - 2)):
            raise ValueError(f"Node ids must be exactly 0 … {2 * n - 3}.")
        if not networkx.is_tree(self.graph):
            raise ValueError("The topology graph is not a tree.")
        for node, degree in self.graph.degree():
            expected = 1 if self.is_leaf(node) else 3
            if degree != expected:
                raise ValueError(f"Node {node} has degree {degree}, expected {expected}.")
        if self.root_edge not in self.edge_age:
            raise ValueError(f"Root edge {self.root_edge} is not an edge of the topology.")
        if set(self.edge_age) != set(self.edges):
            raise ValueError("Edge ages must be given for exactly the edges of the topology.")
        return

    def splits(self) -> typing.FrozenSet[typing.FrozenSet[int]]:
        """ The variable bipartitions of all edges, each as the side without variable 0. """
        result = set()
        for e in self.edges:
            a, b = bipartition(self, e)
            result.add(b if 0 in a else a)
        return frozenset(result)

    def same_structure(self, other: "TreeTopology") -> bool:
        """ True if both trees induce the same variable bipartitions (node ids may differ). """
        return self.n == other.n and self.splits() == other.splits()


def _check_size(n: int):
    if n < 3:
        raise ValueError(f"A tensor tree needs n ≥ 3 variables, got {n}.")


def make_tensor_train(n: int) -> TreeTopology:
    """ Caterpillar topology: internal node j carries variable j+1,
    the first and last internal nodes also carry variables 0 and n-1.
    The root is the central chain bond (a leaf edge for n = 3).
    """
    _check_size(n)
    chain = list(range(n, 2 * n - 2))
    edges = [(chain[j], j + 1) for j in range(n - 2)]
    edges.append((chain[0], 0))
    edges.append((chain[-1], n - 1))
    edges += [(chain[j], chain[j + 1]) for j in range(n - 3)]
    if n == 3:
        root = (1, chain[0])
    else:
        middle = (n - 3) // 2
        root = (chain[middle], chain[middle + 1])
    return TreeTopology.from_edges(n, edges, root)


def make_balanced_tree(n: int) -> TreeTopology:
    """ Recursive halving of the variables; the two top-level halves are joined by the root edge. """
    _check_size(n)
    edges = []
    next_id = [n]

    def build(variables: typing.List[int]) -> int:
        if len(variables) == 1:
            return variables[0]
        half = (len(variables) + 1) // 2
        left = build(variables[:half])
        right = build(variables[half:])
        node = next_id[0]
        next_id[0] += 1
        edges.append((node, left))
        edges.append((node, right))
        return node

    variables = list(range(n))
    half = (n + 1) // 2
    root = (build(variables[:half]), build(variables[half:]))
    edges.append(root)
    return TreeTopology.from_edges(n, edges, root)


def make_random_tree(n: int, seed) -> TreeTopology:
    """ Joins two randomly chosen subtrees under a new node until two remain,
    which are then connected directly by the root edge.
    """
    _check_size(n)
    rng = numpy.random.default_rng(seed)
    pool = list(range(n))
    edges = []
    next_id = n
    while len(pool) > 2:
        i, j = sorted(rng.choice(len(pool), size=2, replace=False), reverse=True)
        left = pool.pop(i)
        right = pool.pop(j)
        edges.append((next_id, left))
        edges.append((next_id, right))
        pool.append(next_id)
        next_id += 1
    root = (pool[0], pool[1])
    edges.append(root)
    return TreeTopology.from_edges(n, edges, root)


def bipartition(t: TreeTopology, e: typing.Tuple[int, int]) -> typing.Tuple[typing.FrozenSet[int], typing.FrozenSet[int]]:
    """ Variables on either side of edge `e`.

    Returns
    -------
    a : frozenset
        variables in the component of the smaller endpoint
    b : frozenset
        the remaining variables
    """
    e = edge(*e)
    if e not in t.edge_age:
        raise KeyError(f"Edge {e} is not part of the topology.")
    view = networkx.restricted_view(t.graph, [], [e])
    component = networkx.node_connected_component(view, e[0])
    a = frozenset(v for v in component if t.is_leaf(v))
    b = frozenset(range(t.n)) - a
    return a, b


def root_order(t: TreeTopology) -> typing.Tuple[typing.Dict[int, int], typing.List[int]]:
    """ Breadth-first order starting at the root edge.

    Returns
    -------
    parent : dict
        { node : root-facing neighbor }, the root-edge nodes face each other
    order : list
        nodes in breadth-first order, the root-edge nodes first
    """
    p, q = t.root_edge
    parent = {p: q, q: p}
    order = [p, q]
    i = 0
    while i < len(order):
        v = order[i]
        for w in t.graph.neighbors(v):
            if w not in parent:
                parent[w] = v
                order.append(w)
        i += 1
    return parent, order


def outward_legs(t: TreeTopology) -> typing.Tuple[typing.Tuple[int, int], typing.Tuple[int, int]]:
    """ Sorted outward neighbors (a1, a2) of the smaller and (b1, b2) of the larger root-edge node. """
    s, u = t.root_edge
    if not t.is_virtual(t.root_edge):
        raise ValueError(f"Root edge {t.root_edge} is a leaf edge and has no pairings.")
    a = tuple(x for x in t.neighbors(s) if x != u)
    b = tuple(x for x in t.neighbors(u) if x != s)
    return a, b


def regroup(a: typing.Tuple[int, int], b: typing.Tuple[int, int], p: Pairing) -> typing.Tuple[typing.Tuple[int, int], typing.Tuple[int, int]]:
    """ Leg groups of the smaller and larger root-edge node under pairing `p`. """
    if p == Pairing.KEEP:
        return (a[0], a[1]), (b[0], b[1])
    if p == Pairing.CROSS:
        return (a[0], b[0]), (a[1], b[1])
    return (a[0], b[1]), (a[1], b[0])


def apply_pairing(t: TreeTopology, p: Pairing, *, iteration: int) -> TreeTopology:
    """ Regroups the four subtrees around the root edge.

    Moved bonds keep their age; the root edge gets age `iteration`.
    """
    s, u = t.root_edge
    a, b = outward_legs(t)
    group_s, group_u = regroup(a, b, Pairing(p))
    old_neighbors = set(a)

    def old_age(x):
        return t.edge_age[edge(x, s if x in old_neighbors else u)]

    edge_age = { e : age for e, age in t.edge_age.items() if s not in e and u not in e }
    for x in group_s:
        edge_age[edge(x, s)] = old_age(x)
    for x in group_u:
        edge_age[edge(x, u)] = old_age(x)
    edge_age[t.root_edge] = int(iteration)
    return TreeTopology(t.n, tuple(sorted(edge_age)), t.root_edge, edge_age)


def tree_center(t: TreeTopology, center: CenterKind=CenterKind.CENTROID) -> int:
    """ Node id of the centroid (smallest largest remaining component) or the
    graph center (smallest eccentricity); ties go to the smaller id.
    """
    g = t.graph
    center = CenterKind(center)
    if center == CenterKind.ECCENTRICITY:
        return min(networkx.center(g))
    source = t.n
    parents = networkx.dfs_predecessors(g, source)
    size = {}
    for v in networkx.dfs_postorder_nodes(g, source):
        size[v] = 1 + sum(size[c] for c in g.neighbors(v) if parents.get(c) == v)
    total = g.number_of_nodes()

    def largest_part(v):
        parts = [size[c] for c in g.neighbors(v) if parents.get(c) == v]
        parts.append(total - size[v])
        return max(parts)

    return min(g.nodes, key=lambda v: (largest_part(v), v))


def center_distance_ranking(t: TreeTopology, center: CenterKind=CenterKind.CENTROID) -> typing.Dict[int, int]:
    """ Dense 1-based ranks of the variables by their edge distance from the tree center. """
    node = tree_center(t, center)
    distances = networkx.single_source_shortest_path_length(t.graph, node)
    leaf_distance = { i : distances[i] for i in t.leaves }
    levels = { d : r + 1 for r, d in enumerate(sorted(set(leaf_distance.values()))) }
    return { i : levels[d] for i, d in leaf_distance.items() }


def ramp_color(fraction: float) -> str:
    """ Linear blue (0) to red (1) ramp as a hex color. """
    fraction = min(max(float(fraction), 0.0), 1.0)
    red = int(round(255 * fraction))
    return f"#{red:02x}00{255 - red:02x}"


def to_dot(
    t: TreeTopology,
    bmi: typing.Mapping[Edge, float],
    labels: typing.Optional[typing.Mapping[int, str]]=None,
    colors: typing.Optional[typing.Mapping[int, str]]=None,
    name: str="tensor_tree",
) -> str:
    """ Renders the topology in the DOT language.

    Parameters
    ----------
    t : TreeTopology
        the topology to draw
    bmi : dict
        { edge : bond mutual information } for (a subset of) the edges;
        edge colors are scaled linearly between the smallest and largest value
    labels : optional, dict
        { variable : label } for the leaves (defaults to the variable index)
    colors : optional, dict
        { variable : fill color } for the leaves

    Returns
    -------
    source : str
        DOT source text
    """
    bmi = { edge(*e) : float(v) for e, v in bmi.items() }
    unknown = set(bmi) - set(t.edge_age)
    if unknown:
        raise KeyError(f"BMI given for edges that are not part of the topology: {sorted(unknown)}")
    labels = labels or {}
    colors = colors or {}
    low = min(bmi.values(), default=0.0)
    high = max(bmi.values(), default=0.0)

    graph = graphviz.Graph(name=name)
    graph.attr("node", fontsize="10")
    for v in t.leaves:
        attributes = dict(label=str(labels.get(v, v)), shape="circle")
        if v in colors:
            attributes.update(style="filled", fillcolor=str(colors[v]))
        graph.node(str(v), **attributes)
    for v in t.internal_nodes:
        graph.node(str(v), label="", shape="point")
    for e in t.edges:
        attributes = {}
        if e in bmi:
            fraction = (bmi[e] - low) / (high - low) if high > low else 0.0
            attributes.update(color=ramp_color(fraction), bmi=f"{bmi[e]:.6g}")
        else:
            attributes.update(color="gray")
        if e == t.root_edge:
            attributes.update(style="bold")
        graph.edge(str(e[0]), str(e[1]), **attributes)
    return graph.source
