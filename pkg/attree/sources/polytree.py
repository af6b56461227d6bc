"""
Binary Bayesian polytrees and ancestral sampling from them.

A child copies the XOR of its parents with probability r and takes the complement otherwise.
Variables without parents are fair coins.
"""
import dataclasses
import functools
import logging
import networkx
import numpy
import pathlib
import typing

from .. import data

_log = logging.getLogger(__file__)


@dataclasses.dataclass(frozen=True)
class BayesPolytree:
    n: int
    edges: typing.Tuple[typing.Tuple[int, int], ...]
    r: float

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(u), int(v)) for u, v in self.edges))
        if self.n < 1:
            raise ValueError(f"A polytree needs at least one variable, got n={self.n}.")
        if not 0.5 < self.r <= 1:
            raise ValueError(f"The correlation rate must lie in (0.5, 1], got {self.r}.")
        for u, v in self.edges:
            if not (0 <= u < self.n and 0 <= v < self.n) or u == v:
                raise ValueError(f"Invalid edge ({u}, {v}) for {self.n} variables.")
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("Duplicate edges in the polytree.")
        if not networkx.is_forest(self.graph.to_undirected(as_view=True)):
            raise ValueError("The underlying undirected graph has a cycle.")

    @functools.cached_property
    def graph(self) -> networkx.DiGraph:
        g = networkx.DiGraph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    def parents(self, v: int) -> typing.List[int]:
        return sorted(self.graph.predecessors(v))


def read_polytree(path: typing.Union[str, pathlib.Path]) -> BayesPolytree:
    """ Reads a polytree spec: first line `n`, then `parent child` lines, then `r <value>`. """
    lines = [line.split() for line in pathlib.Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(lines) < 2:
        raise data.FormatError(f"{path}: expected at least the `n` and `r <value>` lines.")
    try:
        if len(lines[0]) != 1:
            raise ValueError(f"the first line must hold only n, got {lines[0]}")
        n = int(lines[0][0])
        if len(lines[-1]) != 2 or lines[-1][0] != "r":
            raise ValueError(f"the last line must be `r <value>`, got {lines[-1]}")
        r = float(lines[-1][1])
        edges = []
        for fields in lines[1:-1]:
            if len(fields) != 2:
                raise ValueError(f"edge lines must be `parent child`, got {fields}")
            edges.append((int(fields[0]), int(fields[1])))
        return BayesPolytree(n, tuple(edges), r)
    except ValueError as ex:
        raise data.FormatError(f"{path}: {ex}") from ex


def write_polytree(bn: BayesPolytree, path: typing.Union[str, pathlib.Path]):
    lines = [str(bn.n)] + [f"{u} {v}" for u, v in bn.edges] + [f"r {bn.r!r}"]
    pathlib.Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return


def sample_polytree(bn: BayesPolytree, count: int, seed=None) -> data.DataBatch:
    """ Draws `count` samples in topological order.

    Parameters
    ----------
    bn : BayesPolytree
        the generating network
    count : int
        number of samples
    seed : optional
        seed of the sampler

    Returns
    -------
    batch : DataBatch
        (count × n) samples
    """
    if count < 1:
        raise ValueError(f"Sample count must be positive, got {count}.")
    rng = numpy.random.default_rng(seed)
    samples = numpy.zeros((count, bn.n), dtype=numpy.uint8)
    for v in networkx.lexicographical_topological_sort(bn.graph):
        parents = bn.parents(v)
        if not parents:
            samples[:, v] = rng.random(count) < 0.5
            continue
        intermediate = numpy.bitwise_xor.reduce(samples[:, parents], axis=1)
        flip = rng.random(count) >= bn.r
        samples[:, v] = intermediate ^ flip
    return data.DataBatch(samples)


def _chain(first: int, last: int) -> typing.List[typing.Tuple[int, int]]:
    return [(i, i + 1) for i in range(first, last)]


PRESETS: typing.Dict[str, BayesPolytree] = {
    # 0 → 1 → … → 16
    "chain": BayesPolytree(17, tuple(_chain(0, 16)), 0.8),
    # trunk 0 … 8 with side branches 4 → 9 … 12 and 8 → 13 … 16
    "branching": BayesPolytree(17, tuple(_chain(0, 8) + [(4, 9)] + _chain(9, 12) + [(8, 13)] + _chain(13, 16)), 0.8),
    # two chains 0 … 7 and 8 … 15 joined by 16 = XOR(7, 15)
    "collision": BayesPolytree(17, tuple(_chain(0, 7) + _chain(8, 15) + [(7, 16), (15, 16)]), 0.8),
}


def _generate(*, count: int, spec_path=None, preset: str=None, r: typing.Optional[float]=None, seed=None):
    if (spec_path is None) == (preset is None):
        raise ValueError("Give exactly one of a polytree spec file and a preset name.")
    if preset is not None:
        if preset not in PRESETS:
            raise KeyError(f"Polytree preset '{preset}' is not in the collection: {sorted(PRESETS)}.")
        bn = PRESETS[preset]
    else:
        bn = read_polytree(spec_path)
    if r is not None:
        bn = dataclasses.replace(bn, r=r)
    _log.info("Sampling %i rows from a polytree with %i variables and %i edges.", count, bn.n, len(bn.edges))
    return sample_polytree(bn, count, seed)


data.set_source_support(
    "polytree",
    description="ancestral samples of a binary Bayesian polytree",
    fn_generate=_generate,
)
