"""
Adaptive structure optimization: branch reconnection guided by the bond mutual information.

One iteration moves the root to a target bond, improves the combined root tensor by gradient
descent, decomposes it in each of the three possible pairings, improves every candidate,
and installs the candidate whose bond carries the least mutual information.
"""
import dataclasses
import enum
import logging
import networkx
import numpy
import pandas
import pathlib
import typing

from . import data
from . import information
from . import model as bm
from . import persistence
from . import preprocessing
from . import topology
from .sources import polytree

_log = logging.getLogger(__file__)

# BMI differences below this are ties, which go to the earlier pairing (KEEP first)
BMI_TIE_TOLERANCE = 1e-12


class RefreshPolicy(enum.Enum):
    STEPS = "steps"
    SWEEP = "sweep"


class InitialTopology(enum.Enum):
    TRAIN = "train"
    BALANCED = "balanced"
    RANDOM = "random"
    FILE = "file"


@dataclasses.dataclass
class TrainConfig:
    """ Hyperparameters of `train`.

    `batch_size=None` trains on the full data. With `RefreshPolicy.STEPS` a new mini-batch is
    drawn every `refresh_interval` iterations; with `RefreshPolicy.SWEEP` once every virtual
    bond has been processed with the current one. Intervals of 0 switch snapshots and checkpoints off.
    `threads` parallelizes the test-set evaluation only.
    """
    chi: int
    learning_rate: float = 0.001
    combined_updates: int = 1
    candidate_updates: int = 10
    max_iterations: int = 3000
    batch_size: typing.Optional[int] = None
    refresh: RefreshPolicy = RefreshPolicy.STEPS
    refresh_interval: int = 1000
    seed: typing.Optional[int] = 0
    structure_fixed: bool = False
    initial_topology: InitialTopology = InitialTopology.RANDOM
    initial_model_path: typing.Optional[pathlib.Path] = None
    eval_interval: int = 1
    snapshot_interval: int = 0
    checkpoint_interval: int = 0
    checkpoint_path: typing.Optional[pathlib.Path] = None
    log_interval: int = 100
    threads: int = 1

    def __post_init__(self):
        self.refresh = RefreshPolicy(self.refresh)
        self.initial_topology = InitialTopology(self.initial_topology)
        if self.chi < 2:
            raise ValueError(f"chi must be ≥ 2, got {self.chi}.")
        if not self.learning_rate > 0:
            raise ValueError(f"The learning rate must be positive, got {self.learning_rate}.")
        for name in ("combined_updates", "candidate_updates", "refresh_interval", "eval_interval", "log_interval", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be ≥ 1, got {getattr(self, name)}.")
        for name in ("max_iterations", "snapshot_interval", "checkpoint_interval"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be ≥ 0, got {getattr(self, name)}.")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"The batch size must be positive, got {self.batch_size}.")
        if self.initial_topology == InitialTopology.FILE and self.initial_model_path is None:
            raise ValueError("Initializing from a file needs initial_model_path.")
        if self.checkpoint_interval and self.checkpoint_path is None:
            raise ValueError("Checkpoints need a checkpoint_path.")


@dataclasses.dataclass
class TrainReport:
    nll_history: typing.List[float] = dataclasses.field(default_factory=list)
    test_nll_history: typing.List[float] = dataclasses.field(default_factory=list)
    pairing_history: typing.List[topology.Pairing] = dataclasses.field(default_factory=list)
    edge_bmi: typing.Dict[topology.Edge, float] = dataclasses.field(default_factory=dict)
    structure_snapshots: typing.List[typing.Tuple[int, topology.TreeTopology]] = dataclasses.field(default_factory=list)
    best_model: typing.Optional[bm.TensorTreeModel] = None
    best_test_nll: float = numpy.nan

    @property
    def iterations(self) -> int:
        return len(self.nll_history)

    def to_dataframe(self) -> pandas.DataFrame:
        """ One row per iteration with columns train_nll and test_nll (NaN where not evaluated). """
        df = pandas.DataFrame(
            {
                "train_nll": self.nll_history,
                "test_nll": self.test_nll_history,
            },
            index=pandas.RangeIndex(1, self.iterations + 1, name="iter"),
        )
        return df


@dataclasses.dataclass(frozen=True, eq=False)
class _Candidate:
    decomposition: bm.Decomposition
    bmi: float
    nll: float


def _step(matrix: numpy.ndarray, left: numpy.ndarray, right: numpy.ndarray, learning_rate: float) -> numpy.ndarray:
    gradient, _ = bm.nll_gradient(matrix, left, right, strict=False)
    updated = matrix - learning_rate * gradient
    scale = numpy.max(numpy.abs(updated))
    if not numpy.isfinite(scale) or scale == 0:
        raise bm.DegenerateModelError("The root tensor vanished in a gradient step.")
    # rescaled first so the norm cannot overflow
    updated = updated / scale
    return updated / numpy.linalg.norm(updated)


def _evaluate(dec: bm.Decomposition, left: numpy.ndarray, right: numpy.ndarray) -> _Candidate:
    svd = dec.svd
    weight = svd.s / numpy.linalg.norm(svd.s)
    side_a = left @ svd.u
    side_b = right @ svd.v
    bmi = abs(float(numpy.mean(information.root_pmi(side_a, weight, side_b, strict=False))))
    psi = (side_a * weight * side_b).sum(axis=1)
    nll = float(-numpy.mean(numpy.log(numpy.maximum(psi ** 2, bm.PROBABILITY_FLOOR))))
    return _Candidate(dec, bmi, nll)


def _reconnect(
    m: bm.TensorTreeModel,
    cache: bm.MessageCache,
    cfg: TrainConfig,
    target: typing.Tuple[int, int],
    iteration: int,
) -> typing.Tuple[bm.TensorTreeModel, topology.Pairing, float, float]:
    m = bm.move_root_to(m, target)
    cache.sync(m)
    working = bm.root_tensor(m)
    messages = bm.leg_messages(cache, working)

    left = bm.group_messages(messages, working.legs[:2])
    right = bm.group_messages(messages, working.legs[2:])
    matrix = working.matrix()
    for _ in range(cfg.combined_updates):
        matrix = _step(matrix, left, right, cfg.learning_rate)
    working = bm.RootTensor(matrix.reshape(working.tensor.shape), working.legs, working.into)

    if cfg.structure_fixed or len(working.legs) == 3:
        pairings = [topology.Pairing.KEEP]
    else:
        pairings = list(topology.Pairing)
    best = None
    for pairing in pairings:
        rows, cols = bm.pairing_groups(working, pairing)
        rows_env = bm.group_messages(messages, rows)
        cols_env = bm.group_messages(messages, cols)
        dec = bm.decompose(working, bm.pairing_matrix(working, pairing), pairing, cfg.chi)
        for _ in range(cfg.candidate_updates):
            improved = _step(dec.svd.reconstruct(), rows_env, cols_env, cfg.learning_rate)
            dec = bm.decompose(working, improved, pairing, cfg.chi)
        candidate = _evaluate(dec, rows_env, cols_env)
        _log.debug("Pairing %s at %s: BMI %.6g, NLL %.6g.", pairing.name, m.root_edge, candidate.bmi, candidate.nll)
        if best is None or candidate.bmi < best.bmi - BMI_TIE_TOLERANCE:
            best = candidate

    result = bm.install(m, best.decomposition, iteration=iteration)
    return result, best.decomposition.pairing, best.bmi, best.nll


def _check_target(t: topology.TreeTopology, target: topology.Edge):
    if target not in t.edge_age:
        raise KeyError(f"Edge {target} is not part of the topology.")
    if not t.is_virtual(target) and t.virtual_bonds():
        raise ValueError(f"Target {target} is a leaf edge; reconnection needs a virtual bond.")


def reconnect_step(
    m: bm.TensorTreeModel,
    batch,
    cfg: TrainConfig,
    target: typing.Tuple[int, int],
    *,
    iteration: int=0,
    cache: typing.Optional[bm.MessageCache]=None,
) -> typing.Tuple[bm.TensorTreeModel, topology.Pairing, float]:
    """ One branch-reconnection step at the virtual bond `target`.

    Parameters
    ----------
    m : TensorTreeModel
        a canonical model
    batch : DataBatch or array
        samples for both the gradients and the BMI estimates
    cfg : TrainConfig
        learning rate, update counts, chi and the structure_fixed flag
    target : edge
        a virtual bond (leaf edges are accepted only when the tree has no virtual bond)
    iteration : int
        age written to the target bond
    cache : optional, MessageCache
        message cache of `batch`, reused across steps

    Returns
    -------
    model : TensorTreeModel
        the updated model, rooted at `target`
    pairing : Pairing
        the installed pairing (KEEP leaves the topology unchanged)
    bmi : float
        estimated mutual information across the new root bond
    """
    target = topology.edge(*target)
    _check_target(m.topology, target)
    cache = cache or bm.MessageCache(bm._as_samples(batch, m.n))
    result, pairing, bmi, _ = _reconnect(m, cache, cfg, target, iteration)
    return result, pairing, bmi


def next_target(m, current: typing.Tuple[int, int]) -> topology.Edge:
    """ The least recently processed virtual bond next to the current root edge.

    Parameters
    ----------
    m : TensorTreeModel or TreeTopology
        supplies the topology and its edge ages
    current : edge
        the bond processed last

    Returns
    -------
    target : edge
        among the virtual bonds sharing a node with `current`, the one with the smallest age
        (ties go to the smallest edge); any other virtual bond if none is adjacent
    """
    t = m.topology if isinstance(m, bm.TensorTreeModel) else m
    current = topology.edge(*current)
    adjacent = {
        topology.edge(node, w)
        for node in current
        for w in t.graph.neighbors(node)
    } - {current}
    candidates = [e for e in adjacent if t.is_virtual(e)]
    if not candidates:
        candidates = [e for e in t.virtual_bonds() if e != current]
    if not candidates and not t.virtual_bonds():
        candidates = sorted(adjacent)
    if not candidates:
        return current
    return min(candidates, key=lambda e: (t.edge_age[e], e))


def _initial_model(data_batch: data.DataBatch, cfg: TrainConfig, t: typing.Optional[topology.TreeTopology], seeds) -> bm.TensorTreeModel:
    topology_seed, init_seed = seeds
    n = data_batch.n
    if cfg.initial_topology == InitialTopology.FILE and t is None:
        m = persistence.load_model(cfg.initial_model_path)
        if m.n != n:
            raise data.FormatError(f"The model in {cfg.initial_model_path} has {m.n} variables, the data has {n}.")
        if max(m.bond_dimensions().values()) > cfg.chi:
            raise ValueError(f"The loaded model has bonds above chi={cfg.chi}.")
        _log.info("Resuming from %s.", cfg.initial_model_path)
        return dataclasses.replace(m, chi=cfg.chi)
    if t is None:
        if cfg.initial_topology == InitialTopology.TRAIN:
            t = topology.make_tensor_train(n)
        elif cfg.initial_topology == InitialTopology.BALANCED:
            t = topology.make_balanced_tree(n)
        else:
            t = topology.make_random_tree(n, topology_seed)
    elif t.n != n:
        raise ValueError(f"The topology has {t.n} variables, the data has {n}.")
    return bm.init_model(t, cfg.chi, init_seed)


def _sweep_complete(t: topology.TreeTopology, since: int) -> bool:
    bonds = t.virtual_bonds()
    return bool(bonds) and min(t.edge_age[e] for e in bonds) >= since


def train(
    data_batch: data.DataBatch,
    cfg: TrainConfig,
    *,
    test: typing.Optional[data.DataBatch]=None,
    topology: typing.Optional[topology.TreeTopology]=None,
) -> typing.Tuple[bm.TensorTreeModel, TrainReport]:
    """ Runs the adaptive tensor tree optimization.

    Parameters
    ----------
    data_batch : DataBatch
        training data; mini-batches are drawn from it according to the config
    cfg : TrainConfig
        hyperparameters
    test : optional, DataBatch
        held-out data for the test NLL and the best-model selection
    topology : optional, TreeTopology
        initial topology, overriding `cfg.initial_topology`

    Returns
    -------
    model : TensorTreeModel
        the model after the last iteration
    report : TrainReport
        per-iteration NLLs, the last BMI estimate per edge and the best model
    """
    if test is not None and test.n != data_batch.n:
        raise data.FormatError(f"Test data has {test.n} variables, training data has {data_batch.n}.")
    topology_seed, init_seed, target_seed, batch_seed = numpy.random.SeedSequence(cfg.seed).spawn(4)
    m = _initial_model(data_batch, cfg, topology, (topology_seed, init_seed))
    report = TrainReport(best_model=m)
    if cfg.max_iterations == 0:
        return m, report

    start = max(m.topology.edge_age.values())
    bonds = m.topology.virtual_bonds()
    if bonds:
        target = bonds[numpy.random.default_rng(target_seed).integers(len(bonds))]
    else:
        target = m.root_edge
    stream = preprocessing.minibatch(data_batch, cfg.batch_size, batch_seed)
    batch = next(stream)
    cache = bm.MessageCache(bm._as_samples(batch, m.n))
    batch_since = start + 1
    test_cache = None if test is None or cfg.threads > 1 else bm.MessageCache(bm._as_samples(test, m.n))
    _log.info(
        "Training %s on %i samples with %i variables, chi=%i, %i iterations.",
        "with fixed structure" if cfg.structure_fixed else "with reconnection",
        data_batch.count, data_batch.n, cfg.chi, cfg.max_iterations,
    )

    for i in range(1, cfg.max_iterations + 1):
        iteration = start + i
        m, pairing, bmi, train_nll = _reconnect(m, cache, cfg, target, iteration)
        p, q = m.root_edge
        for e in [e for e in report.edge_bmi if (p in e or q in e) and e not in m.topology.edge_age]:
            del report.edge_bmi[e]
        report.edge_bmi[m.root_edge] = bmi
        report.nll_history.append(train_nll)
        report.pairing_history.append(pairing)

        test_nll = numpy.nan
        if test is not None and (i % cfg.eval_interval == 0 or i == cfg.max_iterations):
            test_nll = bm.nll(m, test, cache=test_cache, threads=cfg.threads)
            if numpy.isnan(report.best_test_nll) or test_nll < report.best_test_nll:
                report.best_test_nll = test_nll
                report.best_model = m
        report.test_nll_history.append(test_nll)

        if cfg.snapshot_interval and i % cfg.snapshot_interval == 0:
            report.structure_snapshots.append((i, m.topology))
        if cfg.checkpoint_interval and i % cfg.checkpoint_interval == 0:
            persistence.save_model(m, cfg.checkpoint_path)
            _log.info("Checkpoint after iteration %i written to %s.", i, cfg.checkpoint_path)
        if i % cfg.log_interval == 0 or i == cfg.max_iterations:
            _log.info(
                "Iteration %i: train NLL %.4f, test NLL %.4f, %s at %s with BMI %.4f.",
                i, train_nll, test_nll, pairing.name, m.root_edge, bmi,
            )

        if cfg.batch_size is not None and cfg.batch_size < data_batch.count:
            if cfg.refresh == RefreshPolicy.STEPS:
                refresh = i % cfg.refresh_interval == 0
            else:
                refresh = _sweep_complete(m.topology, batch_since)
            if refresh:
                batch = next(stream)
                cache = bm.MessageCache(bm._as_samples(batch, m.n))
                batch_since = iteration + 1
                _log.debug("New mini-batch after iteration %i.", i)
        target = next_target(m, m.root_edge)

    if test is None:
        report.best_model = m
    return m, report


def _crossing_edges(reference: polytree.BayesPolytree, side: typing.FrozenSet[int]) -> typing.List[typing.Tuple[int, int]]:
    return [(u, v) for u, v in reference.edges if (u in side) != (v in side)]


def _units(reference: polytree.BayesPolytree) -> typing.Dict[int, int]:
    """ Unit id per variable: a child with two or more parents forms one unit with them, other variables are their own unit. """
    g = networkx.Graph()
    g.add_nodes_from(range(reference.n))
    for v in range(reference.n):
        parents = reference.parents(v)
        if len(parents) > 1:
            g.add_edges_from((v, p) for p in parents)
    return {
        v : i
        for i, unit in enumerate(networkx.connected_components(g))
        for v in unit
    }


def topology_consistency(result: topology.TreeTopology, reference: polytree.BayesPolytree) -> bool:
    """ Whether every virtual bond of `result` splits the variables without cutting a dependency apart.

    Every multi-parent family (a child with all of its parents) is treated as one unit.
    A bond may split the variables of a single unit off from the rest of that unit,
    which a binary tree has to do inside an XOR family. Otherwise both sides must consist
    of whole units, and all reference edges crossing the bond must touch one common unit.
    With no families this is the bipartition of removing one reference edge, widened to
    the splits a binary tree needs around a variable with three or more neighbors.
    Edge directions are ignored.
    """
    if result.n != reference.n:
        raise ValueError(f"The tree has {result.n} variables, the reference network has {reference.n}.")
    units = _units(reference)
    for e in result.virtual_bonds():
        side, other = topology.bipartition(result, e)
        side_units = {units[v] for v in side}
        other_units = {units[v] for v in other}
        if side_units & other_units:
            if len(side_units) == 1 or len(other_units) == 1:
                continue
            _log.debug("Bond %s splits a family of the reference network.", e)
            return False
        crossing = [{units[u], units[v]} for u, v in _crossing_edges(reference, side)]
        if len(crossing) > 1 and not set.intersection(*crossing):
            _log.debug("Bond %s cuts the reference edges %s.", e, _crossing_edges(reference, side))
            return False
    return True
