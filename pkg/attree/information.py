"""
Bond mutual information I(A, B) between the variable groups on either side of an edge, in nats.
"""
import logging
import numpy
import scipy.stats
import typing

from . import model as bm
from . import sampling
from . import topology

_log = logging.getLogger(__file__)


def _mutual_information(probabilities: numpy.ndarray, n: int, a: typing.Iterable[int], b: typing.Iterable[int]) -> float:
    a = sorted(a)
    b = sorted(b)
    joint = probabilities.reshape((2,) * n).transpose(a + b).reshape(2 ** len(a), 2 ** len(b))
    independent = numpy.outer(joint.sum(axis=1), joint.sum(axis=0))
    return float(scipy.stats.entropy(joint.ravel(), independent.ravel()))


def bmi_exact(m: bm.TensorTreeModel, e: typing.Tuple[int, int]) -> float:
    """ Exact mutual information across edge `e` by enumerating all configurations (n ≤ 16). """
    a, b = topology.bipartition(m.topology, e)
    return _mutual_information(bm.exact_probabilities(m), m.n, a, b)


def bmi_exact_all(m: bm.TensorTreeModel) -> typing.Dict[topology.Edge, float]:
    """ Exact mutual information of every edge, enumerating the configurations once. """
    probabilities = bm.exact_probabilities(m)
    return {
        e : _mutual_information(probabilities, m.n, *topology.bipartition(m.topology, e))
        for e in m.topology.edges
    }


def root_pmi(
    left: numpy.ndarray,
    weight: numpy.ndarray,
    right: numpy.ndarray,
    *,
    strict: bool=True,
) -> numpy.ndarray:
    """ ln[p(a,b) / (p(a) p(b))] per sample from the root-edge messages of both sides.

    With isometries on both sides the marginals are p(a) = Σ_k Λ_k² u_k(a)² / Z
    and p(b) = Σ_k Λ_k² v_k(b)² / Z.
    """
    squared = weight ** 2
    z = squared.sum()
    p_a = (left ** 2) @ squared / z
    p_b = (right ** 2) @ squared / z
    p_ab = ((left * right) @ weight) ** 2 / z
    if strict:
        zero = p_ab == 0
        if zero.any():
            raise bm.ZeroAmplitudeError(int(numpy.argmax(zero)))
    else:
        zero = p_ab < bm.PROBABILITY_FLOOR
        if zero.any():
            _log.warning("%i samples have a vanishing p(a,b) and are clamped.", zero.sum())
        p_ab = numpy.maximum(p_ab, bm.PROBABILITY_FLOOR)
        p_a = numpy.maximum(p_a, bm.PROBABILITY_FLOOR)
        p_b = numpy.maximum(p_b, bm.PROBABILITY_FLOOR)
    return numpy.log(p_ab) - numpy.log(p_a) - numpy.log(p_b)


def pointwise_mutual_information(
    m: bm.TensorTreeModel,
    batch,
    *,
    cache: typing.Optional[bm.MessageCache]=None,
) -> numpy.ndarray:
    """ Per-sample log ratio across the root edge; its mean is the empirical BMI. """
    cache = cache or bm.MessageCache(bm._as_samples(batch, m.n))
    cache.sync(m)
    p, q = m.root_edge
    return root_pmi(cache.message(p, q), m.central_weight, cache.message(q, p))


def bmi_empirical(
    m: bm.TensorTreeModel,
    e: typing.Tuple[int, int],
    batch,
    *,
    cache: typing.Optional[bm.MessageCache]=None,
) -> float:
    """ Sample-average estimate of the mutual information across the root edge.

    Parameters
    ----------
    m : TensorTreeModel
        a canonical model
    e : edge
        must be the root edge, where the marginals are available exactly
    batch : DataBatch or array
        samples to average over

    Returns
    -------
    bmi : float
        |mean pointwise mutual information| (a negative average is replaced by its absolute value)
    """
    if topology.edge(*e) != m.root_edge:
        raise ValueError(f"The empirical BMI needs the root edge {m.root_edge}, got {tuple(e)}; move the root first.")
    return float(abs(numpy.mean(pointwise_mutual_information(m, batch, cache=cache))))


def bmi_sampled(m: bm.TensorTreeModel, e: typing.Tuple[int, int], count: int, rng=None) -> float:
    """ Empirical BMI of any edge, averaged over `count` samples drawn from the model itself. """
    moved = bm.move_root_to(m, e)
    return bmi_empirical(moved, moved.root_edge, sampling.sample_batch(moved, count, rng))
