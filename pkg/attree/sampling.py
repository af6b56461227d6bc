"""
Exact (perfect) sampling from a canonical tensor-tree model.

Variables are drawn outward from the root edge. The reduced density matrix on a bond is
obtained by replacing every isometric subtree that is traced out with the identity.
"""
import logging
import numpy
import typing

from . import model as bm

_log = logging.getLogger(__file__)


def _leaf_probability_one(leaf_tensor: typing.Optional[numpy.ndarray], rho: numpy.ndarray) -> numpy.ndarray:
    """ P(x = 1) per sample for a leaf whose bond density matrices are `rho` (M, d, d). """
    if leaf_tensor is None:
        weights = numpy.stack([rho[:, 0, 0], rho[:, 1, 1]], axis=1)
    else:
        weights = numpy.einsum("xk,mkl,xl->mx", leaf_tensor, rho, leaf_tensor)
    weights = numpy.clip(weights, 0, None)
    return weights[:, 1] / weights.sum(axis=1)


def _sample_side(
    m: bm.TensorTreeModel,
    top: int,
    parent: int,
    rho: numpy.ndarray,
    rng: numpy.random.Generator,
    out: numpy.ndarray,
) -> numpy.ndarray:
    """ Samples all variables behind `top` (seen from `parent`) given bond density matrices `rho`.

    Returns the (M, d) amplitude vectors of the sampled subtree on the (top, parent) bond.
    """
    t = m.topology
    rhos = {top: rho}
    vectors = {}
    conditioned = {}
    stack = [(top, parent, 0)]
    while stack:
        node, up, phase = stack.pop()
        if t.is_leaf(node):
            leaf_tensor = m.tensors.get(node)
            p1 = _leaf_probability_one(leaf_tensor, rhos.pop(node))
            x = (rng.random(len(p1)) < p1).astype(numpy.intp)
            out[:, node] = x
            vector = bm._ONE_HOT[x]
            vectors[node] = vector if leaf_tensor is None else vector @ leaf_tensor
            continue
        T, (c1, c2) = bm._orient(m, node, up)
        if phase == 0:
            rhos[c1] = numpy.einsum("ijp,mpq,kjq->mik", T, rhos[node], T)
            stack.append((node, up, 1))
            stack.append((c1, node, 0))
        elif phase == 1:
            weighted = numpy.einsum("mi,ijp->mjp", vectors.pop(c1), T)
            child = numpy.einsum("mjp,mpq,mkq->mjk", weighted, rhos[node], weighted)
            trace = numpy.einsum("mjj->m", child)
            rhos[c2] = child / trace[:, None, None]
            conditioned[node] = weighted
            stack.append((node, up, 2))
            stack.append((c2, node, 0))
        else:
            vector = numpy.einsum("mjp,mj->mp", conditioned.pop(node), vectors.pop(c2))
            vectors[node] = vector / numpy.linalg.norm(vector, axis=1, keepdims=True)
            rhos.pop(node)
    return vectors[top]


def sample_batch(m: bm.TensorTreeModel, count: int, rng=None) -> numpy.ndarray:
    """ Draws `count` i.i.d. configurations from p(x).

    Parameters
    ----------
    m : TensorTreeModel
        a canonical model
    count : int
        number of samples
    rng : optional
        seed or numpy.random.Generator

    Returns
    -------
    samples : numpy.ndarray
        (count, n) uint8 array
    """
    if count < 0:
        raise ValueError(f"Sample count must be non-negative, got {count}.")
    rng = numpy.random.default_rng(rng)
    out = numpy.zeros((count, m.n), dtype=numpy.uint8)
    if count == 0:
        return out
    p, q = m.root_edge
    weight = m.central_weight
    rho = numpy.broadcast_to(numpy.diag(weight ** 2 / numpy.sum(weight ** 2)), (count, len(weight), len(weight)))
    side = _sample_side(m, p, q, rho, rng, out) * weight
    side /= numpy.linalg.norm(side, axis=1, keepdims=True)
    _sample_side(m, q, p, numpy.einsum("mk,ml->mkl", side, side), rng, out)
    return out


def sample(m: bm.TensorTreeModel, rng=None) -> numpy.ndarray:
    """ One configuration drawn from p(x). """
    return sample_batch(m, 1, rng)[0]


def leaf_marginals(m: bm.TensorTreeModel) -> numpy.ndarray:
    """ P(x_i = 1) for all variables, by propagating bond density matrices outward from the root. """
    t = m.topology
    p, q = m.root_edge
    weight = m.central_weight
    diagonal = numpy.diag(weight ** 2 / numpy.sum(weight ** 2))
    result = numpy.zeros(m.n)
    stack = [(p, q, diagonal), (q, p, diagonal)]
    while stack:
        node, up, rho = stack.pop()
        if t.is_leaf(node):
            result[node] = _leaf_probability_one(m.tensors.get(node), rho[None])[0]
            continue
        T, (c1, c2) = bm._orient(m, node, up)
        stack.append((c1, node, numpy.einsum("ijp,pq,kjq->ik", T, rho, T)))
        stack.append((c2, node, numpy.einsum("jip,pq,jkq->ik", T, rho, T)))
    return result
