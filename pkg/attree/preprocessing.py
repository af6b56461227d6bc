"""
Splitting, mini-batching and column permutation of binary data.
"""
import logging
import math
import numpy
import typing

from . import data

_log = logging.getLogger(__file__)


def split_train_test(b: data.DataBatch, fraction: float=0.5, seed=None) -> typing.Tuple[data.DataBatch, data.DataBatch]:
    """ Seeded random split into ⌈fraction·M⌉ training rows and the remaining test rows. """
    if b.count < 2:
        raise ValueError(f"Splitting needs at least 2 rows, got {b.count}.")
    if not 0 < fraction < 1:
        raise ValueError(f"The training fraction must lie in (0, 1), got {fraction}.")
    size = min(max(math.ceil(fraction * b.count), 1), b.count - 1)
    order = numpy.random.default_rng(seed).permutation(b.count)
    return b.subset(numpy.sort(order[:size])), b.subset(numpy.sort(order[size:]))


def minibatch(b: data.DataBatch, size: typing.Optional[int], seed=None) -> typing.Iterator[data.DataBatch]:
    """ Endless stream of mini-batches drawn uniformly without replacement.

    Parameters
    ----------
    b : DataBatch
        the full data set
    size : int, optional
        rows per mini-batch; None or the full row count yields `b` itself every time
    seed : optional
        seed of the stream

    Yields
    ------
    batch : DataBatch
    """
    if size is not None and not 1 <= size <= b.count:
        raise ValueError(f"Mini-batch size must lie in [1, {b.count}], got {size}.")
    rng = numpy.random.default_rng(seed)
    while True:
        if size is None or size == b.count:
            yield b
        else:
            yield b.subset(rng.choice(b.count, size=size, replace=False))


def permute_variables(b: data.DataBatch, seed=None) -> typing.Tuple[data.DataBatch, numpy.ndarray]:
    """ Random column permutation (removes any prior knowledge of the variable layout).

    Returns
    -------
    permuted : DataBatch
        column j holds the original variable permutation[j]
    permutation : numpy.ndarray
    """
    permutation = numpy.random.default_rng(seed).permutation(b.n)
    return data.DataBatch(b.samples[:, permutation], b.labels), permutation
