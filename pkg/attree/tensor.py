"""
Dense real tensors: checked contraction, matricization and rank-truncated SVD.
"""
import dataclasses
import logging
import numpy
import scipy.linalg
import typing

_log = logging.getLogger(__file__)

DenseTensor = numpy.ndarray
AxisPair = typing.Tuple[int, int]


class ShapeMismatchError(ValueError):
    """ Raised when tensor shapes or axes do not fit an operation. """


class NumericalError(ArithmeticError):
    """ Raised when a decomposition fails or produces non-finite values. """


@dataclasses.dataclass(frozen=True)
class SvdResult:
    """ Truncated singular value decomposition m ≈ u @ diag(s) @ v.T """
    u: DenseTensor
    s: numpy.ndarray
    v: DenseTensor
    discarded_weight: float

    @property
    def rank(self) -> int:
        return len(self.s)

    def reconstruct(self) -> DenseTensor:
        return (self.u * self.s) @ self.v.T


def _check_finite(t: DenseTensor, operation: str) -> DenseTensor:
    if not numpy.all(numpy.isfinite(t)):
        raise NumericalError(f"Non-finite entries after {operation}.")
    return t


def contract(a: DenseTensor, b: DenseTensor, pairs: typing.Sequence[AxisPair]) -> DenseTensor:
    """ Contracts two tensors over pairs of axes.

    Parameters
    ----------
    a, b : array-like
        the tensors to contract
    pairs : list of (int, int)
        (axis of a, axis of b) tuples that are summed over

    Returns
    -------
    result : numpy.ndarray
        unpaired axes of a followed by unpaired axes of b
    """
    a = numpy.asarray(a, dtype=float)
    b = numpy.asarray(b, dtype=float)
    axes_a = []
    axes_b = []
    for ia, ib in pairs:
        if not (-a.ndim <= ia < a.ndim) or not (-b.ndim <= ib < b.ndim):
            raise ShapeMismatchError(f"Axis pair ({ia}, {ib}) is out of range for shapes {a.shape} and {b.shape}.")
        ia %= a.ndim
        ib %= b.ndim
        if a.shape[ia] != b.shape[ib]:
            raise ShapeMismatchError(
                f"Axis pair ({ia}, {ib}) has mismatched extents {a.shape[ia]} and {b.shape[ib]}."
            )
        axes_a.append(ia)
        axes_b.append(ib)
    if len(set(axes_a)) != len(axes_a) or len(set(axes_b)) != len(axes_b):
        raise ShapeMismatchError(f"An axis is paired more than once in {list(pairs)}.")
    result = numpy.tensordot(a, b, axes=(axes_a, axes_b))
    return _check_finite(result, "contract")


def matricize(t: DenseTensor, row_axes: typing.Sequence[int]) -> typing.Tuple[DenseTensor, typing.Tuple[int, ...], typing.Tuple[int, ...]]:
    """ Groups `row_axes` into matrix rows and all remaining axes (in order) into columns.

    Returns
    -------
    matrix : numpy.ndarray
    row_shape : tuple
    col_shape : tuple
    """
    row_axes = [ax % t.ndim for ax in row_axes]
    col_axes = [ax for ax in range(t.ndim) if ax not in row_axes]
    row_shape = tuple(t.shape[ax] for ax in row_axes)
    col_shape = tuple(t.shape[ax] for ax in col_axes)
    matrix = numpy.transpose(t, row_axes + col_axes).reshape(
        int(numpy.prod(row_shape, dtype=int)), int(numpy.prod(col_shape, dtype=int))
    )
    return matrix, row_shape, col_shape


def _fix_signs(u: numpy.ndarray, vt: numpy.ndarray):
    """ Flips singular vector pairs so that the largest-magnitude entry of each u column is positive. """
    if u.size == 0:
        return u, vt
    idx = numpy.argmax(numpy.abs(u), axis=0)
    signs = numpy.sign(u[idx, numpy.arange(u.shape[1])])
    signs[signs == 0] = 1
    return u * signs, vt * signs[:, None]


def svd_truncate(m: DenseTensor, max_rank: int) -> SvdResult:
    """ Rank-truncated SVD with a deterministic sign convention.

    Singular values below the numerical rank threshold (σ_max · max(shape) · eps) are dropped.
    At least one singular triple is always kept, so the zero matrix yields s = [0].

    Parameters
    ----------
    m : array-like
        a matrix
    max_rank : int
        maximum number of singular triples to keep

    Returns
    -------
    result : SvdResult
        u (rows × r) and v (cols × r) with orthonormal columns, s non-increasing,
        and the summed squares of all dropped singular values
    """
    m = numpy.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ShapeMismatchError(f"SVD needs a matrix, got shape {m.shape}.")
    if max_rank < 1:
        raise ValueError(f"max_rank must be ≥ 1, got {max_rank}.")
    _check_finite(m, "SVD input check")
    try:
        u, s, vt = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd")
    except numpy.linalg.LinAlgError:
        _log.warning("gesdd did not converge for a %s matrix, retrying with gesvd.", m.shape)
        try:
            u, s, vt = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
        except numpy.linalg.LinAlgError as ex:
            raise NumericalError(f"SVD of a {m.shape} matrix failed: {ex}") from ex

    if s.size and s[0] > 0:
        tolerance = s[0] * max(m.shape) * numpy.finfo(float).eps
        numerical_rank = int(numpy.sum(s > tolerance))
    else:
        numerical_rank = 0
    rank = max(1, min(max_rank, numerical_rank))
    u, vt = _fix_signs(u[:, :rank], vt[:rank])
    discarded = float(numpy.sum(s[rank:] ** 2))
    return SvdResult(
        u=_check_finite(u, "SVD"),
        s=_check_finite(s[:rank].copy(), "SVD"),
        v=_check_finite(vt.T.copy(), "SVD"),
        discarded_weight=discarded,
    )


def scale_axis(t: DenseTensor, axis: int, weights: numpy.ndarray) -> DenseTensor:
    """ Multiplies the slices of `t` along `axis` by `weights`. """
    shape = [1] * t.ndim
    shape[axis] = len(weights)
    return t * numpy.reshape(weights, shape)


def apply_matrix(t: DenseTensor, axis: int, matrix: DenseTensor) -> DenseTensor:
    """ Replaces index j of `axis` by k through t'[..., k, ...] = Σ_j matrix[k, j] t[..., j, ...] """
    moved = numpy.tensordot(matrix, t, axes=([1], [axis]))
    return numpy.moveaxis(moved, 0, axis)


def row_outer(a: numpy.ndarray, b: numpy.ndarray) -> numpy.ndarray:
    """ Row-wise outer product of (M, p) and (M, q) arrays, flattened to (M, p·q). """
    return numpy.einsum("mi,mj->mij", a, b).reshape(a.shape[0], a.shape[1] * b.shape[1])
