import logging
import matplotlib
from matplotlib import pyplot, cm
import numpy
import typing

_log = logging.getLogger(__file__)


def plot_nll_history(
    report,
    *,
    lower_bound: typing.Optional[float]=None,
    ax: matplotlib.axes.Axes=None,
) -> typing.Tuple[matplotlib.figure.Figure, matplotlib.axes.Axes]:
    """ Plots the training and test NLL trajectories of a TrainReport.

    Parameters
    ----------
    report : TrainReport
        the training result
    lower_bound : optional, float
        draws a horizontal reference line, e.g. the entropy ln(10) of ten distinct patterns
    ax : optional, matplotlib.axes.Axes
        an existing subplot to use

    Returns
    -------
    figure : matplotlib.figure.Figure
    ax : matplotlib.axes.Axes
    """
    if not ax:
        _, ax = pyplot.subplots(figsize=(8, 5))
    df = report.to_dataframe()
    ax.plot(df.index, df.train_nll, color="blue", label="train")
    evaluated = df.test_nll.dropna()
    if len(evaluated):
        ax.plot(evaluated.index, evaluated.values, color="orange", label="test")
    if lower_bound is not None:
        ax.axhline(lower_bound, color="gray", linestyle=":", label="lower bound")
    ax.set_xlabel("iteration")
    ax.set_ylabel("NLL [nats]")
    ax.legend(frameon=False, loc="upper right")
    return ax.figure, ax


def plot_center_ranking(
    ranking: typing.Mapping[int, int],
    shape: typing.Tuple[int, int]=(32, 32),
    ax: matplotlib.axes.Axes=None,
) -> typing.Tuple[matplotlib.figure.Figure, matplotlib.axes.Axes]:
    """ Shows the centre-distance ranks of image variables (row-major pixels) as a heat map. """
    if len(ranking) != shape[0] * shape[1]:
        raise ValueError(f"{len(ranking)} ranks do not fill a {shape[0]}×{shape[1]} image.")
    if not ax:
        _, ax = pyplot.subplots(figsize=(5, 5))
    grid = numpy.array([ranking[i] for i in range(len(ranking))]).reshape(shape)
    image = ax.imshow(grid, cmap=cm.viridis_r, interpolation="nearest")
    ax.figure.colorbar(image, ax=ax, label="rank")
    ax.set_xticks([])
    ax.set_yticks([])
    return ax.figure, ax
