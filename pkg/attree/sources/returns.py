"""
Daily change rates of stocks, binarized against the cross-sectional mean of each day.
"""
import logging
import numpy
import pandas
import pathlib
import typing

from .. import data

_log = logging.getLogger(__file__)


def binarize_returns(matrix) -> data.DataBatch:
    """ 1 where a stock's change rate is strictly above the mean of all stocks on that day.

    Parameters
    ----------
    matrix : array-like or pandas.DataFrame
        (days × stocks) change rates

    Returns
    -------
    batch : DataBatch
        (days × stocks) bits
    """
    values = numpy.asarray(matrix, dtype=float)
    if values.ndim != 2 or values.size == 0:
        raise ValueError(f"Expected a non-empty (days × stocks) matrix, got shape {values.shape}.")
    if not numpy.all(numpy.isfinite(values)):
        raise ValueError("Change rates must be finite.")
    return data.DataBatch(values > values.mean(axis=1, keepdims=True))


def load_returns_csv(path: typing.Union[str, pathlib.Path]) -> pandas.DataFrame:
    """ Reads a CSV of change rates with dates in the first column and one ticker per column. """
    try:
        df = pandas.read_csv(path, index_col=0)
    except (pandas.errors.ParserError, pandas.errors.EmptyDataError) as ex:
        raise data.FormatError(f"{path}: {ex}") from ex
    try:
        df = df.astype(float)
    except ValueError as ex:
        raise data.FormatError(f"{path}: non-numeric change rates ({ex}).") from ex
    _log.info("Loaded %i days of %i tickers from %s.", *df.shape, path)
    return df


def _generate(*, csv_path):
    df = load_returns_csv(csv_path)
    if df.isna().any().any():
        raise data.FormatError(f"{csv_path}: missing change rates.")
    return binarize_returns(df)


data.set_source_support(
    "returns",
    description="stock change rates binarized against the daily cross-sectional mean",
    fn_generate=_generate,
)
