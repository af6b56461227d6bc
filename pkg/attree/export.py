"""
CSV reports and label files.
"""
import logging
import pandas
import pathlib
import typing

from . import data
from . import topology

_log = logging.getLogger(__file__)

PathLike = typing.Union[str, pathlib.Path]


def write_report_csv(report, path: PathLike):
    """ Writes `iter,train_nll,test_nll` rows of a TrainReport; missing test values stay empty. """
    report.to_dataframe().to_csv(path, na_rep="", float_format="%.10g")
    return


def write_bmi_csv(bmi: typing.Mapping[topology.Edge, float], path: PathLike):
    df = pandas.DataFrame(
        [(u, v, value) for (u, v), value in sorted(bmi.items())],
        columns=["u", "v", "bmi"],
    )
    df.to_csv(path, index=False, float_format="%.10g")
    return


def read_bmi_csv(path: PathLike) -> typing.Dict[topology.Edge, float]:
    df = _read_csv(path, ["u", "v", "bmi"])
    return {
        topology.edge(int(row.u), int(row.v)) : float(row.bmi)
        for row in df.itertuples(index=False)
    }


def write_rank_csv(ranking: typing.Mapping[int, int], path: PathLike):
    """ Writes the centre-distance rank of every variable as `variable,rank`. """
    pandas.DataFrame(
        sorted(ranking.items()), columns=["variable", "rank"]
    ).to_csv(path, index=False)
    return


def read_labels(path: PathLike) -> typing.Tuple[typing.Dict[int, str], typing.Dict[int, str]]:
    """ Reads a `variable,label,color` CSV (the color column is optional).

    Returns
    -------
    labels : dict
        { variable : label }
    colors : dict
        { variable : color } for the rows that give one
    """
    df = _read_csv(path, ["variable", "label"])
    labels = {}
    colors = {}
    for _, row in df.iterrows():
        variable = int(row["variable"])
        if pandas.notna(row["label"]):
            labels[variable] = str(row["label"])
        if "color" in df.columns and pandas.notna(row["color"]):
            colors[variable] = str(row["color"])
    return labels, colors


def _read_csv(path: PathLike, required: typing.Sequence[str]) -> pandas.DataFrame:
    try:
        df = pandas.read_csv(path)
    except (pandas.errors.ParserError, pandas.errors.EmptyDataError) as ex:
        raise data.FormatError(f"{path}: {ex}") from ex
    missing = set(required) - set(df.columns)
    if missing:
        raise data.FormatError(f"{path}: missing columns {sorted(missing)}.")
    return df
