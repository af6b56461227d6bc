import dataclasses
import logging
import numpy
import pathlib
import typing

_log = logging.getLogger(__file__)


class FormatError(ValueError):
    """ Raised for malformed input files or data that does not fit the expected layout. """


@dataclasses.dataclass
class DataBatch:
    """ Binary samples as a (M × n) uint8 matrix, optionally with one label per row. """
    samples: numpy.ndarray
    labels: typing.Optional[numpy.ndarray] = None

    def __post_init__(self):
        samples = numpy.asarray(self.samples)
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ValueError(f"A batch needs at least one row and one column, got shape {samples.shape}.")
        if not numpy.all((samples == 0) | (samples == 1)):
            raise ValueError("Batch entries must be 0 or 1.")
        self.samples = samples.astype(numpy.uint8)
        if self.labels is not None:
            self.labels = numpy.asarray(self.labels)
            if self.labels.shape != (samples.shape[0],):
                raise ValueError(f"Expected {samples.shape[0]} labels, got shape {self.labels.shape}.")

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    def __len__(self):
        return self.count

    def subset(self, rows) -> "DataBatch":
        rows = numpy.asarray(rows)
        return DataBatch(self.samples[rows], None if self.labels is None else self.labels[rows])


def read_batch(path: typing.Union[str, pathlib.Path]) -> DataBatch:
    """ Reads the batch text format: a header line `n m`, then m lines of n space-separated 0/1 digits. """
    lines = pathlib.Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file.")
    header = lines[0].split()
    if len(header) != 2 or not all(h.isascii() and h.isdigit() for h in header):
        raise FormatError(f"{path}: the first line must be `n m`, got '{lines[0]}'.")
    n, m = (int(h) for h in header)
    if n < 1 or m < 1:
        raise FormatError(f"{path}: n and m must be positive, got {n} and {m}.")
    rows = [line for line in lines[1:] if line.strip()]
    if len(rows) != m:
        raise FormatError(f"{path}: the header announces {m} rows, found {len(rows)}.")
    samples = numpy.zeros((m, n), dtype=numpy.uint8)
    for i, line in enumerate(rows):
        fields = line.split()
        if len(fields) != n:
            raise FormatError(f"{path}: row {i + 1} has {len(fields)} values, expected {n}.")
        if any(f not in ("0", "1") for f in fields):
            raise FormatError(f"{path}: row {i + 1} contains values other than 0 and 1.")
        samples[i] = [int(f) for f in fields]
    return DataBatch(samples)


def write_batch(batch: DataBatch, path: typing.Union[str, pathlib.Path]):
    """ Writes a batch in the text format read by `read_batch`. """
    lines = [f"{batch.n} {batch.count}"]
    lines += [" ".join(str(int(v)) for v in row) for row in batch.samples]
    pathlib.Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return


GenerateFunction = typing.Callable[..., DataBatch]


@dataclasses.dataclass
class DataSource:
    kind: str
    description: str
    fn_generate: GenerateFunction


SUPPORTED_SOURCES: typing.Dict[str, DataSource] = {}


def set_source_support(
    kind: str,
    *,
    description: str,
    fn_generate: GenerateFunction,
):
    """ Registers a data generator or loader.

    Parameters
    ----------
    kind : str
        short name of the source (key in SUPPORTED_SOURCES dict)
    description : str
        human-readable description, shown by the command line help
    fn_generate : callable
        A function taking keyword arguments only and returning a DataBatch.
    """
    if not kind.isidentifier():
        raise KeyError(f"Source kind '{kind}' must be a valid identifier.")
    SUPPORTED_SOURCES[kind] = DataSource(kind, description, fn_generate)
    return


def generate(kind: str, **kwargs) -> DataBatch:
    """ Produces a batch with the registered generator of `kind`.

    Parameters
    ----------
    kind : str
        key in SUPPORTED_SOURCES dict
    **kwargs
        forwarded to the generator

    Returns
    -------
    batch : DataBatch
    """
    from . import sources

    if kind not in SUPPORTED_SOURCES:
        raise KeyError(f"Data source '{kind}' is not in the collection: {sorted(SUPPORTED_SOURCES)}.")
    batch = SUPPORTED_SOURCES[kind].fn_generate(**kwargs)
    assert isinstance(batch, DataBatch)
    _log.info("Generated %i samples with %i variables from source '%s'.", batch.count, batch.n, kind)
    return batch
