"""
Binarized images from IDX files (the MNIST container format, optionally gzip-compressed).
"""
import gzip
import logging
import numpy
import pathlib
import struct
import typing

from .. import data

_log = logging.getLogger(__file__)

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


def _read_bytes(path: typing.Union[str, pathlib.Path]) -> bytes:
    path = pathlib.Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as ex:
            raise data.FormatError(f"{path}: broken gzip stream ({ex}).") from ex
    return raw


def _unpack_header(raw: bytes, path, fields: int, magic: int) -> typing.Tuple[int, ...]:
    size = 4 * fields
    if len(raw) < size:
        raise data.FormatError(f"{path}: truncated header.")
    values = struct.unpack(f">{fields}I", raw[:size])
    if values[0] != magic:
        raise data.FormatError(f"{path}: bad magic number {values[0]}, expected {magic}.")
    return values[1:]


def read_idx_images(path: typing.Union[str, pathlib.Path]) -> numpy.ndarray:
    """ (count, rows, cols) uint8 pixel intensities. """
    raw = _read_bytes(path)
    count, rows, cols = _unpack_header(raw, path, 4, IMAGES_MAGIC)
    pixels = numpy.frombuffer(raw, dtype=numpy.uint8, offset=16)
    if len(pixels) != count * rows * cols:
        raise data.FormatError(f"{path}: expected {count * rows * cols} pixels, found {len(pixels)}.")
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path: typing.Union[str, pathlib.Path]) -> numpy.ndarray:
    raw = _read_bytes(path)
    (count,) = _unpack_header(raw, path, 2, LABELS_MAGIC)
    labels = numpy.frombuffer(raw, dtype=numpy.uint8, offset=8)
    if len(labels) != count:
        raise data.FormatError(f"{path}: expected {count} labels, found {len(labels)}.")
    return labels


def binarize_images(images: numpy.ndarray, threshold: int=127, pad_to: int=32) -> numpy.ndarray:
    """ Centers each image on a zero (pad_to × pad_to) canvas and sets pixels above `threshold` to 1.

    Returns
    -------
    samples : numpy.ndarray
        (count, pad_to²) uint8 bits, row-major
    """
    count, rows, cols = images.shape
    if rows > pad_to or cols > pad_to:
        raise data.FormatError(f"Images of {rows}×{cols} pixels do not fit into {pad_to}×{pad_to}.")
    top = (pad_to - rows) // 2
    left = (pad_to - cols) // 2
    canvas = numpy.zeros((count, pad_to, pad_to), dtype=numpy.uint8)
    canvas[:, top:top + rows, left:left + cols] = images > threshold
    return canvas.reshape(count, pad_to * pad_to)


def load_idx_binarized(
    images_path: typing.Union[str, pathlib.Path],
    labels_path: typing.Optional[typing.Union[str, pathlib.Path]]=None,
    threshold: int=127,
    pad_to: int=32,
) -> data.DataBatch:
    """ Loads, pads and binarizes an IDX image file.

    Parameters
    ----------
    images_path : path-like
        IDX image file (magic 2051)
    labels_path : optional, path-like
        IDX label file (magic 2049) with one label per image
    threshold : int
        intensities strictly above the threshold become 1
    pad_to : int
        edge length of the zero-padded square canvas

    Returns
    -------
    batch : DataBatch
        (count × pad_to²) bits with the labels attached if given
    """
    images = read_idx_images(images_path)
    labels = None
    if labels_path is not None:
        labels = read_idx_labels(labels_path)
        if len(labels) != len(images):
            raise data.FormatError(f"{len(images)} images but {len(labels)} labels.")
    if len(images) == 0:
        raise data.FormatError(f"{images_path}: the file contains no images.")
    _log.info("Loaded %i images of %i×%i pixels from %s.", *images.shape, images_path)
    return data.DataBatch(binarize_images(images, threshold, pad_to), labels)


def write_idx_images(images: numpy.ndarray, path: typing.Union[str, pathlib.Path]):
    """ Writes (count, rows, cols) uint8 images as an uncompressed IDX file. """
    images = numpy.asarray(images, dtype=numpy.uint8)
    header = struct.pack(">4I", IMAGES_MAGIC, *images.shape)
    pathlib.Path(path).write_bytes(header + images.tobytes())
    return


def _generate(*, images_path, labels_path=None, threshold: int=127, pad_to: int=32):
    return load_idx_binarized(images_path, labels_path, threshold, pad_to)


data.set_source_support(
    "idx",
    description="binarized, zero-padded images from IDX files",
    fn_generate=_generate,
)
