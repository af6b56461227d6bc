"""
Random binary patterns with a constant middle region.
"""
import dataclasses
import logging
import numpy

from .. import data

_log = logging.getLogger(__file__)


@dataclasses.dataclass(frozen=True)
class PatternSpec:
    total_bits: int = 128
    left_random: int = 32
    right_random: int = 32
    num_patterns: int = 10

    def __post_init__(self):
        if self.total_bits < 1 or self.num_patterns < 1:
            raise ValueError("total_bits and num_patterns must be positive.")
        if self.left_random < 0 or self.right_random < 0:
            raise ValueError("The random regions must not have negative width.")
        if self.left_random + self.right_random > self.total_bits:
            raise ValueError(
                f"{self.left_random} + {self.right_random} random bits do not fit into {self.total_bits} bits."
            )

    @property
    def middle_bits(self) -> int:
        return self.total_bits - self.left_random - self.right_random


def gen_random_patterns(spec: PatternSpec=PatternSpec(), seed=None) -> data.DataBatch:
    """ `num_patterns` distinct rows with fair random bits at both ends and zeros in between.

    Parameters
    ----------
    spec : PatternSpec
        layout of the patterns
    seed : optional
        seed of the random bits

    Returns
    -------
    batch : DataBatch
        (num_patterns × total_bits) batch with pairwise distinct rows
    """
    free = spec.left_random + spec.right_random
    if spec.num_patterns > 2 ** free:
        raise ValueError(f"{spec.num_patterns} distinct patterns need more than {free} random bits.")
    rng = numpy.random.default_rng(seed)
    samples = numpy.zeros((spec.num_patterns, spec.total_bits), dtype=numpy.uint8)
    right = spec.total_bits - spec.right_random
    attempts = 0
    while True:
        attempts += 1
        samples[:, :spec.left_random] = rng.integers(0, 2, size=(spec.num_patterns, spec.left_random))
        samples[:, right:] = rng.integers(0, 2, size=(spec.num_patterns, spec.right_random))
        if len(numpy.unique(samples, axis=0)) == spec.num_patterns:
            break
    _log.debug("Drew %i distinct patterns after %i attempts.", spec.num_patterns, attempts)
    return data.DataBatch(samples)


def _generate(*, total_bits=128, left_random=32, right_random=32, num_patterns=10, seed=None):
    spec = PatternSpec(total_bits, left_random, right_random, num_patterns)
    return gen_random_patterns(spec, seed)


data.set_source_support(
    "patterns",
    description="distinct random bit patterns with a zero middle region",
    fn_generate=_generate,
)
