"""Compressive sensing of multichannel packets with block-sparse Bayesian recovery."""
from .model import (
    BlockPartition,
    LogdetMultiplier,
    MatrixKind,
    NoiseReference,
    Measurements,
    Packet,
    RecoveryResult,
    SensingMatrix,
    SolverConfig,
    m_from_cr,
    make_partition_uniform,
)
from .sensing import compress_packet, generate_bernoulli, generate_gaussian
from .solver import solve
from .transform import dct_dictionary, identity_dictionary

__version__ = "0.1.0"
