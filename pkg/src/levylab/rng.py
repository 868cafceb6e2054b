"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose 128-bit
key encodes (master seed, namespace, purpose, stream index).  A stream is a
pure function of those four labels, so ensembles partitioned across workers
produce bit-identical results regardless of scheduling: particle p always
draws the same numbers no matter which worker simulates it, or in what order.

Layout of the key (most significant first):

    bits 127..64   master seed (64 bits)
    bits  63..56   namespace
    bits  55..48   purpose
    bits  47..0    stream index (particle index, replication index, ...)
"""

from __future__ import annotations

import numpy as np

# Purposes: what a stream is consumed for.
INIT = 1        # initial-condition draws
DRIVER = 2      # driving Levy process atoms (count, times, marks)
BROWNIAN = 3    # Brownian increments of the state equation
OBS_W = 4       # observation Brownian increments
OBS_PROPOSAL = 5  # proposal atoms of the observation random measure
OBS_THIN = 6    # thinning uniforms, one per proposal atom
RESAMPLE = 7    # particle-filter resampling draws
QUADRATURE = 8  # fixed Monte Carlo quadrature nodes
PROBE = 9       # probe points for validators / randomized tests

# Namespaces: which subsystem owns the stream, so e.g. the signal ensemble
# and the filter's particle ensemble never collide even with equal indices.
SIGNAL = 0
OBSERVATION = 1
FILTER = 2
EXPERIMENT = 3

_MASK64 = (1 << 64) - 1
_MAX_INDEX = 1 << 48


def stream_key(seed: int, purpose: int, index: int = 0, namespace: int = SIGNAL) -> int:
    """128-bit Philox key for the (seed, namespace, purpose, index) stream."""
    if not 0 <= index < _MAX_INDEX:
        raise ValueError(f"stream index out of range: {index}")
    if not 0 <= purpose < 256 or not 0 <= namespace < 256:
        raise ValueError(f"purpose/namespace out of range: {purpose}, {namespace}")
    return ((seed & _MASK64) << 64) | (namespace << 56) | (purpose << 48) | index


def stream(seed: int, purpose: int, index: int = 0, namespace: int = SIGNAL) -> np.random.Generator:
    """Dedicated generator for one (seed, namespace, purpose, index) stream."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, purpose, index, namespace)))
