"""Binary on-disk cache for a cone matrix.

Layout, little-endian::

    magic            8 bytes  b"PSTCONE\\0"
    format_version   uint16
    T                uint8
    convention       uint8
    rows             uint32
    cols             uint32
    individual       uint32   individual types
    rational         uint32   GARP-rational individual types
    collective       uint32   collective types
    consistent       uint32   CARP-consistent collective types
    checksum         32 bytes sha256 of everything above plus the records
    records          cols x (couple_index, male_code, female_code) uint32

Records are sorted, so the file for a given cone is byte-for-byte stable.
"""

import hashlib
import struct
from pathlib import Path
from typing import Optional

import numpy as np
from loguru import logger

from src.binary_parser import DataView
from src.cone import ConeCounts, ConeMatrix, StabilityConvention
from src.exceptions import ChecksumMismatch, VersionMismatch

MAGIC = b"PSTCONE\x00"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sHBBIIIIII")
CHECKSUM_SIZE = 32
RECORD = struct.Struct("<III")


def _checksum(header: bytes, records: bytes) -> bytes:
    return hashlib.sha256(header + records).digest()


def encode_cone(cone: ConeMatrix) -> bytes:
    order = np.lexsort((cone.female_code, cone.male_code, cone.couple_index))
    records = np.column_stack(
        [cone.couple_index[order], cone.male_code[order], cone.female_code[order]]
    ).astype("<u4").tobytes()
    counts = cone.counts
    header = HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        cone.T,
        cone.convention.code,
        cone.rows,
        cone.cols,
        counts.individual_types,
        counts.rational_individual_types,
        counts.collective_types,
        counts.consistent_collective_types,
    )
    return header + _checksum(header, records) + records


def decode_cone(
    buffer: bytes,
    expected_T: Optional[int] = None,
    expected_convention: Optional[StabilityConvention] = None,
) -> ConeMatrix:
    view = DataView(buffer)
    if view.get_bytes(0, len(MAGIC)) != MAGIC:
        logger.error("Not a cone cache file")
        raise VersionMismatch("Not a cone cache file")
    version = view.get_uint_16(8)
    if version != FORMAT_VERSION:
        logger.error(f"Cache format {version}, expected {FORMAT_VERSION}")
        raise VersionMismatch(f"Cache format {version}, expected {FORMAT_VERSION}")

    T = view.get_uint_8(10)
    try:
        convention = StabilityConvention.from_code(view.get_uint_8(11))
    except IndexError:
        raise VersionMismatch(f"Unknown convention code {view.get_uint_8(11)}") from None
    rows = view.get_uint_32(12)
    cols = view.get_uint_32(16)
    individual, rational, collective, consistent = view.get_uint_32_arr(20, 4)

    start = HEADER.size + CHECKSUM_SIZE
    if len(view) != start + cols * RECORD.size:
        logger.error(f"Cache holds {len(view) - start} record bytes for {cols} columns")
        raise ChecksumMismatch(f"Cache holds {len(view) - start} record bytes for {cols} columns")
    header = bytes(buffer[: HEADER.size])
    stored = view.get_bytes(HEADER.size, CHECKSUM_SIZE)
    records = bytes(buffer[start:])
    if _checksum(header, records) != stored:
        logger.error("Cone cache checksum mismatch")
        raise ChecksumMismatch("Cone cache checksum mismatch")

    if expected_T is not None and expected_T != T:
        logger.error(f"Cache is for T={T}, expected T={expected_T}")
        raise VersionMismatch(f"Cache is for T={T}, expected T={expected_T}")
    if expected_convention is not None and StabilityConvention.parse(expected_convention) != convention:
        logger.error(f"Cache uses {convention.value}, expected {expected_convention}")
        raise VersionMismatch(f"Cache uses {convention.value}, expected {expected_convention}")

    keys = np.frombuffer(records, dtype="<u4").reshape(cols, 3).astype(np.int64)
    counts = ConeCounts(
        T=T,
        individual_types=individual,
        rational_individual_types=rational,
        collective_types=collective,
        consistent_collective_types=consistent,
        stable_configurations=cols,
    )
    cone = ConeMatrix(
        T=T,
        convention=convention,
        couple_index=keys[:, 0],
        male_code=keys[:, 1],
        female_code=keys[:, 2],
        counts=counts,
    )
    if cone.rows != rows:
        raise ChecksumMismatch(f"Header says {rows} rows, counts give {cone.rows}")
    return cone


def save_cone(cone: ConeMatrix, path) -> Path:
    path = Path(path)
    logger.info(f"Saving cone ({cone.rows}x{cone.cols}) to {path}")
    path.write_bytes(encode_cone(cone))
    return path


def load_cone(
    path,
    expected_T: Optional[int] = None,
    expected_convention: Optional[StabilityConvention] = None,
) -> ConeMatrix:
    path = Path(path)
    if not path.exists():
        logger.error(f"No cone cache found at {path}")
        raise FileNotFoundError(f"No cone cache found at {path}")
    logger.info(f"Loading cone from {path}")
    cone = decode_cone(path.read_bytes(), expected_T, expected_convention)
    logger.info(f"Cone loaded: {cone.rows} rows, {cone.cols} columns")
    return cone


def cone_digest(cone: ConeMatrix) -> str:
    """Hex sha256 of the cone's encoded form; equal cones share a digest."""
    return hashlib.sha256(encode_cone(cone)).hexdigest()
