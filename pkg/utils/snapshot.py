"""
Field snapshot files (GLF1 static, GLD1 dynamic).

Layout, all little-endian (byte-exact description in CONVENTIONS.md):

    magic   4 bytes  b'GLF1' or b'GLD1'
    kind    uint8    0 = torus, 1 = disk
    flags   uint8    bit 0 set when a flux-string block follows the fields
    extent  float64  L (torus) or R (disk)
    n       uint32   points per side
    t       float64  GLD1 only: time of the state

followed by n*n float64 blocks in row-major order: a1, a2, Re Phi, Im Phi,
then the flux string when flagged, then (GLD1) a1', a2', Re Phi', Im Phi'.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from models import DynamicState, FieldConfig, Grid2D
from utils.reporting import ReportWriter

logger = logging.getLogger(__name__)

STATIC_MAGIC = b'GLF1'
DYNAMIC_MAGIC = b'GLD1'
FLAG_FLUX_STRING = 0x01
KIND_CODES = {'torus': 0, 'disk': 1}

STATIC_HEADER = np.dtype([('magic', 'S4'), ('kind', 'u1'), ('flags', 'u1'),
                          ('extent', '<f8'), ('n', '<u4')])
DYNAMIC_HEADER = np.dtype([('magic', 'S4'), ('kind', 'u1'), ('flags', 'u1'),
                           ('extent', '<f8'), ('n', '<u4'), ('t', '<f8')])


def _block(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype='<f8').tobytes(order='C')


class SnapshotIO:
    """Encode and decode field snapshots."""

    @staticmethod
    def encode(cfg: FieldConfig, grid: Grid2D, state: Optional[DynamicState] = None) -> bytes:
        """Serialize a configuration (GLF1) or a dynamic state (GLD1)."""
        flags = FLAG_FLUX_STRING if cfg.flux_string is not None else 0
        header_type = DYNAMIC_HEADER if state is not None else STATIC_HEADER
        header = np.zeros(1, dtype=header_type)
        header['magic'] = DYNAMIC_MAGIC if state is not None else STATIC_MAGIC
        header['kind'] = KIND_CODES[grid.domain_kind]
        header['flags'] = flags
        header['extent'] = grid.extent
        header['n'] = grid.n
        if state is not None:
            header['t'] = state.t

        parts = [header.tobytes(), _block(cfg.a1), _block(cfg.a2),
                 _block(cfg.phi.real), _block(cfg.phi.imag)]
        if cfg.flux_string is not None:
            parts.append(_block(cfg.flux_string))
        if state is not None:
            parts.extend([_block(state.a1dot), _block(state.a2dot),
                          _block(state.phidot.real), _block(state.phidot.imag)])
        return b''.join(parts)

    @staticmethod
    def decode(data: bytes) -> Tuple[Grid2D, FieldConfig, Optional[DynamicState]]:
        """
        Parse snapshot bytes.

        Returns:
            Tuple: (grid, fields, dynamic state or None)
        """
        magic = data[:4]
        if magic == STATIC_MAGIC:
            header_type = STATIC_HEADER
        elif magic == DYNAMIC_MAGIC:
            header_type = DYNAMIC_HEADER
        else:
            raise ValueError(f"not a field snapshot (magic {magic!r})")
        header = np.frombuffer(data, dtype=header_type, count=1)[0]
        kinds = {code: kind for kind, code in KIND_CODES.items()}
        grid = Grid2D(kinds[int(header['kind'])], float(header['extent']), int(header['n']))
        n = grid.n

        has_string = bool(int(header['flags']) & FLAG_FLUX_STRING)
        blocks = 4 + int(has_string) + (4 if magic == DYNAMIC_MAGIC else 0)
        body = np.frombuffer(data, dtype='<f8', offset=header_type.itemsize)
        if body.size != blocks * n * n:
            raise ValueError(f"snapshot body holds {body.size} values, expected {blocks * n * n}")
        fields = body.reshape(blocks, n, n).astype(float)

        cfg = FieldConfig(fields[0], fields[1], fields[2] + 1j * fields[3],
                          fields[4] if has_string else None)
        state = None
        if magic == DYNAMIC_MAGIC:
            k = 4 + int(has_string)
            state = DynamicState(cfg, fields[k], fields[k + 1], fields[k + 2] + 1j * fields[k + 3],
                                 float(header['t']))
        return grid, cfg, state

    @staticmethod
    def write(path: str, cfg: FieldConfig, grid: Grid2D, state: Optional[DynamicState] = None) -> str:
        ReportWriter.atomic_write_bytes(path, SnapshotIO.encode(cfg, grid, state))
        logger.debug(f"Wrote snapshot {path}")
        return path

    @staticmethod
    def read(path: str) -> Tuple[Grid2D, FieldConfig, Optional[DynamicState]]:
        with open(path, 'rb') as handle:
            return SnapshotIO.decode(handle.read())
