"""
Artifact writing for vortexlab experiments.

Every file is written to a temporary sibling and renamed into place, so an
interrupted sweep never leaves a half-written artifact behind. CSV floats
use one fixed format, which keeps repeated runs byte-identical.
"""

import io
import json
import logging
import os
import tempfile
from typing import Any, Dict, List, Sequence

import numpy as np

from config import get_config

logger = logging.getLogger(__name__)


def _to_builtin(value: Any) -> Any:
    """JSON fallback for numpy scalars, arrays and complex numbers."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, complex):
        return [value.real, value.imag]
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class ReportWriter:
    """Atomic CSV/JSON emission."""

    @staticmethod
    def atomic_write_bytes(path: str, data: bytes) -> str:
        """Write bytes to path via a temporary file in the same directory."""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        handle, temp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
        try:
            with os.fdopen(handle, 'wb') as temp:
                temp.write(data)
            os.replace(temp_path, path)
        except Exception as e:
            logger.error(f"Failed to write {path}: {e}")
            if os.path.exists(temp_path):
                os.remove(temp_path)
            raise
        return path

    @staticmethod
    def write_json(path: str, payload: Dict[str, Any]) -> str:
        text = json.dumps(payload, indent=2, sort_keys=True, default=_to_builtin) + '\n'
        return ReportWriter.atomic_write_bytes(path, text.encode('utf-8'))

    @staticmethod
    def format_csv(columns: Sequence[str], rows: Sequence[Sequence[float]]) -> bytes:
        """Header line plus rows formatted with the configured float format."""
        fmt = get_config().CSV_FLOAT_FORMAT
        buffer = io.BytesIO()
        table = np.asarray(rows, dtype=float).reshape(len(rows), len(columns))
        np.savetxt(buffer, table, fmt=fmt, delimiter=',', header=','.join(columns), comments='')
        return buffer.getvalue()

    @staticmethod
    def write_csv(path: str, columns: Sequence[str], rows: Sequence[Sequence[float]]) -> str:
        return ReportWriter.atomic_write_bytes(path, ReportWriter.format_csv(columns, rows))

    @staticmethod
    def emit_plotdata(report, out_dir: str) -> List[str]:
        """
        Write every table of a report as CSV plus the report itself as JSON.

        Args:
            report: ExperimentReport whose ``tables`` map names to
                {'columns': [...], 'rows': [[...], ...]}
            out_dir: destination directory

        Returns:
            List[str]: written paths, report.json last
        """
        paths = []
        for name in sorted(report.tables):
            table = report.tables[name]
            path = os.path.join(out_dir, f"{name}.csv")
            ReportWriter.write_csv(path, table['columns'], table['rows'])
            paths.append(path)
        report.artifacts.extend(os.path.basename(p) for p in paths)
        report_path = os.path.join(out_dir, 'report.json')
        ReportWriter.write_json(report_path, report.to_dict())
        paths.append(report_path)
        logger.info(f"Wrote {len(paths)} artifacts to {out_dir}")
        return paths
