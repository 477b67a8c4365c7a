import csv
import io
import json
import os
import tempfile
from typing import Iterable, List, Sequence

import numpy as np
import structlog

from neuralcore import Mlp
from simulate import PathSet

logger = structlog.get_logger(__name__)

PATH_HEADER = ["path", "t", "x"]


def format_value(value) -> str:
    """Lossless text for floats, plain text for everything else."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def to_jsonable(value):
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def atomic_write_text(path: str, text: str) -> None:
    """Write a file through a temporary sibling and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(temp_path, path)
    except Exception as e:
        logger.error(f"Failed to write {path}: {e}")
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


class ArtifactStore:
    """
    Output directory for one run.
    All writes are atomic, so readers never see a half-written file.
    """

    def __init__(self, output_dir: str):
        if not output_dir:
            logger.critical("Output directory not set")
            raise ValueError("Output directory not set")
        self.output_dir = output_dir
        self.written: List[str] = []

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def write_text(self, name: str, text: str) -> str:
        target = self.path(name)
        atomic_write_text(target, text)
        self.written.append(target)
        logger.info(f"Wrote {target}")
        return target

    def write_json(self, name: str, payload: dict) -> str:
        """Write a JSON report with sorted keys so reruns are byte-identical."""
        return self.write_text(name, json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
        return self.write_text(name, buffer.getvalue())

    def write_paths(self, pathset: PathSet, name: str = "paths.csv") -> str:
        """One row per (path, grid point) with columns path,t,x."""
        rows = (
            (i, pathset.grid[n], pathset.paths[i, n])
            for i in range(pathset.K)
            for n in range(pathset.N)
        )
        return self.write_csv(name, PATH_HEADER, rows)

    def write_checkpoint(self, name: str, net: Mlp) -> str:
        return self.write_json(name, net.to_checkpoint())


def _read_rows(path: str):
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        logger.error(f"Could not read {path}: {e}")
        raise ValueError(f"Could not read {path}: {e}") from e
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def read_paths_csv(path: str, block_size: int) -> PathSet:
    """
    Read a path file written by ``write_paths``.

    Args:
        path: CSV with columns path,t,x
        block_size: Points per definition block

    Returns:
        PathSet: The paths on their shared grid
    """
    header, rows = _read_rows(path)
    if header != PATH_HEADER:
        raise ValueError(f"{path}: expected header {','.join(PATH_HEADER)}")
    by_path = {}
    try:
        for row in rows:
            if row:
                by_path.setdefault(int(row[0]), []).append((float(row[1]), float(row[2])))
    except (ValueError, IndexError) as e:
        raise ValueError(f"{path}: malformed row ({e})") from e
    if not by_path:
        raise ValueError(f"{path}: no paths")

    indices = sorted(by_path)
    grid = np.asarray([t for t, _ in by_path[indices[0]]])
    paths = []
    for i in indices:
        points = by_path[i]
        times = np.asarray([t for t, _ in points])
        if times.shape != grid.shape or not np.array_equal(times, grid):
            raise ValueError(f"{path}: path {i} is not on the shared grid")
        paths.append([x for _, x in points])
    logger.info(f"Loaded {len(paths)} paths with {grid.shape[0]} points from {path}")
    return PathSet(grid, np.asarray(paths, dtype=float), block_size)


def read_observations_csv(path: str) -> np.ndarray:
    """Read one column of observed next-step values (header optional)."""
    header, rows = _read_rows(path)
    values = []
    for row in ([header] + rows):
        if not row or not row[0].strip():
            continue
        try:
            values.append(float(row[0]))
        except ValueError:
            if row is header:
                continue
            raise ValueError(f"{path}: non-numeric observation {row[0]!r}")
    return np.asarray(values, dtype=float)


def load_checkpoint(path: str) -> Mlp:
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Could not load checkpoint {path}: {e}")
        raise ValueError(f"Could not load checkpoint {path}: {e}") from e
    return Mlp.from_checkpoint(payload)
