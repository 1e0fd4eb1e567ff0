"""
Pose-indexed feature database.

Training images are stored as (id, ground-truth pose, embedding) entries and
retrieved by the distance between their position and a predicted position.
The on-disk container is a pair of files sharing a stem:

    <stem>.poses   text header `hrapr-db v1 dim=<D> count=<C>` then
                   C lines `id tx ty tz qw qx qy qz`
    <stem>.feat    magic `HRFE`, u32 version, u32 dim, u64 count, then
                   count rows of dim little-endian float32
"""

import logging
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from hrapr.exceptions import BuildError, FormatError
from hrapr.geometry import Pose, stack_translations
from utils.report_writer import PathLike, atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_DIM = 1024
FEATURE_MAGIC = b"HRFE"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<4sIIQ")
STORAGE_DTYPE = np.dtype("<f4")
POSES_HEADER_RE = re.compile(r"^hrapr-db v(\d+) dim=(\d+) count=(\d+)$")

EXHAUSTIVE = "exhaustive"
CellSize = Union[None, str, float]


@dataclass(frozen=True, eq=False)
class FeatureEmbedding:
    """Dense feature vector with its Euclidean norm cached"""

    values: np.ndarray
    cached_norm: float

    @classmethod
    def from_vector(cls, vector, dtype=None) -> "FeatureEmbedding":
        """
        Validate a raw vector and compute its norm.

        Args:
            vector: 1-D sequence of finite reals
            dtype: Storage dtype (float64 when omitted)

        Raises:
            ValueError: If the vector is not 1-D or holds non-finite values
        """
        values = np.array(vector, dtype=dtype or np.float64)
        if values.ndim != 1:
            raise ValueError(f"Embedding must be 1-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"Embedding has non-finite value at component {bad}")
        values.setflags(write=False)
        norm = float(np.linalg.norm(values.astype(np.float64, copy=False)))
        return cls(values=values, cached_norm=norm)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def as_float64(self) -> np.ndarray:
        return self.values.astype(np.float64, copy=False)


@dataclass(frozen=True)
class DBEntry:
    """One training image: id, ground-truth pose, embedding"""

    id: str
    pose: Pose
    embedding: FeatureEmbedding


def _distances(positions: np.ndarray, x: np.ndarray) -> np.ndarray:
    diff = positions - x
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _select_within(positions: np.ndarray, candidates: np.ndarray, x: np.ndarray, radius: float) -> np.ndarray:
    """Candidates (ascending input order) within radius, sorted by distance, ties by input order"""
    if candidates.size == 0:
        return candidates
    dist = _distances(np.ascontiguousarray(positions[candidates]), x)
    keep = dist <= radius
    kept = candidates[keep]
    order = np.argsort(dist[keep], kind="stable")
    return kept[order]


class ExhaustiveIndex:
    """Linear scan over every entry position"""

    name = EXHAUSTIVE

    def __init__(self, positions: np.ndarray):
        self._positions = positions
        self._all = np.arange(positions.shape[0], dtype=np.int64)

    def query(self, x: np.ndarray, radius: float) -> np.ndarray:
        return _select_within(self._positions, self._all, x, radius)


class GridIndex:
    """
    Uniform grid over entry positions.

    Candidates come from every occupied cell overlapping the query box
    (padded by one cell), and are then filtered with the same distance test
    as the linear scan.
    """

    name = "grid"

    def __init__(self, positions: np.ndarray, cell_size: float):
        if not cell_size > 0 or not math.isfinite(cell_size):
            raise ValueError(f"cell_size must be a positive number, got {cell_size}")
        self.cell_size = float(cell_size)
        self._positions = positions
        cells = np.floor(positions / self.cell_size).astype(np.int64)
        buckets: Dict[Tuple[int, int, int], List[int]] = {}
        for i, key in enumerate(map(tuple, cells)):
            buckets.setdefault(key, []).append(i)
        self._keys = np.array(list(buckets.keys()), dtype=np.int64).reshape(-1, 3)
        self._members = [np.array(v, dtype=np.int64) for v in buckets.values()]

    def query(self, x: np.ndarray, radius: float) -> np.ndarray:
        if not self._members:
            return np.zeros(0, dtype=np.int64)
        # float bounds; an int cast overflows for huge or infinite radii
        lo = np.floor((x - radius) / self.cell_size) - 1.0
        hi = np.floor((x + radius) / self.cell_size) + 1.0
        hit = np.all((self._keys >= lo) & (self._keys <= hi), axis=1)
        if not hit.any():
            return np.zeros(0, dtype=np.int64)
        candidates = np.sort(np.concatenate([self._members[i] for i in np.flatnonzero(hit)]))
        return _select_within(self._positions, candidates, x, radius)


class PoseFeatureDB:
    """
    Immutable store of training entries with a position index.

    Use build_database() or load_db() to create one.
    """

    def __init__(self, entries: Sequence[DBEntry], dim: int, matrix: np.ndarray, norms: np.ndarray, cell_size: CellSize = None):
        self._entries = tuple(entries)
        self._dim = int(dim)
        self._matrix = matrix
        self._norms = norms
        self._matrix.setflags(write=False)
        self._norms.setflags(write=False)
        self._positions = stack_translations(e.pose for e in self._entries)
        self._positions.setflags(write=False)
        if cell_size is None or cell_size == EXHAUSTIVE:
            self._index = ExhaustiveIndex(self._positions)
        else:
            self._index = GridIndex(self._positions, float(cell_size))

    @property
    def entries(self) -> Tuple[DBEntry, ...]:
        return self._entries

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def count(self) -> int:
        return len(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def index_name(self) -> str:
        return self._index.name

    @property
    def embedding_matrix(self) -> np.ndarray:
        """(count, dim) float32 matrix, row i belongs to entry i"""
        return self._matrix

    @property
    def norms(self) -> np.ndarray:
        return self._norms

    @property
    def payload_bytes(self) -> int:
        """Serialized embedding payload: count * dim * 4 bytes"""
        return self.count * self._dim * STORAGE_DTYPE.itemsize

    def ids(self) -> List[str]:
        return [e.id for e in self._entries]

    def retrieve_indices(self, x_hat, d_th: float) -> np.ndarray:
        """Entry indices within d_th of x_hat, nearest first"""
        if not d_th >= 0:
            raise ValueError(f"d_th must be >= 0, got {d_th}")
        x = np.asarray(x_hat, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"Query position must be finite, got {x.tolist()}")
        return self._index.query(x, float(d_th))

    def with_index(self, cell_size: CellSize) -> "PoseFeatureDB":
        """Same entries behind a different position index"""
        return PoseFeatureDB(self._entries, self._dim, self._matrix, self._norms, cell_size)


def build_database(records: Sequence[Tuple[str, Pose, Sequence[float]]], cell_size: CellSize = None,
                   dim: Optional[int] = None) -> PoseFeatureDB:
    """
    Build a database from (id, pose, raw vector) records.

    Args:
        records: Training records, order preserved
        cell_size: Grid cell size in meters, or None / "exhaustive" for a linear scan
        dim: Expected embedding length; required to give an empty database a dim

    Returns:
        PoseFeatureDB

    Raises:
        BuildError: On dimension mismatch, duplicate or malformed id, or non-finite values
    """
    entries = []
    rows = []
    seen = set()
    for i, record in enumerate(records):
        record_id, pose, vector = record
        if not isinstance(record_id, str) or not record_id or any(c.isspace() for c in record_id):
            raise BuildError("id must be a non-empty string without whitespace", i, record_id)
        if record_id in seen:
            raise BuildError("duplicate id", i, record_id)
        if not isinstance(pose, Pose):
            raise BuildError(f"expected a Pose, got {type(pose).__name__}", i, record_id)
        if isinstance(vector, FeatureEmbedding):
            vector = vector.values
        row = np.asarray(vector, dtype=np.float64)
        if row.ndim != 1:
            raise BuildError(f"embedding must be 1-D, got shape {row.shape}", i, record_id)
        if dim is None:
            dim = row.shape[0]
            if dim == 0:
                raise BuildError("embedding is empty", i, record_id)
        elif row.shape[0] != dim:
            raise BuildError(f"dimension mismatch: expected {dim}, got {row.shape[0]}", i, record_id)
        if not np.all(np.isfinite(row)):
            raise BuildError("non-finite embedding value", i, record_id)
        stored = row.astype(STORAGE_DTYPE)
        if not np.all(np.isfinite(stored)):
            raise BuildError("embedding value overflows float32", i, record_id)
        seen.add(record_id)
        rows.append(stored)
        entries.append((record_id, pose))

    if not rows:
        dim = DEFAULT_DIM if dim is None else int(dim)
        matrix = np.zeros((0, dim), dtype=STORAGE_DTYPE)
    else:
        matrix = np.vstack(rows).astype(STORAGE_DTYPE, copy=False)
    return _assemble(entries, dim, matrix, cell_size)


def _assemble(entries: Sequence[Tuple[str, Pose]], dim: int, matrix: np.ndarray, cell_size: CellSize) -> PoseFeatureDB:
    matrix = np.ascontiguousarray(matrix, dtype=STORAGE_DTYPE)
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1) if matrix.shape[0] else np.zeros(0)
    db_entries = []
    for i, (record_id, pose) in enumerate(entries):
        row = matrix[i]
        row.setflags(write=False)
        db_entries.append(DBEntry(id=record_id, pose=pose, embedding=FeatureEmbedding(values=row, cached_norm=float(norms[i]))))
    db = PoseFeatureDB(db_entries, dim, matrix, norms, cell_size)
    logger.debug("Built database: %d entries, dim %d, %s index", db.count, dim, db.index_name)
    return db


def retrieve_by_position(db: PoseFeatureDB, x_hat, d_th: float) -> List[DBEntry]:
    """
    Entries whose position lies within d_th of x_hat (inclusive).

    Args:
        db: Database to search
        x_hat: Predicted position (3-vector, meters)
        d_th: Retrieval radius in meters, >= 0

    Returns:
        Entries in ascending distance order, ties by input order
    """
    entries = db.entries
    return [entries[i] for i in db.retrieve_indices(x_hat, d_th)]


# -- container format ------------------------------------------------------

def format_float(value: float) -> str:
    """Shortest text that parses back to the same float"""
    return repr(float(value))


def poses_path(stem: PathLike) -> Path:
    return Path(f"{stem}.poses")


def feat_path(stem: PathLike) -> Path:
    return Path(f"{stem}.feat")


def encode_feature_matrix(matrix: np.ndarray) -> bytes:
    """Serialize a (count, dim) matrix in the `.feat` layout"""
    matrix = np.asarray(matrix)
    count, dim = matrix.shape
    header = FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dim, count)
    return header + np.ascontiguousarray(matrix, dtype=STORAGE_DTYPE).tobytes()


def write_feature_matrix(path: PathLike, matrix: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_feature_matrix(matrix))


def read_feature_matrix(path: PathLike) -> Tuple[int, np.ndarray]:
    """
    Read a `.feat` / `.qfeat` file.

    Returns:
        (dim, matrix) where matrix is (count, dim) float32

    Raises:
        FormatError: On bad magic or version, truncation or trailing bytes
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < FEATURE_HEADER.size:
        raise FormatError(f"truncated header: {len(data)} of {FEATURE_HEADER.size} bytes", path, offset=len(data))
    magic, version, dim, count = FEATURE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", path, offset=0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", path, offset=4)
    if dim == 0:
        raise FormatError("dim must be positive", path, offset=8)
    row_bytes = dim * STORAGE_DTYPE.itemsize
    expected = FEATURE_HEADER.size + count * row_bytes
    if len(data) < expected:
        complete = (len(data) - FEATURE_HEADER.size) // row_bytes
        raise FormatError(
            f"truncated payload: header declares {count} rows of dim {dim}, found {complete} complete rows",
            path, offset=FEATURE_HEADER.size + complete * row_bytes)
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after {count} rows", path, offset=expected)
    matrix = np.frombuffer(data, dtype=STORAGE_DTYPE, count=count * dim, offset=FEATURE_HEADER.size)
    matrix = matrix.reshape(count, dim).astype(STORAGE_DTYPE)
    return int(dim), matrix


def format_poses_text(db_dim: int, rows: Sequence[Tuple[str, Pose]]) -> str:
    lines = [f"hrapr-db v1 dim={db_dim} count={len(rows)}"]
    for record_id, pose in rows:
        lines.append(" ".join([record_id] + [format_float(v) for v in pose.to_values()]))
    return "\n".join(lines) + "\n"


def read_pose_table(path: PathLike) -> Tuple[int, List[Tuple[str, Pose]]]:
    """
    Read a `.poses` file.

    Returns:
        (dim, [(id, pose), ...])
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError("empty file, missing header", path, line=1)
    match = POSES_HEADER_RE.match(lines[0].strip())
    if not match:
        raise FormatError(f"bad header {lines[0]!r}", path, line=1)
    version, dim, count = (int(g) for g in match.groups())
    if version != 1:
        raise FormatError(f"unsupported version {version}", path, line=1)
    body = [(n, line) for n, line in enumerate(lines[1:], start=2) if line.strip()]
    if len(body) != count:
        raise FormatError(f"header declares {count} entries, found {len(body)}", path, line=len(lines))
    rows = []
    for n, line in body:
        tokens = line.split()
        if len(tokens) != 8:
            raise FormatError(f"expected 8 fields, got {len(tokens)}", path, line=n)
        try:
            pose = Pose.from_values([float(v) for v in tokens[1:]])
        except ValueError as e:
            raise FormatError(f"bad pose: {e}", path, line=n) from e
        rows.append((tokens[0], pose))
    return dim, rows


def read_db_files(poses_file: PathLike, feat_file: PathLike, cell_size: CellSize = None) -> PoseFeatureDB:
    """
    Load a database from an explicit pair of files.

    Raises:
        FormatError: If the files disagree on dim or count, or either is malformed
    """
    pose_dim, rows = read_pose_table(poses_file)
    feat_dim, matrix = read_feature_matrix(feat_file)
    if pose_dim != feat_dim:
        raise FormatError(f"dimension mismatch: {poses_file} declares dim={pose_dim}, {feat_file} has dim={feat_dim}")
    if len(rows) != matrix.shape[0]:
        raise FormatError(f"count mismatch: {poses_file} has {len(rows)} entries, {feat_file} has {matrix.shape[0]} rows")
    seen = set()
    for i, (record_id, _) in enumerate(rows):
        if record_id in seen:
            raise FormatError(f"duplicate id {record_id!r}", poses_file, line=i + 2)
        seen.add(record_id)
    if not np.all(np.isfinite(matrix)):
        row = int(np.flatnonzero(~np.all(np.isfinite(matrix), axis=1))[0])
        raise FormatError(f"non-finite value in row {row}", feat_file,
                          offset=FEATURE_HEADER.size + row * feat_dim * STORAGE_DTYPE.itemsize)
    return _assemble(rows, feat_dim, matrix, cell_size)


def save_db(db: PoseFeatureDB, stem: PathLike) -> Tuple[Path, Path]:
    """
    Write `<stem>.poses` and `<stem>.feat`.

    Returns:
        The two written paths
    """
    text = format_poses_text(db.dim, [(e.id, e.pose) for e in db.entries])
    p = atomic_write_text(poses_path(stem), text)
    f = write_feature_matrix(feat_path(stem), db.embedding_matrix)
    logger.info("Saved database %s: %d entries, dim %d, %d payload bytes", stem, db.count, db.dim, db.payload_bytes)
    return p, f


def load_db(stem: PathLike, cell_size: CellSize = None) -> PoseFeatureDB:
    """Load the database stored under stem"""
    return read_db_files(poses_path(stem), feat_path(stem), cell_size)


def database_summary(db: PoseFeatureDB) -> Dict[str, int]:
    return {
        'count': db.count,
        'dim': db.dim,
        'payload_bytes': db.payload_bytes,
        'bytes_per_entry': db.dim * STORAGE_DTYPE.itemsize,
    }
