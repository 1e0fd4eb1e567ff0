"""
Query files: APR predictions plus query embeddings, with optional ground truth.

    <stem>.queries  header `hrapr-q v1 dim=<D> count=<C> gt=<0|1>` then one line
                    per query: `id` + 7 predicted pose values
                    [+ 7 ground-truth pose values when gt=1] + `label`
    <stem>.qfeat    same binary layout as `.feat`, row i for line i
"""

import logging
import re
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from hrapr.exceptions import FormatError
from hrapr.feature_store import (
    DEFAULT_DIM,
    STORAGE_DTYPE,
    FeatureEmbedding,
    format_float,
    read_feature_matrix,
    write_feature_matrix,
)
from hrapr.geometry import Pose
from utils.report_writer import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

QUERIES_HEADER_RE = re.compile(r"^hrapr-q v(\d+) dim=(\d+) count=(\d+) gt=([01])$")
NO_LABEL = "-"


class QueryRecord(NamedTuple):
    """A query as consumed by score_batch: (id, predicted, embedding, gt)"""

    id: str
    predicted: Pose
    embedding: FeatureEmbedding
    gt: Optional[Pose] = None
    label: str = NO_LABEL


def queries_path(stem: PathLike) -> Path:
    return Path(f"{stem}.queries")


def qfeat_path(stem: PathLike) -> Path:
    return Path(f"{stem}.qfeat")


def save_queries(stem: PathLike, records: Sequence[QueryRecord], dim: Optional[int] = None):
    """
    Write `<stem>.queries` and `<stem>.qfeat`.

    Ground-truth columns are written only when every record carries a gt pose.

    Returns:
        The two written paths
    """
    if records:
        dim = records[0].embedding.dim
    elif dim is None:
        dim = DEFAULT_DIM
    has_gt = bool(records) and all(r.gt is not None for r in records)

    lines = [f"hrapr-q v1 dim={dim} count={len(records)} gt={int(has_gt)}"]
    rows = []
    for r in records:
        if r.embedding.dim != dim:
            raise FormatError(f"query {r.id!r} has dim {r.embedding.dim}, expected {dim}")
        fields = [r.id] + [format_float(v) for v in r.predicted.to_values()]
        if has_gt:
            fields += [format_float(v) for v in r.gt.to_values()]
        fields.append(r.label or NO_LABEL)
        lines.append(" ".join(fields))
        rows.append(np.asarray(r.embedding.values, dtype=STORAGE_DTYPE))
    matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=STORAGE_DTYPE)

    q = atomic_write_text(queries_path(stem), "\n".join(lines) + "\n")
    f = write_feature_matrix(qfeat_path(stem), matrix)
    logger.info("Saved %d queries to %s (gt=%d)", len(records), stem, int(has_gt))
    return q, f


def load_queries(stem: PathLike) -> List[QueryRecord]:
    """
    Read the query pair stored under stem.

    Raises:
        FormatError: On malformed lines, bad headers or disagreeing files
    """
    path = queries_path(stem)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError("empty file, missing header", path, line=1)
    match = QUERIES_HEADER_RE.match(lines[0].strip())
    if not match:
        raise FormatError(f"bad header {lines[0]!r}", path, line=1)
    version, dim, count, gt_flag = (int(g) for g in match.groups())
    if version != 1:
        raise FormatError(f"unsupported version {version}", path, line=1)

    feat_dim, matrix = read_feature_matrix(qfeat_path(stem))
    if feat_dim != dim:
        raise FormatError(f"dimension mismatch: {path} declares dim={dim}, {qfeat_path(stem)} has dim={feat_dim}")
    body = [(n, line) for n, line in enumerate(lines[1:], start=2) if line.strip()]
    if len(body) != count:
        raise FormatError(f"header declares {count} queries, found {len(body)}", path, line=len(lines))
    if matrix.shape[0] != count:
        raise FormatError(f"count mismatch: {count} queries but {matrix.shape[0]} embedding rows", qfeat_path(stem))

    expected = 1 + 7 + (7 if gt_flag else 0) + 1
    records = []
    seen = set()
    for row, (n, line) in enumerate(body):
        tokens = line.split()
        if len(tokens) != expected:
            raise FormatError(f"expected {expected} fields, got {len(tokens)}", path, line=n)
        qid = tokens[0]
        if qid in seen:
            raise FormatError(f"duplicate id {qid!r}", path, line=n)
        seen.add(qid)
        try:
            values = [float(v) for v in tokens[1:-1]]
            predicted = Pose.from_values(values[:7])
            gt = Pose.from_values(values[7:14]) if gt_flag else None
            embedding = FeatureEmbedding.from_vector(matrix[row], dtype=STORAGE_DTYPE)
        except ValueError as e:
            raise FormatError(str(e), path, line=n) from e
        records.append(QueryRecord(id=qid, predicted=predicted, embedding=embedding, gt=gt, label=tokens[-1]))
    return records


def has_ground_truth(records: Sequence[QueryRecord]) -> bool:
    return bool(records) and all(r.gt is not None for r in records)
