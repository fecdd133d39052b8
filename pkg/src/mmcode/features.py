"""FeatureBlock records: one named, fixed-dimension vector per tweet per
feature space, stored as JSONL."""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from .base import ValidationError


def save_feature_block(path, space, tweet_ids, matrix):
    """Write one JSONL record per tweet. Sparse matrices store (indices,
    values) pairs, dense ones the full vector."""
    sparse = sp.issparse(matrix)
    if sparse:
        matrix = matrix.tocsr()
    dim = matrix.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, tid in enumerate(tweet_ids):
            obj = {"tweet_id": tid, "space": space, "dim": dim}
            if sparse:
                row = matrix.getrow(i)
                obj["indices"] = [int(j) for j in row.indices]
                obj["values"] = [float(v) for v in row.data]
            else:
                obj["vector"] = [float(v) for v in np.asarray(matrix[i]).ravel()]
            f.write(json.dumps(obj, ensure_ascii=False, separators=(", ", ": ")))
            f.write("\n")


def load_feature_block(path, tweet_ids=None):
    """Read a feature block; returns (space, tweet_ids, matrix).

    With `tweet_ids` given, rows are returned in that order and every id must
    be present. Sparse files come back as csr, dense files as ndarray.
    """
    rows = {}
    space = None
    dim = None
    sparse = None
    order = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed feature record: {exc}") from exc
            if space is None:
                space, dim, sparse = obj["space"], int(obj["dim"]), "indices" in obj
            elif obj["space"] != space or int(obj["dim"]) != dim:
                raise ValidationError(f"{path}:{lineno}: inconsistent space or dimension")
            tid = str(obj["tweet_id"])
            if tid in rows:
                raise ValidationError(f"{path}:{lineno}: duplicate tweet_id {tid!r}")
            rows[tid] = obj
            order.append(tid)
    if space is None:
        raise ValidationError(f"{path}: empty feature block")
    if tweet_ids is None:
        tweet_ids = order
    else:
        missing = [t for t in tweet_ids if t not in rows]
        if missing:
            raise ValidationError(f"{path}: missing feature rows for {missing[:5]}")
    if sparse:
        matrix = sp.lil_matrix((len(tweet_ids), dim))
        for i, tid in enumerate(tweet_ids):
            obj = rows[tid]
            matrix[i, obj["indices"]] = obj["values"]
        matrix = matrix.tocsr()
    else:
        matrix = np.zeros((len(tweet_ids), dim))
        for i, tid in enumerate(tweet_ids):
            matrix[i] = rows[tid]["vector"]
    return space, list(tweet_ids), matrix
