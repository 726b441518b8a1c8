"""Attention statistics: mean attention distance per head and Attention Rollout."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

STOCHASTIC_TOL = 1e-5


def _as_array(record) -> np.ndarray:
    arr = getattr(record, "attn", record)
    return np.asarray(arr, dtype=np.float64)


def grid_positions(grid) -> np.ndarray:
    h, w = grid
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.stack([ys, xs], axis=1).astype(np.float64)


def normalized_distances(grid) -> np.ndarray:
    """Pairwise Euclidean token distances divided by the grid diagonal."""
    h, w = grid
    pos = grid_positions(grid)
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    diag = np.hypot(h - 1, w - 1)
    return d / diag if diag > 0 else d


@dataclass
class DistanceReport:
    per_head: np.ndarray  # (blocks, heads)

    @property
    def per_block(self) -> np.ndarray:
        return self.per_head.mean(axis=1)

    @property
    def global_mean(self) -> float:
        return float(self.per_head.mean())

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "head", "distance"])
            for b, row in enumerate(self.per_head, start=1):
                for h, value in enumerate(row):
                    writer.writerow([b, h, f"{value:.10g}"])
        return path


def _spatial_attention(attn: np.ndarray, n_spatial: int, has_class_token: Optional[bool]) -> np.ndarray:
    """Drop the class-token row/column and renormalise rows over spatial keys."""
    length = attn.shape[-1]
    if has_class_token is None:
        has_class_token = length == n_spatial + 1
    if length != n_spatial + int(has_class_token):
        raise ValueError(f"attention over {length} tokens does not match a grid of {n_spatial} (+class token: {has_class_token})")
    if has_class_token:
        attn = attn[..., 1:, 1:]
    mass = attn.sum(axis=-1, keepdims=True)
    return attn / np.where(mass > 0, mass, 1.0)


def attention_distance(records: Sequence, grid, has_class_token: Optional[bool] = None) -> DistanceReport:
    """Mean attention distance for every block and head.

    For each head the distance is the attention-weighted mean (over keys) of
    the normalised query-key distance, averaged over queries and images.
    ``records`` holds one (B, heads, L, L) array (or AttentionRecord) per block.
    """
    dist = normalized_distances(grid)
    n = dist.shape[0]
    rows = []
    for rec in records:
        attn = _as_array(rec)
        if attn.ndim == 3:
            attn = attn[None]
        attn = _spatial_attention(attn, n, has_class_token)
        rows.append((attn * dist).sum(axis=-1).mean(axis=(0, 2)))
    return DistanceReport(np.array(rows))


@dataclass
class RolloutMap:
    maps: np.ndarray  # (B, blocks, H, W): row of the rollout at the query, per block prefix
    rollout: np.ndarray  # (B, blocks, L, L): cumulative matrices
    query: int  # token index of the query

    def final(self) -> np.ndarray:
        return self.maps[:, -1]


def _check_stochastic(mat: np.ndarray, what: str) -> None:
    if (mat < -STOCHASTIC_TOL).any() or np.abs(mat.sum(axis=-1) - 1.0).max() > STOCHASTIC_TOL:
        raise ValueError(f"{what} is not row-stochastic")


def center_query(grid, has_class_token: bool) -> int:
    h, w = grid
    return (h // 2) * w + (w // 2) + int(has_class_token)


def attention_rollout(records: Sequence, grid, has_class_token: bool = True, query: Optional[int] = None) -> RolloutMap:
    """Attention Rollout with 0.5/0.5 residual mixing of head-averaged attention.

    ``A_hat = rownorm(0.5 * A + 0.5 * I)`` per block and ``R_l = A_hat_l @ R_{l-1}``
    with ``R_0 = I``. The query defaults to the centre spatial token; the map
    is its rollout row with the class-token column removed.
    """
    h, w = grid
    length = h * w + int(has_class_token)
    q = center_query(grid, has_class_token) if query is None else query
    if not 0 <= q < length:
        raise ValueError(f"query token {q} out of range for {length} tokens")
    eye = np.eye(length)
    current = None
    rollouts, maps = [], []
    for k, rec in enumerate(records, start=1):
        attn = _as_array(rec)
        if attn.ndim == 3:
            attn = attn[:, None]
        if attn.shape[-2:] != (length, length):
            raise ValueError(f"block {k} attention has shape {attn.shape}, expected {length} tokens")
        _check_stochastic(attn, f"attention of block {k}")
        mixed = 0.5 * attn.mean(axis=1) + 0.5 * eye
        mixed = mixed / mixed.sum(axis=-1, keepdims=True)
        current = mixed if current is None else np.matmul(mixed, current)
        rollouts.append(current)
        row = current[:, q, int(has_class_token) :]
        maps.append(row.reshape(-1, h, w))
    if current is None:
        raise ValueError("no attention records given")
    return RolloutMap(np.stack(maps, axis=1), np.stack(rollouts, axis=1), q)


@dataclass
class DistanceDelta:
    per_head: np.ndarray
    global_delta: float

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "head", "delta"])
            for b, row in enumerate(self.per_head, start=1):
                for h, value in enumerate(row):
                    writer.writerow([b, h, f"{value:.10g}"])
            writer.writerow(["all", "all", f"{self.global_delta:.10g}"])
        return path


def compare_runs(report_a: DistanceReport, report_b: DistanceReport) -> DistanceDelta:
    """Signed change ``b - a`` per block/head and of the global mean."""
    if report_a.per_head.shape != report_b.per_head.shape:
        raise ValueError(f"report shapes differ: {report_a.per_head.shape} vs {report_b.per_head.shape}")
    return DistanceDelta(report_b.per_head - report_a.per_head, report_b.global_mean - report_a.global_mean)


def write_pgm(path, image: np.ndarray) -> Path:
    """Write a 2-D array as an 8-bit binary PGM, min-max scaled."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())
    return path


def write_grid_text(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(image), fmt="%.6e")
    return path
