"""Deterministic 2-D PCA export for skill-map style plots.

PCA takes the top-2 eigenvectors of the covariance of the input vectors.
Sign convention: each eigenvector's largest-magnitude component is made
positive (first such index on ties), so repeated runs on identical input
write identical files.  Rank-deficient input simply yields zeros on the
missing component.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np


def pca_2d(vectors: Sequence[Sequence[float]]) -> np.ndarray:
    """(n, 2) projection onto the top-2 principal components."""
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ValueError(f"expected a non-empty 2-D array, got shape {mat.shape}")
    centered = mat - mat.mean(axis=0, keepdims=True)
    if mat.shape[0] == 1:
        return np.zeros((1, 2))
    cov = centered.T @ centered / (mat.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, ::-1][:, :2]  # eigh sorts ascending
    if components.shape[1] < 2:
        components = np.hstack([components, np.zeros((components.shape[0], 1))])
    for j in range(components.shape[1]):
        i = int(np.argmax(np.abs(components[:, j])))
        if components[i, j] < 0:
            components[:, j] = -components[:, j]
    return centered @ components


def export_projection_csv(
    labels: Sequence[str], vectors: Sequence[Sequence[float]], path: Path | str
) -> None:
    """Write (x, y, label) rows; magnitudes below 1e-12 snap to zero."""
    if len(labels) != len(vectors):
        raise ValueError(f"{len(labels)} labels for {len(vectors)} vectors")
    coords = pca_2d(vectors)
    coords[np.abs(coords) < 1e-12] = 0.0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label"])
        for (x, y), label in zip(coords, labels):
            writer.writerow([f"{x:.6f}", f"{y:.6f}", label])
