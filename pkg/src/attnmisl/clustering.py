"""Per-patient k-means (Lloyd iterations with k-means++ seeding).

Every patient is clustered on its own patches only, with an RNG derived from
``(seed, patient_id)`` so results do not depend on cohort order.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, PatientBag
from .errors import DataError


@dataclass
class PhenotypeAssignment:
    patient_id: str
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    counts: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return max(len(self.inertia_history) - 1, 0)


@dataclass
class PhenotypeTensor:
    cluster_index: int
    features: np.ndarray
    patch_indices: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]


def patient_rng(seed: int, patient_id: str) -> np.random.Generator:
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:8], "little")])


def _sq_dists(X, C):
    # direct differences, one centroid at a time: exact and O(m*d) memory
    out = np.empty((X.shape[0], C.shape[0]))
    for j in range(C.shape[0]):
        diff = X - C[j]
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def kmeans_plusplus(X, k, rng):
    m = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(m)]
    closest = _sq_dists(X, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(m)
        else:
            idx = rng.choice(m, p=closest / total)
        centroids[j] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centroids[j:j + 1])[:, 0])
    return centroids


def _assign(X, C):
    dist = _sq_dists(X, C)
    labels = np.argmin(dist, axis=1)  # first minimum -> lowest cluster index on ties
    return labels, float(dist[np.arange(len(X)), labels].sum())


def kmeans(X, k: int, rng: np.random.Generator, max_iter=100, tol=1e-4):
    """Returns ``(labels, centroids, inertia_history)``; empty clusters keep their centroid."""
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    if m == 0:
        raise DataError("cannot cluster an empty bag")
    if k < 1 or max_iter < 1 or tol < 0:
        raise ValueError("need k >= 1, max_iter >= 1, tol >= 0")

    uniq_idx = np.sort(np.unique(X, axis=0, return_index=True)[1])
    if len(uniq_idx) <= k:
        # every distinct patch is its own cluster; surplus clusters stay empty
        C = np.repeat(X[uniq_idx[:1]], k, axis=0)
        C[: len(uniq_idx)] = X[uniq_idx]
        labels, inertia = _assign(X, C)
        return labels, C, [inertia]

    C = kmeans_plusplus(X, k, rng)
    labels, inertia = _assign(X, C)
    history = [inertia]
    for _ in range(max_iter):
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        counts = np.bincount(labels, minlength=k)
        newC = C.copy()
        filled = counts > 0
        newC[filled] = sums[filled] / counts[filled, None]
        shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
        new_labels, new_inertia = _assign(X, newC)
        if new_inertia > inertia:
            # rounding in the mean can only matter at a fixed point
            break
        C, labels, inertia = newC, new_labels, new_inertia
        history.append(inertia)
        if shift < tol:
            break
    return labels, C, history


def kmeans_cluster(bag: PatientBag, k: int, seed=0, max_iter=100, tol=1e-4, standardize=False) -> PhenotypeAssignment:
    X = bag.features
    if standardize:
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    labels, C, history = kmeans(X, k, patient_rng(seed, bag.patient_id), max_iter, tol)
    return PhenotypeAssignment(
        patient_id=bag.patient_id,
        k=k,
        labels=labels,
        centroids=C,
        counts=np.bincount(labels, minlength=k),
        inertia=history[-1],
        inertia_history=history,
    )


def cluster_cohort(cohort: Cohort, k: int, seed=0, **kwargs) -> list[PhenotypeAssignment]:
    return [kmeans_cluster(bag, k, seed, **kwargs) for bag in cohort.patients]


def build_phenotype_tensors(bag: PatientBag, assignment: PhenotypeAssignment) -> list[PhenotypeTensor]:
    if assignment.patient_id != bag.patient_id:
        raise DataError(f"assignment for {assignment.patient_id!r} does not belong to {bag.patient_id!r}")
    if len(assignment.labels) != bag.m:
        raise DataError("assignment length does not match the bag")
    tensors = []
    for j in range(assignment.k):
        idx = np.flatnonzero(assignment.labels == j)
        tensors.append(PhenotypeTensor(j, bag.features[idx], idx))
    return tensors


def write_assignment_csv(path, bag: PatientBag, assignment: PhenotypeAssignment) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_index", "slide_index", "x", "y", "cluster"])
        for i in range(bag.m):
            w.writerow([i, bag.slide_index[i], bag.x[i], bag.y[i], assignment.labels[i]])
