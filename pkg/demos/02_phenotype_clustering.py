"""
Per-patient phenotype clustering
================================

Each bag is split into k phenotype clusters with k-means (k-means++ seeding,
Lloyd iterations). Seeds are derived from the patient id, so one patient's
clusters never depend on who else is in the cohort.
"""

import numpy as np

from attnmisl.clustering import build_phenotype_tensors, kmeans_cluster
from attnmisl.cohort import PatientBag, generate_synthetic_cohort

cohort, truth = generate_synthetic_cohort(5, 100, 16, 4, seed=3, return_truth=True)
bag, archetypes = cohort.patients[0], truth.archetypes[0]

a = kmeans_cluster(bag, k=6, seed=0)
print("cluster sizes", a.counts, "after", a.n_iter, "iterations")
print("inertia per iteration", np.round(a.inertia_history, 1))

# How pure is each cluster with respect to the generating archetype?
for j in range(a.k):
    members = archetypes[a.labels == j]
    if len(members):
        print(f"cluster {j}: {len(members):3d} patches, archetypes {np.bincount(members, minlength=4)}")

# The model consumes one tensor per cluster (possibly empty)
tensors = build_phenotype_tensors(bag, a)
print([t.features.shape for t in tensors])

# Fewer distinct points than clusters: extra clusters stay empty
tiny = PatientBag("tiny", np.array([[0.0, 0.0], [1.0, 1.0]]), np.zeros(2, int), np.arange(2), np.arange(2))
tiny = kmeans_cluster(tiny, 4)
print("tiny bag counts", tiny.counts)
