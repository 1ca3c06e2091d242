"""
Synthetic cohorts and the on-disk formats
=========================================

Every patient is a bag of patch feature vectors plus a (time, event) label.
The generator draws patches from Gaussian archetypes; archetype 0 plays the
tumor and its share of the bag sets the hazard.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from attnmisl.cohort import generate_synthetic_cohort, load_manifest, save_cohort, split_cohort

cohort, truth = generate_synthetic_cohort(
    n_patients=60, patches_per_patient=50, d=8, n_archetypes=4, seed=1, return_truth=True
)
print(cohort.n_events, "events among", len(cohort), "patients")

first = cohort.patients[0]
print(first.patient_id, "bag shape", first.features.shape, "label", first.label)
print("tumor fraction", truth.risk[0], "-> tumor patches", np.sum(truth.archetypes[0] == 0))

# Patients with more tumor die earlier on average
ev = cohort.events == 1
print("corr(f, -log t) on events: %.3f" % np.corrcoef(truth.risk[ev], -np.log(cohort.times[ev]))[0, 1])

# One binary feature file per patient plus a CSV manifest
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
manifest = save_cohort(cohort, out / "cohort")
print(manifest.read_text().splitlines()[:3])
back = load_manifest(manifest)
assert back.ids == cohort.ids

# Test share first, then a validation share of what remains
train, val, test = split_cohort(cohort, test_frac=0.2, val_frac_of_train=0.1, seed=0)
print("split sizes", len(train), len(val), len(test))
