"""
Attention heatmaps
==================

Each patch inherits its phenotype's attention weight, min-max rescaled over the
patient's non-empty phenotypes, and is drawn at its tile position from blue
(lowest) to red (highest).
"""

import sys
import tempfile
from pathlib import Path

from attnmisl.clustering import kmeans_cluster
from attnmisl.cohort import generate_synthetic_cohort, split_cohort
from attnmisl.heatmap import heatmap_export, rescale_attention
from attnmisl.model import ModelConfig
from attnmisl.training import TrainConfig, train

print(rescale_attention([0.2, 0.5, 0.8]))

cohort, truth = generate_synthetic_cohort(80, 100, 8, 3, seed=4, return_truth=True)
tr, va, _ = split_cohort(cohort, 0.2, 0.1, seed=0)
model = train(tr, va, ModelConfig(d=8), TrainConfig(learning_rate=1e-3, max_epochs=40), k=6)

bag = cohort.patients[0]
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
csv_path, svg_path = heatmap_export(model, bag, kmeans_cluster(bag, 6, model.train_config.seed), out / bag.patient_id)
print("wrote", csv_path, "and", svg_path)
print(csv_path.read_text().splitlines()[:3])
