"""
Training, cross-validation and ensembles
========================================

Full-batch Adam on the Cox loss with validation early stopping. Larger step
than the 1e-4 default so the demo finishes in seconds.
"""

import numpy as np

from attnmisl.cohort import generate_synthetic_cohort, split_cohort
from attnmisl.metrics import concordance_index
from attnmisl.model import ModelConfig
from attnmisl.training import TrainConfig, cross_validate, ensemble_predict_bags, train

cohort, f = generate_synthetic_cohort(200, 100, 16, 4, seed=11)
cfg = ModelConfig(d=16)
tc = TrainConfig(learning_rate=1e-3, max_epochs=200, patience=20)

tr, va, te = split_cohort(cohort, 0.2, 0.1, seed=0)
model = train(tr, va, cfg, tc, k=6, log=lambda e, a, b: print(f"{e},{a:.4f},{b:.4f}") if e % 10 == 1 else None)
print("best epoch", model.best_epoch, "of", len(model.history))
risk = model.predict(te.patients)
print("test C-index %.3f" % concordance_index(risk, te.times, te.events))
print("true-risk C-index on the same patients %.3f" % concordance_index(
    f[[cohort.ids.index(i) for i in te.ids]], te.times, te.events))

res = cross_validate(cohort, folds=5, model_config=cfg, train_config=tc, k=6, seed=0)
print("5-fold C-index", res.table()["c_index"], "AUC", res.table()["auc"])

members = [train(tr, va, cfg, TrainConfig(**{**tc.to_dict(), "seed": s}), k=6) for s in range(3)]
print("3-model ensemble C-index %.3f" % concordance_index(
    ensemble_predict_bags(members, te.patients), te.times, te.events))
