"""
Cox loss and survival metrics
=============================
"""

import numpy as np

from attnmisl.cox import cox_loss, cox_loss_gradient
from attnmisl.metrics import (
    chi2_sf,
    concordance_index,
    kaplan_meier,
    log_rank_test,
    median_risk_split,
    survival_auc,
)

# Two patients, equal risk, both die: the first death had a 50/50 risk set
print("loss", cox_loss([0.0, 0.0], [1, 2], [1, 1]), "vs ln 2 =", np.log(2))
print("gradient", cox_loss_gradient([0.0, 0.0], [1, 2], [1, 1]))

rng = np.random.default_rng(0)
n = 120
risk = rng.normal(size=n)
time = np.ceil(rng.exponential(800 * np.exp(-risk)))
censor = np.ceil(rng.uniform(0, 2500, n))
event = (time <= censor).astype(int)
time = np.minimum(time, censor)

print("C-index %.3f" % concordance_index(risk, time, event))
print("AUC at the median time %.3f" % survival_auc(risk, time, event))

high = median_risk_split(risk)
low_km, high_km = kaplan_meier(time[~high], event[~high]), kaplan_meier(time[high], event[high])
for label, km in (("low", low_km), ("high", high_km)):
    at_1000 = km.survival[km.times <= 1000][-1] if np.any(km.times <= 1000) else 1.0
    print(f"{label}-risk S(1000) = {at_1000:.3f}")

lr = log_rank_test(time[~high], event[~high], time[high], event[high])
print("log-rank chi2 %.2f, p = %.2g" % (lr.statistic, lr.p_value))

# The chi-square tail is computed from a regularized incomplete gamma
print("P(chi2_1 > 3.841) = %.4f" % chi2_sf(3.841, 1))
