import numpy as np
import pytest

from attnmisl import model as mdl
from attnmisl.clustering import PhenotypeTensor
from attnmisl.cox import cox_loss, cox_loss_gradient


def random_patient(rng, k, d, m_range=(3, 10), allow_empty=True):
    """Phenotype tensors with random cluster sizes (some empty when allowed)."""
    m = int(rng.integers(*m_range))
    labels = rng.integers(0, k, size=m)
    if not allow_empty:
        labels[:k] = np.arange(k)
    feats = rng.standard_normal((m, d))
    return [PhenotypeTensor(j, feats[labels == j], np.flatnonzero(labels == j)) for j in range(k)]


def random_batch(rng, n, k, d, **kw):
    return [random_patient(rng, k, d, **kw) for _ in range(n)]


def random_labels(rng, n):
    time = rng.integers(1, 30, size=n).astype(float)
    event = (rng.uniform(size=n) < 0.7).astype(int)
    event[0] = 1
    return time, event


def pipeline_loss(params, cfg, packed, time, event):
    o, _ = mdl.forward(params, cfg, packed)
    return cox_loss(o, time, event)


def pipeline_grad(params, cfg, packed, time, event):
    o, cache = mdl.forward(params, cfg, packed)
    return mdl.backward(params, cfg, packed, cache, cox_loss_gradient(o, time, event))


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def activation_pattern(params, cfg, packed):
    """Which ReLUs are active and which rows win each max-pool column."""
    _, cache = mdl.forward(params, cfg, packed)
    parts = [pre > 0 for pre in cache["pres"]] + [cache["pre1"] > 0]
    if cfg.siamese and cfg.instance_pool == "max":
        parts.append(cache["acts"][-1] == cache["r"][packed.row_group])
    return np.concatenate([x.ravel() for x in parts])


def finite_difference_check(params, cfg, packed, time, event, h=1e-5, per_tensor=None, rng=None, stats=None):
    """Largest relative error between analytic and central-difference gradients.

    ``per_tensor`` limits how many entries of each parameter are probed (all when None).
    Entries whose +-h step crosses a ReLU or max-pool kink are skipped, since the
    difference quotient there does not approximate the one-sided derivative; the
    probed and skipped counts are added to ``stats`` when given.
    """
    grads = pipeline_grad(params, cfg, packed, time, event)
    base = activation_pattern(params, cfg, packed)
    worst = 0.0
    probed = skipped = 0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if per_tensor is not None and flat.size > per_tensor:
            idx = rng.choice(flat.size, size=per_tensor, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = pipeline_loss(params, cfg, packed, time, event)
            crossed = not np.array_equal(activation_pattern(params, cfg, packed), base)
            flat[i] = old - h
            down = pipeline_loss(params, cfg, packed, time, event)
            crossed |= not np.array_equal(activation_pattern(params, cfg, packed), base)
            flat[i] = old
            if crossed:
                skipped += 1
                continue
            probed += 1
            fd = (up - down) / (2 * h)
            worst = max(worst, relative_error(grads[name].reshape(-1)[i], fd))
    if stats is not None:
        stats["probed"] = stats.get("probed", 0) + probed
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
