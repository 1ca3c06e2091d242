"""Adam training with validation early stopping, k-fold CV and ensembles."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as mdl
from .clustering import PhenotypeTensor, build_phenotype_tensors, kmeans_cluster
from .cohort import Cohort, PatientBag, fold_indices
from .cox import cox_loss, cox_loss_gradient
from .errors import DataError, NumericalError
from .metrics import concordance_index, survival_auc


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    batch_size: int | None = None  # None: full batch
    normalize_loss: bool = True  # divide the Cox loss by the event count
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls(0, mdl.zeros_like_params(params), mdl.zeros_like_params(params))


def adam_step(params, grads, state: AdamState, tc: TrainConfig):
    """One Adam update with bias correction and decoupled weight decay.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
    """
    if list(grads) != list(params):
        raise DataError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DataError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    b1, b2, lr = tc.adam_beta1, tc.adam_beta2, tc.learning_rate
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)
        new_params[name] = theta - lr * update - lr * tc.weight_decay * theta
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step, new_m, new_v)


@dataclass
class TrainedModel:
    params: dict
    config: mdl.ModelConfig
    train_config: TrainConfig
    clusters: int
    best_epoch: int
    history: list = field(default_factory=list)  # (train_loss, val_loss) per epoch
    train_risks: np.ndarray | None = None
    train_ids: list | None = None

    def header(self) -> dict:
        head = {
            "seed": self.train_config.seed,
            "epoch": self.best_epoch,
            "clusters": self.clusters,
            "train_config": self.train_config.to_dict(),
            "history": [list(h) for h in self.history],
        }
        if self.train_risks is not None:
            head["train_risks"] = [float(r) for r in self.train_risks]
        if self.train_ids is not None:
            head["train_ids"] = list(self.train_ids)
        return head

    def save(self, path) -> None:
        mdl.save_checkpoint(path, self.params, self.config, **self.header())

    @classmethod
    def load(cls, path) -> "TrainedModel":
        params, cfg, header = mdl.load_checkpoint(path)
        return cls(
            params=params,
            config=cfg,
            train_config=TrainConfig(**header["train_config"]),
            clusters=header["clusters"],
            best_epoch=header["epoch"],
            history=[tuple(h) for h in header["history"]],
            train_risks=np.array(header["train_risks"]) if "train_risks" in header else None,
            train_ids=header.get("train_ids"),
        )

    def patient_tensors(self, bags: Sequence[PatientBag]):
        return cohort_tensors(bags, self.config, self.clusters, self.train_config.seed)

    def predict(self, bags: Sequence[PatientBag]) -> np.ndarray:
        return mdl.predict_risks(self.params, self.config, self.patient_tensors(bags))


def patient_tensors(bag: PatientBag, cfg: mdl.ModelConfig, k: int, seed=0) -> list[PhenotypeTensor]:
    if not cfg.siamese:
        return [PhenotypeTensor(0, bag.features, np.arange(bag.m))]
    return build_phenotype_tensors(bag, kmeans_cluster(bag, k, seed))


def cohort_tensors(bags, cfg: mdl.ModelConfig, k: int, seed=0):
    bags = bags.patients if isinstance(bags, Cohort) else bags
    return [patient_tensors(bag, cfg, k, seed) for bag in bags]


def _labels(cohort_or_bags):
    bags = cohort_or_bags.patients if isinstance(cohort_or_bags, Cohort) else cohort_or_bags
    return (
        np.array([b.label.time_days for b in bags], dtype=np.float64),
        np.array([b.label.event for b in bags], dtype=np.int64),
    )


def _loss_and_grad(params, cfg, packed, time, event, reduction, need_grad=True):
    o, cache = mdl.forward(params, cfg, packed)
    if not np.all(np.isfinite(o)):
        raise NumericalError("non-finite risk scores")
    loss = cox_loss(o, time, event, reduction)
    if not need_grad:
        return loss, o, None
    dl = cox_loss_gradient(o, time, event, reduction)
    return loss, o, mdl.backward(params, cfg, packed, cache, dl)


def fit(
    train_tensors,
    train_time,
    train_event,
    val_tensors,
    val_time,
    val_event,
    cfg: mdl.ModelConfig,
    tc: TrainConfig,
    clusters: int,
    log: Callable[[int, float, float], None] | None = None,
) -> TrainedModel:
    """Train on pre-clustered tensors. See :func:`train`."""
    if int(np.sum(train_event)) == 0:
        raise DataError("training set has no events")
    if int(np.sum(val_event)) == 0:
        raise DataError("validation set has no events")
    reduction = "mean" if tc.normalize_loss else "sum"
    params = mdl.init_params(cfg, tc.seed)
    state = AdamState.zeros(params)
    full = mdl.pack_batch(train_tensors, cfg)
    val = mdl.pack_batch(val_tensors, cfg)
    n = len(train_tensors)
    rng = np.random.default_rng([tc.seed, 1])
    minibatch = tc.batch_size is not None and tc.batch_size < n

    history = []
    best = (math.inf, 0, params, None)
    since_best = 0
    for epoch in range(1, tc.max_epochs + 1):
        if minibatch:
            perm = rng.permutation(n)
            for start in range(0, n, tc.batch_size):
                idx = np.sort(perm[start:start + tc.batch_size])
                if not np.any(train_event[idx]):
                    continue
                packed = mdl.pack_batch([train_tensors[i] for i in idx], cfg)
                _, _, grads = _loss_and_grad(params, cfg, packed, train_time[idx], train_event[idx], reduction)
                params, state = adam_step(params, grads, state, tc)
        else:
            _, _, grads = _loss_and_grad(params, cfg, full, train_time, train_event, reduction)
            params, state = adam_step(params, grads, state, tc)

        train_loss, train_risks, _ = _loss_and_grad(params, cfg, full, train_time, train_event, reduction, False)
        val_loss, _, _ = _loss_and_grad(params, cfg, val, val_time, val_event, reduction, False)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise NumericalError(f"non-finite loss at epoch {epoch}")
        history.append((train_loss, val_loss))
        if log is not None:
            log(epoch, train_loss, val_loss)
        if epoch == 1 or val_loss < best[0] - tc.min_delta:
            best = (val_loss, epoch, params, train_risks)
            since_best = 0
        else:
            since_best += 1
            if since_best >= tc.patience:
                break
    _, best_epoch, best_params, best_risks = best
    return TrainedModel(best_params, cfg, tc, clusters, best_epoch, history, best_risks)


def train(
    train: Cohort,
    val: Cohort,
    model_config: mdl.ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    k: int = 6,
    log=None,
) -> TrainedModel:
    """Full-batch (default) Adam on the Cox loss with validation early stopping.

    Each epoch records the train and validation loss after the update. Training
    stops once the validation loss has failed to improve by ``min_delta`` for
    ``patience`` consecutive epochs; parameters from the best epoch are returned.
    """
    train.require_events("training set")
    val.require_events("validation set")
    if train.feature_dim != model_config.d or val.feature_dim != model_config.d:
        raise DataError("cohort feature dimension does not match the model")
    seed = train_config.seed
    tt, te = _labels(train)
    vt, ve = _labels(val)
    model = fit(
        cohort_tensors(train, model_config, k, seed), tt, te,
        cohort_tensors(val, model_config, k, seed), vt, ve,
        model_config, train_config, k, log,
    )
    model.train_ids = train.ids
    return model


def ensemble_predict(models: Sequence[TrainedModel], tensors) -> np.ndarray:
    """Mean risk over models. ``tensors`` is one patient's tensor list or a list of them."""
    if not models:
        raise DataError("empty model list")
    d = models[0].config.d
    if any(m.config.d != d for m in models):
        raise DataError("ensemble members disagree on feature dimension")
    single = len(tensors) > 0 and isinstance(tensors[0], PhenotypeTensor)
    batch = [tensors] if single else tensors
    risks = np.mean([mdl.predict_risks(m.params, m.config, batch) for m in models], axis=0)
    return float(risks[0]) if single else risks


def ensemble_predict_bags(models: Sequence[TrainedModel], bags) -> np.ndarray:
    """Mean risk over models, each clustering the bags with its own settings."""
    if not models:
        raise DataError("empty model list")
    return np.mean([m.predict(bags) for m in models], axis=0)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    test_indices: np.ndarray
    c_index: float
    auc: float
    risks: np.ndarray
    models: list
    member_c_index: list = field(default_factory=list)


@dataclass
class CVResult:
    folds: list

    @property
    def c_indices(self) -> np.ndarray:
        return np.array([f.c_index for f in self.folds])

    @property
    def aucs(self) -> np.ndarray:
        return np.array([f.auc for f in self.folds])

    def summary(self) -> dict:
        c, a = self.c_indices, self.aucs
        return {
            "c_index_mean": float(c.mean()),
            "c_index_std": float(c.std(ddof=1)),
            "auc_mean": float(np.nanmean(a)),
            "auc_std": float(np.nanstd(a, ddof=1)),
        }

    def table(self) -> dict:
        s = self.summary()
        return {
            "folds": [
                {"fold": f.fold, "n_test": int(len(f.test_indices)), "c_index": f.c_index, "auc": f.auc}
                for f in self.folds
            ],
            **s,
            "c_index": f"{s['c_index_mean']:.3f} ({s['c_index_std']:.3f})",
            "auc": f"{s['auc_mean']:.3f} ({s['auc_std']:.3f})",
        }


def _carve_validation(idx, event, val_frac, rng):
    n = len(idx)
    n_val = max(1, int(math.floor(val_frac * n + 0.5)))
    perm = rng.permutation(n)
    val, tr = np.sort(idx[perm[:n_val]]), np.sort(idx[perm[n_val:]])
    if not event[val].any() or not event[tr].any():
        raise DataError("validation carve-out left a partition without events")
    return tr, val


def cross_validate(
    cohort: Cohort,
    folds: int,
    model_config: mdl.ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    k: int = 6,
    seed=0,
    val_frac=0.1,
    n_models=1,
    tensors=None,
    log=None,
) -> CVResult:
    """Seeded k-fold CV. Each fold trains ``n_models`` models (seeds offset by member
    index) on the remaining patients minus a validation carve-out and scores the
    held-out fold with their mean risk.
    """
    time, event = cohort.times, cohort.events
    if tensors is None:
        tensors = cohort_tensors(cohort, model_config, k, train_config.seed)
    rng = np.random.default_rng([seed, 2])
    results = []
    for fi, test in enumerate(fold_indices(len(cohort), folds, seed)):
        if not event[test].any():
            raise DataError(f"fold {fi} has no events")
        rest = np.setdiff1d(np.arange(len(cohort)), test)
        tr, val = _carve_validation(rest, event, val_frac, rng)
        members = []
        for j in range(n_models):
            tc = TrainConfig(**{**train_config.to_dict(), "seed": train_config.seed + j})
            members.append(
                fit(
                    [tensors[i] for i in tr], time[tr], event[tr],
                    [tensors[i] for i in val], time[val], event[val],
                    model_config, tc, k, log,
                )
            )
        test_tensors = [tensors[i] for i in test]
        member_risks = [mdl.predict_risks(m.params, m.config, test_tensors) for m in members]
        risks = np.mean(member_risks, axis=0)
        member_c = [concordance_index(r, time[test], event[test]) for r in member_risks]
        try:
            auc = survival_auc(risks, time[test], event[test])
        except DataError:
            auc = float("nan")
        results.append(
            FoldResult(fi, test, concordance_index(risks, time[test], event[test]), auc, risks, members, member_c)
        )
    return CVResult(results)
