"""Siamese MI-FCN encoder, attention MIL pooling and the Cox risk head.

All patients of a batch are packed into one patch matrix ordered by
(patient, cluster index, feature row). Within a cluster, rows are sorted
lexicographically so pooling sums run in an order that does not depend on how
the caller ordered the patches; clusters are visited in ascending index.
That makes the risk exactly invariant to both kinds of permutation.

Gradients are derived by hand and checked against finite differences in the
test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .clustering import PhenotypeTensor
from .errors import DataError, NumericalError

REP_DIM = 64
HEAD_WIDTHS = (32, 1)
POOLS = ("average", "max")
ATTENTION_KINDS = ("plain", "gated", "uniform")
DEFAULT_WIDTHS = {1: (64,), 2: (2048, 64), 3: (2048, 1024, 64)}

CHECKPOINT_MAGIC = b"AMSM"
CHECKPOINT_VERSION = 1

Params = dict  # name -> ndarray, insertion order is the canonical parameter order


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches.

    ``attention_kind="uniform"`` replaces attention with equal weights over the
    non-empty clusters (the mean-pooling baseline). ``siamese=False`` drops the
    clusters: each patch gets one shared affine+ReLU embedding to 64 dims and
    attention runs over patches directly.
    """

    d: int
    layer_pairs: int = 1
    hidden_widths: tuple = None
    instance_pool: str = "average"
    attention_hidden: int = 64
    attention_kind: str = "plain"
    siamese: bool = True
    head_activation: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.layer_pairs not in DEFAULT_WIDTHS:
            raise ValueError("layer_pairs must be 1, 2 or 3")
        widths = self.hidden_widths
        widths = DEFAULT_WIDTHS[self.layer_pairs] if widths is None else tuple(int(w) for w in widths)
        if len(widths) != self.layer_pairs or widths[-1] != REP_DIM:
            raise ValueError(f"hidden_widths must have {self.layer_pairs} entries ending in {REP_DIM}")
        object.__setattr__(self, "hidden_widths", widths)
        if self.instance_pool not in POOLS:
            raise ValueError(f"instance_pool must be one of {POOLS}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.attention_hidden < 1:
            raise ValueError("attention_hidden must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_widths"] = list(self.hidden_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    if cfg.siamese:
        fan_in = cfg.d
        for i, w in enumerate(cfg.hidden_widths):
            shapes[f"fcn{i}.weight"] = (w, fan_in)
            shapes[f"fcn{i}.bias"] = (w,)
            fan_in = w
    else:
        shapes["embed.weight"] = (REP_DIM, cfg.d)
        shapes["embed.bias"] = (REP_DIM,)
    L = cfg.attention_hidden
    if cfg.attention_kind != "uniform":
        shapes["attn.V"] = (L, REP_DIM)
        if cfg.attention_kind == "gated":
            shapes["attn.U"] = (L, REP_DIM)
        shapes["attn.w"] = (L,)
    shapes["head1.weight"] = (HEAD_WIDTHS[0], REP_DIM)
    shapes["head1.bias"] = (HEAD_WIDTHS[0],)
    shapes["head2.weight"] = (HEAD_WIDTHS[1], HEAD_WIDTHS[0])
    shapes["head2.bias"] = (HEAD_WIDTHS[1],)
    return shapes


def glorot_limit(shape) -> float:
    fan_out, fan_in = (1, shape[0]) if len(shape) == 1 else shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(cfg: ModelConfig, seed=0) -> Params:
    """Glorot-uniform weights, zero biases. The attention vector counts as a 1 x L matrix."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            lim = glorot_limit(shape)
            params[name] = rng.uniform(-lim, lim, size=shape)
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_params(params: Params, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise DataError(f"parameter names {list(params)} do not match config {list(shapes)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise DataError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise NumericalError(f"{name}: non-finite parameters")


def _encoder_layers(params, cfg):
    if cfg.siamese:
        return [(params[f"fcn{i}.weight"], params[f"fcn{i}.bias"]) for i in range(cfg.layer_pairs)]
    return [(params["embed.weight"], params["embed.bias"])]


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# batch packing


@dataclass
class PackedBatch:
    """Patients packed into contiguous row and group segments."""

    X: np.ndarray  # (P, d) patch features
    patch_index: np.ndarray  # (P,) index of each row within its patient's bag
    row_group: np.ndarray  # (P,) group of each row
    starts: np.ndarray  # (G,) first row of each group
    sizes: np.ndarray  # (G,) rows per group
    group_patient: np.ndarray  # (G,)
    group_slot: np.ndarray  # (G,) cluster index (siamese) or patch index (no-siamese)
    pstarts: np.ndarray  # (N,) first group of each patient
    n_slots: np.ndarray  # (N,) length of each patient's attention vector

    @property
    def n_patients(self) -> int:
        return len(self.pstarts)

    @property
    def n_groups(self) -> int:
        return len(self.starts)


def _canonical_order(feats):
    if len(feats) <= 1:
        return np.arange(len(feats))
    return np.lexsort(feats.T[::-1])


def pack_batch(batch: Sequence[Sequence[PhenotypeTensor]], cfg: ModelConfig) -> PackedBatch:
    """Pack per-patient phenotype tensors. Empty clusters are dropped (masked)."""
    rows, pidx, row_group, starts, sizes, gpat, gslot, pstarts, nslots = [], [], [], [], [], [], [], [], []
    n_rows = 0
    for p, tensors in enumerate(batch):
        tensors = sorted(tensors, key=lambda t: t.cluster_index)
        pstarts.append(len(starts))
        if cfg.siamese:
            nslots.append(max((t.cluster_index for t in tensors), default=-1) + 1)
            for t in tensors:
                if t.n_patches == 0:
                    continue
                if t.features.shape[1] != cfg.d:
                    raise DataError(f"feature dim {t.features.shape[1]} != model dim {cfg.d}")
                order = _canonical_order(t.features)
                rows.append(t.features[order])
                pidx.append(_patch_indices(t)[order])
                row_group.append(np.full(t.n_patches, len(starts)))
                starts.append(n_rows)
                sizes.append(t.n_patches)
                gpat.append(p)
                gslot.append(t.cluster_index)
                n_rows += t.n_patches
        else:
            nonempty = [t for t in tensors if t.n_patches]
            if nonempty:
                feats = np.concatenate([t.features for t in nonempty])
                if feats.shape[1] != cfg.d:
                    raise DataError(f"feature dim {feats.shape[1]} != model dim {cfg.d}")
                idx = np.concatenate([_patch_indices(t) for t in nonempty])
                order = _canonical_order(feats)
                m = len(feats)
                rows.append(feats[order])
                pidx.append(idx[order])
                row_group.append(len(starts) + np.arange(m))
                starts.extend(range(n_rows, n_rows + m))
                sizes.extend([1] * m)
                gpat.extend([p] * m)
                gslot.extend(idx[order].tolist())
                nslots.append(int(idx.max()) + 1)
                n_rows += m
            else:
                nslots.append(0)
        if len(starts) == pstarts[-1]:
            raise DataError(f"patient {p} has no non-empty phenotype cluster")
    if not pstarts:
        raise DataError("empty batch")
    return PackedBatch(
        X=np.concatenate(rows).astype(np.float64, copy=False),
        patch_index=np.concatenate(pidx),
        row_group=np.concatenate(row_group),
        starts=np.asarray(starts, dtype=np.intp),
        sizes=np.asarray(sizes, dtype=np.float64),
        group_patient=np.asarray(gpat, dtype=np.intp),
        group_slot=np.asarray(gslot, dtype=np.intp),
        pstarts=np.asarray(pstarts, dtype=np.intp),
        n_slots=np.asarray(nslots, dtype=np.intp),
    )


def _patch_indices(t: PhenotypeTensor):
    if t.patch_indices is None:
        return np.arange(t.n_patches)
    return np.asarray(t.patch_indices)


# ---------------------------------------------------------------------------
# forward / backward


def _pool(H, b: PackedBatch, cfg):
    if not cfg.siamese:
        return H
    if cfg.instance_pool == "average":
        return np.add.reduceat(H, b.starts, axis=0) / b.sizes[:, None]
    return np.maximum.reduceat(H, b.starts, axis=0)


def _pool_backward(dr, H, r, b: PackedBatch, cfg):
    if not cfg.siamese:
        return dr
    if cfg.instance_pool == "average":
        return (dr / b.sizes[:, None])[b.row_group]
    # route each (group, column) gradient to its arg-max row, ties -> lowest patch index
    is_max = H == r[b.row_group]
    big = np.iinfo(np.int64).max
    key = np.where(is_max, b.patch_index[:, None].astype(np.int64), big)
    winner = np.minimum.reduceat(key, b.starts, axis=0)
    route = is_max & (key == winner[b.row_group])
    return route * dr[b.row_group]


def _attention_scores(params, cfg, r):
    if cfg.attention_kind == "uniform":
        return np.zeros(len(r)), None
    T = np.tanh(r @ params["attn.V"].T)
    if cfg.attention_kind == "gated":
        Gt = _sigmoid(r @ params["attn.U"].T)
        return (T * Gt) @ params["attn.w"], (T, Gt)
    return T @ params["attn.w"], (T, None)


def _attention_scores_backward(params, cfg, r, cache, ds, grads):
    if cfg.attention_kind == "uniform":
        return np.zeros_like(r)
    T, Gt = cache
    w = params["attn.w"]
    if Gt is None:
        grads["attn.w"] += T.T @ ds
        dpre_T = ds[:, None] * w * (1.0 - T * T)
        grads["attn.V"] += dpre_T.T @ r
        return dpre_T @ params["attn.V"]
    grads["attn.w"] += (T * Gt).T @ ds
    dpre_T = ds[:, None] * w * Gt * (1.0 - T * T)
    dpre_G = ds[:, None] * w * T * Gt * (1.0 - Gt)
    grads["attn.V"] += dpre_T.T @ r
    grads["attn.U"] += dpre_G.T @ r
    return dpre_T @ params["attn.V"] + dpre_G @ params["attn.U"]


def _segment_softmax(s, seg_starts, seg_of):
    # max-subtracted softmax within each patient's groups
    smax = np.maximum.reduceat(s, seg_starts)
    e = np.exp(s - smax[seg_of])
    return e / np.add.reduceat(e, seg_starts)[seg_of]


def forward(params: Params, cfg: ModelConfig, b: PackedBatch):
    """Risks for every packed patient plus the activations needed for backward."""
    acts, pres = [b.X], []
    H = b.X
    for W, bias in _encoder_layers(params, cfg):
        pre = H @ W.T + bias
        H = _relu(pre)
        pres.append(pre)
        acts.append(H)
    r = _pool(H, b, cfg)
    s, att_cache = _attention_scores(params, cfg, r)
    a = _segment_softmax(s, b.pstarts, b.group_patient)
    z = np.add.reduceat(a[:, None] * r, b.pstarts, axis=0)
    pre1 = z @ params["head1.weight"].T + params["head1.bias"]
    h1 = _relu(pre1) if cfg.head_activation else pre1
    o = (h1 @ params["head2.weight"].T + params["head2.bias"])[:, 0]
    cache = dict(acts=acts, pres=pres, r=r, s=s, att=att_cache, a=a, z=z, pre1=pre1, h1=h1)
    return o, cache


def backward(params: Params, cfg: ModelConfig, b: PackedBatch, cache, d_risk) -> Params:
    """Gradient of ``sum(d_risk * risk)`` with respect to every parameter."""
    d_risk = np.asarray(d_risk, dtype=np.float64)
    if d_risk.shape != (b.n_patients,):
        raise DataError(f"loss gradient has shape {d_risk.shape}, expected ({b.n_patients},)")
    grads = zeros_like_params(params)
    h1, z, r, a = cache["h1"], cache["z"], cache["r"], cache["a"]

    grads["head2.weight"] += d_risk[None, :] @ h1
    grads["head2.bias"] += d_risk.sum(keepdims=True)
    dh1 = d_risk[:, None] * params["head2.weight"]
    dpre1 = dh1 * (cache["pre1"] > 0) if cfg.head_activation else dh1
    grads["head1.weight"] += dpre1.T @ z
    grads["head1.bias"] += dpre1.sum(0)
    dz = dpre1 @ params["head1.weight"]

    gp = b.group_patient
    dz_g = dz[gp]
    dr = a[:, None] * dz_g
    if cfg.attention_kind != "uniform":
        da = np.einsum("ij,ij->i", r, dz_g)
        ds = a * (da - np.add.reduceat(a * da, b.pstarts)[gp])
        dr += _attention_scores_backward(params, cfg, r, cache["att"], ds, grads)

    acts, pres = cache["acts"], cache["pres"]
    dH = _pool_backward(dr, acts[-1], r, b, cfg)
    names = [f"fcn{i}" for i in range(cfg.layer_pairs)] if cfg.siamese else ["embed"]
    for li in range(len(names) - 1, -1, -1):
        dpre = dH * (pres[li] > 0)
        grads[f"{names[li]}.weight"] += dpre.T @ acts[li]
        grads[f"{names[li]}.bias"] += dpre.sum(0)
        if li:
            dH = dpre @ params[f"{names[li]}.weight"]
    return grads


# ---------------------------------------------------------------------------
# single-patient API


@dataclass
class RiskOutput:
    risk: float
    attention: np.ndarray
    phenotype_reps: np.ndarray
    patient_rep: np.ndarray
    mask: np.ndarray = field(default=None)


def mi_fcn_forward(params: Params, cfg: ModelConfig, tensor: PhenotypeTensor) -> np.ndarray:
    """64-dim representation of one phenotype cluster."""
    if not cfg.siamese:
        raise ValueError("the no-siamese model has no MI-FCN")
    if tensor.n_patches == 0:
        raise DataError("empty phenotype tensor; mask the cluster instead")
    H = np.asarray(tensor.features, dtype=np.float64)[_canonical_order(tensor.features)]
    for W, bias in _encoder_layers(params, cfg):
        H = _relu(H @ W.T + bias)
    return H.mean(axis=0) if cfg.instance_pool == "average" else H.max(axis=0)


def attention_pool(params: Params, cfg: ModelConfig, reps, mask):
    """Attention-weighted sum of the unmasked rows of ``reps``; masked weights are 0."""
    reps = np.asarray(reps, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("all clusters are masked out")
    s, _ = _attention_scores(params, cfg, reps[mask])
    a = np.zeros(len(reps))
    a[mask] = _segment_softmax(s, np.array([0]), np.zeros(len(s), dtype=np.intp))
    z = (a[mask, None] * reps[mask]).sum(axis=0)
    return z, a


def risk_outputs(params: Params, cfg: ModelConfig, b: PackedBatch) -> list[RiskOutput]:
    o, cache = forward(params, cfg, b)
    out = []
    ends = np.append(b.pstarts[1:], b.n_groups)
    for p in range(b.n_patients):
        g = slice(b.pstarts[p], ends[p])
        slots = b.group_slot[g]
        att = np.zeros(b.n_slots[p])
        reps = np.zeros((b.n_slots[p], REP_DIM))
        mask = np.zeros(b.n_slots[p], dtype=bool)
        att[slots] = cache["a"][g]
        reps[slots] = cache["r"][g]
        mask[slots] = True
        out.append(RiskOutput(float(o[p]), att, reps, cache["z"][p].copy(), mask))
    return out


def risk_forward(params: Params, cfg: ModelConfig, tensors: Sequence[PhenotypeTensor]) -> RiskOutput:
    return risk_outputs(params, cfg, pack_batch([tensors], cfg))[0]


def predict_risks(params: Params, cfg: ModelConfig, batch) -> np.ndarray:
    b = batch if isinstance(batch, PackedBatch) else pack_batch(batch, cfg)
    return forward(params, cfg, b)[0]


def model_gradient(params: Params, cfg: ModelConfig, batch, loss_grad) -> Params:
    """Exact gradient of ``sum_i loss_grad[i] * risk_i`` over a batch of patients."""
    b = batch if isinstance(batch, PackedBatch) else pack_batch(batch, cfg)
    _, cache = forward(params, cfg, b)
    return backward(params, cfg, b, cache, loss_grad)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Params, cfg: ModelConfig, **meta) -> None:
    """``AMSM`` | version u32 | header_len u32 | JSON header | f64 LE blobs in header order."""
    check_params(params, cfg)
    header = dict(meta)
    header["config"] = cfg.to_dict()
    header["params"] = [[name, list(arr.shape)] for name, arr in params.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, config, header)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise DataError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    pos = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape, dtype=np.int64))
        if len(buf) < pos + 8 * n:
            raise DataError(f"{path}: truncated parameter blob {name}")
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(buf):
        raise DataError(f"{path}: trailing bytes after parameters")
    check_params(params, cfg)
    return params, cfg, header
