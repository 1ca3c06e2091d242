"""Cohort data model, on-disk formats, splits and a synthetic cohort generator.

Patch features are held as ``(m, d)`` float64 arrays; on disk they are stored
as little-endian float32 in the ``AMF1`` container::

    magic "AMF1" | version u32 | id_len u32 | patient_id utf-8 | m u32 | d u32
    | m*d f32 features (row-major) | m * (slide_index u16, x u32, y u32)

Survival labels live in a CSV manifest next to the feature files.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy import integrate, optimize

from .errors import DataError

FEATURE_MAGIC = b"AMF1"
FEATURE_VERSION = 1
MANIFEST_HEADER = ["patient_id", "feature_path", "time_days", "event"]

_COORD_DTYPE = np.dtype([("slide_index", "<u2"), ("x", "<u4"), ("y", "<u4")])


@dataclass(frozen=True)
class SurvivalLabel:
    time_days: float
    event: int

    def __post_init__(self):
        if not (math.isfinite(self.time_days) and self.time_days > 0):
            raise DataError(f"non-positive survival time: {self.time_days!r}")
        if self.event not in (0, 1):
            raise DataError(f"event must be 0 or 1, got {self.event!r}")


class PatchRecord(NamedTuple):
    slide_index: int
    x: int
    y: int
    feature: np.ndarray


@dataclass
class PatientBag:
    """One patient: ``m`` patch feature vectors plus tile provenance."""

    patient_id: str
    features: np.ndarray
    slide_index: np.ndarray
    x: np.ndarray
    y: np.ndarray
    label: SurvivalLabel | None = None

    def __post_init__(self):
        if not self.patient_id:
            raise DataError("patient_id must be non-empty")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise DataError(f"{self.patient_id}: features must be a non-empty (m, d) matrix")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"{self.patient_id}: non-finite feature values")
        m = feats.shape[0]
        self.features = feats
        self.slide_index = _coords(self.slide_index, m, "slide_index", 0xFFFF)
        self.x = _coords(self.x, m, "x", 0xFFFFFFFF)
        self.y = _coords(self.y, m, "y", 0xFFFFFFFF)

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def patches(self) -> Iterator[PatchRecord]:
        for i in range(self.m):
            yield PatchRecord(int(self.slide_index[i]), int(self.x[i]), int(self.y[i]), self.features[i])


def _coords(values, m, name, upper):
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    if arr.shape[0] != m:
        raise DataError(f"{name} has {arr.shape[0]} entries, expected {m}")
    if arr.size and (arr.min() < 0 or arr.max() > upper):
        raise DataError(f"{name} out of range")
    return arr


@dataclass
class Cohort:
    patients: list[PatientBag]
    feature_dim: int = field(default=0)

    def __post_init__(self):
        if not self.patients:
            raise DataError("cohort is empty")
        dims = {p.d for p in self.patients}
        if len(dims) != 1:
            raise DataError(f"feature dimension mismatch: {sorted(dims)}")
        d = dims.pop()
        if self.feature_dim and self.feature_dim != d:
            raise DataError(f"feature dimension mismatch: declared {self.feature_dim}, found {d}")
        self.feature_dim = d
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DataError(f"duplicate patient_id {dup!r}")
        if any(p.label is None for p in self.patients):
            raise DataError("every patient in a cohort needs a survival label")

    def __len__(self):
        return len(self.patients)

    @property
    def ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    @property
    def times(self) -> np.ndarray:
        return np.array([p.label.time_days for p in self.patients], dtype=np.float64)

    @property
    def events(self) -> np.ndarray:
        return np.array([p.label.event for p in self.patients], dtype=np.int64)

    @property
    def n_events(self) -> int:
        return int(self.events.sum())

    def subset(self, indices: Sequence[int]) -> "Cohort":
        return Cohort([self.patients[i] for i in indices], self.feature_dim)

    def require_events(self, what="cohort"):
        if self.n_events == 0:
            raise DataError(f"{what} has no event patients; the Cox loss would be identically zero")


# ---------------------------------------------------------------------------
# feature files


def save_patient_features(path, bag: PatientBag) -> None:
    pid = bag.patient_id.encode("utf-8")
    coords = np.empty(bag.m, dtype=_COORD_DTYPE)
    coords["slide_index"] = bag.slide_index
    coords["x"] = bag.x
    coords["y"] = bag.y
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_VERSION, len(pid)))
        fh.write(pid)
        fh.write(struct.pack("<II", bag.m, bag.d))
        fh.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
        fh.write(coords.tobytes())


def load_patient_features(path) -> PatientBag:
    """Read an ``AMF1`` file. The returned bag carries no label."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4
    if len(buf) < pos + 8:
        raise DataError(f"{path}: truncated header")
    version, id_len = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    if len(buf) < pos + id_len + 8:
        raise DataError(f"{path}: truncated header")
    pid = buf[pos:pos + id_len].decode("utf-8")
    pos += id_len
    m, d = struct.unpack_from("<II", buf, pos)
    pos += 8
    if m == 0 or d == 0:
        raise DataError(f"{path}: m and d must be positive (m={m}, d={d})")
    n_feat = m * d * 4
    n_coord = m * _COORD_DTYPE.itemsize
    if len(buf) < pos + n_feat + n_coord:
        raise DataError(f"{path}: truncated payload")
    if len(buf) > pos + n_feat + n_coord:
        raise DataError(f"{path}: trailing bytes after payload")
    feats = np.frombuffer(buf, dtype="<f4", count=m * d, offset=pos).reshape(m, d)
    coords = np.frombuffer(buf, dtype=_COORD_DTYPE, count=m, offset=pos + n_feat)
    return PatientBag(pid, feats.astype(np.float64), coords["slide_index"], coords["x"], coords["y"])


# ---------------------------------------------------------------------------
# manifest


def load_manifest(path) -> Cohort:
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        rows = list(reader)
    patients = []
    for lineno, row in enumerate(rows, start=2):
        try:
            time = float(row["time_days"])
            event = int(row["event"])
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad label fields") from exc
        label = SurvivalLabel(time, event)
        fpath = path.parent / row["feature_path"]
        try:
            bag = load_patient_features(fpath)
        except OSError as exc:
            raise DataError(f"{path}:{lineno}: cannot read {fpath}: {exc}") from exc
        bag.patient_id = row["patient_id"]
        bag.label = label
        patients.append(bag)
    return Cohort(patients)


def write_manifest(path, cohort: Cohort, feature_paths: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for bag, fp in zip(cohort.patients, feature_paths):
            w.writerow([bag.patient_id, fp, f"{bag.label.time_days:.17g}", bag.label.event])


def save_cohort(cohort: Cohort, out_dir) -> Path:
    """Write one feature file per patient plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rel = []
    for i, bag in enumerate(cohort.patients):
        name = f"features/{i:05d}.amf"
        save_patient_features(out_dir / name, bag)
        rel.append(name)
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, cohort, rel)
    return manifest


# ---------------------------------------------------------------------------
# splits


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, test_frac: float, val_frac_of_train: float) -> tuple[int, int, int]:
    n_test = _round_half_up(test_frac * n)
    n_val = max(1, _round_half_up(val_frac_of_train * (n - n_test))) if val_frac_of_train > 0 else 0
    return n - n_test - n_val, n_val, n_test


def split_cohort(cohort: Cohort, test_frac=0.2, val_frac_of_train=0.1, seed=0):
    """Seeded train/val/test partition. Patients keep cohort order within each part."""
    if not 0 < test_frac < 1:
        raise DataError("test_frac must lie in (0, 1)")
    if not 0 <= val_frac_of_train < 1:
        raise DataError("val_frac_of_train must lie in [0, 1)")
    n = len(cohort)
    if n < 3:
        raise DataError("need at least 3 patients to split")
    n_train, n_val, n_test = split_sizes(n, test_frac, val_frac_of_train)
    if n_test < 1 or n_train < 1 or (val_frac_of_train > 0 and n_val < 1):
        raise DataError(f"split of {n} patients leaves an empty partition")
    perm = np.random.default_rng(seed).permutation(n)
    parts = (np.sort(perm[n_test + n_val:]), np.sort(perm[n_test:n_test + n_val]), np.sort(perm[:n_test]))
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        if len(idx) == 0:
            out.append(None)
            continue
        sub = cohort.subset(idx)
        sub.require_events(f"{name} split")
        out.append(sub)
    return tuple(out)


def fold_indices(n: int, folds: int, seed=0) -> list[np.ndarray]:
    """Seeded k-fold partition of ``range(n)``; fold sizes differ by at most one."""
    if folds < 2 or folds > n:
        raise DataError(f"cannot make {folds} folds from {n} patients")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class SyntheticTruth:
    risk: np.ndarray
    archetypes: list[np.ndarray]
    archetype_means: np.ndarray
    censor_max: float


def archetype_means(n_archetypes: int, d: int, rng: np.random.Generator, spacing=8.0) -> np.ndarray:
    # Points on the coordinate rays at multiples of `spacing`, then a random rotation:
    # pairwise distance is at least `spacing` in unit-variance units.
    means = np.zeros((n_archetypes, d))
    for a in range(n_archetypes):
        means[a, a % d] = spacing * (1 + a // d)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    return means @ q.T


def _censor_bound(frac_range, base_hazard, hazard_coef, censor_rate):
    lo, hi = frac_range

    def p_censored(c):
        def p(f):
            lam = base_hazard * math.exp(hazard_coef * f)
            return -math.expm1(-lam * c) / (lam * c)

        if hi == lo:
            return p(lo)
        return integrate.quad(p, lo, hi)[0] / (hi - lo)

    # p_censored falls from 1 (c -> 0) to 0 (c -> inf)
    return optimize.brentq(lambda c: p_censored(c) - censor_rate, 1e-9 / base_hazard, 1e9 / base_hazard, xtol=1e-9)


def generate_synthetic_cohort(
    n_patients: int,
    patches_per_patient: int,
    d: int,
    n_archetypes: int,
    tumor_fraction_range=(0.0, 1.0),
    seed=0,
    *,
    censor_rate=0.3,
    hazard_coef=2.0,
    base_hazard=1.0 / 1500.0,
    grid=32,
    tile=500,
    return_truth=False,
):
    """Gaussian-blob patch features whose tumor share drives an exponential hazard.

    Archetype 0 is the tumor archetype. A patient's tumor fraction ``f`` is drawn
    uniformly from ``tumor_fraction_range``; ``ceil(f*m)`` patches come from
    archetype 0 and lie in one contiguous region of the tile grid. Survival is
    exponential with hazard ``base_hazard * exp(hazard_coef * f)``, censored by an
    independent uniform time whose bound targets ``censor_rate`` in expectation.
    Times are rounded up to whole days.

    Returns ``(cohort, f)``, or ``(cohort, SyntheticTruth)`` with ``return_truth``.
    """
    lo, hi = (float(v) for v in tumor_fraction_range)
    if n_patients < 2 or d < 2 or n_archetypes < 2 or patches_per_patient < 1:
        raise DataError("need n_patients >= 2, d >= 2, n_archetypes >= 2, patches >= 1")
    if n_archetypes > 255:
        raise DataError("n_archetypes must be <= 255")
    if not (0.0 <= lo <= hi <= 1.0):
        raise DataError(f"degenerate tumor_fraction_range {tumor_fraction_range!r}")
    if not 0 < censor_rate < 1:
        raise DataError("censor_rate must lie in (0, 1)")
    m = patches_per_patient
    if m > grid * grid:
        raise DataError("more patches than tile grid cells")

    rng = np.random.default_rng(seed)
    means = archetype_means(n_archetypes, d, rng)
    c_max = _censor_bound((lo, hi), base_hazard, hazard_coef, censor_rate)
    fracs = rng.uniform(lo, hi, size=n_patients) if hi > lo else np.full(n_patients, lo)

    cells = np.stack(np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij"), -1).reshape(-1, 2)
    patients, arche_list = [], []
    for i, f in enumerate(fracs):
        n_tumor = min(m, math.ceil(f * m))
        arche = np.concatenate([np.zeros(n_tumor, np.int64), rng.integers(1, n_archetypes, size=m - n_tumor)])
        centre = rng.uniform(0, grid, size=2)
        order = np.argsort(((cells - centre) ** 2).sum(1) + rng.uniform(0, 1e-3, len(cells)))
        pos = cells[order[:m]]
        feats = means[arche] + rng.standard_normal((m, d))
        shuffle = rng.permutation(m)
        t_event = rng.exponential(1.0 / (base_hazard * math.exp(hazard_coef * f)))
        t_cens = rng.uniform(0.0, c_max)
        event = int(t_event <= t_cens)
        time = float(math.ceil(min(t_event, t_cens)))
        bag = PatientBag(
            f"P{i:04d}",
            feats[shuffle],
            np.zeros(m, np.int64),
            pos[shuffle, 0] * tile,
            pos[shuffle, 1] * tile,
            SurvivalLabel(max(time, 1.0), event),
        )
        patients.append(bag)
        arche_list.append(arche[shuffle])
    cohort = Cohort(patients)
    if return_truth:
        return cohort, SyntheticTruth(fracs, arche_list, means, c_max)
    return cohort, fracs


def write_ground_truth(path, cohort: Cohort, risk) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "tumor_fraction"])
        for pid, r in zip(cohort.ids, risk):
            w.writerow([pid, f"{float(r):.17g}"])
