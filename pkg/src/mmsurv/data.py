"""Dataset schema, disk format, synthetic cohort generation, and splits.

Directory layout::

    root/manifest.json      list of patient entries
    root/<relative paths>   per-modality arrays named by the manifest

Manifest entry::

    {"id": "...", "time_days": float, "event": 0/1,
     "clinical": [radiation, pharma, age] or null,
     "modalities": {"rna": "rel/path.csv", ...},   # present keys only
     "shape": {"mri": [64, 64, 64], "wsi": [10, 256, 256, 3]}}

1D modalities (rna, dnam) are CSV, one float per line. mri and wsi are raw
little-endian float32, row-major, with dimensions under "shape".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .modalities import CLINICAL_DIM, MASKABLE, ModalityKind, ModalitySpec, SpecMap

SYNTH_LATENT_DIM = 8
SYNTH_NOISE_STD = 0.1
SYNTH_CENSOR_FRACTION = 0.3
SYNTH_TILES_PER_PATIENT = 10


@dataclass
class SurvivalLabel:
    time: float
    event: bool
    interval_index: int | None = None  # 1-based, set by discretization

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time <= 0:
            raise ValueError(f"non-positive survival time {self.time}")


@dataclass
class PatientRecord:
    id: str
    modalities: dict[ModalityKind, np.ndarray | None]
    presence: dict[ModalityKind, bool]
    clinical: np.ndarray | None  # raw [radiation, pharma, age]
    label: SurvivalLabel

    def __post_init__(self):
        for kind in MASKABLE:
            arr = self.modalities.get(kind)
            present = self.presence.get(kind, False)
            if present != (arr is not None):
                raise ValueError(
                    f"patient {self.id}: presence[{kind.value}] inconsistent with data"
                )
        self.presence[ModalityKind.CLINICAL] = self.clinical is not None
        if self.clinical is not None and len(self.clinical) != CLINICAL_DIM:
            raise ValueError(f"patient {self.id}: clinical vector must have length {CLINICAL_DIM}")

    def validate_against(self, specs: SpecMap) -> None:
        for kind, spec in specs.items():
            arr = self.modalities.get(kind)
            if arr is None:
                continue
            expected = spec.raw_shape
            if kind is ModalityKind.WSI:
                if arr.ndim != len(expected) + 1 or arr.shape[1:] != expected or arr.shape[0] < 1:
                    raise ValueError(
                        f"patient {self.id}: wsi shape {arr.shape} does not match "
                        f"(tiles,)+{expected}"
                    )
            elif arr.shape != expected:
                raise ValueError(
                    f"patient {self.id}: {kind.value} shape {arr.shape} != {expected}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"patient {self.id}: non-finite values in {kind.value}")
            if kind is ModalityKind.DNAM and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"patient {self.id}: beta value out of [0,1]")


@dataclass
class Dataset:
    records: list[PatientRecord]
    specs: SpecMap
    time_bin_edges: np.ndarray | None = None
    latents: np.ndarray | None = None  # synthetic ground-truth factors, in-memory only

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> "Dataset":
        for rec in self.records:
            rec.validate_against(self.specs)
        return self

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset(
            records=[self.records[i] for i in idx],
            specs=self.specs,
            time_bin_edges=self.time_bin_edges,
            latents=None if self.latents is None else self.latents[idx],
        )


# ---------------------------------------------------------------------------
# disk I/O


def _modality_path(kind: ModalityKind, pid: str) -> str:
    ext = "csv" if kind in (ModalityKind.RNA, ModalityKind.DNAM) else "bin"
    return f"{pid}/{kind.value}.{ext}"


def save_dataset(ds: Dataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in ds.records:
        entry: dict = {
            "id": rec.id,
            "time_days": float(rec.label.time),
            "event": int(rec.label.event),
            "clinical": None if rec.clinical is None else [float(v) for v in rec.clinical],
            "modalities": {},
        }
        shapes = {}
        for kind in MASKABLE:
            arr = rec.modalities.get(kind)
            if arr is None:
                continue
            rel = _modality_path(kind, rec.id)
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            if kind in (ModalityKind.RNA, ModalityKind.DNAM):
                np.savetxt(path, np.asarray(arr, dtype=np.float64), fmt="%.17g")
            else:
                path.write_bytes(np.asarray(arr, dtype="<f4").tobytes(order="C"))
                shapes[kind.value] = list(arr.shape)
            entry["modalities"][kind.value] = rel
        if shapes:
            entry["shape"] = shapes
        entries.append(entry)
    (root / "manifest.json").write_text(json.dumps(entries, indent=2, sort_keys=True))


def load_dataset(root: str | Path, specs: SpecMap) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    entries = json.loads(manifest.read_text())
    records = []
    for entry in entries:
        pid = entry["id"]
        modalities: dict[ModalityKind, np.ndarray | None] = {k: None for k in MASKABLE}
        shapes = entry.get("shape", {})
        for name, rel in entry.get("modalities", {}).items():
            kind = ModalityKind(name)
            path = root / rel
            if not path.exists():
                continue  # presence mirrors files actually on disk
            if kind in (ModalityKind.RNA, ModalityKind.DNAM):
                arr = np.loadtxt(path, dtype=np.float64, ndmin=1)
            else:
                if name not in shapes:
                    raise ValueError(f"patient {pid}: missing shape for {name}")
                shape = tuple(int(v) for v in shapes[name])
                raw = np.frombuffer(path.read_bytes(), dtype="<f4")
                if raw.size != int(np.prod(shape)):
                    raise ValueError(
                        f"patient {pid}: {name} has {raw.size} values, expected shape {shape}"
                    )
                arr = raw.reshape(shape).astype(np.float64)
            modalities[kind] = arr
        clinical = entry.get("clinical")
        rec = PatientRecord(
            id=pid,
            modalities=modalities,
            presence={k: modalities[k] is not None for k in MASKABLE},
            clinical=None if clinical is None else np.asarray(clinical, dtype=np.float64),
            label=SurvivalLabel(time=float(entry["time_days"]), event=bool(entry["event"])),
        )
        records.append(rec)
    return Dataset(records=records, specs=dict(specs)).validate()


# ---------------------------------------------------------------------------
# synthetic cohorts


def _linear_map(rng: np.random.Generator, out_size: int) -> np.ndarray:
    return rng.normal(0.0, 1.0, size=(SYNTH_LATENT_DIM, out_size)) / np.sqrt(SYNTH_LATENT_DIM)


def synthesize_dataset(
    n: int,
    specs: SpecMap,
    missing_rates: dict[ModalityKind, float] | None = None,
    seed: int = 0,
    tiles_per_patient: int = SYNTH_TILES_PER_PATIENT,
) -> Dataset:
    """Generate a cohort driven by a shared low-dimensional latent factor.

    Every modality array is a fixed random linear map of the patient's
    latent vector plus Gaussian noise, so modalities are mutually
    predictable. Survival time grows monotonically with the first latent
    component; censoring times are independent uniforms tuned to censor
    roughly 30% of patients.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    missing_rates = dict(missing_rates or {})
    for kind, rate in missing_rates.items():
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"missing rate for {kind.value} outside [0,1]")
    if missing_rates.get(ModalityKind.RNA, 0.0) > 0.0:
        raise ValueError("RNA must always be present")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    maps = {}
    for kind in MASKABLE:
        spec = specs[kind]
        maps[kind] = _linear_map(rng, int(np.prod(spec.raw_shape)))

    z = rng.normal(0.0, 1.0, size=(n, SYNTH_LATENT_DIM))
    event_times = 365.0 * np.exp(1.0 * z[:, 0] + 0.3 * rng.normal(size=n))

    # Uniform censoring horizon solved so that the expected censored
    # fraction hits the target on this sample.
    def censored_fraction(horizon: float) -> float:
        return float(np.mean(np.minimum(event_times, horizon) / horizon))

    lo, hi = float(event_times.min()) * 1e-3, float(event_times.max()) * 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if censored_fraction(mid) > SYNTH_CENSOR_FRACTION:
            lo = mid
        else:
            hi = mid
    censor_times = rng.uniform(0.0, 0.5 * (lo + hi), size=n)

    records = []
    for i in range(n):
        modalities: dict[ModalityKind, np.ndarray | None] = {}
        for kind in MASKABLE:
            spec = specs[kind]
            if rng.random() < missing_rates.get(kind, 0.0):
                modalities[kind] = None
                continue
            flat = z[i] @ maps[kind]
            if kind is ModalityKind.WSI:
                noise = rng.normal(0.0, SYNTH_NOISE_STD, size=(tiles_per_patient, flat.size))
                arr = (flat[None, :] + noise).reshape((tiles_per_patient,) + spec.raw_shape)
            else:
                arr = flat + rng.normal(0.0, SYNTH_NOISE_STD, size=flat.size)
                arr = arr.reshape(spec.raw_shape)
            if kind is ModalityKind.DNAM:
                arr = 1.0 / (1.0 + np.exp(-arr))  # keep beta values inside [0,1]
            modalities[kind] = arr
        event = bool(event_times[i] <= censor_times[i])
        time = float(min(event_times[i], censor_times[i]))
        clinical = np.array([float(rng.random() < 0.5), float(rng.random() < 0.5),
                             55.0 + 12.0 * rng.normal()])
        records.append(
            PatientRecord(
                id=f"syn{i:04d}",
                modalities=modalities,
                presence={k: modalities[k] is not None for k in MASKABLE},
                clinical=clinical,
                label=SurvivalLabel(time=time, event=event),
            )
        )
    return Dataset(records=records, specs=dict(specs), latents=z).validate()


# ---------------------------------------------------------------------------
# splits


def _stratified_pick(ds: Dataset, n_pick: int, seed: int) -> np.ndarray:
    """Pick n_pick record indices (n_pick < len(ds)), event-stratified."""
    events = np.array([r.label.event for r in ds.records])
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    strata = [np.flatnonzero(events), np.flatnonzero(~events)]
    strata = [s for s in strata if s.size]
    quota = np.array([n_pick * s.size / len(ds) for s in strata])
    counts = np.floor(quota).astype(int)
    # Largest-remainder top-up; n_pick < n keeps every count within its stratum.
    for j in np.argsort(-(quota - counts), kind="stable"):
        if counts.sum() >= n_pick:
            break
        counts[j] += 1
    picked = [rng.permutation(s)[:c] for s, c in zip(strata, counts)]
    return np.sort(np.concatenate(picked))


def split_train_test(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0,1)")
    n = len(ds)
    if n < 2:
        raise ValueError("need at least two records to split")
    n_test = int(np.clip(round(test_fraction * n), 1, n - 1))
    test_idx = _stratified_pick(ds, n_test, seed)
    mask = np.zeros(n, dtype=bool)
    mask[test_idx] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))


def kfold_split(ds: Dataset, k: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    if k < 2:
        raise ValueError("k must be >= 2")
    n = len(ds)
    if k > n:
        raise ValueError(f"k={k} exceeds record count {n}")
    events = np.array([r.label.event for r in ds.records])
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    fold_of = np.empty(n, dtype=int)
    cursor = 0  # deal strata back-to-back so every fold is filled even when k > stratum size
    for stratum in (np.flatnonzero(events), np.flatnonzero(~events)):
        for idx in rng.permutation(stratum):
            fold_of[idx] = cursor % k
            cursor += 1
    folds = []
    for f in range(k):
        valid = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((ds.subset(train), ds.subset(valid)))
    return folds
