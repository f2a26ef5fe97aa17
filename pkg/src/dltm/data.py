"""ECG dataset container, meta statistics, window sampling and synthetic data.

On-disk layout of a dataset root::

    manifest.json    UTF-8 JSON, see ``DatasetManifest``
    signals.f32      little-endian float32, each record lead-major and contiguous

Each manifest record entry names its payload file (relative to the root) and
the byte offset of its first sample, so several payload files may coexist.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, DatasetIOError, FormatError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "signals.f32"
DEFAULT_RATE_HZ = 100.0


@dataclass
class EcgRecord:
    id: str
    signal: np.ndarray  # (num_leads, num_samples), millivolts
    labels: np.ndarray  # multi-hot over the task classes
    meta: dict = field(default_factory=dict)
    fold: int = 0
    sampling_rate_hz: float = DEFAULT_RATE_HZ

    @property
    def num_samples(self) -> int:
        return self.signal.shape[1]


@dataclass
class DatasetManifest:
    class_names: list[str]
    num_leads: int
    sampling_rate_hz: float = DEFAULT_RATE_HZ
    meta_schema: list[dict] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise FormatError(f"manifest format_version {version!r} unsupported (expected {FORMAT_VERSION})")
        try:
            m = cls(class_names=list(d["class_names"]), num_leads=int(d["num_leads"]),
                    sampling_rate_hz=float(d.get("sampling_rate_hz", DEFAULT_RATE_HZ)),
                    meta_schema=list(d.get("meta_schema", [])), records=list(d["records"]),
                    format_version=version)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from None
        m.validate()
        return m

    def validate(self) -> None:
        seen = set()
        width = len(self.class_names)
        for entry in self.records:
            for key in ("id", "payload", "offset", "num_samples", "labels"):
                if key not in entry:
                    raise FormatError(f"manifest record lacks {key!r}: {entry.get('id', '?')}")
            rid = entry["id"]
            if rid in seen:
                raise FormatError(f"duplicate record id {rid!r}")
            seen.add(rid)
            if len(entry["labels"]) != width:
                raise FormatError(f"record {rid!r}: {len(entry['labels'])} labels for {width} classes")


class Dataset:
    """A loaded manifest whose records are read from disk on demand."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._index = {e["id"]: i for i, e in enumerate(manifest.records)}
        self._cache: dict[int, EcgRecord] = {}

    @property
    def class_names(self) -> list[str]:
        return self.manifest.class_names

    def __len__(self):
        return len(self.manifest.records)

    def __iter__(self) -> Iterator[EcgRecord]:
        return (self[i] for i in range(len(self)))

    def __getitem__(self, i: int) -> EcgRecord:
        rec = self._cache.get(i)
        if rec is None:
            rec = self._cache[i] = self._read(self.manifest.records[i])
        return rec

    def by_id(self, rid: str) -> EcgRecord:
        return self[self._index[rid]]

    def _read(self, entry: dict) -> EcgRecord:
        rid = entry["id"]
        path = self.root / entry["payload"]
        count = self.manifest.num_leads * int(entry["num_samples"])
        try:
            with open(path, "rb") as f:
                f.seek(int(entry["offset"]))
                raw = f.read(4 * count)
        except OSError as exc:
            raise DatasetIOError(f"record {rid!r}: cannot read payload {path}: {exc}") from None
        if len(raw) != 4 * count:
            raise DatasetIOError(f"record {rid!r}: payload truncated ({len(raw)} of {4 * count} bytes)")
        signal = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(self.manifest.num_leads, -1)
        if not np.isfinite(signal).all():
            raise DatasetIOError(f"record {rid!r}: payload holds non-finite samples")
        return EcgRecord(rid, signal, np.asarray(entry["labels"], dtype=np.float64), dict(entry.get("meta") or {}),
                         int(entry.get("fold", 0)), self.manifest.sampling_rate_hz)

    def select(self, folds: Iterable[int]) -> list[EcgRecord]:
        wanted = set(folds)
        return [self[i] for i, e in enumerate(self.manifest.records) if int(e.get("fold", 0)) in wanted]


def load_dataset(root) -> Dataset:
    path = Path(root) / MANIFEST_NAME
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot read manifest {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from None
    return Dataset(root, DatasetManifest.from_dict(d))


def write_dataset(root, records: Sequence[EcgRecord], class_names: Sequence[str],
                  meta_schema: Sequence[dict] = (), sampling_rate_hz: float = DEFAULT_RATE_HZ) -> Dataset:
    """Write records into a single payload file plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not records:
        raise DataError("cannot write an empty dataset")
    num_leads = records[0].signal.shape[0]
    entries = []
    offset = 0
    with open(root / PAYLOAD_NAME, "wb") as f:
        for rec in records:
            if rec.signal.shape[0] != num_leads:
                raise DataError(f"record {rec.id!r} has {rec.signal.shape[0]} leads, expected {num_leads}")
            if not np.isfinite(rec.signal).all():
                raise DataError(f"record {rec.id!r} holds non-finite samples")
            blob = np.ascontiguousarray(rec.signal, dtype="<f4").tobytes()
            f.write(blob)
            entries.append({"id": rec.id, "payload": PAYLOAD_NAME, "offset": offset,
                            "num_samples": int(rec.num_samples),
                            "labels": [int(v) for v in rec.labels], "meta": rec.meta, "fold": int(rec.fold)})
            offset += len(blob)
    manifest = DatasetManifest(list(class_names), num_leads, sampling_rate_hz, list(meta_schema), entries)
    manifest.validate()
    (root / MANIFEST_NAME).write_text(manifest.to_json(), encoding="utf-8")
    return Dataset(root, manifest)


# ---------------------------------------------------------------- meta statistics


@dataclass
class FieldStats:
    mean: float
    std: float
    missing_rate: float

    @property
    def constant(self) -> bool:
        return not self.std > 0


@dataclass
class MetaStats:
    fields: dict[str, FieldStats] = field(default_factory=dict)

    def zscore(self, name: str, value: float) -> float:
        s = self.fields.get(name)
        if s is None or s.constant:
            return 0.0
        return (value - s.mean) / s.std

    def to_dict(self) -> dict:
        return {n: asdict(s) for n, s in self.fields.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetaStats":
        return cls({n: FieldStats(**s) for n, s in d.items()})


def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def compute_meta_stats(records: Sequence[EcgRecord], fields: Sequence[str]) -> MetaStats:
    """Population mean/std of each continuous field over non-missing values."""
    if not records:
        raise DataError("meta statistics need at least one record")
    out = {}
    for name in fields:
        vals = [float(r.meta[name]) for r in records if not _missing(r.meta.get(name))]
        missing = 1.0 - len(vals) / len(records)
        if vals:
            arr = np.array(vals)
            out[name] = FieldStats(float(arr.mean()), float(arr.std()), missing)
        else:
            out[name] = FieldStats(0.0, 0.0, missing)
    return MetaStats(out)


# ---------------------------------------------------------------- windows


def window_offsets(num_samples: int, window: int, rng: np.random.Generator | None = None,
                   mode: str = "eval", offset_strategy: str = "within_window") -> list[int]:
    """Start indices of consecutive non-overlapping windows.

    Train mode draws the first start uniformly from ``[0, window)`` (or from
    every valid start with ``offset_strategy="any"``), clipped so at least
    one full window fits; eval mode starts at 0 and drops the partial tail.
    """
    if num_samples < window:
        raise DataError(f"record of {num_samples} samples is shorter than one {window}-sample window")
    first = 0
    if mode == "train":
        valid = num_samples - window + 1
        high = valid if offset_strategy == "any" else min(window, valid)
        first = int(rng.integers(0, high)) if rng is not None else 0
    elif mode != "eval":
        raise DataError(f"unknown window mode {mode!r}")
    return list(range(first, num_samples - window + 1, window))


def sample_windows(record: EcgRecord, window: int, rng: np.random.Generator | None = None,
                   mode: str = "eval", offset_strategy: str = "within_window") -> list[np.ndarray]:
    return [record.signal[:, o:o + window]
            for o in window_offsets(record.num_samples, window, rng, mode, offset_strategy)]


# ---------------------------------------------------------------- synthetic data

SYNTH_CLASSES = ("fast_rate", "inverted_polarity", "baseline_drift", "elderly")
SYNTH_META_SCHEMA = [
    {"name": "age", "kind": "continuous", "unit": "years"},
    {"name": "sex", "kind": "categorical", "categories": ["male", "female"]},
    {"name": "height", "kind": "continuous", "unit": "cm"},
    {"name": "weight", "kind": "continuous", "unit": "kg"},
]
INVERTED_LEADS = (1, 4, 7, 10)
LEAD_GAINS = np.array([1.0, 0.8, 0.6, 0.9, 0.7, 1.1, 1.2, 0.9, 0.7, 1.0, 0.8, 0.6])


@dataclass
class SynthSpec:
    """Distributions behind :func:`synth_generate`.

    Each label is an independent fair coin.  ``fast_rate`` moves the spike
    rate from ``slow_rate_hz`` to ``fast_rate_hz``; ``inverted_polarity``
    flips spikes on ``INVERTED_LEADS``; ``baseline_drift`` adds a slow
    sinusoid; ``elderly`` only changes the recorded age (a meta-only class).
    """

    num_leads: int = 12
    duration_s: float = 10.0
    rate_hz: float = DEFAULT_RATE_HZ
    slow_rate_hz: tuple = (0.8, 1.2)
    fast_rate_hz: tuple = (1.8, 2.4)
    spike_amp_mv: float = 1.0
    spike_sigma_s: float = 0.02
    drift_amp_mv: float = 0.5
    drift_freq_hz: tuple = (0.15, 0.35)
    noise_mv: float = 0.03
    young_age: tuple = (20.0, 59.0)
    old_age: tuple = (60.0, 90.0)
    missing: dict = field(default_factory=lambda: {"age": 0.0, "sex": 0.1, "height": 0.2, "weight": 0.2})


def _synth_record(i: int, rng: np.random.Generator, labels: np.ndarray, spec: SynthSpec) -> EcgRecord:
    n = int(round(spec.duration_s * spec.rate_hz))
    t = np.arange(n) / spec.rate_hz
    fast, inverted, drift, elderly = (bool(labels[k]) if k < len(labels) else False for k in range(4))
    rate = rng.uniform(*(spec.fast_rate_hz if fast else spec.slow_rate_hz))
    phase = rng.uniform(0, 1.0 / rate)
    beats = np.arange(phase, spec.duration_s, 1.0 / rate)
    pulse = np.zeros(n)
    for b in beats:
        pulse += np.exp(-0.5 * ((t - b) / spec.spike_sigma_s) ** 2)
        pulse += 0.25 * np.exp(-0.5 * ((t - b - 0.25) / (4 * spec.spike_sigma_s)) ** 2)
    gains = np.resize(LEAD_GAINS, spec.num_leads) * rng.uniform(0.9, 1.1, size=spec.num_leads)
    signs = np.ones(spec.num_leads)
    if inverted:
        signs[[l for l in INVERTED_LEADS if l < spec.num_leads]] = -1.0
    signal = spec.spike_amp_mv * (gains * signs)[:, None] * pulse[None, :]
    if drift:
        f = rng.uniform(*spec.drift_freq_hz)
        signal += spec.drift_amp_mv * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))[None, :]
    signal += rng.normal(scale=spec.noise_mv, size=signal.shape)

    meta = {
        "age": round(float(rng.uniform(*(spec.old_age if elderly else spec.young_age))), 1),
        "sex": "female" if rng.random() < 0.5 else "male",
        "height": round(float(rng.normal(170.0, 10.0)), 1),
        "weight": round(float(rng.normal(72.0, 12.0)), 1),
    }
    for name in list(meta):
        if rng.random() < spec.missing.get(name, 0.0):
            meta[name] = None
    # float32 round trip so in-memory records equal what the container stores
    signal = signal.astype(np.float32).astype(np.float64)
    return EcgRecord(f"synth{i:05d}", signal, labels.astype(np.float64), meta, fold=i % 10 + 1,
                     sampling_rate_hz=spec.rate_hz)


def synth_generate(seed: int, n_records: int, num_classes: int = 4,
                   spec: SynthSpec | None = None) -> tuple[list[EcgRecord], list[str]]:
    """Deterministic quasi-ECG records whose labels follow from construction.

    Folds cycle 1..10, so folds 1-8 / 9 / 10 give an 8/1/1 split.
    """
    if n_records < 1:
        raise DataError("n_records must be at least 1")
    if not 1 <= num_classes <= len(SYNTH_CLASSES):
        raise DataError(f"num_classes must lie in 1..{len(SYNTH_CLASSES)}")
    spec = spec or SynthSpec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5e7]))
    records = []
    for i in range(n_records):
        labels = (rng.random(num_classes) < 0.5).astype(np.float64)
        records.append(_synth_record(i, rng, labels, spec))
    return records, list(SYNTH_CLASSES[:num_classes])


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="same")


def synth_oracle_scores(record: EcgRecord) -> dict[str, float]:
    """Hand-built detectors for each synthetic class, for checking labels."""
    fs = record.sampling_rate_hz
    lead0 = record.signal[0] - _moving_average(record.signal[0], int(fs // 4))
    above = lead0 > 0.4
    spikes = int(np.count_nonzero(above[1:] & ~above[:-1]))
    inv = record.signal[INVERTED_LEADS[0]] - _moving_average(record.signal[INVERTED_LEADS[0]], int(fs // 4))
    slow = _moving_average(record.signal.mean(axis=0), int(fs))
    age = record.meta.get("age")
    return {
        "fast_rate": spikes * fs / record.num_samples,
        "inverted_polarity": float(-inv.min() - inv.max()),
        "baseline_drift": float(slow[int(fs):-int(fs)].std()),
        "elderly": float("nan") if age is None else float(age),
    }
