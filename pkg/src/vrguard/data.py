"""Sensor-trace ingestion, normalization, windowing, synthesis, and splits.

Trace CSV schema: UTF-8 with a header row naming `timestamp` (seconds),
`label` (none|low|medium|high, or the legacy slight|moderate|severe which
are renamed on load), then feature columns in declared order.  Missing
values are errors, not imputed.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    ContractViolation,
    InsufficientDataError,
    OrderingError,
    ParseError,
    SchemaError,
)
from .numerics import SeededRng

LABELS = ("none", "low", "medium", "high")
_LABEL_ALIASES = {"slight": "low", "moderate": "medium", "severe": "high"}


def label_index(name: str) -> int:
    key = name.strip().lower()
    key = _LABEL_ALIASES.get(key, key)
    if key not in LABELS:
        raise ParseError(f"unknown severity label {name!r}")
    return LABELS.index(key)


@dataclass
class SensorTrace:
    """A timestamped multivariate recording with per-frame severity labels."""

    trace_id: str
    sample_rate: float
    feature_names: list
    frames: np.ndarray          # (T, N) float32
    labels: np.ndarray          # (T,) int, values 0..3
    timestamps: np.ndarray      # (T,) float64 seconds, strictly increasing
    norm_stats_id: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        t, n = self.frames.shape
        if len(self.labels) != t or len(self.timestamps) != t:
            raise ContractViolation(
                f"trace '{self.trace_id}': {t} frames, {len(self.labels)} labels, "
                f"{len(self.timestamps)} timestamps")
        if len(self.feature_names) != n:
            raise ContractViolation(f"trace '{self.trace_id}': {n} columns, "
                                    f"{len(self.feature_names)} feature names")
        diffs = np.diff(self.timestamps)
        if t > 1 and not (diffs > 0).all():
            raise OrderingError(f"trace '{self.trace_id}': timestamps not strictly increasing")
        if t > 1:
            expected = 1.0 / self.sample_rate
            if np.abs(diffs - expected).max() > 0.01 * expected:
                raise ContractViolation(
                    f"trace '{self.trace_id}': frame spacing deviates >1% from "
                    f"1/{self.sample_rate} fps")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_features(self) -> int:
        return self.frames.shape[1]


@dataclass
class NormalizationStats:
    """Per-feature min-max ranges fitted on one split; constant features are flagged."""

    feature_names: list
    mins: np.ndarray
    maxs: np.ndarray
    degenerate: np.ndarray      # True where max == min

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        if (self.mins > self.maxs).any():
            raise ContractViolation("normalization stats with min > max")

    @property
    def stats_id(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(self.mins.tobytes() + self.maxs.tobytes())
        h.update(",".join(self.feature_names).encode())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {"feature_names": list(self.feature_names),
                "mins": self.mins.tolist(), "maxs": self.maxs.tolist(),
                "degenerate": self.degenerate.tolist()}

    @staticmethod
    def from_json(doc: dict) -> "NormalizationStats":
        return NormalizationStats(feature_names=list(doc["feature_names"]),
                                  mins=np.asarray(doc["mins"]),
                                  maxs=np.asarray(doc["maxs"]),
                                  degenerate=np.asarray(doc["degenerate"], dtype=bool))

    def transform(self, values: np.ndarray) -> np.ndarray:
        span = np.where(self.degenerate, 1.0, self.maxs - self.mins)
        out = (values.astype(np.float64) - self.mins) / span
        out[:, self.degenerate] = 0.0
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        """Inverse affine map; degenerate features come back as their fitted min."""
        span = np.where(self.degenerate, 0.0, self.maxs - self.mins)
        return (values.astype(np.float64) * span + self.mins).astype(np.float32)


def fit_normalize(trace: SensorTrace):
    """Fit min-max stats on `trace` and return (normalized trace, stats)."""
    if trace.n_frames == 0:
        raise ContractViolation("cannot fit normalization on an empty trace")
    mins = trace.frames.min(axis=0).astype(np.float64)
    maxs = trace.frames.max(axis=0).astype(np.float64)
    stats = NormalizationStats(list(trace.feature_names), mins, maxs, maxs == mins)
    return apply_normalize(trace, stats), stats


def fit_normalize_many(traces):
    """Fit one stats object over several traces (the training split)."""
    if not traces:
        raise ContractViolation("cannot fit normalization on zero traces")
    stacked = np.concatenate([t.frames for t in traces], axis=0)
    mins = stacked.min(axis=0).astype(np.float64)
    maxs = stacked.max(axis=0).astype(np.float64)
    names = list(traces[0].feature_names)
    stats = NormalizationStats(names, mins, maxs, maxs == mins)
    return [apply_normalize(t, stats) for t in traces], stats


def apply_normalize(trace: SensorTrace, stats: NormalizationStats) -> SensorTrace:
    if trace.n_frames == 0:
        raise ContractViolation("cannot normalize an empty trace")
    if list(trace.feature_names) != list(stats.feature_names):
        raise ContractViolation("normalization stats fitted on different features")
    return replace(trace, frames=stats.transform(trace.frames), norm_stats_id=stats.stats_id)


@dataclass
class TimeSeriesWindow:
    """A fixed-length slice of a trace, labeled by its final frame."""

    values: np.ndarray          # (T, N) float32
    label: int
    trace_id: str
    end_index: int

    @property
    def window_id(self) -> str:
        return f"{self.trace_id}:{self.end_index}"


def window(trace: SensorTrace, timestep: int = 90, stride: int = 1):
    """Cut sliding windows ending at frames timestep-1, timestep-1+stride, ..."""
    if stride < 1 or timestep < 1:
        raise ConfigError("timestep and stride must be >= 1")
    total = trace.n_frames
    if total < timestep:
        raise InsufficientDataError(
            f"trace '{trace.trace_id}' has {total} frames, needs >= {timestep}")
    out = []
    for end in range(timestep - 1, total, stride):
        start = end - timestep + 1
        out.append(TimeSeriesWindow(values=trace.frames[start:end + 1].copy(),
                                    label=int(trace.labels[end]),
                                    trace_id=trace.trace_id,
                                    end_index=end))
    return out


def windows_to_arrays(windows):
    """Stack windows into (B,T,N) float32 values and (B,) int labels."""
    if not windows:
        raise ContractViolation("empty window list")
    x = np.stack([w.values for w in windows]).astype(np.float32)
    y = np.array([w.label for w in windows], dtype=np.int64)
    return x, y


# synthetic generator -------------------------------------------------------

def default_class_means(n_features: int) -> np.ndarray:
    """Class-mean matrix separable on the first two features, mild elsewhere."""
    means = np.zeros((4, n_features), dtype=np.float64)
    for c in range(4):
        if n_features > 0:
            means[c, 0] = 2.0 + 2.0 * c
        if n_features > 1:
            means[c, 1] = 8.0 - 2.0 * c
        for i in range(2, n_features):
            means[c, i] = 5.0 + (0.4 * c if i % 2 == 0 else -0.4 * c)
    if n_features > 2:
        means[:, n_features - 1] = 5.0  # oscillating feature: class info lives in frequency
    return means


@dataclass
class SynthConfig:
    """Deterministic AR(1)-per-feature generator cycling none->low->medium->high."""

    n_features: int = 6
    frames_per_segment: int = 150
    cycles: int = 1
    sample_rate: float = 10.0
    class_means: np.ndarray | None = None     # (4, n_features)
    ar_coeff: float = 0.8
    noise_scale: float = 0.3
    osc_feature: int | None = None            # defaults to the last feature
    osc_amp: float = 1.0
    osc_freqs: tuple = (0.5, 1.0, 2.0, 4.0)   # Hz per class
    seed: int = 0
    trace_id: str | None = None

    def resolved_means(self) -> np.ndarray:
        m = self.class_means
        m = default_class_means(self.n_features) if m is None else np.asarray(m, dtype=np.float64)
        if m.shape != (4, self.n_features):
            raise ConfigError(f"class_means must be (4, {self.n_features}), got {m.shape}")
        return m

    def validate(self):
        if self.n_features < 1 or self.frames_per_segment < 1 or self.cycles < 1:
            raise ConfigError("n_features, frames_per_segment, and cycles must be >= 1")
        if not (0.0 <= self.ar_coeff < 1.0):
            raise ConfigError("ar_coeff must lie in [0, 1)")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        means = self.resolved_means()
        for a in range(4):
            for b in range(a + 1, 4):
                distinct = int((np.abs(means[a] - means[b]) > 1e-9).sum())
                if distinct < 2:
                    raise ConfigError(
                        f"degenerate synth config: classes {a} and {b} differ on "
                        f"{distinct} feature(s), need >= 2")


def synth_generate(config: SynthConfig) -> SensorTrace:
    """Generate one trace: x_t = mu + rho*(x_{t-1} - mu) + sigma*eta_t per feature."""
    config.validate()
    means = config.resolved_means()
    rng = SeededRng(config.seed)
    n = config.n_features
    seg = config.frames_per_segment
    total = 4 * seg * config.cycles
    osc = config.osc_feature if config.osc_feature is not None else n - 1

    frames = np.zeros((total, n), dtype=np.float64)
    labels = np.zeros(total, dtype=np.int64)
    noise = rng.normal((total, n)) * config.noise_scale
    prev = means[0].copy()
    for t in range(total):
        c = (t // seg) % 4
        mu = means[c]
        prev = mu + config.ar_coeff * (prev - mu) + noise[t]
        frames[t] = prev
        labels[t] = c
    if config.osc_amp > 0 and 0 <= osc < n:
        t_sec = np.arange(total) / config.sample_rate
        freqs = np.array([config.osc_freqs[c] for c in labels])
        frames[:, osc] += config.osc_amp * np.sin(2.0 * np.pi * freqs * t_sec)

    names = [f"f{i}" for i in range(n)]
    trace_id = config.trace_id or f"synth-{config.seed}"
    return SensorTrace(trace_id=trace_id, sample_rate=config.sample_rate,
                       feature_names=names, frames=frames.astype(np.float32),
                       labels=labels, timestamps=np.arange(total) / config.sample_rate)


# splitting -----------------------------------------------------------------

def _largest_remainder(n: int, fractions) -> list:
    targets = [f * n for f in fractions]
    base = [int(np.floor(t)) for t in targets]
    short = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: targets[i] - base[i], reverse=True)
    for i in order[:short]:
        base[i] += 1
    return base


def split(windows, fractions, seed: int = 0, stratified: bool = True,
          group_by_trace: bool = False):
    """Partition windows into disjoint, exhaustive (train, val, test) sets."""
    if len(fractions) != 3:
        raise ConfigError("fractions must be a (train, val, test) triple")
    if any(f < 0 for f in fractions):
        raise ConfigError("split fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {sum(fractions)}, need 1")
    rng = SeededRng(seed)
    parts = ([], [], [])

    if group_by_trace:
        order, seen = [], set()
        for w in windows:
            if w.trace_id not in seen:
                seen.add(w.trace_id)
                order.append(w.trace_id)
        by_trace = {tid: [] for tid in order}
        for w in windows:
            by_trace[w.trace_id].append(w)
        shuffled = [order[i] for i in rng.permutation(len(order))]
        total = len(windows)
        assigned = [0, 0, 0]
        for tid in shuffled:
            deficits = [fractions[s] * total - assigned[s] for s in range(3)]
            s = int(np.argmax(deficits))
            parts[s].extend(by_trace[tid])
            assigned[s] += len(by_trace[tid])
        return parts

    if stratified:
        classes = sorted({w.label for w in windows})
        for c in classes:
            idx = [i for i, w in enumerate(windows) if w.label == c]
            perm = rng.permutation(len(idx))
            counts = _largest_remainder(len(idx), fractions)
            pos = 0
            for s in range(3):
                for k in range(counts[s]):
                    parts[s].append(windows[idx[perm[pos + k]]])
                pos += counts[s]
        return parts

    perm = rng.permutation(len(windows))
    counts = _largest_remainder(len(windows), fractions)
    pos = 0
    for s in range(3):
        parts[s].extend(windows[perm[pos + k]] for k in range(counts[s]))
        pos += counts[s]
    return parts


# CSV ingestion / emission ---------------------------------------------------

def load_trace(source, schema=None, trace_id=None) -> SensorTrace:
    """Parse a trace CSV (path, file object, or text).

    `schema` optionally names the feature columns that must be present, in
    order; by default every non-timestamp/label column is a feature.
    """
    if isinstance(source, (str, bytes)) and "\n" not in str(source):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return load_trace(fh, schema=schema, trace_id=trace_id or str(source))
    if isinstance(source, str):
        source = io.StringIO(source)

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty file: no header row") from None
    header = [h.strip() for h in header]
    for required in ("timestamp", "label"):
        if required not in header:
            raise SchemaError(f"missing required column '{required}'")
    ts_col = header.index("timestamp")
    label_col = header.index("label")
    if schema is not None:
        for name in schema:
            if name not in header:
                raise SchemaError(f"missing declared feature column '{name}'")
        feat_cols = [header.index(name) for name in schema]
        feature_names = list(schema)
    else:
        feat_cols = [i for i in range(len(header)) if i not in (ts_col, label_col)]
        feature_names = [header[i] for i in feat_cols]
    if not feature_names:
        raise SchemaError("no feature columns found")

    timestamps, labels, rows = [], [], []
    for i, row in enumerate(reader):
        if len(row) < len(header):
            raise ParseError(f"row {i}: expected {len(header)} cells, got {len(row)}", row=i)
        try:
            ts = float(row[ts_col])
            feats = [float(row[c]) for c in feat_cols]
        except ValueError as exc:
            raise ParseError(f"row {i}: non-numeric cell ({exc})", row=i) from None
        if not np.isfinite(ts) or not np.all(np.isfinite(feats)):
            raise ParseError(f"row {i}: NaN or infinite value", row=i)
        try:
            lab = label_index(row[label_col])
        except ParseError as exc:
            raise ParseError(f"row {i}: {exc}", row=i) from None
        timestamps.append(ts)
        labels.append(lab)
        rows.append(feats)
    if not rows:
        raise SchemaError("trace file contains a header but no rows")

    ts = np.asarray(timestamps)
    if len(ts) > 1 and not (np.diff(ts) > 0).all():
        raise OrderingError("timestamps not strictly increasing")
    rate = 1.0 / float(np.median(np.diff(ts))) if len(ts) > 1 else 1.0
    return SensorTrace(trace_id=trace_id or "trace", sample_rate=rate,
                       feature_names=feature_names,
                       frames=np.asarray(rows, dtype=np.float32),
                       labels=np.asarray(labels), timestamps=ts)


def save_trace_csv(trace: SensorTrace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["timestamp", "label"] + list(trace.feature_names))
        for t in range(trace.n_frames):
            wr.writerow([repr(float(trace.timestamps[t])), LABELS[trace.labels[t]]]
                        + [repr(float(v)) for v in trace.frames[t]])
