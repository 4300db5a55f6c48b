"""Dataset ingestion, client partitioning, windowing and the synthetic benchmark generator.

Everything here is plain numpy and purely functional: the same inputs always
produce the same outputs, so these helpers are safe to call from parallel
client workers.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DAY_STEPS = 288  # 5-minute intervals per day


class DataError(ValueError):
    """Raised when a dataset file or partition description is malformed."""


@dataclass(frozen=True)
class TrafficSeries:
    """A [T_total x N] matrix of sensor readings at a fixed sampling interval."""

    values: np.ndarray
    interval_minutes: int = 5
    node_ids: tuple[str, ...] = ()

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"series must be [T_total x N], got shape {v.shape}")
        if not np.isfinite(v).all():
            raise DataError("series contains NaN/Inf entries")
        if self.interval_minutes <= 0:
            raise DataError("interval_minutes must be positive")
        if not self.node_ids:
            object.__setattr__(self, "node_ids", tuple(str(i) for i in range(v.shape[1])))
        elif len(self.node_ids) != v.shape[1]:
            raise DataError("node_ids length does not match column count")

    @property
    def t_total(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ClientPartition:
    """One client's node subset and the corresponding series columns."""

    client_id: int
    node_indices: tuple[int, ...]
    local_series: np.ndarray  # [T_total x |V_m|]

    @property
    def num_nodes(self) -> int:
        return len(self.node_indices)


@dataclass(frozen=True)
class WindowBatch:
    """Sliding-window samples: inputs [n x V x T x F], targets [n x V x T' x F]."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass(frozen=True)
class SyntheticConfig:
    clients: int = 4
    nodes_per_client: int = 10
    t_total: int = 2880
    shared_prototypes: int = 3
    client_amplitude: float = 4.0
    noise_std: float = 1.0
    base_level: float = 50.0
    prototype_amplitude: float = 10.0
    interval_minutes: int = 5


# ---------------------------------------------------------------------------
# Loading

_HEADER = struct.Struct("<II")


def save_matrix_binary(path, values: np.ndarray) -> None:
    """Write [T_total x N] as little-endian float32 with an (T_total, N) uint32 header."""
    values = np.asarray(values)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(values.shape[0], values.shape[1]))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_dataset(path, format: str | None = None) -> TrafficSeries:
    """Load a traffic series from a matrix-binary or csv file.

    ``format`` is inferred from the suffix when omitted (.csv -> csv,
    anything else -> matrix-binary).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "matrix-binary"

    if format == "matrix-binary":
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise DataError(f"{path}: file too short for header")
        t_total, n = _HEADER.unpack_from(raw)
        payload = raw[_HEADER.size:]
        expected = t_total * n * 4
        if len(payload) != expected:
            raise DataError(
                f"{path}: header declares {t_total}x{n} ({expected} bytes) "
                f"but payload has {len(payload)} bytes"
            )
        values = np.frombuffer(payload, dtype="<f4").reshape(t_total, n).astype(np.float64)
        node_ids = ()
    elif format == "csv":
        import csv as _csv

        with open(path, newline="") as f:
            reader = _csv.reader(f)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty csv") from None
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: unparseable value ({exc})") from None
        if not rows:
            raise DataError(f"{path}: csv has a header but no data rows")
        values = np.asarray(rows, dtype=np.float64)
        node_ids = tuple(header)
    else:
        raise DataError(f"unknown dataset format: {format!r}")

    if not np.isfinite(values).all():
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise DataError(f"{path}: {bad} NaN/Inf entries, load rejected")
    return TrafficSeries(values=values, node_ids=node_ids)


# ---------------------------------------------------------------------------
# Partitioning

def partition_nodes(
    series: TrafficSeries,
    num_clients: int,
    strategy: str = "contiguous-blocks",
    index_file=None,
) -> list[ClientPartition]:
    """Split the N nodes into disjoint client subsets covering all of [0, N)."""
    n = series.num_nodes
    if not 1 <= num_clients <= n:
        raise DataError(f"need 1 <= M <= N, got M={num_clients}, N={n}")

    if strategy == "contiguous-blocks":
        # sizes differ by at most one, larger blocks first
        groups = np.array_split(np.arange(n), num_clients)
        assignment = [tuple(int(i) for i in g) for g in groups]
    elif strategy == "index-file":
        if index_file is None:
            raise DataError("index-file strategy requires a path")
        assignment = _read_index_file(index_file, num_clients)
        seen: set[int] = set()
        for idx in assignment:
            for i in idx:
                if not 0 <= i < n:
                    raise DataError(f"index-file: node index {i} out of range [0, {n})")
                if i in seen:
                    raise DataError(f"index-file: node {i} assigned to more than one client")
                seen.add(i)
        if len(seen) != n:
            missing = sorted(set(range(n)) - seen)
            raise DataError(f"index-file: nodes not assigned to any client: {missing[:10]}")
    else:
        raise DataError(f"unknown partition strategy: {strategy!r}")

    parts = []
    for cid, idx in enumerate(assignment):
        if not idx:
            raise DataError(f"client {cid} received an empty partition")
        parts.append(ClientPartition(cid, tuple(idx), series.values[:, list(idx)]))
    return parts


def _read_index_file(path, num_clients: int) -> list[tuple[int, ...]]:
    """Parse ``client_id: i j k ...`` lines into an ordered assignment list."""
    mapping: dict[int, tuple[int, ...]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            cid_str, rest = line.split(":", 1)
            cid = int(cid_str)
            idx = tuple(int(tok) for tok in rest.replace(",", " ").split())
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected 'client_id: i j k ...'") from None
        if cid in mapping:
            raise DataError(f"{path}:{lineno}: duplicate client id {cid}")
        mapping[cid] = idx
    if sorted(mapping) != list(range(num_clients)):
        raise DataError(f"{path}: client ids must be exactly 0..{num_clients - 1}")
    return [mapping[c] for c in range(num_clients)]


# ---------------------------------------------------------------------------
# Windowing

def window_count(segment_len: int, lookback: int, horizon: int) -> int:
    return max(segment_len - lookback - horizon + 1, 0)


def split_bounds(t_total: int, splits=(0.6, 0.2, 0.2)) -> tuple[int, int]:
    if abs(sum(splits) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {splits}")
    a = int(t_total * splits[0])
    b = int(t_total * (splits[0] + splits[1]))
    return a, b


def make_windows(
    partition: ClientPartition,
    lookback: int = 12,
    horizon: int = 12,
    splits=(0.6, 0.2, 0.2),
) -> dict[str, WindowBatch]:
    """Stride-1 windows inside each temporal split; windows never cross a boundary."""
    series = partition.local_series
    t_total = series.shape[0]
    if t_total < lookback + horizon:
        raise DataError(f"T_total={t_total} shorter than one window ({lookback}+{horizon})")
    a, b = split_bounds(t_total, splits)
    segments = {"train": series[:a], "val": series[a:b], "test": series[b:]}

    out = {}
    for name, seg in segments.items():
        n = window_count(seg.shape[0], lookback, horizon)
        if n == 0:
            warnings.warn(f"split '{name}' too short for a single window; empty stream")
            v = seg.shape[1]
            out[name] = WindowBatch(
                np.zeros((0, v, lookback, 1)), np.zeros((0, v, horizon, 1))
            )
            continue
        # [n_windows, V, lookback+horizon] view, no copy
        win = np.lib.stride_tricks.sliding_window_view(seg, lookback + horizon, axis=0)
        out[name] = WindowBatch(
            win[:, :, :lookback, None], win[:, :, lookback:, None]
        )
    return out


# ---------------------------------------------------------------------------
# Normalization

def fit_norm_stats(train_segment: np.ndarray, eps: float = 1e-8) -> NormStats:
    """Per-client z-score statistics from the training split only."""
    mean = float(train_segment.mean())
    std = float(train_segment.std())
    if std < eps:
        raise DataError(f"training split std {std:.3e} below {eps}; fit rejected")
    return NormStats(mean=mean, std=std)


def normalize(data: np.ndarray, stats: NormStats, direction: str = "forward") -> np.ndarray:
    if direction == "forward":
        return (data - stats.mean) / stats.std
    if direction == "inverse":
        return data * stats.std + stats.mean
    raise DataError(f"unknown direction: {direction!r}")


# ---------------------------------------------------------------------------
# Synthetic heterogeneous benchmark

def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[TrafficSeries, list[ClientPartition]]:
    """Deterministic heterogeneous benchmark.

    Each node's series is a shared daily sinusoidal prototype (assigned
    round-robin over nodes) plus a client-specific AR(1) drift scaled by
    ``client_amplitude``, plus i.i.d. observation noise.
    """
    m, npc = config.clients, config.nodes_per_client
    if m < 1 or npc < 1 or config.t_total < 1 or config.shared_prototypes < 1:
        raise DataError("synthetic config dimensions must be positive")
    rng = np.random.default_rng(seed)
    n = m * npc
    t = np.arange(config.t_total)

    # shared daily prototypes: phase-shifted sinusoids with a second harmonic
    protos = []
    for p in range(config.shared_prototypes):
        phase = 2.0 * np.pi * p / config.shared_prototypes
        wave = np.sin(2.0 * np.pi * t / DAY_STEPS + phase)
        wave = wave + 0.3 * np.sin(4.0 * np.pi * t / DAY_STEPS + 2.0 * phase)
        protos.append(config.base_level + config.prototype_amplitude * wave)
    protos = np.stack(protos)  # [P_s x T]

    # one AR(1) drift per client, coefficient varies with the client id
    drifts = np.zeros((m, config.t_total))
    for c in range(m):
        coef = 0.55 + 0.4 * (c / max(m - 1, 1))
        shocks = rng.standard_normal(config.t_total)
        for step in range(1, config.t_total):
            drifts[c, step] = coef * drifts[c, step - 1] + shocks[step]

    values = np.empty((config.t_total, n))
    for node in range(n):
        client = node // npc
        proto = protos[node % config.shared_prototypes]
        noise = config.noise_std * rng.standard_normal(config.t_total)
        values[:, node] = proto + config.client_amplitude * drifts[client] + noise

    series = TrafficSeries(values=values, interval_minutes=config.interval_minutes)
    parts = partition_nodes(series, m, strategy="contiguous-blocks")
    return series, parts
