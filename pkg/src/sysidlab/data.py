"""Excitation signals, labelled sequence datasets and the ``.sidd`` container.

Randomness comes from numpy's PCG64. Each sequence gets its own substream,
``SeedSequence(seed, spawn_key=(role, group, index))`` with role 0 for train
and 1 for test, so a sequence's content does not depend on the order in which
sequences are generated.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import dynsys

__all__ = [
    "TruncatedNormalSpec",
    "DEFAULT_INPUT",
    "DatasetSpec",
    "Dataset",
    "DatasetFormatError",
    "DatasetVersionError",
    "sample_truncated_normal",
    "truncated_normal_variance",
    "normalized_index",
    "sequence_rng",
    "build_dataset",
    "save_dataset",
    "load_dataset",
    "export_csv",
    "check_regeneration",
    "system_from_manifest",
]

MAGIC = b"SIDD"
FORMAT_VERSION = 1
_ROLE_KEYS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class TruncatedNormalSpec:
    mu: float = 0.0
    sigma: float = 1.0
    a: float = -1.0
    b: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.a < self.b:
            raise ValueError(f"need a < b, got a={self.a}, b={self.b}")


DEFAULT_INPUT = TruncatedNormalSpec(mu=0.0, sigma=1.0, a=-1.0, b=1.0)


def sample_truncated_normal(
    spec: TruncatedNormalSpec, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n`` samples by rejection from N(mu, sigma^2), keeping a < x < b."""
    if n < 0:
        raise ValueError("n must be non-negative")
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        # oversample a little so a single pass usually suffices
        draw = rng.normal(spec.mu, spec.sigma, size=int(need * 1.6) + 16)
        keep = draw[(draw > spec.a) & (draw < spec.b)][:need]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return out


def truncated_normal_variance(spec: TruncatedNormalSpec) -> float:
    """Closed-form variance of the truncated normal."""
    alpha = (spec.a - spec.mu) / spec.sigma
    beta = (spec.b - spec.mu) / spec.sigma
    phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    Phi = lambda z: 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    Z = Phi(beta) - Phi(alpha)
    t1 = (alpha * phi(alpha) - beta * phi(beta)) / Z
    t2 = ((phi(alpha) - phi(beta)) / Z) ** 2
    return spec.sigma**2 * (1.0 + t1 - t2)


def normalized_index(T: int) -> np.ndarray:
    """[0/T, 1/T, ..., (T-1)/T]."""
    if T < 1:
        raise ValueError(f"sequence length must be >= 1, got {T}")
    return np.arange(T, dtype=np.float64) / T


@dataclass(frozen=True)
class DatasetSpec:
    n_groups: int = 5
    group_size: int = 32
    train_len: int = 5000
    test_len: int = 10000
    seed: int = 2021

    def __post_init__(self):
        for name in ("n_groups", "group_size", "train_len", "test_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(eq=False)
class Dataset:
    """``features``: (batch, time, 2) with channels (u, n/T);
    ``labels``: (batch, time, 1); ``meta``: provenance manifest."""

    features: np.ndarray
    labels: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        f, y = self.features, self.labels
        if f.ndim != 3 or f.shape[2] != 2:
            raise ValueError(f"features must be (batch, time, 2), got {f.shape}")
        if y.shape != f.shape[:2] + (1,):
            raise ValueError(f"labels must be {f.shape[:2] + (1,)}, got {y.shape}")

    @property
    def n_sequences(self) -> int:
        return self.features.shape[0]

    @property
    def length(self) -> int:
        return self.features.shape[1]

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact comparison of arrays and manifest."""
        return (
            self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
            and self.meta == other.meta
        )


def sequence_rng(seed: int, role: str, group: int, index: int) -> np.random.Generator:
    key = (_ROLE_KEYS[role], int(group), int(index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def _make_group(system, system_name, system_options, spec, role, group, length):
    n = spec.group_size
    feats = np.empty((n, length, 2))
    labels = np.empty((n, length, 1))
    idx = normalized_index(length)
    for s in range(n):
        u = sample_truncated_normal(DEFAULT_INPUT, length, sequence_rng(spec.seed, role, group, s))
        try:
            y = dynsys.simulate(system, u)
        except dynsys.SimulationError as exc:
            raise dynsys.SimulationError(
                f"{role} group {group} sequence {s}: {exc}", exc.index
            ) from exc
        feats[s, :, 0] = u
        feats[s, :, 1] = idx
        labels[s, :, 0] = y
    meta = {
        "system": system_name,
        "system_options": dict(system_options),
        "seed": spec.seed,
        "role": role,
        "group": group,
        "spec": asdict(spec),
        "input": asdict(DEFAULT_INPUT),
    }
    return Dataset(feats, labels, meta)


def build_dataset(
    system,
    spec: DatasetSpec,
    *,
    system_name: str = "custom",
    system_options: dict | None = None,
) -> tuple[list[Dataset], Dataset]:
    """Return ``(train_groups, test)``.

    ``system`` may be a system object or a preset name; in the latter case the
    manifest records it so labels can later be regenerated.
    """
    system_options = dict(system_options or {})
    if isinstance(system, str):
        system_name = system
        system = dynsys.preset(system, **system_options)
    train = [
        _make_group(system, system_name, system_options, spec, "train", g, spec.train_len)
        for g in range(spec.n_groups)
    ]
    test = _make_group(system, system_name, system_options, spec, "test", 0, spec.test_len)
    return train, test


# --- container format ----------------------------------------------------------
#
#   offset 0   4 bytes   magic "SIDD"
#   offset 4   u16 LE    format version
#   offset 6   u32 LE    manifest length L
#   offset 10  L bytes   UTF-8 JSON manifest (includes "shape": [batch, time])
#   then       float64 LE features, batch-major / time-major / channel-minor
#   then       float64 LE labels, same order


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class DatasetVersionError(DatasetFormatError):
    pass


_HEADER = struct.Struct("<4sHI")


def save_dataset(ds: Dataset, path) -> None:
    manifest = dict(ds.meta)
    manifest["shape"] = [ds.n_sequences, ds.length]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"expected {_HEADER.size}-byte header, file has {len(raw)} bytes", len(raw))
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"expected magic {MAGIC!r}, found {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported dataset format version {version} (expected {FORMAT_VERSION})", 4)
    off = _HEADER.size
    if len(raw) < off + mlen:
        raise DatasetFormatError(f"expected {mlen}-byte manifest, file truncated", len(raw))
    try:
        manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
        batch, length = (int(v) for v in manifest.pop("shape"))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"expected JSON manifest with a 'shape' entry ({exc})", off) from exc
    off += mlen
    nf = batch * length * 2 * 8
    nl = batch * length * 8
    if len(raw) != off + nf + nl:
        where = min(len(raw), off + nf + nl)
        raise DatasetFormatError(
            f"expected {nf + nl} bytes of float64 data after manifest, found {len(raw) - off}", where
        )
    feats = np.frombuffer(raw, dtype="<f8", count=batch * length * 2, offset=off)
    labels = np.frombuffer(raw, dtype="<f8", count=batch * length, offset=off + nf)
    return Dataset(
        feats.reshape(batch, length, 2).astype(np.float64),
        labels.reshape(batch, length, 1).astype(np.float64),
        manifest,
    )


def export_csv(ds: Dataset, path) -> None:
    """Lossy export for plotting. Columns: seq,t,u,idx,y."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "t", "u", "idx", "y"])
        for s in range(ds.n_sequences):
            for t in range(ds.length):
                w.writerow([s, t, repr(ds.features[s, t, 0]), repr(ds.features[s, t, 1]),
                            repr(ds.labels[s, t, 0])])


def system_from_manifest(meta: dict):
    return dynsys.preset(meta["system"], **meta.get("system_options", {}))


def check_regeneration(ds: Dataset) -> tuple[bool, str]:
    """Re-simulate every stored input and compare labels bit-for-bit.

    Returns ``(ok, reason)``; an unknown system name yields ``(False, ...)``.
    """
    try:
        system = system_from_manifest(ds.meta)
    except (KeyError, ValueError, TypeError) as exc:
        return False, f"cannot rebuild system from manifest: {exc}"
    idx = normalized_index(ds.length)
    for s in range(ds.n_sequences):
        if not np.array_equal(ds.features[s, :, 1], idx):
            return False, f"sequence {s}: index channel differs from n/T"
        y = dynsys.simulate(system, ds.features[s, :, 0])
        if y.tobytes() != np.ascontiguousarray(ds.labels[s, :, 0]).tobytes():
            return False, f"sequence {s}: labels differ from re-simulation"
    return True, "ok"
