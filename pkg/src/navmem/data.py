"""Episode storage, temporal subsampling, sequence windows, rebalancing,
normalization and color-jitter augmentation.

Observations are kept as uint8 RGB planes (exactly as rendered) and only
converted to normalized float tensors at batch-assembly time, so datasets
round-trip bit-exactly and stay compact in memory.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .memory import MODES, Mode


class DataError(ValueError):
    pass


class VersionMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class ChecksumError(DataError):
    pass


@dataclass
class StepRecord:
    """One time step: rendered observation, commanded mode, action, flags."""

    observation: np.ndarray  # uint8 (3,H,W)
    mode: int
    action: tuple[float, float]  # (steering, velocity)
    intervention: bool
    t: int


@dataclass
class Episode:
    """Column-oriented time series of StepRecords plus collection metadata."""

    obs: np.ndarray        # uint8 (T,3,H,W)
    modes: np.ndarray      # uint8 (T,)
    actions: np.ndarray    # float64 (T,2)
    intervention: np.ndarray  # bool (T,)
    tidx: np.ndarray       # int32 (T,)
    kind: str = ""
    seed: int = 0
    phase: str = "demo"    # collection phase: demo | dagger

    def __post_init__(self):
        if len(self.obs) == 0:
            raise DataError("episode must be non-empty")
        if not np.all(np.diff(self.tidx) > 0):
            raise DataError("episode time indices must be strictly increasing")

    def __len__(self):
        return len(self.obs)

    def records(self) -> Iterator[StepRecord]:
        for i in range(len(self)):
            yield StepRecord(self.obs[i], int(self.modes[i]),
                             (float(self.actions[i, 0]), float(self.actions[i, 1])),
                             bool(self.intervention[i]), int(self.tidx[i]))

    @classmethod
    def from_records(cls, records: Sequence[StepRecord], kind="", seed=0, phase="demo"):
        return cls(
            obs=np.stack([r.observation for r in records]),
            modes=np.array([r.mode for r in records], dtype=np.uint8),
            actions=np.array([r.action for r in records], dtype=np.float64),
            intervention=np.array([r.intervention for r in records], dtype=bool),
            tidx=np.array([r.t for r in records], dtype=np.int32),
            kind=kind, seed=seed, phase=phase,
        )


# ---------------------------------------------------------------------------
# manifest and normalization

@dataclass
class NormStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))


@dataclass
class DatasetManifest:
    episodes: list[dict]                  # per-episode {kind, seed, phase, length}
    mode_counts: dict[int, int]
    stats: Optional[NormStats] = None

    @property
    def total_frames(self) -> int:
        return sum(e["length"] for e in self.episodes)

    def to_dict(self):
        return {
            "episodes": self.episodes,
            "mode_counts": {str(k): v for k, v in self.mode_counts.items()},
            "stats": self.stats.to_dict() if self.stats else None,
        }

    @classmethod
    def from_dict(cls, d):
        stats = NormStats.from_dict(d["stats"]) if d.get("stats") else None
        return cls(d["episodes"], {int(k): v for k, v in d["mode_counts"].items()}, stats)

    def describe(self) -> str:
        lines = [f"episodes = {len(self.episodes)}", f"frames = {self.total_frames}"]
        for m in MODES:
            lines.append(f"frames[{m.name.lower()}] = {self.mode_counts.get(int(m), 0)}")
        if self.stats is not None:
            lines.append(f"norm_mean = {np.round(self.stats.mean, 6).tolist()}")
            lines.append(f"norm_std = {np.round(self.stats.std, 6).tolist()}")
        return "\n".join(lines)


def build_manifest(episodes: Sequence[Episode], with_stats: bool = True) -> DatasetManifest:
    counts = {int(m): 0 for m in MODES}
    metas = []
    for ep in episodes:
        metas.append({"kind": ep.kind, "seed": ep.seed, "phase": ep.phase,
                      "length": len(ep)})
        vals, cnts = np.unique(ep.modes, return_counts=True)
        for v, c in zip(vals, cnts):
            counts[int(v)] = counts.get(int(v), 0) + int(c)
    stats = compute_normalization(episodes) if with_stats and episodes else None
    return DatasetManifest(metas, counts, stats)


def compute_normalization(episodes: Sequence[Episode]) -> NormStats:
    """Per-channel mean/std of observations (in [0,1]) over the given episodes.
    Call this on the training split only."""
    n = 0
    s = np.zeros(3)
    ss = np.zeros(3)
    for ep in episodes:
        x = ep.obs.astype(np.float64) / 255.0
        n += x.shape[0] * x.shape[2] * x.shape[3]
        s += x.sum(axis=(0, 2, 3))
        ss += (x * x).sum(axis=(0, 2, 3))
    mean = s / n
    var = ss / n - mean * mean
    return NormStats(mean=mean, std=np.sqrt(np.maximum(var, 0.0)))


@dataclass
class JitterParams:
    """Ranges for the color augmentation, applied in normalized space."""

    brightness: float = 0.4
    contrast: float = 0.4
    channel_shift: float = 0.1

    @property
    def disabled(self) -> bool:
        return self.brightness == 0 and self.contrast == 0 and self.channel_shift == 0


def normalize_and_augment(obs, stats: NormStats, jitter: Optional[JitterParams] = None,
                          rng: Optional[np.random.Generator] = None,
                          dtype=np.float64) -> np.ndarray:
    """(x - mean)/std per channel, then optional random brightness/contrast/
    per-channel shift. obs is float in [0,1], shape (3,H,W) or (T,3,H,W)."""
    if np.any(stats.std <= 0):
        raise DataError("zero-std channel in normalization statistics")
    x = np.asarray(obs, dtype=dtype)
    chan = (slice(None), None, None) if x.ndim == 3 else (slice(None), slice(None), None, None)
    mean = stats.mean.astype(dtype)
    std = stats.std.astype(dtype)
    if x.ndim == 3:
        y = (x - mean[:, None, None]) / std[:, None, None]
    else:
        y = (x - mean[None, :, None, None]) / std[None, :, None, None]
    if jitter is not None and rng is not None and not jitter.disabled:
        b = rng.uniform(-jitter.brightness, jitter.brightness)
        c = 1.0 + rng.uniform(-jitter.contrast, jitter.contrast)
        shift = rng.uniform(-jitter.channel_shift, jitter.channel_shift, 3).astype(dtype)
        if x.ndim == 3:
            y = (y + b) * c + shift[:, None, None]
        else:
            y = (y + b) * c + shift[None, :, None, None]
    return y.astype(dtype, copy=False)


def obs_to_float(obs_u8: np.ndarray) -> np.ndarray:
    return obs_u8.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# temporal subsampling and sequence construction

def subsample_stride(episode: Episode, stride: int = 3) -> np.ndarray:
    """Frame indices 0, stride, 2*stride, ... within the episode."""
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    return np.arange(0, len(episode), stride)


@dataclass
class SequenceSample:
    """A window of L strided frames from a single episode."""

    episode: Episode
    indices: np.ndarray  # (L,) frame indices into the episode, constant stride

    def __len__(self):
        return len(self.indices)

    @property
    def modes(self) -> np.ndarray:
        return self.episode.modes[self.indices]

    @property
    def actions(self) -> np.ndarray:
        return self.episode.actions[self.indices]

    def observations_float(self) -> np.ndarray:
        return obs_to_float(self.episode.obs[self.indices])

    def majority_mode(self) -> int:
        vals, cnts = np.unique(self.modes, return_counts=True)
        return int(vals[np.argmax(cnts)])


def window_length_for(episode: Episode, base_length: int) -> int:
    """Long-horizon elevator episodes use tripled windows."""
    if int(Mode.TAKE_ELEVATOR) in episode.modes:
        return 3 * base_length
    return base_length


def build_sequences(episodes: Sequence[Episode], length: int,
                    stride: int = 3) -> list[SequenceSample]:
    """Sliding windows (hop of one strided frame) over each episode's strided
    frames; episodes shorter than the window contribute nothing."""
    if length < 1:
        raise DataError(f"sequence length must be >= 1, got {length}")
    samples = []
    for ep in episodes:
        win = window_length_for(ep, length)
        idx = subsample_stride(ep, stride)
        for j in range(0, len(idx) - win + 1):
            samples.append(SequenceSample(ep, idx[j:j + win]))
    return samples


# ---------------------------------------------------------------------------
# rebalancing

def rebalance(sample_modes: Sequence[int], target: dict[int, float]) -> np.ndarray:
    """Per-sample weights making expected sampled mode frequencies match the
    target distribution. Weights are normalized to sum to 1."""
    modes = np.asarray(sample_modes, dtype=np.int64)
    if len(modes) == 0:
        raise DataError("no samples to rebalance")
    present, counts = np.unique(modes, return_counts=True)
    present_set = set(int(m) for m in present)
    tot = sum(target.values())
    if not np.isclose(tot, 1.0, atol=1e-9):
        raise DataError(f"target distribution sums to {tot}, expected 1")
    for m, mass in target.items():
        if mass > 0 and int(m) not in present_set:
            raise DataError(f"target puts mass on absent mode {m}")
    freq = {int(m): c / len(modes) for m, c in zip(present, counts)}
    w = np.array([target.get(int(m), 0.0) / freq[int(m)] for m in modes])
    total = w.sum()
    if total <= 0:
        raise DataError("rebalancing produced all-zero weights")
    return w / total


def default_mode_target(sample_modes: Sequence[int]) -> dict[int, float]:
    """Uniform over present non-elevator modes; take-elevator keeps its own
    empirical share (it comes from dedicated long-horizon episodes)."""
    modes = np.asarray(sample_modes, dtype=np.int64)
    present, counts = np.unique(modes, return_counts=True)
    present = [int(m) for m in present]
    elev = int(Mode.TAKE_ELEVATOR)
    if elev in present:
        elev_share = counts[present.index(elev)] / len(modes)
    else:
        elev_share = 0.0
    others = [m for m in present if m != elev]
    target = {}
    if others:
        for m in others:
            target[m] = (1.0 - elev_share) / len(others)
    if elev_share > 0:
        target[elev] = elev_share
    return target


# ---------------------------------------------------------------------------
# dataset files

_MAGIC = b"NAVDS"
DATASET_VERSION = 1


def _pack_block(payload: bytes) -> bytes:
    return (len(payload).to_bytes(8, "little")
            + zlib.crc32(payload).to_bytes(4, "little") + payload)


def _read_block(fh) -> bytes:
    head = fh.read(12)
    if len(head) < 12:
        raise TruncatedFileError("dataset file ended inside a block header")
    size = int.from_bytes(head[:8], "little")
    crc = int.from_bytes(head[8:12], "little")
    payload = fh.read(size)
    if len(payload) < size:
        raise TruncatedFileError("dataset file ended inside a block payload")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("dataset block failed its checksum")
    return payload


def _episode_payload(ep: Episode) -> bytes:
    buf = io.BytesIO()
    meta = {"kind": ep.kind, "seed": ep.seed, "phase": ep.phase}
    head = json.dumps(meta).encode()
    buf.write(len(head).to_bytes(4, "little"))
    buf.write(head)
    np.save(buf, ep.obs, allow_pickle=False)
    np.save(buf, ep.modes, allow_pickle=False)
    np.save(buf, ep.actions, allow_pickle=False)
    np.save(buf, ep.intervention, allow_pickle=False)
    np.save(buf, ep.tidx, allow_pickle=False)
    return buf.getvalue()


def _episode_from_payload(payload: bytes) -> Episode:
    buf = io.BytesIO(payload)
    hlen = int.from_bytes(buf.read(4), "little")
    meta = json.loads(buf.read(hlen).decode())
    arrays = [np.load(buf, allow_pickle=False) for _ in range(5)]
    return Episode(obs=arrays[0], modes=arrays[1], actions=arrays[2],
                   intervention=arrays[3], tidx=arrays[4], **meta)


def save_dataset(episodes: Sequence[Episode], path,
                 manifest: Optional[DatasetManifest] = None):
    """Header (magic, version, manifest) followed by checksummed episode blocks."""
    manifest = manifest or build_manifest(list(episodes))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(DATASET_VERSION.to_bytes(4, "little"))
        fh.write(len(episodes).to_bytes(4, "little"))
        fh.write(_pack_block(json.dumps(manifest.to_dict()).encode()))
        for ep in episodes:
            fh.write(_pack_block(_episode_payload(ep)))


def load_dataset(path) -> tuple[list[Episode], DatasetManifest]:
    """Lossless inverse of save_dataset; raises before returning anything on
    version, truncation or checksum problems (no partial loads)."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise VersionMismatchError(f"{path}: not a dataset file")
        ver_bytes = fh.read(4)
        if len(ver_bytes) < 4:
            raise TruncatedFileError(f"{path}: missing version field")
        version = int.from_bytes(ver_bytes, "little")
        if version != DATASET_VERSION:
            raise VersionMismatchError(
                f"{path}: dataset version {version} != {DATASET_VERSION}")
        count_bytes = fh.read(4)
        if len(count_bytes) < 4:
            raise TruncatedFileError(f"{path}: missing episode count")
        count = int.from_bytes(count_bytes, "little")
        manifest = DatasetManifest.from_dict(json.loads(_read_block(fh).decode()))
        episodes = [_episode_from_payload(_read_block(fh)) for _ in range(count)]
    return episodes, manifest


def split_episodes(episodes: Sequence[Episode], eval_fraction: float,
                   seed: int) -> tuple[list[Episode], list[Episode]]:
    """Deterministic train/eval split by episode."""
    order = np.random.default_rng(seed).permutation(len(episodes))
    n_eval = int(round(eval_fraction * len(episodes)))
    eval_idx = set(order[:n_eval].tolist())
    train = [ep for i, ep in enumerate(episodes) if i not in eval_idx]
    evals = [ep for i, ep in enumerate(episodes) if i in eval_idx]
    return train, evals
