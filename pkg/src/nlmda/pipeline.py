"""EEG preparation: band-pass + decimation, epoching, PERCLOS labels,
stratified partitions and a synthetic stand-in dataset."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import oaconvolve

AWAKE, DROWSY = 0, 1
PERCLOS_THRESHOLD = 0.5

# SEED-VIG montage: six temporal then eleven posterior electrodes.
SEED_VIG_CHANNELS = (
    "FT7", "FT8", "T7", "T8", "TP7", "TP8",
    "CP1", "CP2", "P1", "PZ", "P2", "PO3", "POZ", "PO4", "O1", "OZ", "O2",
)
N_POSTERIOR = 11


@dataclass
class RawRecording:
    fs: float
    channels: list[str]
    samples: np.ndarray  # [C, n]
    perclos: np.ndarray | None = None  # [m, 2] rows of (timestamp s, value)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.channels):
            raise ValueError(f"samples {self.samples.shape} do not match {len(self.channels)} channels")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel labels must be unique")
        if self.perclos is not None:
            self.perclos = np.asarray(self.perclos, dtype=np.float64).reshape(-1, 2)
            vals = self.perclos[:, 1]
            if np.any((vals < 0) | (vals > 1)):
                raise ValueError("PERCLOS values must lie in [0, 1]")


@dataclass
class EpochSet:
    epochs: np.ndarray  # [n, 1, C, T]
    labels: np.ndarray  # [n] in {0, 1}
    fs: int = 200
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.epochs.ndim != 4 or self.epochs.shape[1] != 1:
            raise ValueError(f"epochs must be [n, 1, C, T], got {self.epochs.shape}")
        if self.labels.shape != (self.epochs.shape[0],):
            raise ValueError("one label per epoch required")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def C(self) -> int:
        return self.epochs.shape[2]

    @property
    def T(self) -> int:
        return self.epochs.shape[3]

    def subset(self, idx) -> "EpochSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EpochSet(self.epochs[idx], self.labels[idx], self.fs, dict(self.provenance))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=2)


# ---------------------------------------------------------------- filtering


def _lowpass(fc: float, fs: float, taps: int) -> np.ndarray:
    n = np.arange(taps) - (taps - 1) / 2
    h = np.sinc(2 * fc / fs * n) * np.hamming(taps)
    return h / h.sum()


def fir_bandpass(fs: float, lo: float = 1.0, hi: float = 75.0, taps: int = 1001) -> np.ndarray:
    """Linear-phase windowed-sinc band-pass (Hamming window).

    Built as the difference of two unit-DC-gain low-passes, so the DC
    response cancels.
    """
    if not 0 < lo < hi < fs / 2:
        raise ValueError(f"need 0 < lo < hi < fs/2, got lo={lo}, hi={hi}, fs={fs}")
    if taps < 3 or taps % 2 == 0:
        raise ValueError("taps must be odd and >= 3")
    return _lowpass(hi, fs, taps) - _lowpass(lo, fs, taps)


def filter_and_decimate(rec: RawRecording, factor: int, fir: np.ndarray | None = None) -> RawRecording:
    """Band-pass every channel (same-length, zero-padded edges) then keep every ``factor``-th sample."""
    if factor < 1 or rec.fs % factor:
        raise ValueError(f"fs={rec.fs} is not divisible by factor {factor}")
    if fir is None:
        fir = fir_bandpass(rec.fs)
    fir = np.asarray(fir, dtype=np.float64)
    n = rec.samples.shape[1]
    full = oaconvolve(rec.samples, fir[None, :], mode="full", axes=1)
    start = (fir.size - 1) // 2
    filtered = full[:, start:start + n]
    return RawRecording(rec.fs / factor, list(rec.channels), filtered[:, ::factor], rec.perclos)


def epoch(rec: RawRecording, seconds: float = 1.0) -> tuple[np.ndarray, np.ndarray | None]:
    """Cut non-overlapping windows; returns ([n, 1, C, T] epochs, per-epoch PERCLOS or None).

    An epoch's PERCLOS is the series value whose timestamp is nearest the
    epoch midpoint.
    """
    T = int(round(rec.fs * seconds))
    C, n = rec.samples.shape
    count = n // T
    if count < 1:
        raise ValueError(f"recording of {n} samples is shorter than one {T}-sample epoch")
    epochs = rec.samples[:, :count * T].reshape(C, count, T).transpose(1, 0, 2)[:, None]
    if rec.perclos is None or len(rec.perclos) == 0:
        return epochs, None
    times, values = rec.perclos[:, 0], rec.perclos[:, 1]
    order = np.argsort(times, kind="stable")
    times, values = times[order], values[order]
    mid = (np.arange(count) * T + T / 2) / rec.fs
    right = np.clip(np.searchsorted(times, mid), 0, len(times) - 1)
    left = np.clip(right - 1, 0, len(times) - 1)
    pick = np.where(np.abs(times[left] - mid) <= np.abs(times[right] - mid), left, right)
    return epochs, values[pick]


def perclos_to_labels(perclos) -> np.ndarray:
    """1 (drowsy) where PERCLOS >= 0.5, else 0 (awake)."""
    v = np.asarray(perclos, dtype=np.float64)
    if np.any(np.isnan(v)) or np.any((v < 0) | (v > 1)):
        raise ValueError("PERCLOS values must lie in [0, 1]")
    return (v >= PERCLOS_THRESHOLD).astype(np.int64)


# ---------------------------------------------------------------- partitions


@dataclass
class SplitSpec:
    seed: int
    ratios: tuple[int, int, int]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class FoldPlan:
    seed: int
    k: int
    folds: list[np.ndarray]

    def train_test(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        rest = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return rest, self.folds[i]


def _labels_of(data) -> np.ndarray:
    return data.labels if isinstance(data, EpochSet) else np.asarray(data, dtype=np.int64)


def _class_indices(labels: np.ndarray, seed: int, min_count: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("both classes must be present")
    out = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.size < min_count:
            raise ValueError(f"class {c} has only {idx.size} samples; need {min_count}")
        out.append(rng.permutation(idx))
    return out


def stratified_split(data, ratios=(70, 15, 15), seed: int = 0) -> SplitSpec:
    """Per-class shuffle; floor(ratio * n_class) to train and val, the remainder to test."""
    labels = _labels_of(data)
    total = sum(ratios)
    parts = ([], [], [])
    for idx in _class_indices(labels, seed, 3):
        n = idx.size
        n_train = n * ratios[0] // total
        n_val = n * ratios[1] // total
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return SplitSpec(seed, tuple(ratios), train, val, test)


def stratified_kfold(data, k: int = 5, seed: int = 0) -> FoldPlan:
    """Deal each class's shuffled indices round-robin across ``k`` folds.

    The deal continues across classes, so both per-class and total fold sizes
    differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    labels = _labels_of(data)
    folds: list[list[np.ndarray]] = [[] for _ in range(k)]
    offset = 0
    for idx in _class_indices(labels, seed, k):
        slot = (offset + np.arange(idx.size)) % k
        for f in range(k):
            folds[f].append(idx[slot == f])
        offset += idx.size
    return FoldPlan(seed, k, [np.sort(np.concatenate(f)) for f in folds])


# ---------------------------------------------------------------- synthetic data


def _pink_noise(rng: np.random.Generator, shape: tuple[int, ...], fs: float) -> np.ndarray:
    n = shape[-1]
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    gain = np.zeros_like(freqs)
    gain[1:] = 1.0 / np.sqrt(freqs[1:])
    spec = (rng.standard_normal(shape[:-1] + (freqs.size,))
            + 1j * rng.standard_normal(shape[:-1] + (freqs.size,))) * gain
    noise = np.fft.irfft(spec, n=n, axis=-1)
    return noise / noise.std(axis=-1, keepdims=True)


def synth_generate(n_per_class: int, C: int = 17, T: int = 200, fs: int = 200, seed: int = 0) -> EpochSet:
    """Two-class stand-in for vigilance data.

    Both classes share unit-variance 1/f noise on every channel. On the last
    eleven (posterior) channels awake epochs add a 10 Hz rhythm of amplitude
    1; drowsy epochs add 10 Hz at amplitude 3 plus 5 Hz at amplitude 1.5.
    Phases are drawn per epoch. Values are rounded to float32 so the set
    survives the epoch file unchanged.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n = 2 * n_per_class
    labels = np.repeat([AWAKE, DROWSY], n_per_class)
    x = _pink_noise(rng, (n, C, T), fs)
    t = np.arange(T) / fs
    post = slice(max(0, C - N_POSTERIOR), C)
    ph_alpha = rng.uniform(0, 2 * np.pi, size=(n, 1))
    ph_theta = rng.uniform(0, 2 * np.pi, size=(n, 1))
    amp_alpha = np.where(labels == DROWSY, 3.0, 1.0)[:, None]
    amp_theta = np.where(labels == DROWSY, 1.5, 0.0)[:, None]
    rhythm = (amp_alpha * np.sin(2 * np.pi * 10 * t + ph_alpha)
              + amp_theta * np.sin(2 * np.pi * 5 * t + ph_theta))
    x[:, post, :] += rhythm[:, None, :]
    x = x.astype(np.float32).astype(np.float64)
    prov = {"source": "synthetic", "seed": str(seed), "n_per_class": str(n_per_class),
            "description": "1/f noise + posterior 10 Hz (and 5 Hz for drowsy) rhythms"}
    return EpochSet(x[:, None], labels, fs, prov)


def preprocess_recording(rec: RawRecording, target_fs: int = 200) -> EpochSet:
    """Band-pass, decimate to ``target_fs``, cut 1 s epochs and threshold PERCLOS."""
    if rec.perclos is None:
        raise ValueError("recording has no PERCLOS series")
    factor = int(round(rec.fs / target_fs))
    if factor < 1 or rec.fs != factor * target_fs:
        raise ValueError(f"fs={rec.fs} is not an integer multiple of {target_fs}")
    dec = filter_and_decimate(rec, factor)
    epochs, perclos = epoch(dec)
    prov = {"source": "recording", "fs_in": f"{rec.fs:g}",
            "description": f"bandpass 1-75 Hz (1001-tap Hamming), decimate x{factor}, 1 s epochs, PERCLOS>=0.5"}
    return EpochSet(epochs, perclos_to_labels(perclos), int(dec.fs), prov)
