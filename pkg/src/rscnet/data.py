"""CSI amplitude datasets: windowing, normalisation, binary I/O and a
multipath synthetic generator.

Sample sets are stored as stacked arrays (``amplitudes`` of shape
``(n, N_a, N_s, N_t)`` plus integer ``labels``); :class:`CsiSample` is the
per-recording view.
"""
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CLASS_NAMES = ("lie down", "fall", "walk", "run", "sit down", "stand up", "empty room")
SPLITS = ("train", "val", "test")
SPEED_OF_LIGHT = 299_792_458.0


@dataclass
class CsiSample:
    amplitude: np.ndarray  # (N_a, N_s, N_t)
    label: int


@dataclass
class SampleSet:
    amplitudes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.ascontiguousarray(self.amplitudes, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.amplitudes.ndim != 4:
            raise ValueError(f"amplitudes must be (n, N_a, N_s, N_t), got {self.amplitudes.shape}")
        if len(self.labels) != len(self.amplitudes):
            raise ValueError(f"{len(self.labels)} labels for {len(self.amplitudes)} samples")

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        for x, y in zip(self.amplitudes, self.labels):
            yield CsiSample(x, int(y))

    def __getitem__(self, i):
        return CsiSample(self.amplitudes[i], int(self.labels[i]))

    def subset(self, index):
        return SampleSet(self.amplitudes[index], self.labels[index])


@dataclass
class NormStats:
    mean: np.ndarray  # (N_a, N_s)
    std: np.ndarray


@dataclass
class DatasetSplit:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    classes: tuple = CLASS_NAMES
    stats: NormStats | None = None

    @property
    def dims(self):
        return tuple(self.train.amplitudes.shape[1:])

    def split(self, name):
        return getattr(self, name)


# -- windowing ----------------------------------------------------------------

def segment_windows(H, n_frames):
    """Cut ``(N_a, N_s, N_t)`` along time into ``N_t / N_f`` windows, in order."""
    H = np.asarray(H)
    n_t = H.shape[-1]
    if n_frames < 1 or n_t % n_frames:
        raise ValueError(f"window length {n_frames} does not divide {n_t} frames")
    return [H[..., s * n_frames:(s + 1) * n_frames] for s in range(n_t // n_frames)]


def merge_windows(windows):
    """Concatenate equal-shape windows back along time."""
    windows = [np.asarray(w) for w in windows]
    if not windows:
        raise ValueError("merge_windows needs at least one window")
    first = windows[0].shape
    for k, w in enumerate(windows):
        if w.shape != first:
            raise ValueError(f"window {k} has shape {w.shape}, expected {first}")
    return np.concatenate(windows, axis=-1)


# -- normalisation ------------------------------------------------------------

def compute_stats(samples, min_std=1e-8):
    x = samples.amplitudes.astype(np.float64)
    mean = x.mean(axis=(0, 3))
    std = np.maximum(x.std(axis=(0, 3)), min_std)
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def apply_stats(amplitudes, stats):
    a = np.asarray(amplitudes, dtype=np.float64)
    return ((a - stats.mean[..., None]) / stats.std[..., None]).astype(np.float32)


def denormalize(amplitudes, stats):
    a = np.asarray(amplitudes, dtype=np.float64)
    return (a * stats.std[..., None] + stats.mean[..., None]).astype(np.float32)


def normalize(split):
    """Z-score each (antenna, subcarrier) feature with train-set statistics."""
    if len(split.train) == 0:
        raise ValueError("normalize: train split is empty")
    stats = compute_stats(split.train)

    def norm(s):
        return SampleSet(apply_stats(s.amplitudes, stats), s.labels.copy())

    return replace(split, train=norm(split.train), val=norm(split.val),
                   test=norm(split.test), stats=stats)


# -- binary dataset format ----------------------------------------------------

def save_dataset(split, directory, prefix=""):
    """Write ``manifest.json`` plus one float32 LE data file and one uint8 label
    file per split; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"splits": {}, "dims": list(split.dims), "classes": list(split.classes)}
    for name in SPLITS:
        s = split.split(name)
        data_name, label_name = f"{prefix}{name}.f32", f"{prefix}{name}.labels"
        s.amplitudes.astype("<f4").tofile(directory / data_name)
        if len(s) and (s.labels.min() < 0 or s.labels.max() > 255):
            raise ValueError("labels must fit in one byte")
        s.labels.astype(np.uint8).tofile(directory / label_name)
        manifest["splits"][name] = {"data": data_name, "labels": label_name, "count": len(s)}
    path = directory / f"{prefix}manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(manifest_path):
    """Load splits named by a JSON manifest (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    try:
        dims = tuple(int(d) for d in manifest["dims"])
        classes = tuple(manifest["classes"])
        entries = manifest["splits"]
    except KeyError as exc:
        raise ValueError(f"manifest {manifest_path} lacks key {exc}") from None
    if len(dims) != 3:
        raise ValueError(f"manifest dims must be [N_a, N_s, N_t], got {dims}")
    per_sample = math.prod(dims)
    root = manifest_path.parent
    sets = {}
    for name in SPLITS:
        entry = entries.get(name)
        if entry is None:
            sets[name] = SampleSet(np.zeros((0,) + dims, np.float32), np.zeros(0, np.int64))
            continue
        count = int(entry["count"])
        data_path, label_path = root / entry["data"], root / entry["labels"]
        expected = count * per_sample * 4
        actual = data_path.stat().st_size
        if actual != expected:
            raise ValueError(
                f"{name} data {data_path.name}: expected {expected} bytes "
                f"({count} x {per_sample} float32), found {actual}")
        labels = np.fromfile(label_path, dtype=np.uint8)
        if len(labels) != count:
            raise ValueError(
                f"{name} labels {label_path.name}: expected {count} bytes, found {len(labels)}")
        if count and labels.max() >= len(classes):
            raise ValueError(f"{name} labels: unknown label id {int(labels.max())} "
                             f"(manifest lists {len(classes)} classes)")
        data = np.fromfile(data_path, dtype="<f4").reshape((count,) + dims)
        sets[name] = SampleSet(data, labels)
    return DatasetSplit(sets["train"], sets["val"], sets["test"], classes=classes)


# -- synthetic multipath CSI --------------------------------------------------

# Per-class motion of the body-reflected path: (path-length swing in metres,
# oscillation frequency in Hz, linear drift in metres over the recording).
# Whole-hertz rates keep the sinusoids orthogonal over a one-second recording;
# drifts stay small enough that full trajectories correlate below 0.3.
CLASS_MOTIONS = (
    (0.010, 1.0, 0.005),   # lie down: slow, small, settling drift
    (0.030, 3.0, -0.020),  # fall: large swing with a drop
    (0.015, 2.0, 0.010),   # walk: moderate gait, steady drift
    (0.020, 6.0, 0.020),   # run: fast gait, strong drift
    (0.012, 4.0, -0.005),  # sit down
    (0.018, 5.0, 0.005),   # stand up
    (0.000, 0.0, 0.000),   # empty room: static
)


@dataclass
class SyntheticChannelConfig:
    n_antennas: int = 3
    n_subcarriers: int = 30
    n_timesteps: int = 250
    frame_rate: float = 250.0            # frames per second
    center_frequency: float = 5.32e9     # Hz
    bandwidth: float = 20e6              # subcarriers span this band
    static_path_lengths: tuple = (4.0, 6.5, 9.0)   # metres
    static_amplitudes: tuple = (1.0, 0.6, 0.4)
    body_path_length: float = 5.0
    body_amplitude: float = 0.5
    jitter: float = 0.1                  # relative per-sample spread of motion params
    noise_std: float = 0.01              # additive measurement noise on |H|
    seed: int = 0
    motions: tuple = field(default=CLASS_MOTIONS)

    @property
    def n_paths(self):
        return len(self.static_path_lengths) + 1

    def subcarrier_frequencies(self):
        half = self.bandwidth / 2
        return self.center_frequency + np.linspace(-half, half, self.n_subcarriers)


def cfr_amplitude(freqs, amplitudes, delays):
    """``|sum_n a_n exp(-j 2 pi f tau_n(t))|`` for delays of shape ``(N, T)``.

    Returns ``(len(freqs), T)``.
    """
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    phase = -2j * np.pi * np.asarray(freqs)[:, None, None] * np.asarray(delays)[None]
    return np.abs((amplitudes[None, :, None] * np.exp(phase)).sum(axis=1))


def motion_template(cfg, label):
    """Nominal (jitter- and phase-free) body path-length deviation over time, metres."""
    t = np.arange(cfg.n_timesteps) / cfg.frame_rate
    swing, rate, drift = cfg.motions[label]
    return swing * np.sin(2 * np.pi * rate * t) + drift * t / (cfg.n_timesteps / cfg.frame_rate)


def _sample_amplitude(cfg, label, rng, freqs):
    t = np.arange(cfg.n_timesteps) / cfg.frame_rate
    duration = cfg.n_timesteps / cfg.frame_rate
    swing, rate, drift = cfg.motions[label]
    j = cfg.jitter
    swing *= 1 + j * rng.uniform(-1, 1)
    rate *= 1 + j * rng.uniform(-1, 1)
    drift *= 1 + j * rng.uniform(-1, 1)
    phase = rng.uniform(0, 2 * np.pi)
    body = cfg.body_path_length + rng.uniform(-0.05, 0.05)
    body_track = body + swing * np.sin(2 * np.pi * rate * t + phase) + drift * t / duration
    static = np.asarray(cfg.static_path_lengths) + rng.uniform(-0.002, 0.002, len(cfg.static_path_lengths))
    wavelength = SPEED_OF_LIGHT / cfg.center_frequency
    out = np.empty((cfg.n_antennas, cfg.n_subcarriers, cfg.n_timesteps))
    amps = np.concatenate([cfg.static_amplitudes, [cfg.body_amplitude]])
    for a in range(cfg.n_antennas):
        # half-wavelength array: each path arrives with its own per-antenna offset
        offset = a * wavelength / 2 * np.sin(np.linspace(-1.0, 1.0, cfg.n_paths) + 0.3)
        lengths = np.vstack([np.repeat(static[:, None], cfg.n_timesteps, axis=1), body_track[None]])
        delays = (lengths + offset[:, None]) / SPEED_OF_LIGHT
        out[a] = cfr_amplitude(freqs, amps, delays)
    out += cfg.noise_std * rng.standard_normal(out.shape)
    # keep the physical range [0, sum a_n] despite the additive noise
    return np.clip(out, 0.0, amps.sum())


def _synthetic_set(cfg, count, n_classes, rng, freqs):
    labels = np.arange(count) % n_classes
    rng.shuffle(labels)
    data = np.empty((count, cfg.n_antennas, cfg.n_subcarriers, cfg.n_timesteps), np.float32)
    for k, label in enumerate(labels):
        data[k] = _sample_amplitude(cfg, int(label), rng, freqs)
    return SampleSet(data, labels)


def generate_synthetic(config=None, n_per_class=100, n_classes=7, split_sizes=None):
    """Deterministic multipath CSI amplitudes with class-specific body motion.

    ``n_per_class`` sets the train size (``n_per_class * n_classes``); val and
    test default to one seventh of that each. ``split_sizes`` overrides all three.
    """
    cfg = config or SyntheticChannelConfig()
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not 1 <= n_classes <= len(cfg.motions):
        raise ValueError(f"n_classes must lie in [1, {len(cfg.motions)}]")
    if split_sizes is None:
        n_train = n_per_class * n_classes
        split_sizes = (n_train, max(n_classes, n_train // 7), max(n_classes, n_train // 7))
    freqs = cfg.subcarrier_frequencies()
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(SPLITS))
    sets = [_synthetic_set(cfg, n, n_classes, np.random.default_rng(s), freqs)
            for n, s in zip(split_sizes, seeds)]
    classes = CLASS_NAMES[:n_classes] if n_classes <= len(CLASS_NAMES) else tuple(
        f"class{k}" for k in range(n_classes))
    return DatasetSplit(*sets, classes=classes)
