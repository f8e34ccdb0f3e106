"""
Feature extraction for the distillation toolkit.

Turns mono waveforms into 80-dim log-mel filterbank matrices, drops non-speech frames with an
energy-threshold VAD and applies mean normalization over a sliding window. Also holds the FTR1
feature archive reader/writer used to hand features between the commands.
"""
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from distillkit.Constants import DEFAULT_FRAME_SHIFT_S, FEATURE_MAGIC, N_MELS
from utils.binary_io import BinaryReader, atomic_write_bytes, pack_id
from utils.exceptions import (ConfigError, DataError, EmptyAfterVadError, FormatError,
                              MissingIdError, TooShortError)
from utils.logger_config import logger

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class Waveform:
    """
    A mono recording.

    Attributes:
        samples (np.ndarray): amplitudes, nominally in [-1, 1].
        sample_rate (int): samples per second.
    """
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"Sample rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size < 1:
            raise DataError(f"Waveform must be a non-empty 1-D sequence, got shape {samples.shape}")
        object.__setattr__(self, 'samples', samples)

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureMatrix:
    """
    Per-utterance log-mel frames, shape (T, 80).

    Attributes:
        frames (np.ndarray): the feature values, one row per frame.
        frame_shift_s (float): seconds between consecutive frames.
    """
    frames: np.ndarray
    frame_shift_s: float = DEFAULT_FRAME_SHIFT_S

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[1] != N_MELS:
            raise DataError(f"Feature matrix must have shape (T, {N_MELS}), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DataError("Feature matrix contains non-finite values")
        if self.frame_shift_s <= 0:
            raise ConfigError(f"Frame shift must be positive, got {self.frame_shift_s}")
        object.__setattr__(self, 'frames', frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    def with_frames(self, frames):
        return FeatureMatrix(frames, self.frame_shift_s)


@dataclass(frozen=True)
class FbankConfig:
    """
    Filterbank analysis parameters. Window and hop are in milliseconds.
    """
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    low_hz: float = 20.0
    high_hz: float = 7600.0
    log_floor: float = 1e-10
    preemphasis: float = 0.0
    dither: float = 0.0
    dither_seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.window_ms <= 0 or self.hop_ms <= 0:
            raise ConfigError("window_ms and hop_ms must be positive")
        if self.win_length < 2 or self.hop_length < 1:
            raise ConfigError(f"Window of {self.window_ms} ms at {self.sample_rate} Hz is too small")
        if not 0 <= self.low_hz < self.high_hz <= self.sample_rate / 2:
            raise ConfigError(f"Mel range must satisfy 0 <= low_hz < high_hz <= {self.sample_rate / 2}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if not 0.0 <= self.preemphasis < 1.0:
            raise ConfigError("preemphasis must be in [0, 1)")
        if self.dither < 0:
            raise ConfigError("dither must be non-negative")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def win_length(self):
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self):
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_fft(self):
        n = 1
        while n < self.win_length:
            n *= 2
        return n

    @property
    def frame_shift_s(self):
        return self.hop_length / self.sample_rate

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass(frozen=True)
class VadConfig:
    """
    Energy VAD. Frames are kept when their natural-log energy exceeds
    max(absolute_floor, max_log_energy - dynamic_range). 9.21 ~ ln(1e4), i.e. 40 dB.
    """
    absolute_floor: float = -12.0
    dynamic_range: float = math.log(1e4)

    def __post_init__(self):
        if self.dynamic_range < 0:
            raise ConfigError("dynamic_range must be non-negative")


@dataclass(frozen=True)
class FeaturePipelineConfig:
    fbank: FbankConfig = field(default_factory=FbankConfig)
    vad: VadConfig = field(default_factory=VadConfig)
    use_vad: bool = True
    cmn_window_s: float = 3.0
    cmn_before_vad: bool = False
    min_duration_s: float = 2.0

    def __post_init__(self):
        if self.cmn_window_s <= 0:
            raise ConfigError("cmn_window_s must be positive")
        if self.min_duration_s < 0:
            raise ConfigError("min_duration_s must be non-negative")


def hz_to_mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * np.expm1(np.asarray(mel, dtype=np.float64) / 1127.0)


@lru_cache(maxsize=16)
def mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """
    Triangular filters evaluated on the mel axis at every FFT bin.

    Args:
        cfg (FbankConfig): analysis parameters.

    Returns:
        np.ndarray: (80, n_fft // 2 + 1) float64 weights.

    Raises:
        ConfigError: if a filter falls between FFT bins and gets no weight.
    """
    bin_mels = hz_to_mel(np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft)
    edges = np.linspace(hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high_hz), N_MELS + 2)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_mels[None, :] - left) / (center - left)
    falling = (right - bin_mels[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigError(f"Mel filters {empty.tolist()} cover no FFT bin; widen the window or the mel range")
    weights.setflags(write=False)
    return weights


def _frames(wav: Waveform, cfg: FbankConfig) -> np.ndarray:
    """
    Cuts the (pre-processed) signal into overlapping frames, shape (T, win_length).
    """
    if wav.sample_rate != cfg.sample_rate:
        raise ConfigError(f"Waveform sample rate {wav.sample_rate} does not match config {cfg.sample_rate}")
    if wav.samples.size < cfg.win_length:
        raise TooShortError(f"Utterance too short: {wav.samples.size} samples, "
                            f"one window needs {cfg.win_length}")
    signal = wav.samples.astype(cfg.dtype)
    if cfg.dither > 0:
        rng = np.random.default_rng(cfg.dither_seed)
        signal = signal + (cfg.dither * rng.standard_normal(signal.size)).astype(cfg.dtype)
    if cfg.preemphasis > 0:
        signal = np.concatenate([signal[:1], signal[1:] - cfg.dtype(cfg.preemphasis) * signal[:-1]])
    return sliding_window_view(signal, cfg.win_length)[::cfg.hop_length]


def num_frames(n_samples, cfg: FbankConfig):
    """
    Closed-form frame count floor((n - win) / hop) + 1.
    """
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def compute_fbank(wav: Waveform, cfg: FbankConfig = FbankConfig()) -> FeatureMatrix:
    """
    Natural-log mel filterbank energies of the power spectrum.

    Args:
        wav (Waveform): input recording.
        cfg (FbankConfig): analysis parameters.

    Returns:
        FeatureMatrix: (T, 80) with T = floor((n - win) / hop) + 1.

    Raises:
        TooShortError: if the waveform is shorter than one window.
        ConfigError: if the sample rate does not match the config.
    """
    frames = _frames(wav, cfg)
    window = np.hamming(cfg.win_length).astype(cfg.dtype)
    spectrum = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    power = np.maximum(spectrum.real ** 2 + spectrum.imag ** 2, cfg.log_floor)
    mel_energy = power @ mel_filterbank(cfg).T.astype(cfg.dtype)
    return FeatureMatrix(np.log(mel_energy).astype(cfg.dtype), cfg.frame_shift_s)


def compute_frame_log_energy(wav: Waveform, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    """
    Natural-log energy of each raw analysis frame, aligned with compute_fbank rows.
    """
    frames = _frames(wav, cfg)
    energy = np.einsum('ij,ij->i', frames, frames)
    return np.log(np.maximum(energy, cfg.log_floor))


def apply_vad(feats: FeatureMatrix, energies, cfg: VadConfig = VadConfig()) -> FeatureMatrix:
    """
    Keeps the frames whose log-energy is above the VAD threshold, in their original order.

    Raises:
        DataError: if energies and frames disagree in length.
        EmptyAfterVadError: if no frame survives.
    """
    energies = np.asarray(energies, dtype=np.float64)
    if energies.shape != (feats.num_frames,):
        raise DataError(f"Got {energies.size} energies for {feats.num_frames} frames")
    threshold = max(cfg.absolute_floor, float(energies.max()) - cfg.dynamic_range)
    keep = energies > threshold
    if not keep.any():
        raise EmptyAfterVadError(f"All {feats.num_frames} frames are below the VAD threshold {threshold:.2f}")
    logger.debug("VAD kept %d of %d frames", int(keep.sum()), feats.num_frames)
    return feats.with_frames(feats.frames[keep])


def sliding_cmn(feats: FeatureMatrix, window_s: float = 3.0) -> FeatureMatrix:
    """
    Subtracts, per bin, the mean over a window of constant width min(window_frames, T) centred on
    each frame. Near the edges the window is shifted to stay inside the matrix instead of shrinking.
    """
    if window_s <= 0:
        raise ConfigError(f"CMN window must be positive, got {window_s}")
    n = feats.num_frames
    if n == 0:
        raise DataError("Cannot normalize an empty feature matrix")
    width = min(max(1, int(round(window_s / feats.frame_shift_s))), n)
    starts = np.clip(np.arange(n) - width // 2, 0, n - width)
    cumulative = np.zeros((n + 1, feats.frames.shape[1]), dtype=np.float64)
    np.cumsum(feats.frames, axis=0, dtype=np.float64, out=cumulative[1:])
    means = (cumulative[starts + width] - cumulative[starts]) / width
    return feats.with_frames((feats.frames - means).astype(feats.frames.dtype))


def process_waveform(wav: Waveform, cfg: FeaturePipelineConfig = FeaturePipelineConfig()) -> FeatureMatrix:
    """
    Full front-end: duration filter, fbank, VAD and sliding CMN (VAD first unless configured otherwise).
    """
    if wav.duration_s < cfg.min_duration_s:
        raise TooShortError(f"Utterance of {wav.duration_s:.2f}s is shorter than {cfg.min_duration_s}s")
    feats = compute_fbank(wav, cfg.fbank)
    energies = compute_frame_log_energy(wav, cfg.fbank) if cfg.use_vad else None
    if cfg.cmn_before_vad:
        feats = sliding_cmn(feats, cfg.cmn_window_s)
    if cfg.use_vad:
        feats = apply_vad(feats, energies, cfg.vad)
    if not cfg.cmn_before_vad:
        feats = sliding_cmn(feats, cfg.cmn_window_s)
    return feats


def read_wav(path) -> Waveform:
    """
    Loads a WAV file as float amplitudes in [-1, 1]; multi-channel files keep the first channel.
    """
    sample_rate, data = wavfile.read(path)
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        samples = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, int(sample_rate))


class FeatureArchive:
    """
    Ordered mapping from utterance id to FeatureMatrix, the in-memory form of an FTR1 file.
    """

    def __init__(self, entries=None):
        self.entries = dict(entries or {})

    def __len__(self):
        return len(self.entries)

    def __contains__(self, utt_id):
        return utt_id in self.entries

    def __iter__(self):
        return iter(self.entries)

    def ids(self):
        return list(self.entries)

    def items(self):
        return self.entries.items()

    def add(self, utt_id, feats: FeatureMatrix):
        if utt_id in self.entries:
            raise DataError(f"Duplicate utterance id {utt_id!r}")
        self.entries[utt_id] = feats

    def get(self, utt_id) -> FeatureMatrix:
        try:
            return self.entries[utt_id]
        except KeyError:
            raise MissingIdError(utt_id) from None

    def subset(self, ids):
        return FeatureArchive((utt_id, self.get(utt_id)) for utt_id in ids)


def extract_features_dir(wav_dir, cfg: FeaturePipelineConfig = FeaturePipelineConfig(), workers=1, stats=None):
    """
    Extracts features for every *.wav below wav_dir. Utterances that are too short or empty after
    VAD are skipped and counted.

    Args:
        wav_dir (str | Path): root directory; ids are relative paths without extension.
        cfg (FeaturePipelineConfig): front-end parameters.
        workers (int): parallel extraction threads; output order is fixed by the sorted file list.
        stats (PipelineStats, optional): receives skip counters.

    Returns:
        FeatureArchive: the extracted features.
    """
    root = Path(wav_dir)
    if not root.is_dir():
        raise DataError(f"Waveform directory not found: {root}")
    paths = sorted(root.rglob("*.wav"))
    logger.info("Extracting features for %d files under %s", len(paths), root)

    def extract(path):
        try:
            return process_waveform(read_wav(path), cfg), None
        except (TooShortError, EmptyAfterVadError) as e:
            return None, e

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(extract, paths))

    archive = FeatureArchive()
    for path, (feats, error) in zip(paths, results):
        utt_id = path.relative_to(root).with_suffix("").as_posix()
        if error is not None:
            logger.info(f"Skipping {utt_id}: {error.message}")
            if stats is not None:
                stats.record_skip(error)
            continue
        archive.add(utt_id, feats)
    return archive


def write_archive(archive: FeatureArchive, path):
    """
    Writes an FTR1 archive atomically.
    """
    parts = [FEATURE_MAGIC, struct.pack('<I', len(archive))]
    for utt_id, feats in archive.items():
        rows, dims = feats.frames.shape
        parts.append(pack_id(utt_id))
        parts.append(struct.pack('<II', rows, dims))
        parts.append(np.ascontiguousarray(feats.frames, dtype='<f4').tobytes())
    atomic_write_bytes(path, b"".join(parts))
    logger.info("Wrote %d feature matrices to %s", len(archive), os.fspath(path))


def read_archive(path, frame_shift_s=DEFAULT_FRAME_SHIFT_S) -> FeatureArchive:
    """
    Reads an FTR1 archive.

    Raises:
        FormatError: bad magic, truncation, wrong width, duplicate id or non-finite values.
    """
    with open(path, 'rb') as f:
        reader = BinaryReader(f.read())
    reader.magic(FEATURE_MAGIC)
    count = reader.u32("record count")
    archive = FeatureArchive()
    for index in range(count):
        reader.record_index = index
        record_start = reader.offset
        utt_id = reader.utf8(reader.u16("id length"))
        rows, dims = reader.u32("frame count"), reader.u32("feature dim")
        if dims != N_MELS:
            reader.fail(f"Feature dim {dims} != {N_MELS}", offset=record_start)
        values = reader.float32_array(rows * dims, "feature values")
        if utt_id in archive:
            reader.fail(f"Duplicate id {utt_id!r}", offset=record_start)
        archive.add(utt_id, FeatureMatrix(values.reshape(rows, dims), frame_shift_s))
    reader.record_index = None
    reader.expect_end()
    return archive
