"""
Student-side input construction: random temporal crops and SpecAugment-style warping and masking.
Teacher inputs never pass through here.
"""
from dataclasses import dataclass

import numpy as np

from distillkit.featuresModule import FeatureMatrix
from utils.exceptions import ConfigError, DataError
from utils.logger_config import logger


@dataclass(frozen=True)
class AugmentConfig:
    """
    Crop lengths are in seconds, mask and warp sizes in bins/frames. A time mask is at most
    min(max_time_mask_frames, max_time_mask_ratio * T) frames wide. rng_seed is mixed into every
    per-sample stream next to the run seed.
    """
    crop_min_s: float = 2.0
    crop_max_s: float = 3.0
    n_freq_masks: int = 2
    max_freq_mask_bins: int = 10
    n_time_masks: int = 2
    max_time_mask_frames: int = 20
    max_time_mask_ratio: float = 0.05
    max_warp_frames: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.crop_min_s <= self.crop_max_s:
            raise ConfigError(f"Need 0 < crop_min_s <= crop_max_s, got {self.crop_min_s}, {self.crop_max_s}")
        for name in ('n_freq_masks', 'max_freq_mask_bins', 'n_time_masks', 'max_time_mask_frames', 'max_warp_frames'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.max_time_mask_ratio <= 1.0:
            raise ConfigError("max_time_mask_ratio must be in [0, 1]")

    def crop_range_frames(self, frame_shift_s):
        low = max(1, int(round(self.crop_min_s / frame_shift_s)))
        high = max(low, int(round(self.crop_max_s / frame_shift_s)))
        return low, high


def worker_rng(seed, *keys):
    """
    Independent random stream for (seed, keys...), e.g. (seed, epoch, sample position).
    Streams do not depend on which worker draws them.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def crop_frames(feats: FeatureMatrix, length, start=0) -> FeatureMatrix:
    """
    Contiguous slice of `length` frames beginning at `start`; shorter inputs are tiled along time.
    """
    n = feats.num_frames
    if n == 0:
        raise DataError("Cannot crop an empty feature matrix")
    if n >= length:
        if not 0 <= start <= n - length:
            raise DataError(f"Crop start {start} out of range for {n} frames and length {length}")
        return feats.with_frames(feats.frames[start:start + length])
    return feats.with_frames(np.take(feats.frames, np.arange(length) % n, axis=0))


def random_crop(feats: FeatureMatrix, cfg: AugmentConfig, rng: np.random.Generator) -> FeatureMatrix:
    """
    Crop of uniformly drawn length in [crop_min, crop_max] frames at a uniformly drawn start.
    """
    low, high = cfg.crop_range_frames(feats.frame_shift_s)
    length = int(rng.integers(low, high + 1))
    if feats.num_frames < length:
        return crop_frames(feats, length)
    start = int(rng.integers(0, feats.num_frames - length + 1))
    return crop_frames(feats, length, start)


def time_warp(frames: np.ndarray, pivot, target) -> np.ndarray:
    """
    Moves frame `pivot` to position `target` and linearly resamples both segments along time.
    The first and last frames stay where they are.
    """
    n = frames.shape[0]
    if not (0 < pivot < n - 1 and 0 < target < n - 1):
        raise DataError(f"Warp pivot {pivot} -> {target} must lie strictly inside {n} frames")
    positions = np.arange(n, dtype=np.float64)
    source = np.where(
        positions <= target,
        positions * pivot / target,
        pivot + (positions - target) * (n - 1 - pivot) / (n - 1 - target),
    )
    lower = np.floor(source).astype(np.int64)
    upper = np.minimum(lower + 1, n - 1)
    frac = (source - lower)[:, None]
    warped = (1.0 - frac) * frames[lower] + frac * frames[upper]
    return warped.astype(frames.dtype)


def warp_points(n, warp, rng: np.random.Generator):
    """
    Pivot drawn from [warp, n - warp] inclusive and its displaced target; both are kept strictly
    inside the n frames.
    """
    pivot = int(np.clip(rng.integers(warp, n - warp, endpoint=True), 1, n - 2))
    target = int(np.clip(pivot + int(rng.integers(-warp, warp, endpoint=True)), 1, n - 2))
    return pivot, target


def mask_frequency(frames: np.ndarray, start, width) -> np.ndarray:
    masked = frames.copy()
    masked[:, start:start + width] = 0.0
    return masked


def mask_time(frames: np.ndarray, start, width) -> np.ndarray:
    masked = frames.copy()
    masked[start:start + width, :] = 0.0
    return masked


def spec_augment(feats: FeatureMatrix, cfg: AugmentConfig, rng: np.random.Generator, stats=None) -> FeatureMatrix:
    """
    Time warp, then frequency masks, then time masks. Masked cells are set to 0.0, which is the
    mean of CMN-normalized input. Output shape equals input shape.

    Args:
        feats (FeatureMatrix): cropped student input.
        cfg (AugmentConfig): augmentation parameters.
        rng (np.random.Generator): caller-owned random stream.
        stats (PipelineStats, optional): counts warps skipped on too-short input.
    """
    frames = feats.frames
    n, dims = frames.shape
    warp = cfg.max_warp_frames
    if warp > 0:
        if n < 2 * warp + 2:
            logger.debug(f"Skipping time warp on {n} frames (need {2 * warp + 2})")
            if stats is not None:
                stats.record_warp_skipped()
        else:
            pivot, target = warp_points(n, warp, rng)
            frames = time_warp(frames, pivot, target)

    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, min(cfg.max_freq_mask_bins, dims) + 1))
        start = int(rng.integers(0, dims - width + 1))
        frames = mask_frequency(frames, start, width)

    max_time_width = min(cfg.max_time_mask_frames, int(cfg.max_time_mask_ratio * n))
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, max_time_width + 1))
        start = int(rng.integers(0, n - width + 1))
        frames = mask_time(frames, start, width)

    return feats.with_frames(frames)


def augment_for_student(feats: FeatureMatrix, cfg: AugmentConfig, rng: np.random.Generator, stats=None):
    """
    Crop followed by SpecAugment, the full student input path.
    """
    return spec_augment(random_crop(feats, cfg, rng), cfg, rng, stats)
