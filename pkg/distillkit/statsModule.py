"""
Run statistics for the distillation pipeline.

Counters for everything the pipeline drops or skips silently (warps on short crops, utterances
without a teacher embedding, files rejected by the front-end), plus process resource usage.
"""
import threading
import time

import psutil

from distillkit.Constants import BYTES_PER_MB
from utils.exceptions import EmptyAfterVadError, MissingIdError, TooShortError
from utils.logger_config import logger


class PipelineStats:
    """
    Statistics tracking class for skipped work.

    Tracks:
    - utterances processed
    - utterances skipped by reason (missing teacher, too short, empty after VAD)
    - time warps skipped because the crop was too short
    """

    def __init__(self):
        """Initialize the counters."""
        self._lock = threading.Lock()
        self.processed = 0
        self.skipped_missing_teacher = 0
        self.skipped_too_short = 0
        self.skipped_empty_vad = 0
        self.warps_skipped = 0
        self.skip_log = []

    def record_processed(self, count=1):
        with self._lock:
            self.processed += count

    def record_warp_skipped(self):
        with self._lock:
            self.warps_skipped += 1

    def record_skip(self, error):
        """Record an utterance skipped because of the given error."""
        with self._lock:
            if isinstance(error, MissingIdError):
                self.skipped_missing_teacher += 1
            elif isinstance(error, EmptyAfterVadError):
                self.skipped_empty_vad += 1
            elif isinstance(error, TooShortError):
                self.skipped_too_short += 1
            # Keep only the last 10 reasons
            self.skip_log.append(getattr(error, 'message', str(error)))
            del self.skip_log[:-10]

    @property
    def skipped(self):
        return self.skipped_missing_teacher + self.skipped_too_short + self.skipped_empty_vad

    def get_statistics_summary(self):
        """Get a summary of the counters as a dictionary."""
        return {
            'processed': self.processed,
            'skipped': self.skipped,
            'skipped_missing_teacher': self.skipped_missing_teacher,
            'skipped_too_short': self.skipped_too_short,
            'skipped_empty_vad': self.skipped_empty_vad,
            'warps_skipped': self.warps_skipped,
        }

    def log_statistics(self):
        """Log the counters at SUMMARY level."""
        logger.summary("=== PIPELINE STATISTICS ===")
        logger.summary(f"Utterances processed: {self.processed}")
        logger.summary(f"Utterances skipped: {self.skipped} (missing teacher: {self.skipped_missing_teacher}, "
                       f"too short: {self.skipped_too_short}, empty after VAD: {self.skipped_empty_vad})")
        logger.summary(f"Time warps skipped: {self.warps_skipped}")
        if self.skip_log:
            logger.summary("Recent skip reasons:")
            for reason in self.skip_log:
                logger.summary(f"  {reason}")
        logger.summary("=== END OF PIPELINE STATISTICS ===")


class ResourceMonitor:
    """
    CPU time and resident memory of this process since the monitor was created. Worker threads count
    towards the process CPU time.

    Attributes:
        peak_rss_mb (float): largest resident set size seen by `sample`.
    """

    def __init__(self):
        self._process = psutil.Process()
        self._cpu_start = self.cpu_seconds()
        self._wall_start = time.perf_counter()
        self.peak_rss_mb = 0.0
        self.sample()

    def cpu_seconds(self):
        """User plus system CPU seconds of the process so far."""
        times = self._process.cpu_times()
        return times.user + times.system

    def sample(self):
        """Reads the current resident set size and keeps the peak; returns the current value in MB."""
        rss_mb = self._process.memory_info().rss / BYTES_PER_MB
        self.peak_rss_mb = max(self.peak_rss_mb, rss_mb)
        return rss_mb

    def get_statistics_summary(self):
        rss_mb = self.sample()
        cpu = self.cpu_seconds() - self._cpu_start
        wall = time.perf_counter() - self._wall_start
        return {
            'cpu_time_s': cpu,
            'wall_time_s': wall,
            # above 1.0 when several threads were busy
            'cpu_utilization': cpu / wall if wall > 0 else 0.0,
            'rss_mb': rss_mb,
            'peak_rss_mb': self.peak_rss_mb,
        }

    def log_statistics(self):
        """Logs the usage at SUMMARY level and returns it."""
        summary = self.get_statistics_summary()
        logger.summary(f"CPU time: {summary['cpu_time_s']:.2f} s over {summary['wall_time_s']:.2f} s wall "
                       f"({summary['cpu_utilization']:.2f} cores busy on average)")
        logger.summary(f"Resident memory: {summary['rss_mb']:.1f} MB, peak sampled {summary['peak_rss_mb']:.1f} MB")
        return summary
