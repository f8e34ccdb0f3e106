import numpy as np

from distillkit.statsModule import PipelineStats, ResourceMonitor
from utils.exceptions import EmptyAfterVadError, MissingIdError, TooShortError


def test_resource_monitor_counts_cpu_time_of_busy_work():
    print("=== PHASE 1: Measuring a CPU-bound loop ===")
    monitor = ResourceMonitor()
    before = monitor.cpu_seconds()
    matrix = np.random.default_rng(0).standard_normal((200, 200))
    for _ in range(200):
        matrix = np.tanh(matrix @ matrix.T / 200.0)
    summary = monitor.log_statistics()
    print(f"Usage: {summary}")

    print("=== PHASE 2: Checking the reported fields ===")
    assert monitor.cpu_seconds() > before
    assert summary['cpu_time_s'] > 0.0
    assert summary['wall_time_s'] > 0.0
    assert summary['cpu_utilization'] == summary['cpu_time_s'] / summary['wall_time_s']
    assert 0.0 < summary['rss_mb'] <= summary['peak_rss_mb']


def test_resource_monitor_keeps_peak_memory():
    monitor = ResourceMonitor()
    block = np.ones(16 * 1024 * 1024 // 8)
    during = monitor.sample()
    del block
    assert monitor.peak_rss_mb >= during
    assert monitor.get_statistics_summary()['peak_rss_mb'] >= during


def test_pipeline_stats_counts_skips_by_reason():
    stats = PipelineStats()
    stats.record_processed(3)
    stats.record_warp_skipped()
    stats.record_skip(MissingIdError("no teacher for utt1"))
    stats.record_skip(TooShortError("utt2 is too short"))
    stats.record_skip(EmptyAfterVadError("utt3 is silent"))
    summary = stats.get_statistics_summary()
    assert summary == {'processed': 3, 'skipped': 3, 'skipped_missing_teacher': 1, 'skipped_too_short': 1,
                       'skipped_empty_vad': 1, 'warps_skipped': 1}
    for _ in range(12):
        stats.record_skip(TooShortError("again"))
    assert len(stats.skip_log) == 10
