#!/usr/bin/env python3
"""
Performance Monitoring Module for the Cold-Start Audience Recommender
Tracks pipeline stage durations and process memory usage.
"""

import time
import psutil
import logging
from datetime import timedelta
from typing import Dict
from functools import wraps


class PerformanceMonitor:
    def __init__(self):
        self.metrics = {
            'stages': {},
            'system_resources': {}
        }
        self.start_time = time.time()
        self.process = psutil.Process()
        self.logger = logging.getLogger('PerformanceMonitor')

    def track_stage(self, stage: str, duration: float, failed: bool = False):
        """Track one run of a pipeline stage"""
        if stage not in self.metrics['stages']:
            self.metrics['stages'][stage] = {
                'count': 0,
                'total_duration': 0,
                'avg_duration': 0,
                'errors': 0
            }

        entry = self.metrics['stages'][stage]
        entry['count'] += 1
        entry['total_duration'] += duration
        entry['avg_duration'] = entry['total_duration'] / entry['count']
        if failed:
            entry['errors'] += 1

        self.logger.debug(f"Stage: {stage} - {duration:.3f}s - {'failed' if failed else 'ok'}")

    def update_system_resources(self):
        """Update process resource metrics"""
        memory = self.process.memory_info()
        self.metrics['system_resources'] = {
            'rss_mb': memory.rss / (1024 * 1024),
            'cpu_percent': self.process.cpu_percent(interval=None),
            'uptime_seconds': time.time() - self.start_time
        }

    def get_performance_report(self) -> Dict:
        """Generate performance report"""
        self.update_system_resources()
        return {
            'uptime': str(timedelta(seconds=int(time.time() - self.start_time))),
            'system_resources': self.metrics['system_resources'],
            'stages': self.metrics['stages']
        }

    def log_performance_summary(self):
        """Log performance summary"""
        report = self.get_performance_report()
        stages = ", ".join(
            f"{name}: {entry['count']}x {entry['total_duration']:.2f}s"
            for name, entry in sorted(report['stages'].items())
        )
        self.logger.info(f"Performance Summary - Uptime: {report['uptime']}, "
                         f"RSS: {report['system_resources']['rss_mb']:.1f} MB, "
                         f"Stages: {stages or 'none'}")

    def reset(self):
        self.metrics['stages'].clear()
        self.start_time = time.time()

    def stage(self, stage_name: str):
        """Decorator to time a pipeline stage"""
        def decorator(func):
            @wraps(func)
            def wrapper(*args, **kwargs):
                start_time = time.perf_counter()
                try:
                    result = func(*args, **kwargs)
                except Exception:
                    self.track_stage(stage_name, time.perf_counter() - start_time, failed=True)
                    raise
                self.track_stage(stage_name, time.perf_counter() - start_time)
                return result
            return wrapper
        return decorator


# Global performance monitor instance
performance_monitor = PerformanceMonitor()
