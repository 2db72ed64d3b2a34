"""
⏱️ PickSight Performance Monitor
Per-stage latency tracking for the perception pipeline (process + bench).
"""

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, asdict
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np


@dataclass
class StageMetrics:
    """Latency of one pipeline stage run"""
    stage: str
    latency_ms: float
    frame_id: Optional[str] = None
    timestamp: Optional[str] = None

    def __post_init__(self):
        if self.timestamp is None:
            self.timestamp = datetime.now().isoformat()


class PerformanceMonitor:
    """
    Collects stage latencies across one or many frames.
    Summaries report count, mean, p95, min and max in milliseconds.
    """

    def __init__(self):
        self.metrics: Dict[str, List[StageMetrics]] = {}
        self.session_start = time.time()
        self.frame_id: Optional[str] = None

    @contextmanager
    def stage(self, name: str):
        """Time the enclosed block as stage ``name`` (failed runs are recorded too)."""
        start = time.perf_counter()
        try:
            yield
        finally:
            self._store_metric(StageMetrics(
                stage=name,
                latency_ms=(time.perf_counter() - start) * 1000,
                frame_id=self.frame_id,
            ))

    def _store_metric(self, metric: StageMetrics):
        self.metrics.setdefault(metric.stage, []).append(metric)

    def latencies(self, stage: str) -> List[float]:
        return [m.latency_ms for m in self.metrics.get(stage, [])]

    def get_session_summary(self) -> Dict[str, Any]:
        """Per-stage aggregate over everything recorded so far"""
        summary = {
            'session_duration_s': round(time.time() - self.session_start, 3),
            'stages': {},
        }
        for stage, metrics_list in self.metrics.items():
            if not metrics_list:
                continue
            lat = np.array([m.latency_ms for m in metrics_list])
            summary['stages'][stage] = {
                'count': int(lat.size),
                'mean_ms': round(float(lat.mean()), 3),
                'p95_ms': round(float(np.percentile(lat, 95)), 3),
                'min_ms': round(float(lat.min()), 3),
                'max_ms': round(float(lat.max()), 3),
            }
        return summary

    def format_table(self, title: str = "Stage timing") -> str:
        """Plain-text timing report"""
        stages = self.get_session_summary()['stages']
        header = f"{'stage':<18}{'count':>7}{'mean_ms':>11}{'p95_ms':>11}{'min_ms':>11}{'max_ms':>11}"
        lines = [title, "=" * len(header), header, "-" * len(header)]
        for stage, s in stages.items():
            lines.append(
                f"{stage:<18}{s['count']:>7}{s['mean_ms']:>11.3f}{s['p95_ms']:>11.3f}"
                f"{s['min_ms']:>11.3f}{s['max_ms']:>11.3f}"
            )
        if stages:
            total = sum(s['mean_ms'] for s in stages.values())
            lines.append("-" * len(header))
            lines.append(f"{'sum of means':<18}{'':>7}{total:>11.3f}")
        return "\n".join(lines) + "\n"

    def export_metrics(self) -> str:
        """Export all metrics as JSON string"""
        export_data = {
            'session_summary': self.get_session_summary(),
            'detailed_metrics': {
                stage: [asdict(m) for m in metrics_list]
                for stage, metrics_list in self.metrics.items()
            },
        }
        return json.dumps(export_data, indent=2)

