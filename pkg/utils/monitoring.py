"""
Monitoring Utility Module for the deblocking service
Provides Prometheus metrics, request statistics and health checks
"""

import os
import time
import logging
from datetime import datetime, timedelta
from typing import Any, Callable, Dict, Optional

from flask import Flask, Response, g, request
from prometheus_client import CONTENT_TYPE_LATEST, Counter, Histogram, generate_latest

# Prometheus metrics
REQUEST_COUNT = Counter('tgjar_requests_total', 'Total requests', ['endpoint', 'method', 'status'])
REQUEST_DURATION = Histogram('tgjar_request_duration_seconds', 'Request duration in seconds', ['endpoint'])
INFERENCE_DURATION = Histogram('tgjar_inference_duration_seconds', 'Model inference duration in seconds',
                               ['operation'])


class PerformanceMonitor:
    """Per-endpoint request statistics"""

    def __init__(self):
        self.start_time = time.time()
        self.error_counts: Dict[str, Dict[str, int]] = {}
        self.endpoint_stats: Dict[str, Dict[str, float]] = {}

        logging.info("Performance Monitor initialized")

    def record_request(self, endpoint: str, method: str, status: int, duration: float):
        """Record one finished request"""
        REQUEST_COUNT.labels(endpoint=endpoint, method=method, status=status).inc()
        REQUEST_DURATION.labels(endpoint=endpoint).observe(duration)

        stats = self.endpoint_stats.setdefault(endpoint, {
            'total_requests': 0,
            'total_duration': 0.0,
            'avg_duration': 0.0,
            'error_count': 0
        })
        stats['total_requests'] += 1
        stats['total_duration'] += duration
        stats['avg_duration'] = stats['total_duration'] / stats['total_requests']
        if status >= 400:
            stats['error_count'] += 1

    def record_error(self, endpoint: str, error: str):
        """Record an error"""
        errors = self.error_counts.setdefault(endpoint, {})
        errors[error] = errors.get(error, 0) + 1

    def get_statistics(self) -> Dict[str, Any]:
        """Get performance statistics"""
        uptime = time.time() - self.start_time
        return {
            'uptime_seconds': uptime,
            'uptime_formatted': str(timedelta(seconds=int(uptime))),
            'total_requests': sum(stats['total_requests'] for stats in self.endpoint_stats.values()),
            'endpoint_statistics': self.endpoint_stats,
            'error_counts': self.error_counts
        }


class HealthMonitor:
    """Registry of named health check callables"""

    def __init__(self):
        self.health_checks: Dict[str, Callable[[], bool]] = {}

        logging.info("Health Monitor initialized")

    def register_health_check(self, name: str, check_function: Callable[[], bool]):
        self.health_checks[name] = check_function
        logging.info(f"Registered health check: {name}")

    def get_health_status(self) -> Dict[str, Any]:
        """Run all checks and summarize"""
        checks = {}
        for name, check in self.health_checks.items():
            try:
                checks[name] = {'status': 'healthy' if check() else 'unhealthy'}
            except Exception as e:
                checks[name] = {'status': 'error', 'error': str(e)}

        statuses = [c['status'] for c in checks.values()]
        if 'error' in statuses:
            overall_status = 'critical'
        elif 'unhealthy' in statuses:
            overall_status = 'warning'
        else:
            overall_status = 'healthy'

        return {
            'status': overall_status,
            'timestamp': datetime.now().isoformat(),
            'checks': checks
        }


def observe_inference(operation: str, duration: float):
    INFERENCE_DURATION.labels(operation=operation).observe(duration)


def setup_monitoring(app: Flask, model: Optional[Any] = None):
    """Attach /metrics, /health, /stats and per-request timing to a Flask app"""
    performance_monitor = PerformanceMonitor()
    health_monitor = HealthMonitor()
    app.extensions['performance_monitor'] = performance_monitor

    @app.before_request
    def _start_timer():
        g.request_start = time.perf_counter()

    @app.after_request
    def _record(response):
        start = g.pop('request_start', None)
        if start is not None and request.endpoint:
            performance_monitor.record_request(request.endpoint, request.method, response.status_code,
                                               time.perf_counter() - start)
        return response

    @app.route('/metrics')
    def metrics():
        """Prometheus metrics endpoint"""
        try:
            return Response(generate_latest(), mimetype=CONTENT_TYPE_LATEST)
        except Exception as e:
            logging.error(f"Error serving metrics: {str(e)}")
            return Response("Error generating metrics", status=500)

    @app.route('/health')
    def health():
        """Health check endpoint"""
        return health_monitor.get_health_status()

    @app.route('/stats')
    def stats():
        """Performance statistics endpoint"""
        return {
            'performance': performance_monitor.get_statistics(),
            'model': model.get_statistics() if model is not None else {}
        }

    def check_system_health():
        os.listdir('.')
        return True

    health_monitor.register_health_check('system', check_system_health)
    if model is not None:
        health_monitor.register_health_check('model', model.is_healthy)

    logging.info("Monitoring setup completed")
    return performance_monitor
