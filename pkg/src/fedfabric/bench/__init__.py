"""Telemetry, latency analysis, scenario orchestration and reports."""
