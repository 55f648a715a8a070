"""Run harness: configuration, dataset synthesis, training drivers,
benchmarks, property checks, and the CLI."""

from .config import RunConfig, load_config  # noqa: F401
