"""Command-line harness, run configuration and end-to-end pipelines."""
