"""Experiment harness: configuration, simulation runs, live services and the CLI."""
