"""Experiment harness: datasets, configs, runs, reports and the CLI."""
