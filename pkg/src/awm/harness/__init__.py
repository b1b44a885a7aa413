"""Experiment harness: config, persistence, pipelines, baselines, CLI."""
