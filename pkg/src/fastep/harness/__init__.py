"""Experiment harness: model builders, runs, artifacts and the ep command."""
