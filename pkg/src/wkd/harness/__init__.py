"""Desk-scale experiment harness: synthetic data, configs, training runs, CLI."""
