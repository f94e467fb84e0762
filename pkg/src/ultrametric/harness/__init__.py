"""Experiment configuration, sweeps, plots and the command line."""
