"""Verification suites, experiment runner, reports and the command line."""
