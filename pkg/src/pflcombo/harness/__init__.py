"""Configuration, experiment orchestration, reports and self-checks."""
