"""Desk-scale personalized federated learning simulator."""
