"""Shared helpers for the traffic identification engine."""
