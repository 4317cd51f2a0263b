"""Test package for the traffic identification engine."""
