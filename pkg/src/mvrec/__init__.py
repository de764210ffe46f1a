"""Multi-view recommendation framework."""
