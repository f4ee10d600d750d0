"""Deterministic whole-cluster simulation: virtual time, a lossy
network, crashing nodes, and invariant monitors."""
