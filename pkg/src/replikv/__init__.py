"""Replicated key-value database with Paxos quorums and log-structured storage."""

__version__ = "0.1.0"
