"""Tunables with desk-scale defaults.

Every size and interval the system uses lives here so tests can shrink
the world without touching code.  Defaults target laptop-sized runs, not
production hardware.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields


@dataclass
class Tunables:
    # data model limits
    max_key_size: int = 4096
    max_value_size: int = 1024 * 1024

    # storage engine
    data_page_size: int = 4 * 1024
    chunk_size_target: int = 256 * 1024
    shard_split_size: int = 2 * 1024 * 1024
    log_segment_size: int = 256 * 1024
    redo_log_cap: int = 4 * 1024 * 1024
    log_retention_bytes: int = 4 * 1024 * 1024
    bloom_fp_target: float = 0.10
    merge_min_chunks: int = 10
    merge_pause_reads_per_s: float = 1000.0
    page_cache_pages: int = 256
    read_ahead_pages: int = 4

    # replication
    max_round_value_size: int = 64 * 1024
    round_retry_ms: float = 500.0
    backoff_min_ms: float = 50.0
    backoff_max_ms: float = 200.0
    catchup_poll_ms: float = 500.0
    activation_lag_rounds: int = 2

    # leases and failure detection
    master_lease_ms: float = 3000.0
    primary_lease_ms: float = 2500.0
    lease_acceptor_slack: float = 1.1
    heartbeat_interval_ms: float = 1000.0
    heartbeat_timeout_ms: float = 3000.0
    conn_heartbeat_interval_ms: float = 1000.0
    conn_heartbeat_timeout_ms: float = 3000.0
    lock_lease_ms: float = 3000.0
    lock_wait_ms: float = 1000.0

    # client
    global_timeout_ms: float = 10000.0
    connect_timeout_ms: float = 1000.0
    sequence_batch: int = 1000
    dedup_window: int = 1024

    def override(self, **kwargs: object) -> "Tunables":
        known = {f.name for f in fields(self)}
        for name in kwargs:
            if name not in known:
                raise ValueError(f"unknown tunable {name!r}")
        merged = {f.name: getattr(self, f.name) for f in fields(self)}
        merged.update(kwargs)  # type: ignore[arg-type]
        return Tunables(**merged)  # type: ignore[arg-type]


DEFAULT_TUNABLES = Tunables()
