"""Log-structured storage: redo log, sorted chunks, shards, recovery."""
