"""maxwellite: an in-place page store, a cooperative single-threaded runtime,
Raft replication with an embedded log store, and a hot-account benchmark."""

__version__ = "0.1.0"
