"""Replication: Raft with the log in a pagestore, batching, strong/weak reads."""
from .checker import SafetyChecker
from .log import ClientRequest, RaftLog, RLogEntry, decode_batch, encode_batch
from .messages import (AppendEntries, AppendReply, InstallSnapshot, Probe, ProbeReply, RequestVote,
                       VoteReply)
from .node import (BatchBuffer, NoEligibleReplica, NotLeader, ProbeTable, RaftConfig, RaftNode, Role,
                   SafetyError, ShutdownError, probe_tick)

__all__ = [
    "AppendEntries", "AppendReply", "BatchBuffer", "ClientRequest", "InstallSnapshot", "NoEligibleReplica",
    "NotLeader", "Probe", "ProbeReply", "ProbeTable", "RLogEntry", "RaftConfig", "RaftLog", "RaftNode",
    "RequestVote", "Role", "SafetyChecker", "SafetyError", "ShutdownError", "VoteReply", "decode_batch",
    "encode_batch", "probe_tick",
]
