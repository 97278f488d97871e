"""Peer and probe messages. Every message carries ``src`` and ``dst`` ids."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class AppendEntries:
    src: int
    dst: int
    term: int
    prev_index: int
    prev_term: int
    entries: tuple
    leader_commit: int


@dataclass(frozen=True)
class AppendReply:
    src: int
    dst: int
    term: int
    success: bool
    match_index: int
    # on failure: the index the leader should retry from
    conflict_index: int = 0


@dataclass(frozen=True)
class RequestVote:
    src: int
    dst: int
    term: int
    last_index: int
    last_term: int


@dataclass(frozen=True)
class VoteReply:
    src: int
    dst: int
    term: int
    granted: bool


@dataclass(frozen=True)
class InstallSnapshot:
    src: int
    dst: int
    term: int
    last_index: int
    last_term: int
    data: bytes


@dataclass(frozen=True)
class Probe:
    src: int
    dst: int
    seq: int
    sent_us: int


@dataclass(frozen=True)
class ProbeReply:
    src: int
    dst: int
    seq: int
    sent_us: int
    applied_index: int
    is_leader: bool


PEER_MESSAGES = (AppendEntries, AppendReply, RequestVote, VoteReply, InstallSnapshot, Probe, ProbeReply)
