import socket
import struct
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from maxwellite.compute import Result, Status
from maxwellite.consensus.log import ClientRequest, RLogEntry
from maxwellite.consensus.messages import (AppendEntries, AppendReply, InstallSnapshot, Probe, ProbeReply,
                                           RequestVote, VoteReply)
from maxwellite.netproto import (MAX_FRAME, PROTOCOL_VERSION, AsyncConn, BlockingConn, ClientCall, FrameDecoder,
                                 FrameType, Hello, MetaError, ProtocolError, Redirect, Response, Role, Unreachable,
                                 accept_loop, decode_frames, decode_message, encode_frame, encode_message,
                                 json_frame, listen_socket, message_frame, meta_call, server_handshake)
from maxwellite.runtime import Loop

u64 = st.integers(0, 2 ** 64 - 1)
u32 = st.integers(0, 2 ** 32 - 1)
small = st.integers(0, 2 ** 40)
blob = st.binary(max_size=200)

requests = st.builds(ClientRequest, small, small, blob, small, st.booleans())
entries = st.builds(RLogEntry, small, small, st.lists(requests, max_size=4).map(tuple))

messages = st.one_of(
    st.builds(Hello, st.integers(0, 65535), st.sampled_from(list(Role)), st.integers(-2 ** 63, 2 ** 63 - 1)),
    st.builds(AppendEntries, small, small, small, small, small, st.lists(entries, max_size=4).map(tuple), small),
    st.builds(AppendReply, small, small, small, st.booleans(), small, small),
    st.builds(RequestVote, small, small, small, small, small),
    st.builds(VoteReply, small, small, small, st.booleans()),
    st.builds(InstallSnapshot, small, small, small, small, small, blob),
    st.builds(Probe, small, small, small, small),
    st.builds(ProbeReply, small, small, small, small, small, st.booleans()),
    st.builds(ClientCall, st.sampled_from([FrameType.CLIENT_PROPOSE, FrameType.CLIENT_READ_STRONG,
                                           FrameType.CLIENT_READ_WEAK]),
              u64, u64, st.text(max_size=40).filter(lambda s: len(s.encode()) < 256), blob),
    st.builds(Response, u64, st.builds(Result, st.sampled_from(list(Status)), blob)),
    st.builds(Redirect, u64, st.one_of(st.none(), st.integers(0, 2 ** 62)), st.sampled_from(["", "127.0.0.1", "10.0.0.7"]),
              st.integers(0, 65535)),
)


@settings(max_examples=400, deadline=None)
@given(messages)
def test_every_message_roundtrips(msg):
    ftype, payload = encode_message(msg)
    [(t, p)] = decode_frames(encode_frame(ftype, payload))
    assert t is ftype and decode_message(t, p) == msg


@settings(max_examples=100, deadline=None)
@given(st.lists(messages, min_size=1, max_size=6), st.integers(1, 17))
def test_stream_decoding_is_chunking_independent(msgs, chunk):
    data = b"".join(message_frame(m) for m in msgs)
    dec, out = FrameDecoder(), []
    for i in range(0, len(data), chunk):
        dec.feed(data[i:i + chunk])
        while (f := dec.next()) is not None:
            out.append(decode_message(*f))
    assert out == msgs and not dec.buf


def test_header_layout():
    frame = encode_frame(FrameType.HELLO, struct.pack("<HBq", PROTOCOL_VERSION, 0, 7))
    assert frame[:6] == struct.pack("<IH", 11, 1)
    assert decode_message(FrameType.HELLO, frame[6:]) == Hello(PROTOCOL_VERSION, Role.CLIENT, 7)


def test_oversized_and_unknown_frames_rejected():
    with pytest.raises(ProtocolError):
        encode_frame(FrameType.ERROR, b"\0" * (MAX_FRAME + 1))
    dec = FrameDecoder()
    dec.feed(struct.pack("<IH", MAX_FRAME + 1, FrameType.RESPONSE))
    with pytest.raises(ProtocolError):
        dec.next()
    dec = FrameDecoder()
    dec.feed(struct.pack("<IH", 0, 4242))
    with pytest.raises(ProtocolError):
        dec.next()
    with pytest.raises(ProtocolError):
        decode_frames(encode_frame(FrameType.HELLO, b"\0" * 11)[:-1])


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(list(FrameType)), st.binary(max_size=64))
def test_garbage_payloads_never_crash(ftype, payload):
    try:
        decode_message(ftype, payload)
    except ProtocolError:
        pass


def _serve(handler):
    """Run an async server on a background loop; returns (port, stop)."""
    ready = threading.Event()
    box = {}

    def main():
        loop = Loop()
        sock = listen_socket("127.0.0.1", 0)
        box["port"] = sock.getsockname()[1]
        box["loop"] = loop
        loop.call_soon(lambda: loop.spawn(accept_loop(sock, handler)))
        ready.set()
        loop.run(until_idle=False)
        sock.close()
        loop.close()

    t = threading.Thread(target=main, daemon=True)
    t.start()
    ready.wait(5)
    return box["port"], lambda: (box["loop"].post(box["loop"].stop), t.join(5))


def test_handshake_and_echo_over_tcp():
    async def handler(conn: AsyncConn):
        try:
            await server_handshake(conn, 9)
            while True:
                ftype, payload = await conn.recv()
                msg = decode_message(ftype, payload)
                conn.send(Response(msg.request_id, Result(Status.OK, msg.args)))
        except (ConnectionError, ProtocolError):
            conn.close()

    port, stop = _serve(handler)
    try:
        c = BlockingConn("127.0.0.1", port)
        assert c.server_id == 9
        big = b"x" * (3 * 1024 * 1024)  # exercises partial writes on the server side
        for i, payload in enumerate([b"a", big, b"c"]):
            c.send(ClientCall(FrameType.CLIENT_PROPOSE, i, 1, "echo", payload))
            resp = decode_message(*c.recv(10))
            assert resp == Response(i, Result(Status.OK, payload))
        c.close()
    finally:
        stop()


def test_version_mismatch_closes_connection():
    async def handler(conn):
        try:
            await server_handshake(conn, 1)
        except (ConnectionError, ProtocolError):
            pass

    port, stop = _serve(handler)
    try:
        s = socket.create_connection(("127.0.0.1", port), timeout=5)
        s.sendall(message_frame(Hello(PROTOCOL_VERSION + 1, Role.CLIENT, 0)))
        data = b""
        while chunk := s.recv(4096):
            data += chunk
        [(ftype, payload)] = decode_frames(data)
        assert ftype is FrameType.ERROR and decode_message(ftype, payload)["kind"] == "version"
        s.close()
    finally:
        stop()


def test_unknown_frame_type_closes_connection():
    async def handler(conn):
        try:
            await server_handshake(conn, 1)
            await conn.recv()
        except (ConnectionError, ProtocolError):
            conn.close()

    port, stop = _serve(handler)
    try:
        c = BlockingConn("127.0.0.1", port)
        c.send_raw(struct.pack("<IH", 0, 777))
        with pytest.raises(Unreachable):
            c.recv(5)
    finally:
        stop()


def test_meta_unreachable():
    port = listen_socket("127.0.0.1", 0)
    addr = "127.0.0.1:%d" % port.getsockname()[1]
    port.close()
    t0 = time.monotonic()
    with pytest.raises(Unreachable):
        meta_call(addr, "discover", name="x", timeout=0.5)
    assert time.monotonic() - t0 < 5


def test_json_frames():
    [(t, p)] = decode_frames(json_frame(FrameType.META_REQUEST, {"op": "list"}))
    assert decode_message(t, p) == {"op": "list"}
    assert issubclass(MetaError, Exception)
