import socket
import threading

import pytest

from entkd.channel import ChannelClosed, MessageIO, PairChannel, PeerEndpoint
from entkd.wire import Message, MsgType, ProtocolError


def test_pair_channel_roundtrip():
    chan = PairChannel()
    chan.a.send(Message(MsgType.HELLO, b"hi"))
    chan.b.send(Message(MsgType.BYE))
    assert chan.b.recv() == Message(MsgType.HELLO, b"hi")
    assert chan.a.recv() == Message(MsgType.BYE)


def test_pair_channel_transcript():
    log = []
    chan = PairChannel(log)
    chan.a.send(Message(MsgType.TIMING, b"x"))
    chan.b.send(Message(MsgType.METRICS, b"y"))
    chan.b.recv()
    assert ("a", Message(MsgType.TIMING, b"x")) in log
    assert ("b", Message(MsgType.METRICS, b"y")) in log


def test_pair_channel_close_and_timeout():
    chan = PairChannel()
    chan.a.close()
    with pytest.raises(ChannelClosed):
        chan.b.recv()
    with pytest.raises(ProtocolError):
        chan.a.recv(timeout=0.05)


def test_peer_endpoint_holdback_order():
    chan = PairChannel()
    peer = PeerEndpoint(chan.b)
    chan.a.send(Message(MsgType.TIMING, b"t1"))
    chan.a.send(Message(MsgType.EC_PARITY, b"p1"))
    chan.a.send(Message(MsgType.TIMING, b"t2"))
    chan.a.send(Message(MsgType.EC_PARITY, b"p2"))
    # typed receive skips over the timing traffic without reordering it
    assert peer.recv_type(MsgType.EC_PARITY).payload == b"p1"
    assert peer.recv_type(MsgType.EC_PARITY).payload == b"p2"
    assert peer.recv().payload == b"t1"
    assert peer.recv().payload == b"t2"


def test_peer_endpoint_mixed_recv():
    chan = PairChannel()
    peer = PeerEndpoint(chan.b)
    chan.a.send(Message(MsgType.TIMING, b"t1"))
    chan.a.send(Message(MsgType.BYE))
    # plain recv drains in arrival order even after a typed pull parked t1
    assert peer.recv_type(MsgType.BYE).type == MsgType.BYE
    assert peer.recv().payload == b"t1"


def _io_pair():
    s1, s2 = socket.socketpair()
    return MessageIO(s1), MessageIO(s2)


def test_message_io_roundtrip():
    io1, io2 = _io_pair()
    try:
        io1.send(Message(MsgType.HELLO, b"abc"))
        io2.send(Message(MsgType.KEY_HASH, bytes(12)))
        assert io2.recv() == Message(MsgType.HELLO, b"abc")
        assert io1.recv() == Message(MsgType.KEY_HASH, bytes(12))
    finally:
        io1.close()
        io2.close()


def test_message_io_large_and_many():
    io1, io2 = _io_pair()
    try:
        big = bytes(range(256)) * 4000  # ~1 MB frame
        io1.send(Message(MsgType.TIMING, big))
        for i in range(200):
            io1.send(Message(MsgType.EC_PARITY, i.to_bytes(2, "little")))
        assert io2.recv().payload == big
        for i in range(200):
            assert io2.recv().payload == i.to_bytes(2, "little")
    finally:
        io1.close()
        io2.close()


def test_message_io_no_backpressure_deadlock():
    # one side floods while the other never reads until the flood ends;
    # the reader thread must keep draining so send never wedges
    io1, io2 = _io_pair()
    try:
        blob = bytes(64 * 1024)
        done = threading.Event()

        def flood():
            for _ in range(64):  # 4 MB total, far beyond kernel buffers
                io1.send(Message(MsgType.TIMING, blob))
            done.set()

        t = threading.Thread(target=flood, daemon=True)
        t.start()
        assert done.wait(timeout=30), "sender wedged on a full socket buffer"
        for _ in range(64):
            assert io2.recv().type == MsgType.TIMING
    finally:
        io1.close()
        io2.close()


def test_message_io_peer_close():
    io1, io2 = _io_pair()
    io1.close()
    with pytest.raises(ChannelClosed):
        io2.recv()
    with pytest.raises(ChannelClosed):
        io1.send(Message(MsgType.BYE))
    io2.close()


def test_message_io_garbage_frame():
    s1, s2 = socket.socketpair()
    io2 = MessageIO(s2)
    try:
        s1.sendall(b"\x63\x00\x00\x00\x00")  # unknown tag
        with pytest.raises(ProtocolError):
            io2.recv()
    finally:
        s1.close()
        io2.close()


def test_message_io_timeout():
    io1, io2 = _io_pair()
    try:
        with pytest.raises(ProtocolError):
            io2.recv(timeout=0.05)
    finally:
        io1.close()
        io2.close()
