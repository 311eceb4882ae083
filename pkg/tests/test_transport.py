import asyncio
import struct

import pytest

from moonshot.analysis import TRANSPORT_CHECKS, check_all
from moonshot.core import (GENESIS, GENESIS_CERT, Block, VoteKind, form_compact_tc,
                           form_timeout_certificate)
from moonshot.messages import (TAGS, BlockRequest, BlockResponse, CertMsg, FbPropose, OptPropose,
                               Propose, Status, TCMsg, TimeoutMsg, VoteMsg)
from moonshot.transport import (HEADER, MAX_FRAME, FrameError, decode_frame, encode_frame,
                                read_frame, run_cluster)

from util import Net

N = VoteKind.NORMAL


def samples():
    net = Net()
    b1 = Block(view=1, height=1, parent=GENESIS.hash, payload=b"p" * 10)
    c1 = net.cert(b1.hash, 1, N)
    locks = [net.timeout(s, 2, lock=c1) for s in range(3)]
    tc = form_timeout_certificate(locks, 4, 1)
    ctc = form_compact_tc([net.timeout(s, 2, lock=c1, compact=True) for s in range(3)], c1, 4, 1)
    b3 = Block(view=3, height=2, parent=b1.hash)
    return [
        OptPropose(block=b1, view=1),
        Propose(block=b3, cert=c1, view=3),
        FbPropose(block=b3, cert=c1, tc=tc, view=3),
        FbPropose(block=b3, cert=c1, tc=ctc, view=3),
        VoteMsg(net.vote(2, N, b1.hash, 1)),
        TimeoutMsg(locks[0]),
        TimeoutMsg(net.timeout(1, 4)),
        CertMsg(c1),
        CertMsg(GENESIS_CERT),
        TCMsg(tc),
        TCMsg(form_timeout_certificate([net.timeout(s, 5) for s in range(3)], 4, 1)),
        Status(view=4, lock=c1),
        BlockRequest(b1.hash),
        BlockResponse(b1),
    ]


def test_every_message_kind_is_covered():
    assert {type(m) for m in samples()} == set(TAGS)


@pytest.mark.parametrize("msg", samples(), ids=lambda m: type(m).__name__)
def test_frame_round_trip(msg):
    frame = encode_frame(msg)
    out, used = decode_frame(frame + b"extra")
    assert out == msg and used == len(frame)
    assert encode_frame(out) == frame


def test_large_payload_round_trip():
    blk = Block(view=2, height=1, parent=GENESIS.hash, payload=bytes(range(256)) * 4096)
    frame = encode_frame(BlockResponse(blk))
    assert len(frame) > 1_000_000
    out, _ = decode_frame(frame)
    assert out.block == blk and out.block.hash == blk.hash


def test_wrong_length_prefix_is_rejected():
    frame = encode_frame(CertMsg(GENESIS_CERT))
    length, tag = HEADER.unpack_from(frame)
    short = HEADER.pack(length - 1, tag) + frame[HEADER.size:-1]
    with pytest.raises(FrameError):
        decode_frame(short)
    long = HEADER.pack(length + 5, tag) + frame[HEADER.size:] + bytes(5)
    with pytest.raises(FrameError):
        decode_frame(long)
    with pytest.raises(FrameError):
        decode_frame(frame[:-1])
    with pytest.raises(FrameError):
        decode_frame(frame[:3])
    with pytest.raises(FrameError):
        decode_frame(HEADER.pack(MAX_FRAME + 1, tag))


def test_unknown_tag_is_rejected():
    with pytest.raises(FrameError):
        decode_frame(HEADER.pack(0, 99))


def test_stream_reader():
    msgs = samples()

    async def go():
        r = asyncio.StreamReader()
        r.feed_data(b"".join(encode_frame(m) for m in msgs))
        r.feed_data(struct.pack(">IB", MAX_FRAME + 1, 1))
        r.feed_eof()
        got = [await read_frame(r) for _ in msgs]
        with pytest.raises(ConnectionError):
            await read_frame(r)
        return got

    assert asyncio.run(go()) == msgs


@pytest.mark.slow
def test_small_cluster_commits(tmp_path):
    tr = run_cluster(4, "pipelined", 6.0, tmp_path, delta=0.25)
    assert all(r.ok for r in check_all(tr, TRANSPORT_CHECKS))
    for node in range(4):
        assert sum(1 for e in tr.events if e[0] == "commit" and e[2] == node) > 10
