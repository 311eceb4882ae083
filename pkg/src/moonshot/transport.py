"""Real-socket runner: the protocol nodes over local TCP, one process per node.

Wire format: every frame is a 4-byte big-endian length of the message body,
a 1-byte message tag, then the body (canonical little-endian encoding built
with :class:`~moonshot.core.Writer`). A connection starts with one 4-byte
big-endian node id so the receiver knows which peer it is talking to.

Each node funnels socket reads and timer expiries into a single asyncio
queue and calls ``step`` from one consumer task, so steps never overlap.
Logs are JSON lines in the trace schema with wall-clock timestamps; the
parent merges them into one trace for the offline checkers.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import socket
import struct
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .core import (Block, BlockCertificate, Reader, TimeoutCertificate, TimeoutMessage, Vote,
                   VoteKind, Writer, quorum_size)
from .crypto import Ed25519Scheme, Keyring
from .engine import Commit, Deliver, Multicast, NodeConfig, Record, SetTimer, Start, TimerFired, Unicast
from .messages import (TAGS, BlockRequest, BlockResponse, CertMsg, FbPropose, Message, OptPropose,
                       Propose, Status, TCMsg, TimeoutMsg, VoteMsg, embedded_block)
from .trace import FIELDS, Trace

log = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024
HEADER = struct.Struct(">IB")


class FrameError(ValueError):
    """Malformed frame: bad length, unknown tag or undecodable body."""


# ---------------------------------------------------------------------------
# codec


def _put_vote(w: Writer, v: Vote) -> None:
    w.u8(int(v.kind)).hash(v.block_hash).u64(v.view).u32(v.signer).blob(v.signature)


def _get_vote(r: Reader) -> Vote:
    return Vote(kind=VoteKind(r.u8()), block_hash=r.hash(), view=r.u64(), signer=r.u32(),
                signature=r.blob())


def _put_cert(w: Writer, c: BlockCertificate) -> None:
    w.u64(c.view).hash(c.block_hash).u8(int(c.kind)).u32(len(c.votes))
    for v in c.votes:
        _put_vote(w, v)


def _get_cert(r: Reader) -> BlockCertificate:
    view, h, kind, k = r.u64(), r.hash(), VoteKind(r.u8()), r.u32()
    return BlockCertificate(view=view, block_hash=h, kind=kind,
                            votes=tuple(_get_vote(r) for _ in range(k)))


def _put_timeout(w: Writer, t: TimeoutMessage) -> None:
    flags = (t.lock is not None) | (t.lock_view is not None) << 1 | bool(t.compact) << 2
    w.u64(t.view).u32(t.signer).blob(t.signature).u8(flags)
    if t.lock_view is not None:
        w.u64(t.lock_view)
    if t.lock is not None:
        _put_cert(w, t.lock)


def _get_timeout(r: Reader) -> TimeoutMessage:
    view, signer, sig, flags = r.u64(), r.u32(), r.blob(), r.u8()
    lock_view = r.u64() if flags & 2 else None
    lock = _get_cert(r) if flags & 1 else None
    return TimeoutMessage(view=view, signer=signer, signature=sig, lock=lock,
                          lock_view=lock_view, compact=bool(flags & 4))


def _put_tc(w: Writer, tc: TimeoutCertificate) -> None:
    w.u64(tc.view).u32(len(tc.timeouts))
    for t in tc.timeouts:
        _put_timeout(w, t)
    w.u8(tc.highest_lock is not None)
    if tc.highest_lock is not None:
        _put_cert(w, tc.highest_lock)


def _get_tc(r: Reader) -> TimeoutCertificate:
    view, k = r.u64(), r.u32()
    timeouts = tuple(_get_timeout(r) for _ in range(k))
    high = _get_cert(r) if r.u8() else None
    return TimeoutCertificate(view=view, timeouts=timeouts, highest_lock=high)


def _put_block(w: Writer, b: Block) -> None:
    w.raw(b.encoded)


def encode(msg: Message) -> bytes:
    """Canonical body bytes of ``msg`` (without the frame header)."""
    w = Writer()
    if isinstance(msg, OptPropose):
        _put_block(w, msg.block)
        w.u64(msg.view)
    elif isinstance(msg, Propose):
        _put_block(w, msg.block)
        _put_cert(w, msg.cert)
        w.u64(msg.view)
    elif isinstance(msg, FbPropose):
        _put_block(w, msg.block)
        _put_cert(w, msg.cert)
        _put_tc(w, msg.tc)
        w.u64(msg.view)
    elif isinstance(msg, VoteMsg):
        _put_vote(w, msg.vote)
    elif isinstance(msg, TimeoutMsg):
        _put_timeout(w, msg.timeout)
    elif isinstance(msg, CertMsg):
        _put_cert(w, msg.cert)
    elif isinstance(msg, TCMsg):
        _put_tc(w, msg.tc)
    elif isinstance(msg, Status):
        w.u64(msg.view)
        _put_cert(w, msg.lock)
    elif isinstance(msg, BlockRequest):
        w.hash(msg.block_hash)
    elif isinstance(msg, BlockResponse):
        _put_block(w, msg.block)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return w.getvalue()


_DECODERS = {
    OptPropose: lambda r: OptPropose(block=Block.decode(r), view=r.u64()),
    Propose: lambda r: Propose(block=Block.decode(r), cert=_get_cert(r), view=r.u64()),
    FbPropose: lambda r: FbPropose(block=Block.decode(r), cert=_get_cert(r), tc=_get_tc(r),
                                   view=r.u64()),
    VoteMsg: lambda r: VoteMsg(_get_vote(r)),
    TimeoutMsg: lambda r: TimeoutMsg(_get_timeout(r)),
    CertMsg: lambda r: CertMsg(_get_cert(r)),
    TCMsg: lambda r: TCMsg(_get_tc(r)),
    Status: lambda r: Status(view=r.u64(), lock=_get_cert(r)),
    BlockRequest: lambda r: BlockRequest(r.hash()),
    BlockResponse: lambda r: BlockResponse(Block.decode(r)),
}
_BY_TAG = {tag: cls for cls, tag in TAGS.items()}


def decode(tag: int, body: bytes) -> Message:
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise FrameError(f"unknown message tag {tag}")
    r = Reader(body)
    try:
        msg = _DECODERS[cls](r)
        r.expect_end()
    except (ValueError, struct.error) as e:
        raise FrameError(f"bad {cls.__name__} body: {e}") from None
    return msg


def encode_frame(msg: Message) -> bytes:
    body = encode(msg)
    return HEADER.pack(len(body), TAGS[type(msg)]) + body


def decode_frame(buf: bytes) -> tuple[Message, int]:
    """Decode one frame from the front of ``buf``; returns (message, bytes consumed)."""
    if len(buf) < HEADER.size:
        raise FrameError("truncated header")
    length, tag = HEADER.unpack_from(buf)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds limit")
    end = HEADER.size + length
    if len(buf) < end:
        raise FrameError(f"truncated frame: need {length} body bytes, have {len(buf) - HEADER.size}")
    return decode(tag, bytes(buf[HEADER.size:end])), end


async def read_frame(reader: asyncio.StreamReader) -> Message:
    head = await reader.readexactly(HEADER.size)
    length, tag = HEADER.unpack(head)
    if length > MAX_FRAME:
        # the stream cannot be resynchronised after a bogus length
        raise ConnectionError(f"frame of {length} bytes exceeds limit")
    body = await reader.readexactly(length)
    return decode(tag, body)


# ---------------------------------------------------------------------------
# a single node process


class NodeProcess:
    def __init__(self, me: int, peers: dict, protocol: str, delta: float, epoch: float,
                 duration: float, log_path: Path, seed: int = 0, payload_size: int = 0) -> None:
        from .simnet import PROTOCOLS

        self.me = me
        self.peers = peers  # id -> {"host", "port", "public"}
        self.n = len(peers)
        self.epoch = epoch
        self.duration = duration
        scheme = Ed25519Scheme()
        keyring = Keyring(scheme, [bytes.fromhex(peers[i]["public"]) for i in range(self.n)])
        secret = scheme.keygen(seed, me).secret
        cfg = NodeConfig(n=self.n, f=(self.n - 1) // 3, delta=delta,
                         leaders=tuple(range(self.n)), payload_size=payload_size)
        self.node = PROTOCOLS[protocol](me, cfg, keyring, secret)
        self.queue: asyncio.Queue = asyncio.Queue()
        self.writers: dict[int, asyncio.StreamWriter] = {}
        self.log_fh = open(log_path, "w", buffering=1)
        self.steps = 0
        self.dropped_frames = 0
        self._blocks_logged: set[bytes] = set()

    def now(self) -> float:
        return time.time() - self.epoch

    def _log(self, kind: str, t: float, *fields) -> None:
        d = {"ev": kind, "t": round(t, 6), "node": self.me, "step": self.steps}
        d.update(zip(FIELDS[kind], fields))
        self.log_fh.write(json.dumps(d) + "\n")

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            (peer,) = struct.unpack(">I", await reader.readexactly(4))
            while True:
                try:
                    msg = await read_frame(reader)
                except FrameError as e:
                    self.dropped_frames += 1
                    log.warning("node %d: dropped frame from %d: %s", self.me, peer, e)
                    continue
                self.queue.put_nowait(("d", msg, peer))
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            writer.close()

    async def _connect(self, peer: int, attempts: int = 100) -> None:
        info = self.peers[peer]
        for _ in range(attempts):
            try:
                _, writer = await asyncio.open_connection(info["host"], info["port"])
                writer.write(struct.pack(">I", self.me))
                self.writers[peer] = writer
                return
            except OSError:
                await asyncio.sleep(0.05)
        raise ConnectionError(f"node {self.me}: could not reach peer {peer}")

    def _send(self, to: int, frame: bytes) -> None:
        w = self.writers.get(to)
        if w is None or w.is_closing():
            return
        try:
            w.write(frame)
        except (ConnectionError, RuntimeError):
            self.writers.pop(to, None)

    def _apply(self, actions, t: float) -> None:
        loop = asyncio.get_running_loop()
        for a in actions:
            if isinstance(a, (Multicast, Unicast)):
                msg = a.message
                blk = embedded_block(msg)
                if blk is not None and blk.hash not in self._blocks_logged and not isinstance(
                        msg, BlockResponse):
                    self._blocks_logged.add(blk.hash)
                    self._log("block", t, blk.hash.hex(), blk.parent.hex(), blk.height, blk.view,
                              len(blk.payload))
                frame = encode_frame(msg)
                targets = range(self.n) if isinstance(a, Multicast) else (a.to,)
                for d in targets:
                    if d == self.me:
                        self.queue.put_nowait(("d", msg, self.me))
                    else:
                        self._send(d, frame)
            elif isinstance(a, SetTimer):
                loop.call_later(a.duration, self.queue.put_nowait, ("t", a.kind, a.view, a.key))
            elif isinstance(a, Record):
                self._log(a.label, t, *a.fields)
            elif isinstance(a, Commit):
                for b in a.blocks:
                    self._log("commit", t, b.height, b.hash.hex(), b.hash == a.direct)

    async def run(self) -> None:
        port = self.peers[self.me]["port"]
        server = await asyncio.start_server(self._serve, "127.0.0.1", port)
        await asyncio.gather(*(self._connect(p) for p in range(self.n) if p != self.me))
        await asyncio.sleep(max(0.0, self.epoch - time.time()))
        self.queue.put_nowait(("s",))
        deadline = self.epoch + self.duration
        while True:
            remaining = deadline - time.time()
            if remaining <= 0:
                break
            try:
                item = await asyncio.wait_for(self.queue.get(), timeout=remaining)
            except asyncio.TimeoutError:
                break
            t = self.now()
            if item[0] == "d":
                event = Deliver(item[1], item[2], t)
            elif item[0] == "t":
                event = TimerFired(item[1], item[2], t, item[3])
            else:
                event = Start(t)
            self.steps += 1
            self._apply(self.node.step(event), t)
            await asyncio.sleep(0)  # let readers and writers run between steps
        server.close()
        for w in self.writers.values():
            w.close()
        self.log_fh.close()


# ---------------------------------------------------------------------------
# cluster orchestration


def free_ports(k: int) -> list[int]:
    socks, ports = [], []
    for _ in range(k):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def run_cluster(n: int, protocol: str, duration: float, out_dir, delta: float = 0.25,
                kill: Optional[int] = None, kill_at: float = 5.0, seed: int = 0,
                payload_size: int = 0, startup: float = 2.0) -> Trace:
    """Run ``n`` node processes for ``duration`` seconds and merge their logs.

    ``kill`` names a node to SIGKILL ``kill_at`` seconds into the run; it is
    reported as the crashed (byzantine) node in the merged trace.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scheme = Ed25519Scheme()
    ports = free_ports(n)
    peers = {str(i): {"host": "127.0.0.1", "port": ports[i],
                      "public": scheme.keygen(seed, i).public.hex()} for i in range(n)}
    peers_path = out / "peers.json"
    peers_path.write_text(json.dumps(peers, indent=1))
    epoch = time.time() + startup
    env = dict(os.environ)
    src_root = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src_root + os.pathsep + env.get("PYTHONPATH", "")
    procs = []
    logs = []
    for i in range(n):
        lp = out / f"node{i}.jsonl"
        logs.append(lp)
        cmd = [sys.executable, "-m", "moonshot.transport", "--peers", str(peers_path), "--id",
               str(i), "--protocol", protocol, "--delta", str(delta), "--epoch", repr(epoch),
               "--duration", str(duration), "--log", str(lp), "--seed", str(seed),
               "--payload-size", str(payload_size)]
        procs.append(subprocess.Popen(cmd, env=env))
    try:
        if kill is not None:
            time.sleep(max(0.0, epoch + kill_at - time.time()))
            procs[kill].kill()
        for i, p in enumerate(procs):
            p.wait(timeout=duration + startup + 60)
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
    for i, p in enumerate(procs):
        if i != kill and p.returncode != 0:
            raise RuntimeError(f"node {i} exited with status {p.returncode}")
    return merge_logs(logs, protocol, n, delta, duration, kill=kill, seed=seed)


def merge_logs(paths: Sequence, protocol: str, n: int, delta: float, duration: float,
               kill: Optional[int] = None, seed: int = 0) -> Trace:
    from .simnet import PROTOCOLS
    from .trace import event_from_dict

    f = (n - 1) // 3
    byz = [] if kill is None else [kill]
    meta = {"protocol": protocol, "n": n, "f": f, "f_actual": len(byz),
            "quorum": quorum_size(n, f), "delta": delta, "gst": 0.0, "duration": duration,
            "seed": seed, "schedule": "round_robin", "leaders": list(range(n)),
            "honest": [i for i in range(n) if i not in byz], "byz": byz,
            "delay_model": "wall-clock", "compact_tc": False, "transport": True,
            "view_timer": PROTOCOLS[protocol].view_timer,
            "genesis": Block(0, 0, bytes(32)).hash.hex()}
    parts = []
    for p in paths:
        events = []
        with open(p) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    events.append(event_from_dict(json.loads(line)))
                except (ValueError, KeyError):
                    break  # a killed process may leave a torn last line
        parts.append(events)
    return Trace.merge(meta, parts)


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(description="run one node of a local cluster")
    ap.add_argument("--peers", required=True)
    ap.add_argument("--id", type=int, required=True)
    ap.add_argument("--protocol", default="pipelined")
    ap.add_argument("--delta", type=float, default=0.25)
    ap.add_argument("--epoch", type=float, required=True)
    ap.add_argument("--duration", type=float, default=30.0)
    ap.add_argument("--log", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--payload-size", type=int, default=0)
    args = ap.parse_args(argv)
    peers = {int(k): v for k, v in json.loads(Path(args.peers).read_text()).items()}
    proc = NodeProcess(args.id, peers, args.protocol, args.delta, args.epoch, args.duration,
                       Path(args.log), seed=args.seed, payload_size=args.payload_size)
    asyncio.run(proc.run())
    return 0


if __name__ == "__main__":
    sys.exit(main())
