"""Seeded discrete-event simulation of a Moonshot network.

Time is virtual. Events are ordered by (time, priority, sequence number),
deliveries before timers at equal times, so a run is a pure function of its
:class:`SimConfig`. Before GST messages are held back and delivered within
delta after GST; after GST every message takes the delay model's sample.
"""

from __future__ import annotations

import dataclasses
import heapq
import logging
import random
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .commit import CommitMoonshot
from .core import Block, ConfigError, VoteKind, quorum_size
from .crypto import Keyring, MockScheme
from .engine import (Commit, Deliver, Multicast, Node, NodeConfig, Record, SetTimer, Start,
                     TimerFired, Unicast)
from .messages import PROPOSALS, FbPropose, OptPropose, VoteMsg, embedded_block
from .pipelined import PipelinedMoonshot
from .simple import SimpleMoonshot
from .trace import Trace

log = logging.getLogger(__name__)

PROTOCOLS: dict[str, type[Node]] = {
    "simple": SimpleMoonshot,
    "pipelined": PipelinedMoonshot,
    "commit": CommitMoonshot,
}

SCHEDULES = ("round_robin", "B", "WM", "WJ")
BEHAVIOURS = ("crash", "silent_leader", "withhold_votes", "equivocate")
MIXED_POOL = ("crash", "equivocate", "withhold_votes")
PRE_GST_POLICIES = ("hold", "scramble")
INJECTED_FAULTS = ("conflicting_commit",)
EPS = 1e-9


# ---------------------------------------------------------------------------
# delay models


@dataclass(frozen=True)
class Uniform:
    d: float

    @property
    def bound(self) -> float:
        return self.d

    def sample(self, msg, rng: random.Random) -> float:
        return self.d


@dataclass(frozen=True)
class Bounded:
    lo: float
    hi: float

    @property
    def bound(self) -> float:
        return self.hi

    def sample(self, msg, rng: random.Random) -> float:
        return rng.uniform(self.lo, self.hi)


@dataclass(frozen=True)
class SmallLarge:
    """Block-carrying messages take ``lam``; everything else takes ``rho``."""

    rho: float
    lam: float
    size_threshold: Optional[int] = None

    @property
    def bound(self) -> float:
        return max(self.rho, self.lam)

    def is_large(self, msg) -> bool:
        blk = embedded_block(msg)
        if blk is None:
            return False
        return self.size_threshold is None or len(blk.payload) >= self.size_threshold

    def sample(self, msg, rng: random.Random) -> float:
        return self.lam if self.is_large(msg) else self.rho


DelayModel = Union[Uniform, Bounded, SmallLarge]


def parse_delay_model(model: Union[str, dict, DelayModel]) -> DelayModel:
    """Accepts ``uniform:1``, ``bounded:0.1,1``, ``smalllarge:1,4[,size]`` or a dict."""
    if isinstance(model, (Uniform, Bounded, SmallLarge)):
        return model
    if isinstance(model, dict):
        kind = str(model.get("kind", "")).lower()
        try:
            if kind == "uniform":
                return Uniform(float(model["d"]))
            if kind == "bounded":
                return Bounded(float(model["min"]), float(model["max"]))
            if kind == "smalllarge":
                thr = model.get("size_threshold")
                return SmallLarge(float(model["rho"]), float(model["lam"]),
                                  None if thr is None else int(thr))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad delay model {model!r}: {e}") from None
        raise ConfigError(f"unknown delay model {model!r}")
    m = re.fullmatch(r"\s*(\w+)\s*:\s*([0-9eE.,+\- ]+)", str(model))
    if not m:
        raise ConfigError(f"bad delay model {model!r}")
    kind = m.group(1).lower()
    try:
        args = [float(x) for x in m.group(2).split(",")]
    except ValueError:
        raise ConfigError(f"bad delay model {model!r}") from None
    if kind == "uniform" and len(args) == 1:
        return Uniform(args[0])
    if kind == "bounded" and len(args) == 2:
        return Bounded(args[0], args[1])
    if kind == "smalllarge" and len(args) in (2, 3):
        return SmallLarge(args[0], args[1], int(args[2]) if len(args) == 3 else None)
    raise ConfigError(f"bad delay model {model!r}")


def delay_model_str(m: DelayModel) -> str:
    if isinstance(m, Uniform):
        return f"uniform:{m.d:g}"
    if isinstance(m, Bounded):
        return f"bounded:{m.lo:g},{m.hi:g}"
    tail = f",{m.size_threshold}" if m.size_threshold is not None else ""
    return f"smalllarge:{m.rho:g},{m.lam:g}{tail}"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SimConfig:
    protocol: str = "pipelined"
    n: int = 4
    f: Optional[int] = None
    f_actual: int = 0
    delay: Union[str, dict, DelayModel] = "uniform:1"
    delta: float = 1.0
    gst: float = 0.0
    duration: float = 50.0
    seed: int = 0
    schedule: Union[str, Sequence[int]] = "round_robin"
    byzantine: Union[str, dict] = "crash"
    byz_ids: Optional[Sequence[int]] = None
    payload_size: int = 0
    compact_tc: bool = False
    pre_gst: str = "hold"
    record_network: bool = True
    inject_fault: Optional[str] = None  # checker self-tests only

    def __post_init__(self) -> None:
        if self.f is None:
            self.f = max(0, (self.n - 1) // 3)
        self.delay = parse_delay_model(self.delay)
        self.validate()

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.n < 1:
            raise ConfigError("n must be positive")
        quorum_size(self.n, self.f)
        if not 0 <= self.f_actual <= self.f:
            raise ConfigError(f"f_actual must be in [0, f] (f={self.f}, got {self.f_actual})")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.gst < 0 or self.duration <= 0:
            raise ConfigError("gst must be >= 0 and duration > 0")
        m = self.delay
        if isinstance(m, Uniform) and not 0 <= m.d:
            raise ConfigError("uniform delay must be non-negative")
        if isinstance(m, Bounded) and not 0 <= m.lo <= m.hi:
            raise ConfigError("bounded delay needs 0 <= min <= max")
        if isinstance(m, SmallLarge) and not 0 <= m.rho <= m.lam:
            raise ConfigError("small/large delay needs 0 <= rho <= lam")
        if m.bound > self.delta + EPS:
            raise ConfigError(f"delay bound {m.bound} exceeds delta {self.delta}")
        if self.pre_gst not in PRE_GST_POLICIES:
            raise ConfigError(f"unknown pre-GST policy {self.pre_gst!r}")
        if isinstance(self.schedule, str):
            if self.schedule not in SCHEDULES:
                raise ConfigError(f"unknown schedule {self.schedule!r}")
        else:
            if not self.schedule or any(not 0 <= i < self.n for i in self.schedule):
                raise ConfigError("explicit leader schedule must list node ids in [0, n)")
        if self.byz_ids is not None:
            ids = list(self.byz_ids)
            if len(set(ids)) != self.f_actual or any(not 0 <= i < self.n for i in ids):
                raise ConfigError("byz_ids must be f_actual distinct node ids")
        behaviours = (self.byzantine.values() if isinstance(self.byzantine, dict)
                      else [self.byzantine])
        for b in behaviours:
            if b not in BEHAVIOURS and b != "mixed":
                raise ConfigError(f"unknown byzantine behaviour {b!r}")
        if self.inject_fault is not None and self.inject_fault not in INJECTED_FAULTS:
            raise ConfigError(f"unknown injected fault {self.inject_fault!r}")
        if self.payload_size < 0:
            raise ConfigError("payload_size must be >= 0")


# ---------------------------------------------------------------------------
# leader schedules


def schedule_pattern(kind: str, n: int, f_actual: int) -> list[str]:
    """Slot types ("H"/"B") for one cycle of the named schedule."""
    h, b = n - f_actual, f_actual
    if kind == "B":
        return ["H"] * h + ["B"] * b
    if kind == "WM":
        return ["H", "B"] * b + ["H"] * (n - 2 * b)
    if kind == "WJ":
        if n < 3 * b:
            raise ConfigError("WJ schedule needs n >= 3 f_actual")
        return ["H", "H", "B"] * b + ["H"] * (n - 3 * b)
    raise ConfigError(f"no slot pattern for schedule {kind!r}")


def assign_leaders(pattern: Sequence[str], honest: Sequence[int], byz: Sequence[int]) -> list[int]:
    hi, bi = iter(honest), iter(byz)
    return [next(hi) if slot == "H" else next(bi) for slot in pattern]


# ---------------------------------------------------------------------------
# byzantine wrappers


class ByzantineNode:
    """Runs an honest state machine and tampers with what it sends."""

    def __init__(self, inner: Node, behaviour: str, peers: Sequence[int]) -> None:
        self.inner = inner
        self.behaviour = behaviour
        self.me = inner.me
        self.peers = [p for p in peers if p != inner.me]

    def step(self, event):
        actions = self.inner.step(event)
        b = self.behaviour
        # drop the record along with the message so traces show only what was sent
        if b == "silent_leader":
            return [a for a in actions if not (_sends(a, PROPOSALS) or _records(a, "propose"))]
        if b == "withhold_votes":
            return [a for a in actions if not (_sends(a, (VoteMsg,)) or _records(a, "vote"))]
        if b == "equivocate":
            out = []
            for a in actions:
                if isinstance(a, Multicast) and isinstance(a.message, PROPOSALS):
                    out.extend(self._equivocate(a.message))
                else:
                    out.append(a)
            return out
        return actions

    def _equivocate(self, msg):
        node = self.inner
        blk = msg.block
        twin = Block(view=blk.view, height=blk.height, parent=blk.parent,
                     payload=blk.payload + b"\x01equivocation")
        twin_msg = dataclasses.replace(msg, block=twin)
        half = len(self.peers) // 2
        out = [Unicast(self.me, msg)]
        out += [Unicast(p, msg) for p in self.peers[:half]]
        out += [Unicast(p, twin_msg) for p in self.peers[half:]]
        kind = _vote_kind_for(node, msg)
        vote = node.make_vote(kind, twin.hash, msg.view)
        out += [Unicast(p, VoteMsg(vote)) for p in self.peers[half:]]
        out.append(Record("propose", ("twin", msg.view, twin.hash.hex())))
        out.append(Record("vote", (kind.name, msg.view, twin.hash.hex())))
        return out


def _sends(action, types) -> bool:
    return isinstance(action, (Multicast, Unicast)) and isinstance(action.message, types)


def _records(action, label: str) -> bool:
    return isinstance(action, Record) and action.label == label


def _vote_kind_for(node: Node, msg) -> VoteKind:
    if isinstance(node, SimpleMoonshot):
        return VoteKind.SIMPLE
    if isinstance(msg, OptPropose):
        return VoteKind.OPTIMISTIC
    if isinstance(msg, FbPropose):
        return VoteKind.FALLBACK
    return VoteKind.NORMAL


# ---------------------------------------------------------------------------
# the simulator


class Simulation:
    def __init__(self, cfg: SimConfig) -> None:
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        n, fa = cfg.n, cfg.f_actual
        if cfg.byz_ids is not None:
            byz = sorted(cfg.byz_ids)
        elif isinstance(cfg.schedule, str) and cfg.schedule != "round_robin":
            byz = list(range(n - fa, n))
        else:
            byz = sorted(self.rng.sample(range(n), fa))
        self.byz = byz
        self.honest = [i for i in range(n) if i not in set(byz)]
        if isinstance(cfg.schedule, str):
            if cfg.schedule == "round_robin":
                leaders = list(range(n))
            else:
                leaders = assign_leaders(schedule_pattern(cfg.schedule, n, fa), self.honest, byz)
        else:
            leaders = list(cfg.schedule)
        self.leaders = leaders
        self.behaviours = self._behaviours()
        ncfg = NodeConfig(n=n, f=cfg.f, delta=cfg.delta, leaders=tuple(leaders),
                          payload_size=cfg.payload_size, compact_tc=cfg.compact_tc)
        self.keyring, pairs = Keyring.generate(MockScheme(), cfg.seed, n)
        cls = PROTOCOLS[cfg.protocol]
        self.nodes: dict[int, object] = {}
        for i in range(n):
            node = cls(i, ncfg, self.keyring, pairs[i].secret)
            b = self.behaviours.get(i)
            self.nodes[i] = node if b is None else ByzantineNode(node, b, range(n))
        self.crashed = {i for i, b in self.behaviours.items() if b == "crash"}
        self.trace = Trace(meta=self._meta())
        self._heap: list = []
        self._seq = 0
        self._mid = 0
        self._blocks_seen: set[bytes] = set()

    def _behaviours(self) -> dict[int, str]:
        choice = self.cfg.byzantine
        if isinstance(choice, dict):
            out = {int(k): v for k, v in choice.items()}
            missing = set(self.byz) - set(out)
            if missing:
                raise ConfigError(f"no behaviour given for byzantine nodes {sorted(missing)}")
            return {i: out[i] for i in self.byz}
        if choice == "mixed":
            return {i: self.rng.choice(MIXED_POOL) for i in self.byz}
        return {i: choice for i in self.byz}

    def _meta(self) -> dict:
        c = self.cfg
        return {
            "protocol": c.protocol, "n": c.n, "f": c.f, "f_actual": c.f_actual,
            "quorum": quorum_size(c.n, c.f), "delta": c.delta, "gst": c.gst,
            "duration": c.duration, "seed": c.seed,
            "schedule": c.schedule if isinstance(c.schedule, str) else list(c.schedule),
            "leaders": self.leaders, "honest": self.honest, "byz": self.byz,
            "behaviours": {str(k): v for k, v in self.behaviours.items()},
            "delay_model": delay_model_str(c.delay), "compact_tc": c.compact_tc,
            "pre_gst": c.pre_gst, "view_timer": PROTOCOLS[c.protocol].view_timer,
            "genesis": Block(0, 0, bytes(32)).hash.hex(),
        }

    # -- scheduling ----------------------------------------------------------

    def _push(self, t: float, prio: int, node: int, item: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, prio, self._seq, node, item))

    def _arrival(self, now: float, msg) -> float:
        c = self.cfg
        if now >= c.gst:
            return now + c.delay.sample(msg, self.rng)
        u = 1.0 - self.rng.random()  # (0, 1]
        if c.pre_gst == "hold":
            return c.gst + c.delta * u
        return now + (c.gst + c.delta - now) * u

    def _send(self, now: float, src: int, dests, msg, dest_label: int) -> None:
        self._mid += 1
        mid = self._mid
        ev = self.trace.events
        blk = embedded_block(msg)
        if blk is not None and blk.hash not in self._blocks_seen:
            self._blocks_seen.add(blk.hash)
            ev.append(("block", now, src, blk.hash.hex(), blk.parent.hex(), blk.height,
                       blk.view, len(blk.payload)))
        if self.cfg.record_network:
            ev.append(("send", now, src, mid, msg.kind, msg.view, dest_label))
        for d in dests:
            if d in self.crashed:
                continue
            at = now if d == src else self._arrival(now, msg)
            self._push(at, 0, d, ("d", msg, src, now, mid))

    def _apply(self, now: float, i: int, actions) -> None:
        ev = self.trace.events
        for a in actions:
            if isinstance(a, Multicast):
                self._send(now, i, range(self.cfg.n), a.message, -1)
            elif isinstance(a, Unicast):
                self._send(now, i, (a.to,), a.message, a.to)
            elif isinstance(a, SetTimer):
                self._push(now + a.duration, 1, i, ("t", a.kind, a.view, a.key))
            elif isinstance(a, Record):
                ev.append((a.label, now, i, *a.fields))
            elif isinstance(a, Commit):
                for b in a.blocks:
                    ev.append(("commit", now, i, b.height, b.hash.hex(), b.hash == a.direct))

    def run(self) -> Trace:
        for i in range(self.cfg.n):
            if i not in self.crashed:
                self._push(0.0, 0, i, ("s",))
        end = self.cfg.duration
        heap = self._heap
        ev = self.trace.events
        record_net = self.cfg.record_network
        while heap:
            t, _, _, i, item = heapq.heappop(heap)
            if t > end:
                break
            tag = item[0]
            if tag == "d":
                _, msg, src, sent, mid = item
                if record_net:
                    ev.append(("recv", t, i, mid, src, sent))
                event = Deliver(msg, src, t)
            elif tag == "t":
                event = TimerFired(item[1], item[2], t, item[3])
            else:
                event = Start(t)
            self._apply(t, i, self.nodes[i].step(event))
        if self.cfg.inject_fault == "conflicting_commit":
            self._inject_conflicting_commit()
        return self.trace

    def _inject_conflicting_commit(self) -> None:
        """Rewrite one honest node's first commit to a block nobody proposed."""
        ev = self.trace.events
        for k, e in enumerate(ev):
            if e[0] == "commit" and e[2] in self.honest:
                ev[k] = ("commit", e[1], e[2], e[3], "ee" * 32, e[5])
                return
        node = self.honest[0]
        ev.append(("commit", self.cfg.duration, node, 1, "ee" * 32, True))


def simulate(cfg: Optional[SimConfig] = None, **kwargs) -> Trace:
    """Run one simulation; keyword arguments build a :class:`SimConfig`."""
    if cfg is None:
        cfg = SimConfig(**kwargs)
    return Simulation(cfg).run()
