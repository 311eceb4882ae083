"""Offline property checkers and metrics over execution traces.

The checkers never trust a node's own bookkeeping for certificates: a block
certificate (or TC) is taken to exist once a quorum of distinct signers has
recorded a matching vote (or timeout). Each checker returns a
:class:`CheckResult` with the indices of the offending events on failure.
"""

from __future__ import annotations

import bisect
import csv
import itertools
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from .trace import Trace

EPS = 1e-9
BLOCK_VOTE_KINDS = frozenset({"SIMPLE", "OPTIMISTIC", "NORMAL", "FALLBACK"})
CSV_COLUMNS = ("version", "seed", "protocol", "schedule", "n", "f_actual", "throughput",
               "transfer_rate", "latency_mean", "omega", "lambda")
METRICS = ("throughput", "transfer_rate", "latency_mean", "omega", "lambda")
VIEW_TIMERS = {"simple": 5, "pipelined": 3, "commit": 3}


@dataclass
class CheckResult:
    name: str
    verdict: str  # "pass", "fail" or "skip"
    detail: str = ""
    counterexample: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.verdict != "fail"

    def as_dict(self) -> dict:
        return {"name": self.name, "verdict": self.verdict, "detail": self.detail,
                "counterexample": self.counterexample}


def _pass(name: str, detail: str = "") -> CheckResult:
    return CheckResult(name, "pass", detail)


def _fail(name: str, detail: str, idx: Iterable[int]) -> CheckResult:
    return CheckResult(name, "fail", detail, sorted(set(idx)))


class TraceIndex:
    """Lookup tables built once per trace."""

    def __init__(self, trace: Trace) -> None:
        m = trace.meta
        self.trace = trace
        self.protocol = m["protocol"]
        self.n, self.f = m["n"], m["f"]
        self.quorum = m.get("quorum", (self.n + self.f + 2) // 2)
        self.delta = m["delta"]
        self.gst = m.get("gst", 0.0)
        self.end = m["duration"]
        self.leaders = m["leaders"]
        self.honest = set(m["honest"])
        self.view_timer = m.get("view_timer", VIEW_TIMERS.get(self.protocol, 3))
        self.genesis = m["genesis"]
        self.blocks: dict[str, tuple] = {self.genesis: (None, 0, 0, None, 0.0, -1)}
        self.children: dict[str, list[str]] = defaultdict(list)
        self.votes: dict[tuple, dict[int, tuple[float, int]]] = defaultdict(dict)
        self.honest_votes: list[tuple] = []
        self.timeouts: dict[int, dict[int, tuple[float, int, int]]] = defaultdict(dict)
        self.entries: dict[int, list[tuple[float, int, int]]] = defaultdict(list)
        self.commits: dict[int, list[tuple]] = defaultdict(list)
        self.conflicts: list[int] = []
        self.cert_events: list[tuple] = []
        for i, ev in enumerate(trace.events):
            kind, t, node = ev[0], ev[1], ev[2]
            if kind == "block":
                h = ev[3]
                if h not in self.blocks:
                    self.blocks[h] = (ev[4], ev[5], ev[6], node, t, i)
                    self.children[ev[4]].append(h)
            elif kind == "vote":
                self.votes[(ev[3], ev[4], ev[5])].setdefault(node, (t, i))
                if node in self.honest:
                    self.honest_votes.append((node, ev[3], ev[4], ev[5], t, i))
            elif kind == "timeout":
                self.timeouts[ev[3]].setdefault(node, (t, ev[4], i))
            elif kind == "enter":
                self.entries[node].append((t, ev[3], i))
            elif kind == "commit":
                self.commits[node].append((t, ev[3], ev[4], ev[5], i))
            elif kind == "conflict":
                if node in self.honest:
                    self.conflicts.append(i)
            elif kind == "cert":
                self.cert_events.append((ev[3], ev[4], ev[5], t, i))

    def leader(self, view: int) -> int:
        return self.leaders[(view - 1) % len(self.leaders)]

    @cached_property
    def certified(self) -> dict[tuple[int, str], tuple[float, set, int]]:
        """(view, hash) -> (time the quorum-th vote was cast, kinds, event index)."""
        out: dict[tuple[int, str], tuple[float, set, int]] = {}
        for (vkind, view, h), signers in self.votes.items():
            if vkind not in BLOCK_VOTE_KINDS or len(signers) < self.quorum:
                continue
            t, i = sorted(signers.values())[self.quorum - 1]
            prev = out.get((view, h))
            if prev is None:
                out[(view, h)] = (t, {vkind}, i)
            else:
                prev[1].add(vkind)
                if t < prev[0]:
                    out[(view, h)] = (t, prev[1], i)
        for ckind, view, h, t, i in self.cert_events:
            if ckind in BLOCK_VOTE_KINDS and (view, h) not in out:
                out[(view, h)] = (t, {ckind}, i)
        return out

    @cached_property
    def tc_views(self) -> dict[int, tuple[float, int]]:
        out = {}
        for view, signers in self.timeouts.items():
            if len(signers) >= self.quorum:
                t, _, i = sorted(signers.values())[self.quorum - 1]
                out[view] = (t, i)
        return out

    @cached_property
    def first_entry(self) -> dict[int, tuple[float, int]]:
        """view -> (first time an honest node entered exactly this view, event index)."""
        out: dict[int, tuple[float, int]] = {}
        for node, lst in self.entries.items():
            if node not in self.honest:
                continue
            for t, v, i in lst:
                if v not in out or t < out[v][0]:
                    out[v] = (t, i)
        return out

    @cached_property
    def first_reach(self) -> dict[int, float]:
        """view -> first time an honest node was in this view or a higher one."""
        out: dict[int, float] = {}
        best = float("inf")
        for v in sorted(self.first_entry, reverse=True):
            best = min(best, self.first_entry[v][0])
            out[v] = best
        return out

    def reach_time(self, node: int, view: int) -> Optional[float]:
        """First time ``node`` was in ``view`` or higher (views only increase)."""
        lst = self.entries.get(node, [])
        views = [v for _, v, _ in lst]
        k = bisect.bisect_left(views, view)
        return lst[k][0] if k < len(lst) else None

    def extends(self, desc: str, anc: str) -> Optional[bool]:
        """True/False, or None when the ancestry cannot be resolved from the trace."""
        if desc == anc:
            return True
        blocks = self.blocks
        a = blocks.get(anc)
        d = blocks.get(desc)
        if a is None or d is None:
            return None
        while d[1] > a[1]:
            parent = d[0]
            if parent == anc:
                return True
            d = blocks.get(parent)
            if d is None:
                return None
        return False

    def commit_times(self) -> dict[str, list[float]]:
        out: dict[str, list[float]] = defaultdict(list)
        for node, lst in self.commits.items():
            if node in self.honest:
                for t, _, h, _, _ in lst:
                    out[h].append(t)
        return out


TraceLike = Union[Trace, TraceIndex]


def _index(tr: TraceLike) -> TraceIndex:
    return tr if isinstance(tr, TraceIndex) else TraceIndex(tr)


# ---------------------------------------------------------------------------
# safety


def check_safety(tr: TraceLike) -> CheckResult:
    """Honest logs are parent-linked and agree position by position."""
    ix = _index(tr)
    name = "safety"
    if ix.conflicts:
        return _fail(name, "an honest node hit a conflicting commit", ix.conflicts)
    at_height: dict[int, tuple[str, int]] = {}
    for node in sorted(ix.honest):
        prev = ix.genesis
        for t, height, h, _, i in ix.commits.get(node, []):
            blk = ix.blocks.get(h)
            if blk is not None and blk[0] != prev:
                return _fail(name, f"node {node} committed {h[:8]} not extending its log", [i])
            seen = at_height.setdefault(height, (h, i))
            if seen[0] != h:
                return _fail(name, f"two blocks committed at height {height}", [seen[1], i])
            prev = h
    return _pass(name)


def check_view_safety(tr: TraceLike) -> CheckResult:
    """At most one block certified per view."""
    ix = _index(tr)
    per_view: dict[int, list] = defaultdict(list)
    for (view, h), (_, _, i) in ix.certified.items():
        per_view[view].append((h, i))
    for view, lst in sorted(per_view.items()):
        if len(lst) > 1:
            return _fail("view_safety", f"{len(lst)} blocks certified in view {view}",
                         [i for _, i in lst])
    return _pass("view_safety")


def check_oc_no_tc(tr: TraceLike) -> CheckResult:
    """No optimistic certificate for v alongside a TC for v-1."""
    ix = _index(tr)
    name = "oc_no_tc"
    if ix.protocol == "simple":
        return CheckResult(name, "skip", "no optimistic votes in this protocol")
    for (view, h), (_, kinds, i) in sorted(ix.certified.items()):
        if "OPTIMISTIC" not in kinds:
            continue
        signers = ix.votes.get(("OPTIMISTIC", view, h), {})
        if len(signers) < ix.quorum:
            continue
        if view - 1 in ix.tc_views:
            return _fail(name, f"optimistic certificate in view {view} and TC for {view - 1}",
                         [i, ix.tc_views[view - 1][1]])
    return _pass(name)


def check_unique_extensibility(tr: TraceLike) -> CheckResult:
    """Every certificate from the view of a directly committed block onward extends it."""
    ix = _index(tr)
    name = "unique_extensibility"
    direct: dict[str, int] = {}
    for node in ix.honest:
        for _, _, h, is_direct, i in ix.commits.get(node, []):
            if is_direct:
                direct.setdefault(h, i)
    committed = []  # (view, height, hash, event index), sorted by view
    for h, ci in direct.items():
        blk = ix.blocks.get(h)
        if blk is None:
            return _fail(name, f"committed block {h[:8]} never proposed", [ci])
        committed.append((blk[2], blk[1], h, ci))
    committed.sort()
    views = [c[0] for c in committed]
    for (view, ch), (_, _, i) in sorted(ix.certified.items()):
        need = committed[:bisect.bisect_right(views, view)]
        if not need:
            continue
        # walk ch's ancestry once, down to the lowest committed height we need
        low = min(c[1] for c in need)
        path: dict[int, str] = {}
        cur, blk = ch, ix.blocks.get(ch)
        while blk is not None and blk[1] >= low:
            path[blk[1]] = cur
            cur, blk = blk[0], ix.blocks.get(blk[0])
        top = ix.blocks.get(ch)
        for _, height, h, ci in need:
            if path.get(height) == h:
                continue
            # a different block at that height, or ch sits below it: a real fork
            if height in path or (top is not None and height > top[1]):
                why = "does not extend"
            else:  # the walk stopped at a block missing from the trace
                why = "has unresolvable ancestry to"
            return _fail(name, f"certified {ch[:8]} in view {view} {why} committed {h[:8]}",
                         [ci, i])
    return _pass(name)


def check_vote_discipline(tr: TraceLike) -> CheckResult:
    """Honest nodes cast at most the votes each protocol allows per view.

    One optimistic vote and one final (normal or fallback) vote per view; a
    normal vote must name the block an optimistic vote went to. An optimistic
    vote followed by a fallback vote is allowed: the fallback proposal carries
    TC_{v-1}, which rules out an optimistic certificate for v.
    """
    ix = _index(tr)
    name = "vote_discipline"
    seen: dict[tuple, tuple[str, int]] = {}
    for node, vkind, view, h, _, i in ix.honest_votes:
        slot = "final" if vkind in ("SIMPLE", "NORMAL", "FALLBACK") else vkind
        key = (node, view, slot)
        if key in seen:
            return _fail(name, f"node {node} voted twice ({slot}) in view {view}",
                         [seen[key][1], i])
        seen[key] = (h, i)
        if vkind == "NORMAL":
            opt = seen.get((node, view, "OPTIMISTIC"))
            if opt is not None and opt[0] != h:
                return _fail(name, f"node {node} voted for two blocks in view {view}",
                             [opt[1], i])
    return _pass(name)


# ---------------------------------------------------------------------------
# liveness-style properties


def _margin(ix: TraceIndex) -> float:
    return (ix.view_timer + 3) * ix.delta


def _leader_block(ix: TraceIndex, view: int) -> list[tuple[str, int]]:
    leader = ix.leader(view)
    return [(h, i) for (v, h), (_, _, i) in ix.certified.items()
            if v == view and ix.blocks.get(h, (None,) * 4)[3] == leader]


def _post_gst_honest_views(ix: TraceIndex) -> list[int]:
    return sorted(v for v, (t, _) in ix.first_entry.items()
                  if t >= ix.gst - EPS and ix.leader(v) in ix.honest)


def check_reorg_resilience(tr: TraceLike) -> CheckResult:
    """Each post-GST honest leader gets exactly one block certified, extended by all later ones."""
    ix = _index(tr)
    name = "reorg_resilience"
    horizon = _margin(ix)
    checked = 0
    checked_blocks: list[tuple[int, int, str, int]] = []  # (view, height, hash, event index)
    for v in _post_gst_honest_views(ix):
        t_v, ei = ix.first_entry[v]
        if t_v + horizon > ix.end:
            continue
        checked += 1
        own = _leader_block(ix, v)
        if len(own) != 1:
            return _fail(name, f"honest leader of view {v} has {len(own)} certified blocks",
                         [ei] + [i for _, i in own])
        checked_blocks.append((v, ix.blocks[own[0][0]][1], *own[0]))
    if checked == 0:
        return CheckResult(name, "skip", "insufficient horizon: no post-GST honest view")
    # every later certificate must extend each of those blocks
    views = [c[0] for c in checked_blocks]
    low = list(itertools.accumulate((c[1] for c in checked_blocks), min))
    for (view, ch), (_, _, i) in ix.certified.items():
        k = bisect.bisect_left(views, view)
        if k == 0:
            continue
        path: dict[int, str] = {}
        cur, blk = ch, ix.blocks.get(ch)
        while blk is not None and blk[1] >= low[k - 1]:
            path[blk[1]] = cur
            cur, blk = blk[0], ix.blocks.get(blk[0])
        for v, height, h, hi in checked_blocks[:k]:
            if path.get(height) != h:
                return _fail(name, f"certified {ch[:8]} in view {view} drops view-{v} block",
                             [hi, i])
    return _pass(name, f"{checked} views")


def check_liveness(tr: TraceLike) -> CheckResult:
    """Post-GST honest leaders (pairs of consecutive ones, for simple/pipelined) get commits."""
    ix = _index(tr)
    name = "liveness"
    honest_views = _post_gst_honest_views(ix)
    single = ix.protocol == "commit"
    commit_sets = {node: {h for _, _, h, _, _ in ix.commits.get(node, [])} for node in ix.honest}
    margin = _margin(ix)
    checked = 0
    hv = set(honest_views)
    for v in honest_views:
        if single:
            last = ix.first_entry[v][0]
        else:
            if v + 1 not in hv:
                continue
            last = ix.first_entry[v + 1][0]
        if last + margin > ix.end:
            continue
        checked += 1
        own = _leader_block(ix, v)
        if not own:
            return _fail(name, f"no certified block for honest leader of view {v}",
                         [ix.first_entry[v][1]])
        h, i = own[0]
        missing = sorted(node for node, s in commit_sets.items() if h not in s)
        if missing:
            return _fail(name, f"block of view {v} not committed by nodes {missing}", [i])
    if checked == 0:
        return CheckResult(name, "skip", "insufficient horizon: no qualifying post-GST views")
    return _pass(name, f"{checked} views")


def check_view_sync(tr: TraceLike) -> CheckResult:
    """Once an honest node enters v, every honest node reaches v shortly after."""
    ix = _index(tr)
    name = "view_sync"
    bound = ix.delta if ix.protocol == "simple" else 2 * ix.delta
    for v, (t, ei) in sorted(ix.first_entry.items()):
        deadline = max(ix.gst, t) + bound
        if deadline > ix.end:
            continue
        for node in ix.honest:
            r = ix.reach_time(node, v)
            if r is None or r > deadline + EPS:
                return _fail(name, f"node {node} reached view {v} at {r}, deadline {deadline}",
                             [ei])
    return _pass(name)


def check_sequential_progress(tr: TraceLike) -> CheckResult:
    """Entering v requires enough honest nodes to have entered v-1 already."""
    ix = _index(tr)
    name = "sequential_progress"
    need = ix.f + 1 if ix.protocol == "simple" else 1
    entered: dict[int, list[float]] = defaultdict(list)
    for node in ix.honest:
        for t, v, _ in ix.entries.get(node, []):
            entered[v].append(t)
    for lst in entered.values():
        lst.sort()
    for node in ix.honest:
        for t, v, i in ix.entries.get(node, []):
            if v <= 1:
                continue
            before = bisect.bisect_right(entered.get(v - 1, []), t + EPS)
            if before < need:
                return _fail(name, f"node {node} entered {v} with {before} honest in {v - 1}", [i])
    return _pass(name)


def check_timer_semantics(tr: TraceLike) -> CheckResult:
    """No honest timeout for v' >= v earlier than the view timer after v is first reached."""
    ix = _index(tr)
    name = "timer_semantics"
    wait = ix.view_timer * ix.delta
    reach = ix.first_reach
    for view, signers in ix.timeouts.items():
        if view not in reach:
            continue
        for node, (t, _, i) in signers.items():
            if node in ix.honest and t < reach[view] + wait - EPS:
                return _fail(name, f"node {node} timed out of {view} at {t}, "
                                   f"view first reached at {reach[view]}", [i])
    return _pass(name)


def check_delivery_bound(tr: TraceLike) -> CheckResult:
    """Post-GST messages arrive within delta; earlier ones by GST + delta."""
    ix = _index(tr)
    name = "delivery_bound"
    d, gst = ix.delta, ix.gst
    for i, ev in ix.trace.of_kind("recv"):
        t, sent = ev[1], ev[5]
        if t < sent - EPS or t > max(sent, gst) + d + EPS:
            return _fail(name, f"message sent at {sent} delivered at {t}", [i])
    return _pass(name)


def check_eventual_delivery(tr: TraceLike) -> CheckResult:
    """Every send to a running honest node is delivered once its deadline has passed."""
    ix = _index(tr)
    name = "eventual_delivery"
    alive = {i for i in ix.honest}
    got: dict[int, set[int]] = defaultdict(set)
    for _, ev in ix.trace.of_kind("recv"):
        got[ev[3]].add(ev[2])
    d, gst = ix.delta, ix.gst
    for i, ev in ix.trace.of_kind("send"):
        sent, mid, dest = ev[1], ev[3], ev[6]
        if max(sent, gst) + d > ix.end:
            continue
        dests = alive if dest == -1 else ({dest} & alive)
        missing = dests - got.get(mid, set())
        if missing:
            return _fail(name, f"message {mid} never reached {sorted(missing)}", [i])
    return _pass(name)


def check_commit_progress(tr: TraceLike, max_gap: Optional[float] = None) -> CheckResult:
    """Every honest node keeps committing: no commit-free stretch longer than ``max_gap``.

    Meant for wall-clock logs, where timing bounds are only checked loosely;
    the default gap is ten view timers.
    """
    ix = _index(tr)
    name = "commit_progress"
    gap = max_gap if max_gap is not None else 10 * ix.view_timer * ix.delta
    for node in sorted(ix.honest):
        times = [0.0] + [c[0] for c in ix.commits.get(node, [])]
        last_seen = max((e[0] for e in ix.entries.get(node, [])), default=0.0)
        horizon = min(ix.end, max(last_seen, times[-1]))
        times.append(horizon)
        for a, b in zip(times, times[1:]):
            if b - a > gap + EPS:
                return _fail(name, f"node {node} committed nothing between {a:.3f} and {b:.3f}",
                             [])
    return _pass(name)


CHECKS: dict[str, Callable[[TraceLike], CheckResult]] = {
    "safety": check_safety,
    "view_safety": check_view_safety,
    "oc_no_tc": check_oc_no_tc,
    "unique_extensibility": check_unique_extensibility,
    "vote_discipline": check_vote_discipline,
    "reorg_resilience": check_reorg_resilience,
    "liveness": check_liveness,
    "view_sync": check_view_sync,
    "sequential_progress": check_sequential_progress,
    "timer_semantics": check_timer_semantics,
    "delivery_bound": check_delivery_bound,
    "eventual_delivery": check_eventual_delivery,
}

SAFETY_CHECKS = ("safety", "view_safety", "oc_no_tc", "unique_extensibility", "vote_discipline")
TRANSPORT_CHECKS = SAFETY_CHECKS + ("commit_progress",)


def check_all(tr: TraceLike, names: Optional[Iterable[str]] = None) -> list[CheckResult]:
    ix = _index(tr)
    out = []
    for n in (names or CHECKS):
        fn = check_commit_progress if n == "commit_progress" else CHECKS[n]
        out.append(fn(ix))
    return out


# ---------------------------------------------------------------------------
# metrics


def measure(tr: TraceLike) -> dict[str, Optional[float]]:
    """Throughput, transfer rate, mean / minimum commit latency and omega.

    A block counts once 2f+1 honest nodes (or all of them, if fewer) have
    committed it; its latency runs from creation to that commit.
    """
    ix = _index(tr)
    need = min(2 * ix.f + 1, len(ix.honest))
    lat = []
    size = 0
    for h, times in ix.commit_times().items():
        blk = ix.blocks.get(h)
        if blk is None or len(times) < need:
            continue
        times.sort()
        lat.append(times[need - 1] - blk[4])
        size += ix.trace.events[blk[5]][7] if blk[5] >= 0 else 0
    dur = ix.end
    omega = None
    for h, (_, _, _, proposer, t, _) in ix.blocks.items():
        if proposer is None or proposer not in ix.honest:
            continue
        for c in ix.children.get(h, ()):
            cp, ct = ix.blocks[c][3], ix.blocks[c][4]
            if cp != proposer and cp in ix.honest:
                gap = ct - t
                omega = gap if omega is None else min(omega, gap)
    return {
        "throughput": len(lat) / dur if dur > 0 else None,
        "transfer_rate": size / dur if dur > 0 else None,
        "latency_mean": statistics.fmean(lat) if lat else None,
        "omega": omega,
        "lambda": min(lat) if lat else None,
    }


def csv_row(trace: Trace, version: str = "") -> dict:
    m = trace.meta
    row = {"version": version, "seed": m.get("seed"), "protocol": m["protocol"],
           "schedule": m.get("schedule") if isinstance(m.get("schedule"), str) else "explicit",
           "n": m["n"], "f_actual": m.get("f_actual", len(m.get("byz", [])))}
    row.update(measure(trace))
    return row


def write_csv(rows: Iterable[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in CSV_COLUMNS})


def summarize(rows: Iterable[dict]) -> dict[str, dict[str, dict[str, Optional[float]]]]:
    """protocol -> metric -> {max, mean, median, min}; blank cells are skipped."""
    acc: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        for k in METRICS:
            val = r.get(k)
            if val in (None, ""):
                continue
            acc[r["protocol"]][k].append(float(val))
    out: dict = {}
    for proto, metrics in acc.items():
        out[proto] = {}
        for k in METRICS:
            vals = metrics.get(k)
            if not vals:
                out[proto][k] = {"max": None, "mean": None, "median": None, "min": None}
            else:
                out[proto][k] = {"max": max(vals), "mean": statistics.fmean(vals),
                                 "median": statistics.median(vals), "min": min(vals)}
    return out
