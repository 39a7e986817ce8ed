"""Declarative conformance scenarios driven by a packet-crafting client.

A scenario file is line oriented. ``#`` starts a comment. Header lines come
first, then one step per line; arguments are ``key=value`` pairs and values
may be double-quoted with backslash escapes (``data="ab\\n"``).

Header lines::

    scenario NAME
    profile  loss=P dup=P reorder=P delay_ms=MS jitter_ms=MS seed=N
    server   ip=A.B.C.D port=N iss=N rto=MS wnd=N mss=N
    client   ip=A.B.C.D port=N iss=N
    user     echo | script

Steps::

    send           [flags=LETTERS] [seq=EXPR] [ack=EXPR] [win=N] [data=STR]
                   [sport=N] [dport=N] [src=IP] [checksum=bad]
    expect         [flags=LETTERS] [seq=EXPR] [ack=EXPR] [win=N] [len=N]
                   [data=STR] [within=MS] [dt=MS]
    expect_silence [for=MS]
    expect_user    LABEL [data=STR] [within=MS]
    user_inject    data=STR | close
    assert_state   STATE
    assert_states  STATE,STATE,...
    advance_time   MS
    expect_abort   [contains=STR]
    assert_end     [outcome=end|reset]

``EXPR`` is an integer or ``NAME``, ``NAME+N`` or ``NAME-N`` over:

* ``iss`` / ``siss``: client and server initial sequence numbers;
* ``nxt``: the client's next sequence number, advanced by sends on the
  client's own address and ports that start at or before it;
* ``rcv``: the client's next expected sequence number, advanced by matched
  in-order server segments;
* ``snxt``: one past the highest server sequence number seen.

``send`` defaults to ``flags=A seq=nxt ack=rcv``; ``ack`` is 0 when the
flags lack ACK. ``expect`` waits ``within`` ms (default 1000) for the next
server segment; ``dt`` requires the virtual time since the previous step
ended to equal the given value. Flags are written with the letters
S F R P A U.
"""

from __future__ import annotations

import codecs
import shlex
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .harness import SimRun
from .net import FaultProfile
from .server import RunReport, ScriptedUser, ServerConfig, run_echo_user
from .sim import SimKernel
from .tcp import Address, State, seq_add, seq_lt, seq_lte
from .wire import Flags, PseudoHeader, Segment, encode

DEFAULT_WITHIN = 1000.0
DEFAULT_SILENCE = 500.0
MOD = 1 << 32


class ScenarioError(Exception):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class StepFailed(Exception):
    pass


@dataclass
class Step:
    op: str
    args: dict[str, str]
    positional: list[str]
    line: int
    text: str


@dataclass
class Scenario:
    name: str
    profile: FaultProfile = field(default_factory=FaultProfile)
    server: ServerConfig = field(default_factory=lambda: ServerConfig(iss=300))
    client: Address = Address("10.0.0.2", 4321)
    client_iss: int = 100
    user: str = "echo"
    steps: list[Step] = field(default_factory=list)


def _int(text: str, line: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise ScenarioError(f"{text!r} is not an integer", line) from None


def _float(text: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ScenarioError(f"{text!r} is not a number", line) from None


def _split(text: str, line: int) -> tuple[str, list[str], dict[str, str]]:
    try:
        words = shlex.split(text, comments=True)
    except ValueError as exc:
        raise ScenarioError(str(exc), line) from None
    op, rest = words[0], words[1:]
    args: dict[str, str] = {}
    positional: list[str] = []
    for word in rest:
        if "=" in word:
            key, value = word.split("=", 1)
            if key in args:
                raise ScenarioError(f"{key} given twice", line)
            args[key] = value
        else:
            positional.append(word)
    return op, positional, args


_HEADERS = {"scenario", "profile", "server", "client", "user"}
_STEPS = {
    "send": {"flags", "seq", "ack", "win", "data", "sport", "dport", "src", "checksum", "urg"},
    "expect": {"flags", "seq", "ack", "win", "len", "data", "within", "dt"},
    "expect_silence": {"for"},
    "expect_user": {"data", "within"},
    "user_inject": {"data"},
    "assert_state": set(),
    "assert_states": set(),
    "advance_time": set(),
    "expect_abort": {"contains"},
    "assert_end": {"outcome"},
}
_EXPR_NAMES = {"iss", "siss", "nxt", "rcv", "snxt"}


def _check_keys(op: str, args: dict[str, str], allowed: set[str], line: int) -> None:
    unknown = set(args) - allowed
    if unknown:
        raise ScenarioError(f"{op} does not take {', '.join(sorted(unknown))}", line)


def parse(text: str, name: str = "scenario") -> Scenario:
    sc = Scenario(name)
    srv: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.split("#", 1)[0].strip():
            continue
        op, pos, args = _split(raw, lineno)
        if op in _HEADERS:
            if sc.steps:
                raise ScenarioError(f"header {op} after the first step", lineno)
            if op == "scenario":
                if len(pos) != 1:
                    raise ScenarioError("scenario takes one name", lineno)
                sc.name = pos[0]
            elif op == "profile":
                _check_keys(op, args, {"loss", "dup", "reorder", "delay_ms", "jitter_ms", "seed", "hold_ms"}, lineno)
                values = {k: (_int(v, lineno) if k == "seed" else _float(v, lineno)) for k, v in args.items()}
                try:
                    sc.profile = FaultProfile(**values)
                except ValueError as exc:
                    raise ScenarioError(str(exc), lineno) from None
            elif op == "server":
                _check_keys(op, args, {"ip", "port", "iss", "rto", "wnd", "mss"}, lineno)
                srv.update(args)
            elif op == "client":
                _check_keys(op, args, {"ip", "port", "iss"}, lineno)
                sc.client = Address(args.get("ip", sc.client.ip),
                                    _int(args.get("port", str(sc.client.port)), lineno))
                if "iss" in args:
                    sc.client_iss = _int(args["iss"], lineno)
            else:
                if pos not in (["echo"], ["script"]):
                    raise ScenarioError("user is 'echo' or 'script'", lineno)
                sc.user = pos[0]
            continue
        if op not in _STEPS:
            raise ScenarioError(f"unknown step {op!r}", lineno)
        _check_keys(op, args, _STEPS[op], lineno)
        step = Step(op, args, pos, lineno, raw.strip())
        _validate(step)
        sc.steps.append(step)
    base = sc.server
    sc.server = ServerConfig(
        local=Address(srv.get("ip", base.local.ip), _int(srv.get("port", str(base.local.port)), 0)),
        iss=_int(srv.get("iss", str(base.iss)), 0),
        rcv_wnd=_int(srv.get("wnd", str(base.rcv_wnd)), 0),
        mss=_int(srv.get("mss", str(base.mss)), 0),
        rto_ms=_float(srv.get("rto", str(base.rto_ms)), 0))
    return sc


def _validate(step: Step) -> None:
    line = step.line
    for key in ("seq", "ack"):
        if key in step.args:
            _parse_expr(step.args[key], line)
    if "flags" in step.args:
        try:
            Flags.parse(step.args["flags"])
        except ValueError as exc:
            raise ScenarioError(str(exc), line) from None
    if "data" in step.args:
        _unescape(step.args["data"], line)
    if step.op == "user_inject" and not ("data" in step.args or step.positional == ["close"]):
        raise ScenarioError("user_inject needs data=... or close", line)
    if step.op in ("assert_state", "expect_user", "advance_time", "assert_states") and len(step.positional) != 1:
        raise ScenarioError(f"{step.op} takes one argument", line)
    if step.op == "assert_state":
        _state(step.positional[0], line)
    if step.op == "assert_states":
        for name in step.positional[0].split(","):
            _state(name, line)
    if step.op == "advance_time":
        _float(step.positional[0], line)


def _state(name: str, line: int) -> State:
    try:
        return State(name)
    except ValueError:
        raise ScenarioError(f"unknown state {name!r}", line) from None


def _unescape(text: str, line: int) -> bytes:
    try:
        return codecs.decode(text, "unicode_escape").encode("latin-1")
    except (UnicodeError, ValueError) as exc:
        raise ScenarioError(f"bad string {text!r}: {exc}", line) from None


def _parse_expr(text: str, line: int) -> tuple[str | None, int]:
    for sign in ("+", "-"):
        if sign in text:
            name, num = text.split(sign, 1)
            if name not in _EXPR_NAMES:
                raise ScenarioError(f"unknown value {name!r}", line)
            n = _int(num, line)
            return name, n if sign == "+" else -n
    if text in _EXPR_NAMES:
        return text, 0
    return None, _int(text, line)


# -- running ----------------------------------------------------------------

@dataclass
class ScenarioResult:
    name: str
    passed: bool
    failure: str
    report_text: str
    states: list[State]
    outcome: str
    report: RunReport | None = field(default=None, repr=False, compare=False)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.failure}" if self.failure else "")


class _Runner:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.run = SimRun(config=sc.server, kernel=SimKernel(), profile=sc.profile)
        self.kernel = self.run.kernel
        self.peer = self.run.client_peer(sc.client)
        self.scripted = ScriptedUser(self.kernel) if sc.user == "script" else None
        self.vars = {"iss": sc.client_iss, "siss": sc.server.iss, "nxt": sc.client_iss,
                     "rcv": 0, "snxt": sc.server.iss}
        self.user_cursor = 0
        self.last = 0.0
        self.failure = ""

    def value(self, text: str) -> int:
        name, n = _parse_expr(text, None)
        return (self.vars[name] + n) % MOD if name else n % MOD

    def execute(self) -> None:
        handlers: dict[str, Callable[[Step], None]] = {
            "send": self.send, "expect": self.expect, "expect_silence": self.silence,
            "expect_user": self.expect_user, "user_inject": self.inject,
            "assert_state": self.assert_state, "assert_states": self.assert_states,
            "advance_time": self.advance, "expect_abort": self.expect_abort,
            "assert_end": self.assert_end,
        }
        for step in self.sc.steps:
            try:
                handlers[step.op](step)
            except StepFailed as exc:
                self.failure = f"line {step.line} ({step.text}): {exc}"
                self.run.trace.add("Scenario", "note", label="failed", detail=self.failure)
                return
            self.last = self.kernel.now()

    # -- steps ------------------------------------------------------------
    def send(self, step: Step) -> None:
        a = step.args
        flags = Flags.parse(a.get("flags", "A"))
        payload = _unescape(a["data"], step.line) if "data" in a else b""
        seq = self.value(a.get("seq", "nxt"))
        ack = self.value(a["ack"]) if "ack" in a else (self.vars["rcv"] if flags & Flags.ACK else 0)
        seg = Segment(int(a.get("sport", self.sc.client.port)), int(a.get("dport", self.sc.server.local.port)),
                      seq, ack, flags, window=int(a.get("win", 65535)), payload=payload,
                      urgent=int(a.get("urg", 0)))
        src = a.get("src", self.sc.client.ip)
        data = encode(seg, PseudoHeader(src, self.sc.server.local.ip))
        if a.get("checksum") == "bad":
            data = data[:16] + bytes([data[16] ^ 0x01]) + data[17:]
        self.peer.send_bytes(data, src_ip=src)
        end = seq_add(seq, seg.seg_len)
        nxt = self.vars["nxt"]
        own = src == self.sc.client.ip and seg.src_port == self.sc.client.port \
            and seg.dst_port == self.sc.server.local.port
        if own and seq_lte(seq, nxt) and seq_lt(nxt, end):
            self.vars["nxt"] = end

    def expect(self, step: Step) -> None:
        a = step.args
        within = float(a.get("within", DEFAULT_WITHIN))
        seg = self.peer.recv(self.kernel.now() + within)
        if seg is None:
            raise StepFailed(f"no segment within {within:g} ms")
        problems = []
        if "flags" in a and seg.flags != Flags.parse(a["flags"]):
            problems.append(f"flags {seg.flags.letters()} != {a['flags']}")
        for key in ("seq", "ack"):
            if key in a and getattr(seg, key) != self.value(a[key]):
                problems.append(f"{key} {getattr(seg, key)} != {a[key]} ({self.value(a[key])})")
        if "win" in a and seg.window != int(a["win"]):
            problems.append(f"win {seg.window} != {a['win']}")
        if "len" in a and len(seg.payload) != int(a["len"]):
            problems.append(f"len {len(seg.payload)} != {a['len']}")
        if "data" in a and seg.payload != _unescape(a["data"], step.line):
            problems.append(f"data {seg.payload!r} != {_unescape(a['data'], step.line)!r}")
        if "dt" in a:
            dt = self.kernel.now() - self.last
            if abs(dt - float(a["dt"])) > 1e-6:
                problems.append(f"arrived after {dt:g} ms, expected {a['dt']}")
        if problems:
            raise StepFailed(f"got {seg.summary()}: " + "; ".join(problems))
        if seg.has(Flags.SYN):
            self.vars["rcv"] = seq_add(seg.seq, 1)
        elif seg.seq == self.vars["rcv"]:
            self.vars["rcv"] = seq_add(seg.seq, seg.seg_len)
        end = seq_add(seg.seq, seg.seg_len)
        if seq_lt(self.vars["snxt"], end):
            self.vars["snxt"] = end

    def silence(self, step: Step) -> None:
        span = float(step.args.get("for", DEFAULT_SILENCE))
        seg = self.peer.recv(self.kernel.now() + span)
        if seg is not None:
            raise StepFailed(f"unexpected {seg.summary()}")

    def _user_events(self) -> list:
        return [e for e in self.run.trace.events if e.role == "ServerUser" and e.kind == "recv"]

    def expect_user(self, step: Step) -> None:
        within = float(step.args.get("within", DEFAULT_WITHIN))
        if not self.kernel.wait_for(lambda: len(self._user_events()) > self.user_cursor,
                                    self.kernel.now() + within):
            raise StepFailed(f"user received nothing within {within:g} ms")
        ev = self._user_events()[self.user_cursor]
        self.user_cursor += 1
        if ev.label != step.positional[0]:
            raise StepFailed(f"user received {ev.label}, expected {step.positional[0]}")
        if "data" in step.args:
            want = f"data={_unescape(step.args['data'], step.line)!r}"
            if ev.detail != want:
                raise StepFailed(f"user received {ev.detail}, expected {want}")

    def inject(self, step: Step) -> None:
        if self.scripted is None:
            raise StepFailed("user_inject needs 'user script'")
        if "data" in step.args:
            self.scripted.inject("data", _unescape(step.args["data"], step.line))
        else:
            self.scripted.inject("close")

    def assert_state(self, step: Step) -> None:
        self.kernel.settle()
        want = _state(step.positional[0], step.line)
        if self.run.report.state is not want:
            raise StepFailed(f"server is {self.run.report.state}, expected {want}")

    def assert_states(self, step: Step) -> None:
        self.kernel.settle()
        want = [_state(n, step.line) for n in step.positional[0].split(",")]
        got = self.run.report.states
        if got != want:
            raise StepFailed("states " + ",".join(map(str, got)) + " != " + step.positional[0])

    def advance(self, step: Step) -> None:
        self.kernel.sleep(float(step.positional[0]))

    def expect_abort(self, step: Step) -> None:
        self.kernel.settle()
        rep = self.run.report
        if rep.outcome != "aborted":
            raise StepFailed(f"server outcome is {rep.outcome}, expected aborted")
        if "contains" in step.args and step.args["contains"] not in rep.diagnostic:
            raise StepFailed(f"diagnostic {rep.diagnostic!r} lacks {step.args['contains']!r}")

    def assert_end(self, step: Step) -> None:
        self.kernel.settle()
        want = step.args.get("outcome", "end")
        if self.run.report.outcome != want:
            raise StepFailed(f"server outcome is {self.run.report.outcome}, expected {want}")


def run_scenario(sc: Scenario | str | Path, limit_ms: float = 600_000) -> ScenarioResult:
    """Execute a scenario against a fresh simulated server."""
    if isinstance(sc, Path) or (isinstance(sc, str) and "\n" not in sc and sc.endswith(".scn")):
        path = Path(sc)
        sc = parse(path.read_text(), path.stem)
    elif isinstance(sc, str):
        sc = parse(sc)
    runner = _Runner(sc)
    run = runner.run
    if runner.scripted is not None:
        run.start(runner.scripted.run)
    else:
        run.start(lambda ch: run_echo_user(ch, sc.server.mss))
    proc = run.kernel.spawn("scenario", runner.execute)
    try:
        run.kernel.run(until=limit_ms, stop=lambda: proc.done)
    finally:
        run.kernel.shutdown()
    failure = runner.failure
    if not proc.done and not failure:
        failure = "scenario did not finish (deadlock or time limit)"
    if proc.error is not None:
        failure = f"scenario error: {proc.error!r}"
    return ScenarioResult(sc.name, not failure, failure, run.report.text(),
                          list(run.report.states), run.report.outcome, run.report)


def builtin_scenarios() -> dict[str, Path]:
    """Shipped scenario files by name."""
    root = resources.files("sttcp") / "scenarios"
    return {Path(str(p)).stem: Path(str(p)) for p in root.iterdir() if str(p).endswith(".scn")}


def golden_path(scn: Path) -> Path:
    return scn.with_suffix(".trace")
