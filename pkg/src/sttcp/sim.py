"""Clocks and the deterministic simulation kernel.

Both clocks expose ``now()`` in milliseconds and ``wait_for(pred, deadline)``
which blocks the calling process until ``pred()`` holds (returns True) or the
deadline passes (returns False).

:class:`SimKernel` runs each process in its own thread but lets exactly one
run at a time. A process runs until it blocks; the kernel then resumes the
next ready process in round-robin order. When nothing is ready, virtual time
jumps to the earliest pending deadline or registered event. Given the same
inputs, every run interleaves identically.
"""

from __future__ import annotations

import logging
import threading
import time
from typing import Any, Callable

log = logging.getLogger(__name__)

Predicate = Callable[[], bool]


class Shutdown(BaseException):
    """Raised inside a blocked process when the kernel tears it down."""


class Stalled(RuntimeError):
    pass


class WallClock:
    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._origin = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self._origin) * 1000.0

    def wait_for(self, pred: Predicate, deadline: float | None = None) -> bool:
        with self._cond:
            while not pred():
                if deadline is None:
                    self._cond.wait(0.05)
                    continue
                remaining = deadline - self.now()
                if remaining <= 0:
                    return False
                self._cond.wait(min(remaining / 1000.0, 0.05))
            return True

    def sleep(self, ms: float) -> None:
        time.sleep(ms / 1000.0)

    def notify(self) -> None:
        with self._cond:
            self._cond.notify_all()


class Process:
    def __init__(self, kernel: "SimKernel", name: str, fn: Callable[..., Any],
                 args: tuple, kwargs: dict):
        self.kernel = kernel
        self.name = name
        self.fn = fn
        self.args = args
        self.kwargs = kwargs
        self.result: Any = None
        self.error: BaseException | None = None
        self.done = False
        self.pred: Predicate | None = lambda: True
        self.deadline: float | None = None
        self.woke_ready = True
        self.killed = False
        self._go = threading.Event()
        self.thread = threading.Thread(target=self._body, name=f"sim-{name}", daemon=True)

    def _body(self) -> None:
        self._go.wait()
        self._go.clear()
        try:
            if not self.killed:
                self.result = self.fn(*self.args, **self.kwargs)
        except Shutdown:
            pass
        except BaseException as exc:  # reported through the kernel
            self.error = exc
            log.debug("process %s failed", self.name, exc_info=True)
        finally:
            self.done = True
            self.pred = None
            self.kernel._baton.set()

    def __repr__(self) -> str:
        state = "done" if self.done else "blocked"
        return f"<Process {self.name} {state}>"


class SimKernel:
    def __init__(self) -> None:
        self._now = 0.0
        self.procs: list[Process] = []
        self._sources: list[Callable[[], float | None]] = []
        self._baton = threading.Event()
        self._current: Process | None = None
        self._last = -1
        self.switches = 0

    # -- clock interface --------------------------------------------------
    def now(self) -> float:
        return self._now

    def wait_for(self, pred: Predicate, deadline: float | None = None) -> bool:
        if pred():
            return True
        if deadline is not None and deadline <= self._now:
            return False
        return self._block(pred, deadline)

    def sleep(self, ms: float) -> None:
        self._block(lambda: False, self._now + ms)

    def settle(self) -> None:
        """Let every other ready process run before continuing."""
        self._block(lambda: False, self._now)

    def notify(self) -> None:
        pass

    # -- processes --------------------------------------------------------
    def spawn(self, name: str, fn: Callable[..., Any], *args: Any, **kwargs: Any) -> Process:
        proc = Process(self, name, fn, args, kwargs)
        self.procs.append(proc)
        proc.thread.start()
        return proc

    def add_source(self, next_event: Callable[[], float | None]) -> None:
        """Register a callable giving the next time something becomes ready."""
        self._sources.append(next_event)

    def _block(self, pred: Predicate, deadline: float | None) -> bool:
        proc = self._current
        if proc is None or threading.current_thread() is not proc.thread:
            raise RuntimeError("blocking call outside a simulated process")
        proc.pred, proc.deadline = pred, deadline
        self._baton.set()
        proc._go.wait()
        proc._go.clear()
        if proc.killed:
            raise Shutdown()
        return proc.woke_ready

    def _pick(self) -> tuple[Process, bool] | None:
        n = len(self.procs)
        for k in range(1, n + 1):
            proc = self.procs[(self._last + k) % n]
            if not proc.done and proc.pred is not None and proc.pred():
                return proc, True
        due = [p for p in self.procs
               if not p.done and p.deadline is not None and p.deadline <= self._now]
        if due:
            return min(due, key=lambda p: (p.deadline, self.procs.index(p))), False
        return None

    def _next_time(self) -> float | None:
        times = [p.deadline for p in self.procs if not p.done and p.deadline is not None]
        for source in self._sources:
            t = source()
            if t is not None:
                times.append(t)
        future = [t for t in times if t > self._now]
        return min(future) if future else None

    def _resume(self, proc: Process, ready: bool) -> None:
        self._last = self.procs.index(proc)
        proc.woke_ready = ready
        proc.pred = None
        proc.deadline = None
        self._current = proc
        self._baton.clear()
        self.switches += 1
        proc._go.set()
        self._baton.wait()
        self._current = None

    def run(self, until: float | None = None, stop: Predicate | None = None) -> None:
        """Drive processes until all finish, ``stop()`` holds, virtual time would
        pass ``until``, or nothing can make progress."""
        while any(not p.done for p in self.procs):
            if stop is not None and stop():
                return
            picked = self._pick()
            if picked is None:
                t = self._next_time()
                if t is None or (until is not None and t > until):
                    return
                self._now = t
                continue
            self._resume(*picked)

    def shutdown(self) -> None:
        for proc in self.procs:
            if not proc.done:
                proc.killed = True
                self._resume(proc, False)
        for proc in self.procs:
            proc.thread.join(timeout=5)

    @property
    def errors(self) -> list[tuple[str, BaseException]]:
        return [(p.name, p.error) for p in self.procs if p.error is not None]
