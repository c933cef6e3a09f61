"""Adaptation state machine and bundle-adjustment scheduling.

One controller step per arriving keyframe. At t > 0 with t divisible by m
the controller validates the newest keyframe against the sparse anchors:
a validation loss under tau_val extends a run of consecutive passes, any
failure resets it, and every n-th consecutive pass triggers global bundle
adjustment. All other steps run exactly one fine-tune. Between consecutive
validations there are therefore exactly m - 1 fine-tune steps.

Hooks (validate / fine_tune / trigger_ba) are injected; a hook failure
propagates and leaves the controller state exactly as it was before the
step. Every action appends one line to a structured event log.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ControllerConfig:
    m: int = 5  # validate every m-th step
    n: int = 3  # consecutive passes per BA trigger
    tau_val: float = 0.2  # validation threshold, inverse meters
    halt_after_converged: bool = False
    ba_repeat: bool = True

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"m and n must be positive, got m={self.m} n={self.n}")


@dataclass
class ControllerState:
    t: int = 0
    state: str = "IDLE"
    n_converged: int = 0
    converged_once: bool = False
    ba_count: int = 0


@dataclass
class Event:
    t: int
    state: str
    action: str  # validate | fine_tune | trigger_ba | skip
    l_val: float | None
    n_converged: int
    wall_time: float

    def line(self) -> str:
        lv = "" if self.l_val is None else f"{self.l_val:.6f}"
        return f"{self.t}\t{self.state}\t{self.action}\t{lv}\t{self.n_converged}\t{self.wall_time:.6f}"


EVENT_HEADER = "t\tstate\taction\tl_val\tn_converged\twall_time"


def parse_event_line(line: str) -> Event:
    t, state, action, lv, nc, wall = line.rstrip("\n").split("\t")
    return Event(t=int(t), state=state, action=action,
                 l_val=float(lv) if lv else None,
                 n_converged=int(nc), wall_time=float(wall))


class EventLog:
    """Append-only tab-separated action log."""

    def __init__(self, path=None):
        self.events: list[Event] = []
        self._file = None
        if path is not None:
            self._file = open(path, "w", encoding="utf-8")
            self._file.write(EVENT_HEADER + "\n")

    def append(self, event: Event) -> None:
        self.events.append(event)
        if self._file is not None:
            self._file.write(event.line() + "\n")
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


class AdaptationController:
    """Drives validation, fine-tuning, and BA triggers over a keyframe stream."""

    def __init__(self, config: ControllerConfig, validate, fine_tune, trigger_ba,
                 log: EventLog | None = None):
        self.config = config
        self.validate = validate
        self.fine_tune = fine_tune
        self.trigger_ba = trigger_ba
        self.log = log or EventLog()
        self.state = ControllerState()

    def step(self) -> list[str]:
        """Process one keyframe arrival; returns the actions taken."""
        cfg = self.config
        st = self.state
        prior = replace(st)
        actions: list[str] = []
        try:
            run_global_ba = False
            l_val = None
            if st.t > 0 and st.t % cfg.m == 0:
                l_val = float(self.validate())
                if l_val < cfg.tau_val:
                    st.n_converged += 1
                else:
                    st.n_converged = 0
                if st.n_converged > 0 and st.n_converged % cfg.n == 0:
                    st.converged_once = True
                    if cfg.ba_repeat or st.ba_count == 0:
                        run_global_ba = True
                actions.append("validate")
                self._emit(st.t, "IDLE", "validate", l_val, st.n_converged)
            else:
                if cfg.halt_after_converged and st.converged_once:
                    actions.append("skip")
                    self._emit(st.t, "IDLE", "skip", None, st.n_converged)
                else:
                    st.state = "FINE_TUNE"
                    self.fine_tune()
                    st.state = "IDLE"
                    actions.append("fine_tune")
                    self._emit(st.t, "FINE_TUNE", "fine_tune", None, st.n_converged)
            if run_global_ba:
                st.ba_count += 1
                self.trigger_ba()
                actions.append("trigger_ba")
                self._emit(st.t, "IDLE", "trigger_ba", l_val, st.n_converged)
            st.t += 1
            return actions
        except Exception:
            self.state = prior
            raise

    def _emit(self, t: int, state: str, action: str, l_val, n_converged: int) -> None:
        self.log.append(Event(t=t, state=state, action=action, l_val=l_val,
                              n_converged=n_converged, wall_time=time.monotonic()))


class BAScheduler:
    """Runs bundle adjustment without blocking the caller, coalescing triggers.

    A trigger while a run is active leaves exactly one pending run, no matter
    how many triggers arrive in between. In synchronous mode the run happens
    inline, which keeps full pipelines deterministic.
    """

    def __init__(self, run_fn, synchronous: bool = True):
        self.run_fn = run_fn
        self.synchronous = synchronous
        self.runs = 0
        self.coalesced = 0
        self._lock = threading.Lock()
        self._busy = False
        self._pending = False
        self._thread: threading.Thread | None = None

    def trigger(self) -> None:
        if self.synchronous:
            self.runs += 1
            self.run_fn()
            return
        with self._lock:
            if self._busy:
                if self._pending:
                    self.coalesced += 1
                self._pending = True
                return
            self._busy = True
        self._thread = threading.Thread(target=self._worker, daemon=True)
        self._thread.start()

    def _worker(self) -> None:
        while True:
            self.runs += 1
            self.run_fn()
            with self._lock:
                if self._pending:
                    self._pending = False
                    continue
                self._busy = False
                return

    def wait(self, timeout: float = 30.0) -> None:
        """Block until any active or pending run has finished."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if not self._busy:
                    return
            time.sleep(0.002)
        raise TimeoutError("bundle adjustment did not finish in time")
