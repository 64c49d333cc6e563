"""
Actors with virtual clocks.

Every thread that touches the FTL is an actor of a ``Runtime`` and carries a
clock in microseconds. Device operations move the caller's clock forward, so
elapsed times and latency samples are measured in simulated time while the
code itself runs on ordinary threads.

Two scheduling modes:

* deterministic: one actor runs at a time. The baton passes to the runnable
  actor with the smallest (clock, seeded tie-break) whenever the running actor
  advances past it or blocks. Same seed, same interleaving.
* free: actors are plain preemptive threads, clocks merge at lock hand-off
  and notification. Meant for race-stress tests.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import threading
import time
from collections import deque

from ftl.errors import LifecycleError, SchedulingError

LOGGER = logging.getLogger(__name__)


class Actor:
    __slots__ = ("name", "clock", "done", "exception", "result", "thread",
                 "_gate", "_epoch", "_joiners")

    def __init__(self, name, clock=0.0):
        self.name = name
        self.clock = float(clock)
        self.done = False
        self.exception = None
        self.result = None
        self.thread = None
        # baton: released by whoever schedules this actor next
        self._gate = threading.Semaphore(0)
        self._epoch = 0
        self._joiners = []

    def __repr__(self):
        return f"Actor({self.name!r}, clock={self.clock:.1f})"


class Runtime:
    def __init__(self, deterministic=True, seed=0, name="main", real_time_scale=1.0):
        self.deterministic = deterministic
        self.seed = seed
        self.real_time_scale = real_time_scale
        self._rng = random.Random(seed)
        self._tls = threading.local()
        self._ready = []
        self._seq = itertools.count()
        self._names = itertools.count(1)
        self._horizon = 0.0
        self._horizon_lock = threading.Lock()
        self._failure = None
        self._actors = []
        self._main = Actor(name)
        self._main.thread = threading.current_thread()
        self._tls.actor = self._main
        self._actors.append(self._main)

    # clocks

    def current(self):
        actor = getattr(self._tls, "actor", None)
        if actor is None:
            if self.deterministic:
                raise SchedulingError(
                    f"thread {threading.current_thread().name!r} is not an actor of this runtime")
            actor = Actor(threading.current_thread().name, self._horizon)
            actor.thread = threading.current_thread()
            self._tls.actor = actor
        return actor

    def is_actor(self):
        return getattr(self._tls, "actor", None) is not None

    def now(self):
        return self.current().clock

    @property
    def horizon(self):
        """Largest virtual time any actor has reached."""
        return self._horizon

    def random(self, stream):
        """A seeded generator private to one component."""
        return random.Random(f"{self.seed}:{stream}")

    def _note(self, clock):
        if clock > self._horizon:
            with self._horizon_lock:
                if clock > self._horizon:
                    self._horizon = clock

    def advance(self, dt):
        if dt < 0:
            raise SchedulingError(f"cannot move a clock backwards by {dt}")
        me = self.current()
        me.clock += dt
        self._note(me.clock)
        if self.deterministic:
            self._yield(me)
        else:
            time.sleep(0)

    def advance_to(self, timestamp):
        me = self.current()
        if timestamp > me.clock:
            self.advance(timestamp - me.clock)

    def yield_now(self):
        self.advance(0.0)

    def sleep(self, dt):
        if self.deterministic:
            self.advance(dt)
            return
        me = self.current()
        me.clock += dt
        self._note(me.clock)
        time.sleep(min(dt * 1e-6 * self.real_time_scale, 0.01))

    # actors

    def spawn(self, target, *args, name=None, **kwargs):
        parent = self.current()
        actor = Actor(name or f"actor-{next(self._names)}", parent.clock)

        def bootstrap():
            self._tls.actor = actor
            if self.deterministic:
                actor._gate.acquire()
            try:
                actor.result = target(*args, **kwargs)
            except BaseException as error:  # noqa: B902 - carried to join()
                actor.exception = error
                LOGGER.debug("actor %s ended with %r", actor.name, error)
            finally:
                self._finish(actor)

        actor.thread = threading.Thread(target=bootstrap, name=actor.name, daemon=True)
        self._actors.append(actor)
        if self.deterministic:
            self._push(actor, actor.clock)
        actor.thread.start()
        return actor

    def join(self, actor, reraise=True):
        me = self.current()
        if self.deterministic:
            if not actor.done:
                actor._joiners.append(me)
                self._block(me)
        else:
            actor.thread.join()
        if actor.clock > me.clock:
            me.clock = actor.clock
        if reraise and actor.exception is not None:
            raise actor.exception
        return actor.result

    def live_actors(self):
        return [actor for actor in self._actors if not actor.done]

    # primitives

    def mutex(self, name=None):
        if self.deterministic:
            return ScheduledMutex(self, name)
        return ThreadMutex(self, name)

    def condition(self, mutex=None):
        if self.deterministic:
            return ScheduledCondition(self, mutex)
        return ThreadCondition(self, mutex)

    def channel(self, name=None):
        return Channel(self, name)

    def completion(self):
        return Completion(self)

    # deterministic scheduler internals; only the baton holder calls these

    def _push(self, actor, at):
        heapq.heappush(self._ready, (at, self._rng.random(), next(self._seq), actor._epoch, actor))

    def _wake(self, actor, at):
        if self.deterministic:
            self._push(actor, max(actor.clock, at))

    def _pop(self):
        ready = self._ready
        while ready:
            at, _, _, epoch, actor = heapq.heappop(ready)
            if epoch != actor._epoch or actor.done:
                continue
            actor._epoch += 1
            if at > actor.clock:
                actor.clock = at
            self._note(actor.clock)
            return actor
        return None

    def _yield(self, me):
        ready = self._ready
        if not ready or me.clock < ready[0][0]:
            return
        self._push(me, me.clock)
        self._hand_over(me, self._pop())

    def _block(self, me):
        nxt = self._pop()
        if nxt is None:
            blocked = ", ".join(a.name for a in self.live_actors())
            raise SchedulingError(f"deadlock: no runnable actor (blocked: {blocked})")
        self._hand_over(me, nxt)

    def _hand_over(self, me, nxt):
        if nxt is me:
            return
        nxt._gate.release()
        me._gate.acquire()
        if self._failure is not None and me is self._main:
            failure, self._failure = self._failure, None
            raise failure

    def _finish(self, actor):
        actor.done = True
        if not self.deterministic:
            return
        for joiner in actor._joiners:
            self._push(joiner, max(joiner.clock, actor.clock))
        actor._joiners.clear()
        nxt = self._pop()
        if nxt is not None:
            nxt._gate.release()
        elif not self._main.done:
            blocked = ", ".join(a.name for a in self.live_actors())
            self._failure = SchedulingError(f"deadlock after {actor.name} finished (blocked: {blocked})")
            self._main._gate.release()


class ScheduledMutex:
    """FIFO hand-off mutex whose waiting yields to the deterministic scheduler."""

    def __init__(self, runtime, name=None):
        self._rt = runtime
        self.name = name
        self._owner = None
        self._waiters = deque()

    def acquire(self):
        me = self._rt.current()
        if self._owner is None:
            self._owner = me
            return True
        if self._owner is me:
            raise SchedulingError(f"mutex {self.name} is not reentrant")
        self._waiters.append(me)
        self._rt._block(me)
        return True

    def try_acquire(self):
        if self._owner is None:
            self._owner = self._rt.current()
            return True
        return False

    def release(self):
        me = self._rt.current()
        if self._owner is not me:
            raise SchedulingError(f"mutex {self.name} released by non-owner {me.name}")
        if self._waiters:
            nxt = self._waiters.popleft()
            self._owner = nxt
            self._rt._wake(nxt, me.clock)
        else:
            self._owner = None

    def locked(self):
        return self._owner is not None

    def owned(self):
        return self._owner is self._rt.current()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


class ThreadMutex:
    def __init__(self, runtime, name=None):
        self._rt = runtime
        self.name = name
        self._lock = threading.Lock()
        self._owner = None
        self._released_at = 0.0

    def acquire(self):
        self._lock.acquire()
        me = self._rt.current()
        if self._released_at > me.clock:
            me.clock = self._released_at
        self._owner = me
        return True

    def try_acquire(self):
        if not self._lock.acquire(blocking=False):
            return False
        self._owner = self._rt.current()
        return True

    def release(self):
        me = self._rt.current()
        if self._owner is not me:
            raise SchedulingError(f"mutex {self.name} released by non-owner {me.name}")
        self._released_at = me.clock
        self._owner = None
        self._lock.release()

    def locked(self):
        return self._lock.locked()

    def owned(self):
        return self._owner is self._rt.current()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


class ScheduledCondition:
    def __init__(self, runtime, mutex=None):
        self._rt = runtime
        self._mutex = mutex or ScheduledMutex(runtime)
        self._waiters = deque()

    def __enter__(self):
        self._mutex.acquire()
        return self

    def __exit__(self, *exc):
        self._mutex.release()

    def wait(self, timeout=None):
        """Wait for a notification; returns False if ``timeout`` µs passed first."""
        rt = self._rt
        me = rt.current()
        self._waiters.append(me)
        self._mutex.release()
        if timeout is not None:
            rt._push(me, me.clock + timeout)
        rt._block(me)
        notified = True
        if me in self._waiters:
            self._waiters.remove(me)
            notified = False
        self._mutex.acquire()
        return notified

    def notify(self, n=1):
        at = self._rt.current().clock
        for _ in range(min(n, len(self._waiters))):
            self._rt._wake(self._waiters.popleft(), at)

    def notify_all(self):
        self.notify(len(self._waiters))


class ThreadCondition:
    def __init__(self, runtime, mutex=None):
        self._rt = runtime
        self._mutex = mutex or ThreadMutex(runtime)
        self._cond = threading.Condition(self._mutex._lock)
        self._notified_at = 0.0

    def __enter__(self):
        self._mutex.acquire()
        return self

    def __exit__(self, *exc):
        self._mutex.release()

    def wait(self, timeout=None):
        me = self._rt.current()
        self._mutex._owner = None
        self._mutex._released_at = me.clock
        real = None
        if timeout is not None:
            real = max(timeout * 1e-6 * self._rt.real_time_scale, 1e-4)
        notified = self._cond.wait(real)
        self._mutex._owner = me
        if notified:
            me.clock = max(me.clock, self._notified_at)
        else:
            me.clock += timeout
        self._rt._note(me.clock)
        return notified

    def notify(self, n=1):
        self._notified_at = max(self._notified_at, self._rt.current().clock)
        self._cond.notify(n)

    def notify_all(self):
        self._notified_at = max(self._notified_at, self._rt.current().clock)
        self._cond.notify_all()


class Channel:
    """Unbounded FIFO with blocking get; ``get`` returns None once closed and drained."""

    def __init__(self, runtime, name=None):
        self.name = name
        self._cond = runtime.condition()
        self._items = deque()
        self.closed = False

    def put(self, item):
        with self._cond:
            if self.closed:
                raise LifecycleError(f"channel {self.name} is closed")
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout=None):
        with self._cond:
            while not self._items:
                if self.closed:
                    return None
                if not self._cond.wait(timeout) and not self._items:
                    return None
            return self._items.popleft()

    def close(self):
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def __len__(self):
        return len(self._items)


class Completion:
    __slots__ = ("_rt", "_cond", "done", "value", "error", "completed_at")

    def __init__(self, runtime):
        self._rt = runtime
        self._cond = runtime.condition()
        self.done = False
        self.value = None
        self.error = None
        self.completed_at = None

    def set_result(self, value=None):
        self._finish(value, None)

    def set_error(self, error):
        self._finish(None, error)

    def _finish(self, value, error):
        with self._cond:
            self.value = value
            self.error = error
            self.done = True
            self.completed_at = self._rt.now()
            self._cond.notify_all()

    def wait(self):
        with self._cond:
            while not self.done:
                self._cond.wait()
        if self.error is not None:
            raise self.error
        return self.value
