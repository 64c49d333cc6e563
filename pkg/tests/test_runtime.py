import random
import threading

import pytest
from assertpy import assert_that

from ftl.errors import SchedulingError
from ftl.runtime import Runtime


def sleeper(rt, trace, name, delays):
    for delay in delays:
        rt.sleep(delay)
        trace.append((name, rt.now()))


def interleaving(seed):
    rt = Runtime(deterministic=True, seed=seed)
    trace = []
    rng = random.Random(seed)
    actors = [rt.spawn(sleeper, rt, trace, f"a{i}", [rng.choice((0, 5, 10)) for _ in range(6)], name=f"a{i}")
              for i in range(4)]
    for actor in actors:
        rt.join(actor)
    return trace, rt.now()


@pytest.fixture(params=[True, False])
def runtime(request):
    return Runtime(deterministic=request.param, seed=3)


def test_advance_moves_only_the_caller():
    rt = Runtime()
    actor = rt.spawn(rt.advance, 250.0, name="mover")
    print(f"main clock before join: {rt.now()}")

    assert_that(rt.now()).is_equal_to(0.0)
    rt.join(actor)
    assert_that(rt.now()).is_equal_to(250.0).described_as("join merges the joined clock")
    assert_that(rt.horizon).is_equal_to(250.0)


def test_negative_advance_is_refused():
    rt = Runtime()
    with pytest.raises(SchedulingError):
        rt.advance(-1.0)


def test_actors_run_in_clock_order():
    rt = Runtime(deterministic=True, seed=1)
    trace = []
    actors = [rt.spawn(sleeper, rt, trace, name, [delay], name=name)
              for name, delay in (("slow", 300.0), ("fast", 100.0), ("middle", 200.0))]
    for actor in actors:
        rt.join(actor)
    print(trace)

    assert_that([name for name, _ in trace]).is_equal_to(["fast", "middle", "slow"])
    assert_that([clock for _, clock in trace]).is_equal_to([100.0, 200.0, 300.0])


@pytest.mark.parametrize("seed", range(100))
def test_same_seed_same_interleaving(seed):
    first, end_first = interleaving(seed)
    second, end_second = interleaving(seed)
    print(f"seed {seed}: {len(first)} steps ending at {end_first}")

    assert_that(second).is_equal_to(first).described_as("deterministic mode replays the same order")
    assert_that(end_second).is_equal_to(end_first)


def test_mutex_excludes(runtime):
    rt = runtime
    mutex = rt.mutex("counter")
    state = {"inside": 0, "max_inside": 0, "total": 0}

    def worker():
        for _ in range(50):
            with mutex:
                state["inside"] += 1
                state["max_inside"] = max(state["max_inside"], state["inside"])
                rt.advance(1.0)
                state["total"] += 1
                state["inside"] -= 1

    actors = [rt.spawn(worker, name=f"w{i}") for i in range(4)]
    for actor in actors:
        rt.join(actor)
    print(state)

    assert_that(state["max_inside"]).is_equal_to(1)
    assert_that(state["total"]).is_equal_to(200)


def test_scheduled_mutex_is_not_reentrant():
    rt = Runtime()
    mutex = rt.mutex("once")
    mutex.acquire()
    with pytest.raises(SchedulingError):
        mutex.acquire()
    mutex.release()


def test_condition_wait_times_out():
    rt = Runtime()
    cond = rt.condition()
    with cond:
        notified = cond.wait(timeout=500.0)
    print(f"notified={notified} clock={rt.now()}")

    assert_that(notified).is_false()
    assert_that(rt.now()).is_equal_to(500.0)


def test_condition_notify_wakes_at_notifier_clock():
    rt = Runtime()
    cond = rt.condition()
    box = []

    def notifier():
        rt.advance(120.0)
        with cond:
            box.append("ready")
            cond.notify_all()

    actor = rt.spawn(notifier, name="notifier")
    with cond:
        while not box:
            assert_that(cond.wait(timeout=10_000.0)).is_true()
    rt.join(actor)

    assert_that(rt.now()).is_equal_to(120.0)


def test_channel_get_times_out_and_closes():
    rt = Runtime()
    channel = rt.channel("q")
    channel.put("a")

    assert_that(channel.get(timeout=10.0)).is_equal_to("a")
    assert_that(channel.get(timeout=10.0)).is_none()
    assert_that(rt.now()).is_equal_to(10.0)

    channel.put("b")
    channel.close()
    assert_that(channel.get()).is_equal_to("b").described_as("items queued before close still drain")
    assert_that(channel.get()).is_none()


def test_completion_carries_the_error():
    rt = Runtime()
    completion = rt.completion()

    def fail():
        rt.advance(40.0)
        completion.set_error(ValueError("boom"))

    rt.spawn(fail, name="failer")
    with pytest.raises(ValueError):
        completion.wait()
    assert_that(completion.completed_at).is_equal_to(40.0)


def test_join_reraises_actor_exception():
    rt = Runtime()

    def broken():
        raise KeyError("lost")

    actor = rt.spawn(broken, name="broken")
    with pytest.raises(KeyError):
        rt.join(actor)
    assert_that(rt.join(actor, reraise=False)).is_none()


def test_foreign_thread_is_rejected_in_deterministic_mode():
    rt = Runtime()
    errors = []

    def outsider():
        try:
            rt.now()
        except SchedulingError as error:
            errors.append(error)

    thread = threading.Thread(target=outsider)
    thread.start()
    thread.join()

    assert_that(errors).is_length(1)


def test_deadlock_is_reported():
    rt = Runtime()
    cond = rt.condition()
    with pytest.raises(SchedulingError):
        with cond:
            cond.wait()


def test_seeded_streams_are_private():
    rt = Runtime(seed=11)
    first = [rt.random("bank-choice").random() for _ in range(3)]
    again = [rt.random("bank-choice").random() for _ in range(3)]
    other = rt.random("aging").random()

    assert_that(again).is_equal_to(first)
    assert_that(other).is_not_equal_to(first[0])
