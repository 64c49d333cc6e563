import pytest
from assertpy import assert_that

from bench.presets import preset, run_init_scan, run_queue_sweep, run_with_policy
from bench.report import normalize
from ftl.config import GcPolicy
from utils.configs import churn_config
from utils.integrity import exercise

SEEDS = range(5)

pytestmark = pytest.mark.acceptance


def majority(flags):
    return sum(flags) >= 4


def test_parallel_gc_beats_inline_gc_on_an_aged_card():
    chosen = preset("npgc-vs-pllgc")
    runs = []
    for seed in SEEDS:
        npgc = run_with_policy(chosen, policy=GcPolicy.NPGC, seed=seed)
        pllgc = run_with_policy(chosen, policy=GcPolicy.PLLGC, seed=seed)
        print(f"seed {seed}: npgc {npgc.elapsed_seconds:.3f}s / {npgc.over_threshold()} slow writes / "
              f"{npgc.gc_blocks} blocks, pllgc {pllgc.elapsed_seconds:.3f}s / {pllgc.over_threshold()} / "
              f"{pllgc.gc_blocks}")
        assert_that(npgc.stats["audit_problems"]).is_empty()
        assert_that(pllgc.stats["audit_problems"]).is_empty()
        runs.append((npgc, pllgc))

    assert_that(majority([p.elapsed_us < n.elapsed_us for n, p in runs])).described_as(
        "pllgc finishes first in at least 4 of 5 runs").is_true()
    slow_npgc = sum(n.over_threshold() for n, _ in runs)
    slow_pllgc = sum(p.over_threshold() for _, p in runs)
    assert_that(slow_npgc).is_greater_than_or_equal_to(2 * slow_pllgc)
    for npgc, pllgc in runs:
        assert_that(abs(npgc.gc_blocks - pllgc.gc_blocks)).is_less_than_or_equal_to(0.1 * max(npgc.gc_blocks, 1))


def test_adaptive_throttle_helps_think_time_writers():
    chosen = preset("adaptive-vs-pllgc")
    elapsed_ok = []
    fairness_ok = []
    for seed in SEEDS:
        pllgc = run_with_policy(chosen, policy=GcPolicy.PLLGC, seed=seed)
        adaptive = run_with_policy(chosen, policy=GcPolicy.PLLGC_ADAPTIVE, seed=seed)
        worst_pllgc = max(normalize(pllgc.thread_averages()).values())
        worst_adaptive = max(normalize(adaptive.thread_averages()).values())
        print(f"seed {seed}: pllgc {pllgc.elapsed_seconds:.3f}s max norm {worst_pllgc:.3f}, "
              f"adaptive {adaptive.elapsed_seconds:.3f}s max norm {worst_adaptive:.3f}")
        elapsed_ok.append(adaptive.elapsed_us <= pllgc.elapsed_us)
        fairness_ok.append(worst_adaptive <= worst_pllgc)

    assert_that(majority(elapsed_ok)).is_true()
    assert_that(majority(fairness_ok)).is_true()


def test_write_throughput_scales_with_the_queue_count():
    reports = run_queue_sweep(preset("queue-scaling"))
    throughput = [report.throughput_mb_s("write") for report in reports]
    for report, value in zip(reports, throughput):
        print(f"{report.label}: {value:.1f}MB/s")

    for lower, higher in zip(throughput, throughput[1:]):
        assert_that(higher).is_greater_than_or_equal_to(lower * 0.99)
    assert_that(throughput[-1]).is_greater_than_or_equal_to(4 * throughput[0])


def test_checkpoint_load_reads_a_fraction_of_the_page_scan():
    chosen = preset("init-scan")
    result = run_init_scan(chosen)
    print(result)
    pages_per_block = chosen.config.geometry.pages_per_block

    assert_that(result["load_path"]).is_equal_to("checkpoint")
    assert_that(result["checkpoint_reads"]).is_less_than_or_equal_to(
        result["window_probe_bound"] + 1 + result["chain_blocks"] * pages_per_block)
    assert_that(result["ratio"]).is_greater_than(10.0)


@pytest.mark.parametrize("seed", range(1000, 1004))
def test_long_random_runs_match_the_shadow(seed):
    config = churn_config(policy=(GcPolicy.PLLGC, GcPolicy.PLLGC_ADAPTIVE, GcPolicy.NPGC)[seed % 3], seed=seed)
    log = exercise(config, seed, operations=2_500, aged=seed % 2 == 1)

    assert_that(log.mismatches).is_empty()
