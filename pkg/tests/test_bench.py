import csv
import io
import re
from pathlib import Path

import pytest
from assertpy import assert_that

from bench import cli
from bench.aging import AgingSpec, aged_fill, inject_aging
from bench.presets import PRESETS, QUEUE_SWEEP, Preset, preset, run_driver_speed, run_init_scan
from bench.report import (
    LATENCY_HEADER,
    THREAD_HEADER,
    LatencySample,
    RunReport,
    emit_report,
    normalize,
    render_summary,
    summarize_latency_csv,
)
from bench.workload import AccessPattern, WorkloadSpec, run, sector_payload
from ftl import engine
from ftl.config import GcPolicy, load_engine_config, load_profile
from ftl.errors import AgingError, ConfigurationError, UnknownPresetError
from profiles.device_profiles import DESK_NPGC
from utils.assert_ftl import assert_audit_clean, assert_sector
from utils.configs import small_config
from utils.random_data import get_stamped_sector

SECTOR = 4096
KB = 1024
PROFILES_DIR = Path(__file__).resolve().parent.parent / "profiles"
ENGINE_SMALL = PROFILES_DIR / "engine-small.yaml"


def sample_report():
    report = RunReport(label="sample", bytes_written=3 * 32 * KB)
    for request_id, (thread, latency) in enumerate([(0, 100.0), (1, 3000.0), (0, 200.0)]):
        report.samples.append(LatencySample(request_id, thread, "write", 32 * KB, latency, request_id * 10.0))
    return report


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


def test_normalize_divides_by_the_fastest_thread():
    normalized = normalize({0: 100.0, 1: 150.0, 2: 200.0})

    assert_that(normalized).is_equal_to({0: 1.0, 1: 1.5, 2: 2.0})
    assert_that(min(normalized.values())).is_equal_to(1.0)
    assert_that(normalize({})).is_empty()


def test_empty_report_writes_header_only_files(tmp_path):
    paths = emit_report(RunReport(label="empty"), tmp_path)
    print([p.name for p in paths])

    assert_that(paths).is_length(3)
    assert_that(read_rows(paths[0])).is_equal_to([list(LATENCY_HEADER)])
    assert_that(read_rows(paths[1])).is_equal_to([list(THREAD_HEADER)])
    assert_that(paths[2].read_text(encoding="utf-8")).contains("samples: 0")
    assert_that(summarize_latency_csv(paths[0])["count"]).is_zero()


def test_report_files_and_summary(tmp_path):
    report = sample_report()
    latency_csv, thread_csv, summary = emit_report(report, tmp_path, prefix="s")
    threads = read_rows(thread_csv)
    print(threads)

    assert_that(latency_csv.name).is_equal_to("s-latency.csv")
    assert_that(read_rows(latency_csv)).is_length(4)
    assert_that(threads[1]).is_equal_to(["0", "2", "150.000", "1.000000"])
    assert_that(threads[2]).is_equal_to(["1", "1", "3000.000", "20.000000"])
    assert_that(report.over_threshold()).is_equal_to(1)
    text = summary.read_text(encoding="utf-8")
    assert_that(text).contains("writes over 2ms: 1", "max normalized thread latency: 20.0000")
    assert_that(text).is_equal_to(render_summary(report))

    summarized = summarize_latency_csv(latency_csv)
    assert_that(summarized["count"]).is_equal_to(3)
    assert_that(summarized["mean_us"]).is_close_to(1100.0, 1e-6)
    assert_that(summarized["p50_us"]).is_close_to(200.0, 1e-6)
    assert_that(summarized["over_threshold"]).is_equal_to(1)


def test_throughput_spans_first_submit_to_last_completion():
    report = sample_report()

    # 96KB between the first submit at 0 and the last completion at 3010
    assert_that(report.throughput_mb_s()).is_close_to(96 * KB / 3010.0 / 1.048576, 1e-9)
    assert_that(report.throughput_mb_s("read")).is_equal_to(0.0)


@pytest.mark.parametrize("kwargs", [
    {"io_size": 1000},
    {"io_size": 0},
    {"bytes_per_thread": 48 * KB},
    {"num_client_threads": -1},
    {"passes": 0},
    {"sync_every": 0},
    {"pattern": "zigzag"},
])
def test_invalid_workloads_are_refused(kwargs):
    with pytest.raises(ConfigurationError):
        WorkloadSpec(**kwargs)


def test_sector_payload_is_stamped():
    payload = sector_payload(7, 3, SECTOR)

    assert_that(len(payload)).is_equal_to(SECTOR)
    assert_that(payload).is_equal_to(get_stamped_sector(7, 3, SECTOR))


@pytest.mark.parametrize("spec", [
    WorkloadSpec(num_client_threads=0),
    WorkloadSpec(num_client_threads=2, bytes_per_thread=0),
])
def test_empty_workloads_finish_at_once(spec):
    handle = engine.start(small_config())
    try:
        report = run(handle, spec, label="empty")

        assert_that(report.samples).is_empty()
        assert_that(report.bytes_written).is_zero()
        assert_that(report.elapsed_us).is_equal_to(0.0)
    finally:
        handle.shutdown(clean=False)


def test_workload_larger_than_the_card_is_refused():
    handle = engine.start(small_config())
    try:
        with pytest.raises(ConfigurationError):
            run(handle, WorkloadSpec(num_client_threads=1, bytes_per_thread=16 * 1024 * KB))
    finally:
        handle.shutdown(clean=False)


def test_overwrite_workload_with_sync_and_read_back():
    handle = engine.start(small_config(seed=2))
    spec = WorkloadSpec(num_client_threads=2, bytes_per_thread=64 * KB, pattern=AccessPattern.OVERWRITE,
                        passes=2, sync_every=32 * KB, read_back=True, seed=2)
    try:
        report = run(handle, spec, label="overwrite")
        print(render_summary(report))

        assert_that(report.errors).is_empty()
        assert_that([s.kind for s in report.samples].count("write")).is_equal_to(8)
        assert_that([s.kind for s in report.samples].count("read")).is_equal_to(4)
        assert_that(report.bytes_written).is_equal_to(spec.total_bytes)
        assert_that(report.bytes_read).is_equal_to(2 * 64 * KB)
        assert_that(report.thread_averages()).contains_key(0, 1)
        assert_that(report.write_amplification).is_greater_than_or_equal_to(1.0)
        for lsn in range(32):
            assert_sector(handle.read(lsn), sector_payload(lsn, 2, SECTOR), lsn)
        handle.quiesce()
        assert_audit_clean(handle.audit(), "after workload")
    finally:
        handle.shutdown(clean=False)


def test_workload_is_deterministic_per_seed():
    spec = WorkloadSpec(num_client_threads=3, bytes_per_thread=128 * KB, pattern=AccessPattern.RANDOM, seed=4)
    runs = []
    for _ in range(2):
        handle = engine.start(small_config(seed=4))
        try:
            report = run(handle, spec)
            runs.append(([(s.thread, s.latency_us) for s in report.samples], report.elapsed_us, report.gc_blocks))
        finally:
            handle.shutdown(clean=False)

    assert_that(runs[0]).is_equal_to(runs[1])


def test_aging_shapes_the_card():
    handle = engine.start(small_config(seed=11))
    try:
        result = inject_aging(handle, AgingSpec(seed=11))
        state = handle.state
        print(f"free per bank {result.free_per_bank.tolist()}, {result.valid_pages} valid of "
              f"{result.synthesized_pages}")

        assert_that(state.bank_free.tolist()).is_equal_to(result.free_per_bank.tolist())
        assert_that(int(state.bank_valid.sum())).is_equal_to(result.valid_pages)
        assert_that(result.synthesized_pages).is_equal_to((64 - int(result.free_per_bank.sum())) * 8)
        assert_that(len(result.mapped_lpns)).is_equal_to(result.valid_pages)
        assert_that(int(result.free_per_bank.min())).is_greater_than_or_equal_to(state.reserve_blocks + 1)

        lpn = int(result.mapped_lpns[0])
        assert_sector(handle.read(lpn * 8), aged_fill(SECTOR), lpn * 8)
        data = get_stamped_sector(lpn * 8 + 1, 1, SECTOR)
        handle.write(lpn * 8 + 1, data)
        handle.flush(lpn)
        assert_sector(handle.read(lpn * 8), aged_fill(SECTOR), lpn * 8)
        assert_sector(handle.read(lpn * 8 + 1), data, lpn * 8 + 1)
        handle.quiesce()
        assert_audit_clean(handle.audit(), "aged")
    finally:
        handle.shutdown(clean=False)


def test_aging_needs_a_fresh_engine():
    handle = engine.start(small_config())
    try:
        handle.write(0, get_stamped_sector(0, 1, SECTOR))
        handle.flush()
        with pytest.raises(AgingError):
            inject_aging(handle, AgingSpec())
    finally:
        handle.shutdown(clean=False)


@pytest.mark.parametrize("spec", [
    AgingSpec(free_mean=1.5),
    AgingSpec(valid_spread=-0.1),
    AgingSpec(stale_share=2.0),
    AgingSpec(free_mean=0.0, free_spread=0.0, valid_mean=1.0, valid_spread=0.0),
])
def test_impossible_aging_is_refused(spec):
    handle = engine.start(small_config())
    try:
        with pytest.raises(AgingError):
            inject_aging(handle, spec)
    finally:
        handle.shutdown(clean=False)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name):
    chosen = preset(name)
    print(f"{chosen.name}: {chosen.description}")

    assert_that(chosen.name).is_equal_to(name)
    assert_that(chosen.workload.total_bytes).is_less_than_or_equal_to(
        chosen.workload.passes * chosen.config.logical_sectors * SECTOR)


def test_preset_shapes():
    assert_that(preset("npgc-vs-pllgc").compare).is_equal_to((GcPolicy.NPGC, GcPolicy.PLLGC))
    assert_that(preset("npgc-vs-pllgc").config.gc.max_gc_threads).is_equal_to(1)
    assert_that(preset("adaptive-vs-pllgc").workload.num_client_threads).is_equal_to(128)
    assert_that(preset("queue-scaling").sweep).is_equal_to(QUEUE_SWEEP)
    assert_that(preset("queue-scaling").config.geometry.num_banks).is_equal_to(64)


def test_unknown_preset():
    with pytest.raises(UnknownPresetError):
        preset("fastest")


def test_desk_profile_file_matches_the_preset():
    assert_that(load_profile(PROFILES_DIR / "desk-npgc.yaml")).is_equal_to(DESK_NPGC)


def test_driver_speed_shows_the_shared_read_queue():
    rows = {row["bank_set"]: row for row in run_driver_speed(preset("driver-speed"))}
    for row in rows.values():
        print(f"{row['bank_set']}: write {row['write_mb_s']:.1f}MB/s read {row['read_mb_s']:.1f}MB/s")

    assert_that(rows["shared-read-queue"]["read_mb_s"]).is_less_than(0.75 * rows["across-interfaces"]["read_mb_s"])
    assert_that(rows["same-interface"]["read_mb_s"]).is_greater_than(0.9 * rows["across-interfaces"]["read_mb_s"])
    assert_that(rows["across-interfaces"]["write_mb_s"]).is_greater_than_or_equal_to(
        rows["same-interface"]["write_mb_s"])


def test_init_scan_reads_less_than_the_page_scan():
    config = small_config(seed=12)
    chosen = Preset("init-scan", "small card", WorkloadSpec(num_client_threads=2, bytes_per_thread=1024 * KB),
                    config, None, GcPolicy.PLLGC)
    result = run_init_scan(chosen)
    print(result)

    assert_that(result["load_path"]).is_equal_to("checkpoint")
    assert_that(result["window_probe_bound"]).is_equal_to(16)
    assert_that(result["scan_reads"]).is_greater_than(result["checkpoint_reads"])


def test_cli_run_writes_the_report(tmp_path):
    out = io.StringIO()
    code = cli.main(["run", "--config", str(ENGINE_SMALL), "--threads", "2", "--bytes-per-thread", str(64 * KB),
                     "--seed", "3", "--output", str(tmp_path)], out=out)
    print(out.getvalue())

    assert_that(code).is_equal_to(cli.EXIT_OK)
    assert_that(out.getvalue()).contains("run: run-pllgc", "wrote ")
    assert_that(sorted(p.name for p in tmp_path.iterdir())).is_equal_to(
        ["run-pllgc-latency.csv", "run-pllgc-summary.txt", "run-pllgc-threads.csv"])


def test_cli_policy_override():
    out = io.StringIO()
    code = cli.main(["run", "--config", str(ENGINE_SMALL), "--bytes-per-thread", str(64 * KB),
                     "--policy", "npgc"], out=out)

    assert_that(code).is_equal_to(cli.EXIT_OK)
    assert_that(out.getvalue()).contains("run: run-npgc")


@pytest.mark.parametrize("argv", [
    ["--io-size", "1000"],
    ["--bytes-per-thread", str(32 * 1024 * KB)],
])
def test_cli_reports_ftl_errors(argv):
    out = io.StringIO()
    code = cli.main(["run", "--config", str(ENGINE_SMALL)] + argv, out=out)
    print(out.getvalue())

    assert_that(code).is_equal_to(cli.EXIT_FTL_ERROR)
    assert_that(out.getvalue()).starts_with("error:")


def test_cli_report_summarizes_a_csv(tmp_path):
    latency_csv = emit_report(sample_report(), tmp_path)[0]
    out = io.StringIO()
    code = cli.main(["report", str(latency_csv)], out=out)
    print(out.getvalue())

    assert_that(code).is_equal_to(cli.EXIT_OK)
    assert_that(out.getvalue()).contains("count: 3", "over_threshold: 1", "mean_us: 1100.000")


def test_cli_rejects_unknown_presets():
    with pytest.raises(SystemExit):
        cli.main(["preset", "fastest"], out=io.StringIO())


def test_cli_aged_image_is_recovered_by_the_scan(tmp_path):
    image = tmp_path / "aged.npz"
    out = io.StringIO()
    code = cli.main(["inject-aging", "--config", str(ENGINE_SMALL), "--image", str(image), "--seed", "5"], out=out)
    print(out.getvalue())
    valid = int(re.search(r"valid pages: (\d+) of", out.getvalue()).group(1))

    assert_that(code).is_equal_to(cli.EXIT_OK)
    assert_that(image.exists()).is_true()
    restarted = engine.start(load_engine_config(ENGINE_SMALL), image=image)
    try:
        assert_that(restarted.load_path).is_equal_to("recovery")
        assert_that(restarted.recovery_result.lpns_recovered).is_equal_to(valid)
        assert_that(restarted.recovery_result.torn_pages).is_zero()
        restarted.quiesce()
        assert_audit_clean(restarted.audit(), "aged image")
    finally:
        restarted.shutdown(clean=False)
