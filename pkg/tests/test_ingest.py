"""Ingest pipeline: day-file persistence, dedupe, anomaly detection, cursors."""

import json
import random
import time

import pytest

from dalton.core import CHANNELS, Channel, RANGES, SensorSample, sample_to_csv_row
from dalton.ingest import (
    AnomalyDetector,
    AnomalySignal,
    DAY_FILE_HEADER,
    DeviceStore,
    IngestPipeline,
    detect_anomaly,
    device_days,
    load_device_series,
    read_day,
    read_device,
)
from dalton.pubsub import Broker, TOPIC_ERRORS, data_topic

EPOCH = 1_767_571_200_000

BASE = {
    Channel.PM: 40.0, Channel.NO2: 2.0, Channel.ETH: 30.0, Channel.VOC: 120.0,
    Channel.CO: 9.0, Channel.CO2: 750.0, Channel.TEMP: 24.0, Channel.RH: 55.0,
}


def mk(seq, ts=None, **over):
    values = dict(BASE)
    for k, v in over.items():
        values[Channel(k)] = float(v)
    return SensorSample("dev-t", ts if ts is not None else EPOCH + seq * 1000,
                        seq, values, "1.0.0")


def wiggled(seq, frozen=(), **over):
    """All channels alternate by one resolution step except the frozen ones."""
    values = {}
    for c in CHANNELS:
        v = BASE[c] if c not in over else float(over[c])
        if c not in frozen:
            v += (seq % 2) * RANGES[c].resolution
        values[c.value] = v
    return mk(seq, **values)


# ------------------------------------------------------------- detector

class TestRangeDetection:
    def test_five_consecutive_violations_fire_once(self):
        samples = [mk(i, co2=12000) for i in range(5)]
        sigs = detect_anomaly("dev-t", samples)
        assert [s.kind for s in sigs] == ["RANGE_VIOLATION"]
        assert sigs[0].channel is Channel.CO2
        assert sigs[0].detected_at == EPOCH + 4000

    def test_four_then_clean_fires_nothing(self):
        samples = [mk(i, co2=12000) for i in range(4)] + [mk(4)]
        assert detect_anomaly("dev-t", samples) == []

    def test_long_episode_is_edge_triggered(self):
        samples = [mk(i, co2=12000) for i in range(50)]
        sigs = detect_anomaly("dev-t", samples)
        assert len(sigs) == 1

    def test_rearm_requires_five_clean_samples(self):
        bad = lambda i: mk(i, co2=12000)
        ok = lambda i: mk(i)
        # episode, 3 clean (not enough), episode again: still one signal
        stream = [bad(i) for i in range(10)] + [ok(10 + i) for i in range(3)] \
            + [bad(13 + i) for i in range(10)]
        assert len(detect_anomaly("dev-t", stream)) == 1
        # with 5 clean samples in between the second episode fires
        stream = [bad(i) for i in range(10)] + [ok(10 + i) for i in range(5)] \
            + [bad(15 + i) for i in range(10)]
        assert len(detect_anomaly("dev-t", stream)) == 2

    def test_two_channels_fire_independently(self):
        samples = [mk(i, co2=12000, pm=750) for i in range(6)]
        sigs = detect_anomaly("dev-t", samples)
        assert {s.channel for s in sigs} == {Channel.CO2, Channel.PM}


class TestUninitializedDetection:
    def test_five_zero_vectors_fire_once_without_range_signals(self):
        zeros = {c.value: 0.0 for c in CHANNELS}
        samples = [mk(i, **zeros) for i in range(8)]
        sigs = detect_anomaly("dev-t", samples)
        assert [s.kind for s in sigs] == ["UNINITIALIZED"]

    def test_short_zero_burst_is_ignored(self):
        zeros = {c.value: 0.0 for c in CHANNELS}
        samples = [mk(i, **zeros) for i in range(4)] + [mk(4)]
        assert detect_anomaly("dev-t", samples) == []


class TestStuckDetection:
    def test_600_identical_fire_exactly_at_600(self):
        samples = [wiggled(i, frozen=(Channel.VOC,)) for i in range(600)]
        det = AnomalyDetector("dev-t")
        sigs = []
        fired_at = None
        for i, smp in enumerate(samples):
            got = det.feed(smp)
            if got and fired_at is None:
                fired_at = i
            sigs.extend(got)
        assert [s.kind for s in sigs] == ["STUCK_SENSOR"]
        assert sigs[0].channel is Channel.VOC
        assert fired_at == 599

    def test_599_identical_is_not_enough(self):
        samples = [wiggled(i, frozen=(Channel.VOC,)) for i in range(599)]
        assert detect_anomaly("dev-t", samples) == []

    def test_fully_frozen_device_is_not_stuck(self):
        # nothing varies: indistinguishable from a genuinely flat night
        samples = [mk(i) for i in range(700)]
        assert detect_anomaly("dev-t", samples) == []

    def test_stuck_rearms_after_recovery(self):
        frozen = [wiggled(i, frozen=(Channel.VOC,)) for i in range(600)]
        live = [wiggled(600 + i) for i in range(6)]
        frozen2 = [wiggled(606 + i, frozen=(Channel.VOC,)) for i in range(601)]
        sigs = detect_anomaly("dev-t", frozen + live + frozen2)
        assert [s.kind for s in sigs] == ["STUCK_SENSOR", "STUCK_SENSOR"]


class TestGapDetection:
    def test_gap_fires_once_per_silence(self):
        det = AnomalyDetector("dev-t")
        det.feed(mk(0), arrival_s=100.0)
        assert det.check_gap(129.9) == []
        sigs = det.check_gap(130.0)
        assert [s.kind for s in sigs] == ["GAP"]
        assert sigs[0].detected_at == EPOCH + 30_000
        assert det.check_gap(500.0) == []  # still the same silence

    def test_gap_rearms_after_five_arrivals(self):
        det = AnomalyDetector("dev-t")
        det.feed(mk(0), arrival_s=0.0)
        assert det.check_gap(31.0)
        for i in range(5):
            det.feed(mk(1 + i), arrival_s=40.0 + i)
        sigs = det.check_gap(80.0)
        assert [s.kind for s in sigs] == ["GAP"]

    def test_no_samples_no_gap(self):
        det = AnomalyDetector("dev-t")
        assert det.check_gap(1e9) == []


def test_clean_stream_emits_nothing():
    samples = [wiggled(i) for i in range(700)]
    assert detect_anomaly("dev-t", samples) == []


def test_signal_json_roundtrip():
    sig = AnomalySignal("dev-t", "RANGE_VIOLATION", EPOCH, Channel.CO2,
                        {"value": 12000.0, "run": 5})
    assert AnomalySignal.from_json(sig.to_json()) == sig
    gap = AnomalySignal("dev-t", "GAP", EPOCH, None, {"silent_s": 31.0})
    assert AnomalySignal.from_json(gap.to_json()) == gap


# ------------------------------------------------------------- storage

def append_sample(store, sample, arrival=1_000):
    return store.append(sample, arrival, sample_to_csv_row(sample))


class TestDeviceStore:
    def test_roundtrip_with_validity_annotations(self, tmp_path):
        store = DeviceStore(tmp_path, "dev-t")
        append_sample(store, mk(0))
        append_sample(store, mk(1, co2=12000))
        store.close()
        recs = read_day(tmp_path, "dev-t", "2026-01-05")
        assert len(recs) == 2
        assert recs[0].ok and recs[0].valid == "OK"
        assert recs[1].valid == "co2:12000"
        assert recs[1].sample.values[Channel.CO2] == 12000
        assert recs[0].arrival_ts == 1000

    def test_duplicate_seq_dropped(self, tmp_path):
        store = DeviceStore(tmp_path, "dev-t")
        assert append_sample(store, mk(0))
        assert append_sample(store, mk(1))
        assert not append_sample(store, mk(1))
        store.close()
        assert [r.sample.seq for r in read_day(tmp_path, "dev-t", "2026-01-05")] == [0, 1]

    def test_midnight_rollover_splits_day_files(self, tmp_path):
        store = DeviceStore(tmp_path, "dev-t")
        midnight = 1_767_657_600_000  # 2026-01-06T00:00:00Z
        append_sample(store, mk(0, ts=midnight - 500))
        append_sample(store, mk(1, ts=midnight + 500))
        store.close()
        assert device_days(tmp_path, "dev-t") == ["2026-01-05", "2026-01-06"]
        index = (tmp_path / "data" / "dev-t" / "index.txt").read_text()
        assert index == "2026-01-05.csv 1\n2026-01-06.csv 1\n"

    def test_restart_resumes_dedupe_and_counts(self, tmp_path):
        store = DeviceStore(tmp_path, "dev-t")
        for i in range(10):
            append_sample(store, mk(i))
        store.close()
        again = DeviceStore(tmp_path, "dev-t")
        assert again.max_seq == 9
        assert not append_sample(again, mk(7))   # replayed duplicate
        assert append_sample(again, mk(10))
        again.close()
        recs = read_day(tmp_path, "dev-t", "2026-01-05")
        assert [r.sample.seq for r in recs] == list(range(11))
        assert "2026-01-05.csv 11" in (tmp_path / "data" / "dev-t" / "index.txt").read_text()

    def test_header_line_written_once(self, tmp_path):
        store = DeviceStore(tmp_path, "dev-t")
        append_sample(store, mk(0))
        store.close()
        again = DeviceStore(tmp_path, "dev-t")
        append_sample(again, mk(1))
        again.close()
        lines = (tmp_path / "data" / "dev-t" / "2026-01-05.csv").read_text().splitlines()
        assert lines[0] == DAY_FILE_HEADER
        assert sum(1 for ln in lines if ln == DAY_FILE_HEADER) == 1

    def test_load_device_series_filters_invalid(self, tmp_path):
        store = DeviceStore(tmp_path, "dev-t")
        append_sample(store, mk(0))
        append_sample(store, mk(1, co2=12000))
        append_sample(store, mk(2))
        store.close()
        ts, values = load_device_series(tmp_path, "dev-t")
        assert len(ts) == 2
        assert list(values[Channel.CO2]) == [750.0, 750.0]
        ts_all, _ = load_device_series(tmp_path, "dev-t", valid_only=False)
        assert len(ts_all) == 3


# ------------------------------------------------------------- pipeline

def publish_samples(broker, device, seqs, **over):
    for i in seqs:
        sample = SensorSample(device, EPOCH + i * 1000, i, mk(i, **over).values, "1.0.0")
        broker.publish(data_topic(device), device, i, sample_to_csv_row(sample).encode())


def wait_until(cond, timeout=8.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if cond():
            return True
        time.sleep(0.05)
    return False


def stored_count(root, device):
    # polling helper: mid-write files may not be flushed yet
    try:
        return len(read_device(root, device))
    except (ValueError, FileNotFoundError):
        return 0


class TestPipeline:
    def test_demux_sorts_and_persists_interleaved_devices(self, tmp_path):
        b = Broker()
        pipe = IngestPipeline(b, tmp_path)
        envs = []
        for dev in ("dev-a", "dev-b"):
            publish_samples(b, dev, range(100))
        for dev in ("dev-a", "dev-b"):
            envs.extend(b.retained(data_topic(dev)))
        random.Random(7).shuffle(envs)  # a replay burst can interleave
        written = pipe.process_batch(envs)
        pipe.flush()
        assert written == 200
        for dev in ("dev-a", "dev-b"):
            recs = read_device(tmp_path, dev)
            assert [r.sample.seq for r in recs] == sorted(r.sample.seq for r in recs)
            assert len(recs) == 100

    def test_service_loop_end_to_end_with_duplicates(self, tmp_path):
        b = Broker()
        pipe = IngestPipeline(b, tmp_path).start()
        publish_samples(b, "dev-a", range(50))
        publish_samples(b, "dev-a", range(50))  # replayed duplicates
        assert wait_until(lambda: stored_count(tmp_path, "dev-a") >= 50)
        pipe.stop()
        recs = read_device(tmp_path, "dev-a")
        assert [r.sample.seq for r in recs] == list(range(50))

    def test_heartbeats_route_to_callback_not_storage(self, tmp_path):
        b = Broker()
        seen = []
        pipe = IngestPipeline(b, tmp_path, on_heartbeat=seen.append).start()
        hb = json.dumps({"id": "dev-a", "firmware": "1.0.0", "phase": "RUNNING",
                         "last_sample_ts": None, "room": "kitchen", "ts": EPOCH})
        b.publish(data_topic("dev-a") + "/hb", "dev-a", 0, hb.encode())
        assert wait_until(lambda: len(seen) == 1)
        pipe.stop()
        assert seen[0]["id"] == "dev-a"
        assert device_days(tmp_path, "dev-a") == []

    def test_restart_resumes_from_cursor_exactly_once(self, tmp_path):
        b = Broker()
        pipe = IngestPipeline(b, tmp_path).start()
        publish_samples(b, "dev-a", range(100))
        assert wait_until(lambda: stored_count(tmp_path, "dev-a") >= 100)
        pipe.stop()
        publish_samples(b, "dev-a", range(100, 200))  # while ingest is down
        pipe2 = IngestPipeline(b, tmp_path).start()
        assert wait_until(lambda: stored_count(tmp_path, "dev-a") >= 200)
        pipe2.stop()
        recs = read_device(tmp_path, "dev-a")
        assert [r.sample.seq for r in recs] == list(range(200))

    def test_anomaly_signals_reach_error_topic(self, tmp_path):
        b = Broker()
        pipe = IngestPipeline(b, tmp_path).start()
        publish_samples(b, "dev-a", range(6), co2=12000)
        assert wait_until(lambda: len(b.retained(TOPIC_ERRORS)) >= 1)
        pipe.stop()
        sigs = [AnomalySignal.from_json(e.payload.decode())
                for e in b.retained(TOPIC_ERRORS)]
        assert [s.kind for s in sigs] == ["RANGE_VIOLATION"]
        assert sigs[0].device == "dev-a" and sigs[0].channel is Channel.CO2

    def test_gap_detected_on_scaled_arrival_clock(self, tmp_path):
        b = Broker()
        wall = [100.0]
        pipe = IngestPipeline(b, tmp_path, speed=60.0,
                              wall_clock=lambda: wall[0]).start()
        publish_samples(b, "dev-a", range(3))
        assert wait_until(lambda: stored_count(tmp_path, "dev-a") >= 3)
        wall[0] += 1.0  # one wall second at 60x = 60 arrival-clock seconds
        assert wait_until(lambda: len(b.retained(TOPIC_ERRORS)) >= 1)
        pipe.stop()
        sigs = [AnomalySignal.from_json(e.payload.decode())
                for e in b.retained(TOPIC_ERRORS)]
        assert sigs[-1].kind == "GAP"
