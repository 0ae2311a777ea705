from hypothesis import given
from hypothesis import strategies as st

from vitalstream.bus import CLEANSED_TOPIC, PRIMARY_TOPIC, Bus
from vitalstream.dispatcher import Dispatcher, cleanse
from vitalstream.model import Alert, PostureObservation, RriInterval, decode, encode
from vitalstream.store import Store, StoreError


def rri(ts, seq, value=800, worker="w1"):
    return RriInterval(worker, ts, value, not 300 <= value <= 2000, seq)


def test_cleanse_dedupes():
    out, rep = cleanse([rri(100, 7), rri(100, 7), rri(900, 8)])
    assert [r.seq for r in out] == [7, 8]
    assert rep.deduped == 1 and rep.check()


def test_cleanse_drops_artifacts():
    out, rep = cleanse([rri(100, 1, value=250)])
    assert out == [] and rep.out_of_range_dropped == 1 and rep.check()


def test_cleanse_sorts_by_ts():
    out, rep = cleanse([rri(3, 1), rri(1, 2), rri(2, 3)])
    assert [r.ts for r in out] == [1, 2, 3]
    assert rep.reordered > 0


def test_cleanse_kinds_do_not_collide_and_malformed_counted():
    p = PostureObservation("w1", 100, 5.0, 0.01, "Upright", 7)
    bad = RriInterval("w1", 50, 100, False, 9)  # artifact flag missing
    out, rep = cleanse([rri(100, 7), p, bad])
    assert len(out) == 2 and rep.malformed == 1 and rep.input_count == 2


def test_cleanse_stable_for_equal_ts():
    a = PostureObservation("w1", 100, 5.0, 0.01, "Upright", 1)
    b = rri(100, 1)
    out, _ = cleanse([a, b])
    assert out == [a, b]
    out, _ = cleanse([b, a])
    assert out == [b, a]


@given(st.lists(st.tuples(st.integers(0, 10_000), st.integers(0, 40), st.integers(200, 2200)), max_size=80))
def test_cleanse_report_identity(items):
    batch = [rri(ts, seq, v) for ts, seq, v in items]
    out, rep = cleanse(batch)
    assert rep.check()
    assert rep.input_count == len(batch)
    assert [r.ts for r in out] == sorted(r.ts for r in out)
    assert len({r.seq for r in out}) == len(out)


def setup(partitions=1, store=None):
    bus = Bus()
    bus.create_topic(PRIMARY_TOPIC, partitions)
    bus.create_topic(CLEANSED_TOPIC, partitions)
    return bus, store if store is not None else Store()


def publish(bus, recs):
    for r in recs:
        bus.publish(PRIMARY_TOPIC, r.worker, encode(r))


def test_empty_poll():
    bus, store = setup()
    d = Dispatcher(bus, store)
    assert d.dispatch_once() is None
    assert len(store) == 0 and bus.topic(CLEANSED_TOPIC).logs[0] == []


def test_conservation_100():
    bus, store = setup()
    publish(bus, [rri(800 * i, i) for i in range(100)])
    d = Dispatcher(bus, store)
    d.dispatch_once()
    assert len(store) == 100
    assert len(bus.topic(CLEANSED_TOPIC).logs[0]) == 100
    assert bus.lag(PRIMARY_TOPIC, "dispatcher") == 0


def test_alerts_stored_not_forwarded():
    bus, store = setup()
    publish(bus, [rri(800, 1), Alert("w1", 1000, 3000, 2000)])
    Dispatcher(bus, store).dispatch_once()
    assert store.count("alert") == 1
    assert [decode(e.payload).kind for e in bus.topic(CLEANSED_TOPIC).logs[0]] == ["rri"]


def test_artifacts_stored_but_not_forwarded():
    bus, store = setup()
    publish(bus, [rri(800, 1), rri(1600, 2, value=2500)])
    Dispatcher(bus, store).dispatch_once()
    assert store.count("primary.rri") == 2
    assert len(bus.topic(CLEANSED_TOPIC).logs[0]) == 1


def test_redelivery_stored_exactly_once():
    bus, store = setup(partitions=2)
    recs = [rri(800 * i, i, worker=f"w{i % 3}") for i in range(60)]
    publish(bus, recs)
    ds = [Dispatcher(bus, store, partitions=[p], max_batch=25) for p in range(2)]
    for d in ds:
        d.dispatch_once(commit=False)  # crash before commit
    for d in ds:
        while d.dispatch_once() is not None:
            pass
    distinct = {(r.worker, r.kind, r.seq) for r in recs}
    assert len(store) == len(distinct) == 60
    assert sum(sum(d.duplicates.values()) for d in ds) > 0


class FailingStore(Store):
    def __init__(self, fail_times):
        super().__init__()
        self.fail_times = fail_times

    def put(self, record):
        if self.fail_times:
            self.fail_times -= 1
            raise StoreError("disk full")
        return super().put(record)


def test_store_failure_leaves_batch_uncommitted():
    store = FailingStore(1)
    bus, store = setup(store=store)
    publish(bus, [rri(800 * i, i) for i in range(5)])
    d = Dispatcher(bus, store)
    assert d.dispatch_once() is None
    assert bus.committed(PRIMARY_TOPIC, "dispatcher", 0) == 0
    assert d.stats.failures == 1
    assert d.dispatch_once() is not None
    assert len(store) == 5
    assert bus.lag(PRIMARY_TOPIC, "dispatcher") == 0


def test_dispatch_loop_thread():
    import threading

    from vitalstream.dispatcher import dispatch_loop

    bus, store = setup()
    publish(bus, [rri(800 * i, i) for i in range(10)])
    stop = threading.Event()
    box = {}
    t = threading.Thread(target=lambda: box.update(d=dispatch_loop(bus, store, stop, idle_s=0.01)))
    t.start()
    for _ in range(200):
        if len(store) == 10:
            break
        stop.wait(0.01)
    stop.set()
    t.join(2)
    assert len(store) == 10 and box["d"].stats.stored == 10
