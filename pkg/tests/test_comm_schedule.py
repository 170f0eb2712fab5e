import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scripts.comm_schedule import (
    DOWN,
    UP,
    BatchLevel,
    ConvergenceLevel,
    CostLedger,
    EpochLevel,
    NotClosedFormError,
    SchedulePlan,
    b_level_batching,
    bytes_to_gb,
    communication_events,
    make_chunks,
    next_subset,
    record_transfer,
    save_ledger_csv,
    start_new_epoch,
    total_cost_gb,
)
from scripts.fedavg import ClientState
from scripts.mlp_model import LabeledDataset


def client_with(n: int, client_id: str = "c0") -> ClientState:
    data = LabeledDataset(np.arange(n * 2, dtype=float).reshape(n, 2), np.zeros(n))
    return ClientState(client_id, data)


def consume(client: ClientState, plan: SchedulePlan, round_index: int, batch_size: int = 4, seed: int = 0):
    subset = next_subset(client, plan, round_index, batch_size=batch_size, seed=seed)
    client.chunk_cursor = subset.cursor_after
    client.epoch_index = subset.epoch_after
    return subset


class TestMakeChunks:
    def test_even_split(self):
        assert make_chunks(16, 8, 0).sizes() == [2] * 8

    def test_remainder_to_leading_chunks(self):
        sizes = make_chunks(10, 8, 0).sizes()
        assert sizes == [2, 2, 1, 1, 1, 1, 1, 1]
        assert sum(sizes) == 10

    def test_fewer_examples_than_chunks(self):
        assert make_chunks(3, 8, 0).sizes() == [1, 1, 1, 0, 0, 0, 0, 0]

    def test_deterministic(self):
        assert np.array_equal(make_chunks(20, 4, (1, "c", 0)).order, make_chunks(20, 4, (1, "c", 0)).order)

    @given(size=st.integers(min_value=0, max_value=300), n=st.integers(min_value=1, max_value=20),
           seed=st.integers(min_value=0, max_value=2**32))
    def test_chunks_partition_the_dataset(self, size, n, seed):
        plan = make_chunks(size, n, seed)
        indices = np.concatenate([plan.chunk(j) for j in range(n)])
        assert sorted(indices.tolist()) == list(range(size))
        sizes = plan.sizes()
        assert max(sizes) - min(sizes) <= 1


class TestBLevelBatching:
    def test_sufficient(self):
        assert b_level_batching(10, 2, 4) == [4, 4]

    def test_reduced(self):
        assert b_level_batching(2, 2, 4) == [1, 1]

    def test_exhausted(self):
        assert b_level_batching(0, 2, 4) == []

    def test_remainder_to_leading(self):
        assert b_level_batching(7, 2, 4) == [4, 3]

    def test_fewer_than_k(self):
        assert b_level_batching(2, 5, 4) == [1, 1]

    @given(remaining=st.integers(min_value=0, max_value=500), k=st.integers(min_value=1, max_value=10),
           batch=st.integers(min_value=1, max_value=32))
    def test_never_exceeds_remaining(self, remaining, k, batch):
        sizes = b_level_batching(remaining, k, batch)
        assert sum(sizes) <= remaining
        assert all(1 <= s <= batch for s in sizes)
        assert len(sizes) <= k
        if remaining:
            assert sizes


class TestNextSubset:
    def test_e1_is_one_epoch(self):
        client = client_with(20)
        plan = SchedulePlan(EpochLevel(8, 8))
        subset = consume(client, plan, 1)
        assert sorted(subset.indices.tolist()) == list(range(20))
        assert client.epoch_index == 1

    def test_e_half_is_half_epoch(self):
        client = client_with(16)
        plan = SchedulePlan(EpochLevel(4, 8))
        first = consume(client, plan, 1)
        second = consume(client, plan, 2)
        assert len(first.indices) == len(second.indices) == 8
        assert sorted(np.concatenate([first.indices, second.indices]).tolist()) == list(range(16))

    def test_e2_spans_two_epochs(self):
        client = client_with(10)
        subset = consume(client, SchedulePlan(EpochLevel(16, 8)), 1)
        assert len(subset.indices) == 20
        assert sorted(subset.indices.tolist()) == sorted(list(range(10)) * 2)
        assert client.epoch_index == 2

    def test_e_level_coverage_per_epoch(self):
        client = client_with(13)
        plan = SchedulePlan(EpochLevel(2, 8))
        seen = np.concatenate([consume(client, plan, r).indices for r in range(1, 5)])
        assert sorted(seen.tolist()) == list(range(13))

    def test_b_level_shrink_then_dropout(self):
        client = client_with(10)
        plan = SchedulePlan(BatchLevel(k=2))
        consumed = [len(consume(client, plan, r).indices) for r in range(1, 5)]
        assert consumed == [8, 2, 0, 0]

        start_new_epoch([client])
        assert len(consume(client, plan, 5).indices) == 8

    def test_b_level_batches(self):
        client = client_with(10)
        plan = SchedulePlan(BatchLevel(k=2))
        assert consume(client, plan, 1).batch_sizes == (4, 4)
        assert consume(client, plan, 2).batch_sizes == (1, 1)
        assert consume(client, plan, 3).empty

    def test_b_level_epoch_coverage(self):
        client = client_with(23)
        plan = SchedulePlan(BatchLevel(k=3))
        seen = []
        r = 1
        while True:
            subset = consume(client, plan, r, batch_size=2)
            if subset.empty:
                break
            seen.extend(subset.indices.tolist())
            r += 1
        assert sorted(seen) == list(range(23))

    def test_c_level_full_dataset(self):
        client = client_with(9)
        subset = next_subset(client, SchedulePlan(ConvergenceLevel()), 1, batch_size=4, seed=0)
        assert sorted(subset.indices.tolist()) == list(range(9))

    def test_does_not_mutate_client(self):
        client = client_with(10)
        next_subset(client, SchedulePlan(EpochLevel(4, 8)), 1, batch_size=4, seed=0)
        assert client.chunk_cursor == 0


class TestSchedulePlan:
    @pytest.mark.parametrize(
        "level, weighting, n, label",
        [
            (EpochLevel(16, 8), "M", None, "E(2)-M"),
            (EpochLevel(8, 8), "M", None, "E(1)-M"),
            (EpochLevel(4, 8), "M", None, "E(1/2)-M"),
            (EpochLevel(8, 8), "W", 100, "E-100-W"),
            (ConvergenceLevel(), "W", None, "C-W"),
            (BatchLevel(), "W", None, "B-W"),
        ],
    )
    def test_labels(self, level, weighting, n, label):
        assert SchedulePlan(level).label(weighting, n) == label

    def test_planned_rounds(self):
        assert SchedulePlan(EpochLevel(8, 8), 12).planned_rounds() == 12
        assert SchedulePlan(EpochLevel(2, 8), 12).planned_rounds() == 48
        assert SchedulePlan(EpochLevel(16, 8), 12).planned_rounds() == 6
        assert SchedulePlan(ConvergenceLevel(), 12).planned_rounds() == 1
        assert SchedulePlan(EpochLevel(8, 8), 0).planned_rounds() == 0

    def test_invalid_levels(self):
        with pytest.raises(ValueError):
            BatchLevel(k=0)
        with pytest.raises(ValueError):
            EpochLevel(0, 8)
        with pytest.raises(ValueError):
            ConvergenceLevel(patience=0)

    @pytest.mark.parametrize("period, budget", [(16, 1), (16, 3), (24, 2)])
    def test_budget_must_be_whole_rounds(self, period, budget):
        with pytest.raises(ValueError):
            SchedulePlan(EpochLevel(period, 8), budget)

    def test_same_budget_keeps_ratio(self):
        e1 = SchedulePlan(EpochLevel(8, 8), 2).planned_rounds()
        e2 = SchedulePlan(EpochLevel(16, 8), 2).planned_rounds()
        assert (e1, e2) == (2, 1)
        assert SchedulePlan(EpochLevel(16, 8), 0).planned_rounds() == 0
        assert SchedulePlan(BatchLevel(2), 1).planned_rounds() is None


class TestCommunicationEvents:
    def test_e1_vs_e2(self):
        e1 = communication_events(SchedulePlan(EpochLevel(8, 8)), 50, 12, 8)
        e2 = communication_events(SchedulePlan(EpochLevel(16, 8)), 50, 12, 8)
        assert e1 / e2 == 2

    def test_fractional_periods(self):
        e1 = communication_events(SchedulePlan(EpochLevel(8, 8)), 50, 12, 8)
        assert communication_events(SchedulePlan(EpochLevel(4, 8)), 50, 12, 8) / e1 == 2
        assert communication_events(SchedulePlan(EpochLevel(2, 8)), 50, 12, 8) / e1 == 4

    def test_c_level(self):
        assert communication_events(SchedulePlan(ConvergenceLevel()), 1372, 12, 8) == 1372

    def test_non_divisible(self):
        with pytest.raises(NotClosedFormError):
            communication_events(SchedulePlan(EpochLevel(16, 8)), 1, 1, 8)

    def test_b_level_needs_sizes(self):
        with pytest.raises(NotClosedFormError):
            communication_events(SchedulePlan(BatchLevel(2)), 5, 1, 8)
        assert communication_events(SchedulePlan(BatchLevel(2)), 5, 1, 8, dataset_size=10, batch_size=4) == 10


class TestCostLedger:
    def test_uplink_only(self):
        ledger = CostLedger(model_bytes=100)
        for cid in ("a", "b", "c"):
            record_transfer(ledger, 1, cid, DOWN)
            record_transfer(ledger, 1, cid, UP)
        assert ledger.total_bytes == 300
        assert len(ledger.entries) == 3

    def test_with_downlink(self):
        ledger = CostLedger(model_bytes=100, count_downlink=True)
        for cid in ("a", "b", "c"):
            record_transfer(ledger, 1, cid, DOWN)
            record_transfer(ledger, 1, cid, UP)
        assert ledger.total_bytes == 600
        assert ledger.participations == 3

    def test_empty(self):
        ledger = CostLedger(model_bytes=100)
        assert ledger.total_bytes == 0
        assert total_cost_gb(ledger) == 0.0

    def test_gb(self):
        ledger = CostLedger(model_bytes=651 * 10**9)
        record_transfer(ledger, 1, "a", UP)
        assert total_cost_gb(ledger) == 651.0

    def test_bytes_to_gb(self):
        assert bytes_to_gb(0) == 0.0
        assert bytes_to_gb(2_500_000_000) == 2.5

    def test_entries_cannot_be_mutated(self):
        ledger = CostLedger(model_bytes=10)
        record_transfer(ledger, 1, "a", UP)
        entries = ledger.entries
        with pytest.raises(AttributeError):
            entries.append(None)
        assert sum(e.bytes for e in ledger.entries) == ledger.total_bytes

    def test_invalid_direction(self):
        with pytest.raises(ValueError):
            record_transfer(CostLedger(model_bytes=10), 1, "a", "sideways")

    def test_csv_export(self, tmp_path):
        ledger = CostLedger(model_bytes=10)
        record_transfer(ledger, 1, "a", UP)
        record_transfer(ledger, 2, "b", UP)
        out = save_ledger_csv(ledger, tmp_path / "ledger.csv", verbose=False)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "round,client_id,direction,bytes"
        assert lines[1:] == ["1,a,up,10", "2,b,up,10"]
