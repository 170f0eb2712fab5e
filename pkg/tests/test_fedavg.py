import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import scripts.fedavg as fedavg_module
from conftest import make_blobs
from scripts.comm_schedule import BatchLevel, ConvergenceLevel, CostLedger, EpochLevel, SchedulePlan, total_cost_gb
from scripts.fedavg import (
    MEAN,
    WEIGHTED,
    ClientState,
    FederatedConfig,
    GlobalState,
    RoundSkipped,
    SelectionPolicy,
    WeightingScheme,
    compute_weights,
    delta_form_average,
    early_stop_check,
    fedavg,
    run_federated,
    run_round,
    select_clients,
    train_until_converged,
)
from scripts.mlp_model import (
    LabeledDataset,
    ModelSpec,
    ParameterVector,
    TrainConfig,
    evaluate,
    init_model,
    train_local,
)

MODEL_SPEC = ModelSpec(2, (4,), 2)
TRAIN = TrainConfig(learning_rate=0.1, batch_size=4, seed=3)


def vec(values) -> ParameterVector:
    values = np.asarray(values, dtype=float)
    return ParameterVector(values, (("w", (values.size,)),))


def sized_client(client_id: str, n: int) -> ClientState:
    return ClientState(client_id, LabeledDataset(np.zeros((n, 2)), np.zeros(n)))


def blob_clients(count: int, n_per_class: int = 6) -> list[ClientState]:
    return [ClientState(f"c{i:02d}", make_blobs(n_per_class, seed=i)) for i in range(count)]


def e_plan(period: int = 8, budget: int = 1) -> SchedulePlan:
    return SchedulePlan(EpochLevel(period, 8), epoch_budget=budget)


class TestComputeWeights:
    def test_mean(self):
        clients = [sized_client(str(i), 5) for i in range(4)]
        assert compute_weights(WeightingScheme(MEAN), clients) == [0.25] * 4

    def test_weighted(self):
        clients = [sized_client("a", 1), sized_client("b", 3)]
        assert compute_weights(WeightingScheme(WEIGHTED), clients) == [0.25, 0.75]

    def test_weighted_equal_sizes_is_mean(self):
        clients = [sized_client(str(i), 5) for i in range(3)]
        assert compute_weights(WeightingScheme(WEIGHTED), clients) == compute_weights(WeightingScheme(MEAN), clients)

    def test_empty_selection(self):
        with pytest.raises(ValueError):
            compute_weights(WeightingScheme(MEAN), [])

    def test_weighted_all_zero(self):
        with pytest.raises(ValueError):
            compute_weights(WeightingScheme(WEIGHTED), [sized_client("a", 0)])

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            WeightingScheme("X")

    @given(st.lists(st.integers(min_value=0, max_value=10_000), min_size=1, max_size=50).filter(any),
           st.sampled_from([MEAN, WEIGHTED]))
    def test_sum_to_one(self, sizes, kind):
        clients = [sized_client(str(i), n) for i, n in enumerate(sizes)]
        weights = compute_weights(WeightingScheme(kind), clients)
        assert abs(sum(weights) - 1.0) <= 1e-12
        assert all(w >= 0 for w in weights)


class TestFedavg:
    def test_idempotent(self):
        w = init_model(ModelSpec(3, (5,), 2), 0)
        assert np.array_equal(fedavg([w, w, w], [1 / 3] * 3).values, w.values)

    def test_arithmetic(self):
        assert fedavg([vec([1, 3]), vec([3, 5])], [0.5, 0.5]).values.tolist() == [2, 4]
        assert fedavg([vec([0, 0]), vec([4, 8])], [0.25, 0.75]).values.tolist() == [3, 6]

    def test_layout_mismatch(self):
        other = ParameterVector(np.zeros(2), (("v", (2,)),))
        with pytest.raises(ValueError):
            fedavg([vec([1, 2]), other], [0.5, 0.5])

    def test_weight_count_mismatch(self):
        with pytest.raises(ValueError):
            fedavg([vec([1, 2]), vec([1, 2])], [1.0])

    def test_weight_sum_violation(self):
        with pytest.raises(ValueError):
            fedavg([vec([1, 2]), vec([1, 2])], [0.5, 0.6])

    def test_no_models(self):
        with pytest.raises(ValueError):
            fedavg([], [])

    @settings(max_examples=200)
    @given(st.data())
    def test_convexity_bound(self, data):
        n_models = data.draw(st.integers(min_value=1, max_value=8))
        size = data.draw(st.integers(min_value=1, max_value=20))
        floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
        models = [vec(data.draw(st.lists(floats, min_size=size, max_size=size))) for _ in range(n_models)]
        raw = np.array(data.draw(st.lists(st.floats(min_value=0.01, max_value=1.0),
                                          min_size=n_models, max_size=n_models)))
        weights = raw / raw.sum()
        out = fedavg(models, weights).values
        stacked = np.stack([m.values for m in models])
        assert np.all(out >= stacked.min(axis=0))
        assert np.all(out <= stacked.max(axis=0))


class TestDeltaFormAverage:
    def test_zero_deltas(self):
        prev = vec([1.0, -2.0, 3.0])
        zero = vec([0.0, 0.0, 0.0])
        assert np.array_equal(delta_form_average(prev, [zero, zero], [0.5, 0.5]).values, prev.values)

    def test_single_client(self):
        prev = vec([1.0, 2.0])
        delta = vec([0.5, -0.5])
        assert delta_form_average(prev, [delta], [1.0]).values.tolist() == [1.5, 1.5]

    def test_parameter_and_delta_forms_agree(self):
        # 相対誤差 = max|差| / max|値|
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            size = int(rng.integers(1, 10_001))
            n = int(rng.integers(1, 17))
            prev = vec(rng.normal(size=size))
            deltas = [vec(rng.normal(scale=0.1, size=size)) for _ in range(n)]
            raw = rng.random(n) + 1e-3
            weights = raw / raw.sum()
            direct = fedavg([prev + d for d in deltas], weights).values
            via_delta = delta_form_average(prev, deltas, weights).values
            worst = max(worst, float(np.max(np.abs(direct - via_delta)) / np.max(np.abs(via_delta))))
        assert worst <= 1e-12


class TestSelectClients:
    def test_all_sorted(self):
        clients = [sized_client(cid, 1) for cid in ("d", "a", "e", "c", "b")]
        assert [c.client_id for c in select_clients(clients, SelectionPolicy(), 1)] == list("abcde")

    def test_random_exhaustive(self):
        clients = [sized_client(cid, 1) for cid in "edcba"]
        picked = select_clients(clients, SelectionPolicy("random", 5, seed=1), 3)
        assert [c.client_id for c in picked] == list("abcde")

    def test_random_deterministic_and_varies(self):
        clients = [sized_client(f"c{i}", 1) for i in range(10)]
        policy = SelectionPolicy("random", 2, seed=7)
        first = [c.client_id for c in select_clients(clients, policy, 1)]
        assert first == [c.client_id for c in select_clients(clients, policy, 1)]
        draws = {tuple(c.client_id for c in select_clients(clients, policy, r)) for r in range(1, 21)}
        assert len(draws) > 1
        assert all(len(set(d)) == 2 and list(d) == sorted(d) for d in draws)

    def test_too_many(self):
        with pytest.raises(ValueError):
            select_clients([sized_client("a", 1)], SelectionPolicy("random", 2), 1)

    def test_invalid_policy(self):
        with pytest.raises(ValueError):
            SelectionPolicy("random", None)


class TestEarlyStopCheck:
    def test_increasing(self):
        assert not early_stop_check([i / 20 for i in range(20)], 10)

    def test_exhausted_exactly(self):
        history = [0.9] + [0.5] * 10
        assert early_stop_check(history, 10)

    def test_one_short(self):
        history = [0.9] + [0.5] * 9
        assert not early_stop_check(history, 10)

    def test_ties_do_not_improve(self):
        assert early_stop_check([0.7] * 11, 10)

    def test_invalid_patience(self):
        with pytest.raises(ValueError):
            early_stop_check([0.1], 0)


class TestRunRound:
    def test_single_client_equals_local_training(self):
        client = ClientState("solo", make_blobs(8))
        initial = init_model(MODEL_SPEC, 0)
        state = run_round(GlobalState(0, initial), [client], SelectionPolicy(), WeightingScheme(MEAN),
                          e_plan(), MODEL_SPEC, TRAIN)
        expected = train_local(initial, MODEL_SPEC, make_blobs(8), TRAIN, client_id="solo")
        assert np.array_equal(state.global_params.values, expected.values)
        assert state.round_index == 1

    def test_untrained_clients_leave_global_unchanged(self, monkeypatch):
        monkeypatch.setattr(fedavg_module, "_train_client", lambda client, subset, params, *rest: params)
        initial = init_model(MODEL_SPEC, 1)
        state = run_round(GlobalState(0, initial), blob_clients(3), SelectionPolicy(), WeightingScheme(WEIGHTED),
                          e_plan(), MODEL_SPEC, TRAIN)
        assert np.array_equal(state.global_params.values, initial.values)

    def test_client_order_does_not_matter(self):
        initial = init_model(MODEL_SPEC, 2)
        a = run_round(GlobalState(0, initial), blob_clients(5), SelectionPolicy(), WeightingScheme(WEIGHTED),
                      e_plan(4), MODEL_SPEC, TRAIN)
        b = run_round(GlobalState(0, initial), blob_clients(5)[::-1], SelectionPolicy(),
                      WeightingScheme(WEIGHTED), e_plan(4), MODEL_SPEC, TRAIN)
        assert np.array_equal(a.global_params.values, b.global_params.values)

    def test_parallel_matches_sequential(self):
        initial = init_model(MODEL_SPEC, 3)
        args = (SelectionPolicy(), WeightingScheme(MEAN), e_plan(), MODEL_SPEC, TRAIN)
        seq = run_round(GlobalState(0, initial), blob_clients(6), *args)
        par = run_round(GlobalState(0, initial), blob_clients(6), *args, max_workers=4)
        assert np.array_equal(seq.global_params.values, par.global_params.values)

    def test_no_data_skips(self):
        initial = init_model(MODEL_SPEC, 0)
        with pytest.raises(RoundSkipped):
            run_round(GlobalState(0, initial), [sized_client("a", 0)], SelectionPolicy(), WeightingScheme(MEAN),
                      e_plan(), MODEL_SPEC, TRAIN)

    def test_ledger_counts_participants(self):
        ledger = CostLedger(model_bytes=10, count_downlink=True)
        run_round(GlobalState(0, init_model(MODEL_SPEC, 0)), blob_clients(3), SelectionPolicy(), WeightingScheme(MEAN),
                  e_plan(), MODEL_SPEC, TRAIN, ledger=ledger)
        assert ledger.total_bytes == 60
        assert ledger.participations == 3

    def test_ledger_goes_through_record_transfer(self, monkeypatch):
        calls = []

        def spy(ledger, round_index, client_id, direction):
            calls.append((round_index, client_id, direction))
            return ledger.record(round_index, client_id, direction)

        monkeypatch.setattr(fedavg_module, "record_transfer", spy)
        ledger = CostLedger(model_bytes=10)
        run_round(GlobalState(0, init_model(MODEL_SPEC, 0)), blob_clients(2), SelectionPolicy(), WeightingScheme(MEAN),
                  e_plan(), MODEL_SPEC, TRAIN, ledger=ledger)
        assert sorted(calls) == [(1, "c00", "down"), (1, "c00", "up"), (1, "c01", "down"), (1, "c01", "up")]
        assert ledger.total_bytes == 20


class TestTrainUntilConverged:
    def test_returns_best_dev_model(self):
        client = ClientState("c", make_blobs(10, seed=1), dev_dataset=make_blobs(5, seed=2))
        params = train_until_converged(init_model(MODEL_SPEC, 0), MODEL_SPEC, client, TRAIN, patience=3, max_epochs=30)
        assert evaluate(params, MODEL_SPEC, client.dev_dataset).accuracy >= 0.9

    def test_max_epochs_bounds_training(self):
        client = ClientState("c", make_blobs(4))
        one = train_until_converged(init_model(MODEL_SPEC, 0), MODEL_SPEC, client, TRAIN, patience=10, max_epochs=1)
        expected = train_local(init_model(MODEL_SPEC, 0), MODEL_SPEC, client.dataset, TRAIN, client_id="c")
        assert np.array_equal(one.values, expected.values)


class TestRunFederated:
    def config(self, plan: SchedulePlan, **kwargs) -> FederatedConfig:
        return FederatedConfig(spec=MODEL_SPEC, train=TRAIN, schedule=plan, **kwargs)

    def test_zero_budget(self):
        initial = init_model(MODEL_SPEC, 0)
        final, report = run_federated(initial, blob_clients(2), self.config(e_plan(budget=0)))
        assert final is initial
        assert report.rows == []
        assert report.total_bytes == 0

    def test_empty_clients(self):
        with pytest.raises(ValueError):
            run_federated(init_model(MODEL_SPEC, 0), [], self.config(e_plan()))

    def test_degenerate_single_client_e1(self):
        data = make_blobs(9, seed=5)
        initial = init_model(MODEL_SPEC, 4)
        final, _ = run_federated(initial, [ClientState("only", data)], self.config(e_plan(budget=5)))
        expected = train_local(initial, MODEL_SPEC, data, TrainConfig(0.1, 4, epochs=5, seed=3), client_id="only")
        assert np.array_equal(final.values, expected.values)

    def test_identical_clients_equal_single_client(self):
        # シャッフル順は client_id をキーにするので "a" と "b" で異なる。
        # 全行が同じデータだから順序が違っても同じ更新になる（行が異なれば結果は一致しない）
        data = LabeledDataset(np.tile([[0.5, -1.0]], (12, 1)), np.ones(12))
        initial = init_model(MODEL_SPEC, 6)
        pair, _ = run_federated(initial, [ClientState("a", data), ClientState("b", data)],
                                self.config(e_plan(budget=3)))
        single, _ = run_federated(initial, [ClientState("a", data)], self.config(e_plan(budget=3)))
        assert np.array_equal(pair.values, single.values)

    def test_report_cost_matches_ledger(self):
        final, report = run_federated(init_model(MODEL_SPEC, 0), blob_clients(3), self.config(e_plan(4, budget=2)))
        assert report.ledger.total_bytes == report.total_bytes
        assert report.cost_gb == total_cost_gb(report.ledger)
        assert report.cost_gb == pytest.approx(4 * 3 * final.nbytes / 10**9)

    def test_reproducible(self):
        initial = init_model(MODEL_SPEC, 0)
        config = self.config(e_plan(4, budget=2), weighting=WeightingScheme(WEIGHTED),
                             selection=SelectionPolicy("random", 3, seed=5))
        a, ra = run_federated(initial, blob_clients(6), config)
        b, rb = run_federated(initial, blob_clients(6), config)
        assert np.array_equal(a.values, b.values)
        assert [r.participants for r in ra.rows] == [r.participants for r in rb.rows]

    def test_cost_scales_with_period(self):
        initial = init_model(MODEL_SPEC, 0)
        totals = {}
        for period in (16, 8, 4, 2):
            _, report = run_federated(initial, blob_clients(4), self.config(e_plan(period, budget=2)))
            totals[period] = report.total_bytes
        assert totals[8] == 2 * totals[16]
        assert totals[4] == 4 * totals[16]
        assert totals[2] == 8 * totals[16]

    def test_cumulative_cost_non_decreasing(self):
        _, report = run_federated(init_model(MODEL_SPEC, 0), blob_clients(3), self.config(e_plan(2, budget=1)))
        costs = [r.cumulative_bytes for r in report.rows]
        assert costs == sorted(costs)
        assert costs[-1] == report.ledger.total_bytes == report.summary.cumulative_bytes

    def test_b_level_participation_declines(self):
        clients = [ClientState("big", make_blobs(8)), ClientState("small", make_blobs(2))]
        plan = SchedulePlan(BatchLevel(k=1), epoch_budget=1)
        _, report = run_federated(init_model(MODEL_SPEC, 0), clients, self.config(plan))
        participants = [r.participants for r in report.rows]
        assert participants[0] == 2
        assert participants[-1] == 1
        assert report.summary.participants == sum(participants)
        # big: 16件 / batch 4 = 4 ラウンド
        assert len(report.rows) == 4

    def test_c_level_single_round(self):
        clients = [ClientState(f"c{i}", make_blobs(6, seed=i), dev_dataset=make_blobs(3, seed=10 + i))
                   for i in range(3)]
        plan = SchedulePlan(ConvergenceLevel(patience=2, max_epochs=10), epoch_budget=12)
        _, report = run_federated(init_model(MODEL_SPEC, 0), clients, self.config(plan))
        assert len(report.rows) == 1
        assert report.summary.participants == 3

    def test_evaluator_metrics_recorded(self):
        eval_data = make_blobs(5, seed=99)

        def evaluator(params):
            return {"federated": evaluate(params, MODEL_SPEC, eval_data)}

        _, report = run_federated(init_model(MODEL_SPEC, 0), blob_clients(2), self.config(e_plan(budget=2)), evaluator)
        assert len(report.rows) == 2
        assert "federated" in report.initial_metrics
        assert report.summary.metrics == report.rows[-1].metrics
