"""連合平均（FedAvg）

  W^0 = train_initial_model(D_0)
  for round i:
      for client n (選択されたもの):
          W^i_n = W^{i-1}
          T^i_n = subset(D_n, i)
          W^i_n = train_model(T^i_n, W^i_n)
      W^i = Σ α_n · W^i_n      (Σ α_n = 1)

パラメータを直接平均する。勾配差分の形 W^{i-1} + Σ α_n ΔW^i_n は
同じ結果になる（delta_form_average はその確認用）。
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from scripts.comm_schedule import (
    DOWN,
    UP,
    BatchLevel,
    ConvergenceLevel,
    CostLedger,
    RoundSubset,
    SchedulePlan,
    has_untrained,
    next_subset,
    record_transfer,
    start_new_epoch,
)
from scripts.mlp_model import (
    EvalResult,
    LabeledDataset,
    ModelSpec,
    ParameterVector,
    TrainConfig,
    batch_plan,
    evaluate,
    require_same_layout,
    run_minibatches,
)
from scripts.rng_keys import epoch_order, make_rng
from scripts.run_report import SUMMARY_ROUND, RoundRow, RunReport

MEAN = "M"
WEIGHTED = "W"
WEIGHT_TOLERANCE = 1e-9

Evaluator = Callable[[ParameterVector], dict[str, EvalResult]]


class RoundSkipped(Exception):
    """このラウンドは誰も学習データを持っていない（エラーではない）"""


@dataclass(frozen=True)
class WeightingScheme:
    """M: α_n = 1/N、W: α_n = |D_n| / Σ|D_i|（選択されたクライアント内）"""
    kind: str = MEAN

    def __post_init__(self):
        if self.kind not in (MEAN, WEIGHTED):
            raise ValueError(f"weighting は M か W: {self.kind}")


@dataclass(eq=False)
class ClientState:
    """シミュレーション上の1クライアント（1話者）"""
    client_id: str
    dataset: LabeledDataset
    local_params: ParameterVector | None = None
    dev_dataset: LabeledDataset | None = None
    chunk_cursor: int = 0
    epoch_index: int = 0

    @property
    def dataset_size(self) -> int:
        return len(self.dataset)


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    participants: tuple[str, ...]
    metrics: dict[str, EvalResult] = field(default_factory=dict)


@dataclass(frozen=True)
class GlobalState:
    round_index: int
    global_params: ParameterVector
    history: tuple[RoundRecord, ...] = ()


@dataclass(frozen=True)
class SelectionPolicy:
    """all: 全クライアント、random: 毎ラウンド n クライアントを非復元抽出"""
    mode: str = "all"
    n: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("all", "random"):
            raise ValueError(f"selection.mode は all か random: {self.mode}")
        if self.mode == "random" and (self.n is None or self.n < 1):
            raise ValueError(f"random 選択には n >= 1 が必要です: {self.n}")


@dataclass(frozen=True)
class FederatedConfig:
    """run_federated に渡す設定一式"""
    spec: ModelSpec
    train: TrainConfig
    schedule: SchedulePlan
    weighting: WeightingScheme = WeightingScheme()
    selection: SelectionPolicy = SelectionPolicy()
    model_bytes: int | None = None
    count_downlink: bool = False
    max_workers: int = 1
    label: str = ""


# =====================================
# 重みと平均化
# =====================================

def compute_weights(scheme: WeightingScheme, selected: Sequence[ClientState]) -> list[float]:
    if not selected:
        raise ValueError("クライアントが選択されていません")
    n = len(selected)
    if scheme.kind == MEAN:
        return [1.0 / n] * n
    sizes = [c.dataset_size for c in selected]
    total = sum(sizes)
    if total <= 0:
        raise ValueError("W-averaging: 選択クライアントのデータ数がすべて0です")
    return [s / total for s in sizes]


def _pairwise_sum(terms: Sequence[np.ndarray]) -> np.ndarray:
    """固定順序のペアワイズ加算"""
    if len(terms) == 1:
        return terms[0]
    mid = len(terms) // 2
    return _pairwise_sum(terms[:mid]) + _pairwise_sum(terms[mid:])


def _check_weights(count: int, weights: Sequence[float]) -> np.ndarray:
    if count == 0:
        raise ValueError("平均化するモデルがありません")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,):
        raise ValueError(f"重みの数がモデル数と一致しません: {w.size} != {count}")
    if np.any(w < 0):
        raise ValueError("重みは非負である必要があります")
    if abs(w.sum() - 1.0) > WEIGHT_TOLERANCE:
        raise ValueError(f"重みの合計が1ではありません: {w.sum()!r}")
    return w


def fedavg(models: Sequence[ParameterVector], weights: Sequence[float]) -> ParameterVector:
    """W = Σ α_n · W_n（入力モデルの要素ごとの最小・最大の範囲に収める）"""
    w = _check_weights(len(models), weights)
    require_same_layout(models)
    total = _pairwise_sum([a * m.values for a, m in zip(w, models)])
    lower = np.minimum.reduce([m.values for m in models])
    upper = np.maximum.reduce([m.values for m in models])
    return models[0].with_values(np.clip(total, lower, upper))


def delta_form_average(
    prev_global: ParameterVector,
    deltas: Sequence[ParameterVector],
    weights: Sequence[float],
) -> ParameterVector:
    """W^{i-1} + Σ α_n · ΔW_n"""
    w = _check_weights(len(deltas), weights)
    require_same_layout([prev_global, *deltas])
    step = _pairwise_sum([a * d.values for a, d in zip(w, deltas)])
    return prev_global.with_values(prev_global.values + step)


# =====================================
# クライアント選択・早期終了
# =====================================

def select_clients(clients: Sequence[ClientState], policy: SelectionPolicy, round_index: int) -> list[ClientState]:
    """client_id 順で返す。random は (seed, round) で決まる非復元抽出"""
    ordered = sorted(clients, key=lambda c: c.client_id)
    if policy.mode == "all":
        return ordered
    if policy.n > len(ordered):
        raise ValueError(f"選択数 {policy.n} がクライアント数 {len(ordered)} を超えています")
    picked = make_rng(policy.seed, "select", round_index).choice(len(ordered), size=policy.n, replace=False)
    return [ordered[i] for i in sorted(picked)]


def early_stop_check(history: Sequence[float], patience: int) -> bool:
    """最良値の後に patience 回以上改善（厳密に大きい値）がなければ True"""
    if patience < 1:
        raise ValueError(f"patience は1以上: {patience}")
    if not history:
        return False
    best_index = int(np.argmax(history))  # 同値は最初の出現が最良
    return len(history) - 1 - best_index >= patience


def train_until_converged(
    params: ParameterVector,
    spec: ModelSpec,
    client: ClientState,
    config: TrainConfig,
    patience: int,
    max_epochs: int,
) -> ParameterVector:
    """C-level: epochごとに dev 正解率を見て early stopping、最良モデルを返す"""
    eval_set = client.dev_dataset if client.dev_dataset is not None and len(client.dev_dataset) else client.dataset
    n = client.dataset_size
    history: list[float] = []
    best = params
    for e in range(max_epochs):
        order = epoch_order(n, config.seed, client.client_id, client.epoch_index + e)
        params = run_minibatches(params, spec, client.dataset, order, batch_plan(n, config.batch_size), config.learning_rate)
        accuracy = evaluate(params, spec, eval_set).accuracy
        if not history or accuracy > max(history):
            best = params
        history.append(accuracy)
        if early_stop_check(history, patience):
            break
    return best


# =====================================
# ラウンド
# =====================================

def _train_client(
    client: ClientState,
    subset: RoundSubset,
    global_params: ParameterVector,
    spec: ModelSpec,
    schedule: SchedulePlan,
    config: TrainConfig,
) -> ParameterVector:
    # W^i_n = W^{i-1}
    params = global_params
    level = schedule.level
    if isinstance(level, ConvergenceLevel):
        return train_until_converged(params, spec, client, config, level.patience, level.max_epochs)
    return run_minibatches(params, spec, client.dataset, subset.indices, subset.batch_sizes, config.learning_rate)


def run_round(
    global_state: GlobalState,
    clients: Sequence[ClientState],
    policy: SelectionPolicy,
    scheme: WeightingScheme,
    schedule: SchedulePlan,
    spec: ModelSpec,
    train_config: TrainConfig,
    *,
    ledger: CostLedger | None = None,
    max_workers: int = 1,
) -> GlobalState:
    """1ラウンド（配布 → ローカル学習 → FedAvg）

    サブセットが空のクライアントは平均から外し、残りで重みを正規化する。
    誰も学習しないラウンドは RoundSkipped を送出する。
    """
    round_index = global_state.round_index + 1

    pool = list(clients)
    if isinstance(schedule.level, BatchLevel):
        # B-level: 現epochのデータが残っているクライアントから選ぶ
        pool = [c for c in pool if has_untrained(c)]
        if not pool:
            raise RoundSkipped(f"round {round_index}: 未学習データのあるクライアントがありません")
        if policy.mode == "random" and policy.n > len(pool):
            policy = replace(policy, n=len(pool))
    selected = select_clients(pool, policy, round_index)

    subsets = {
        c.client_id: next_subset(c, schedule, round_index, batch_size=train_config.batch_size, seed=train_config.seed)
        for c in selected
    }
    participants = [c for c in selected if not subsets[c.client_id].empty]
    if not participants:
        raise RoundSkipped(f"round {round_index}: 学習データのあるクライアントがありません")

    incoming = global_state.global_params
    if ledger is not None:
        for c in participants:
            record_transfer(ledger, round_index, c.client_id, DOWN)

    def work(client: ClientState) -> ParameterVector:
        return _train_client(client, subsets[client.client_id], incoming, spec, schedule, train_config)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool_executor:
            trained = list(pool_executor.map(work, participants))
    else:
        trained = [work(c) for c in participants]

    # ラウンド境界でスケジューラ状態を確定
    for client, params in zip(participants, trained):
        subset = subsets[client.client_id]
        client.local_params = params
        client.chunk_cursor = subset.cursor_after
        client.epoch_index = subset.epoch_after

    weights = compute_weights(scheme, participants)
    new_global = fedavg(trained, weights)

    if ledger is not None:
        for c in participants:
            record_transfer(ledger, round_index, c.client_id, UP)

    record = RoundRecord(round_index, tuple(c.client_id for c in participants))
    return GlobalState(round_index, new_global, (*global_state.history, record))


def _evaluate_with(evaluator: Evaluator | None, params: ParameterVector) -> dict[str, EvalResult]:
    return {} if evaluator is None else evaluator(params)


def run_federated(
    initial: ParameterVector,
    clients: Sequence[ClientState],
    config: FederatedConfig,
    evaluator: Evaluator | None = None,
    verbose: bool = False,
) -> tuple[ParameterVector, RunReport]:
    """スケジュールが終わるまでラウンドを回す

    B/E: epoch_budget 分、C: 1ラウンドのみ（ローカルで収束まで学習）。
    """
    if not clients:
        raise ValueError("クライアントがありません")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("client_id が重複しています")

    for c in clients:
        c.local_params = initial
        c.chunk_cursor = 0
        c.epoch_index = 0

    ledger = CostLedger(
        model_bytes=config.model_bytes or initial.nbytes,
        count_downlink=config.count_downlink,
    )
    state = GlobalState(0, initial)
    rows: list[RoundRow] = []
    schedule = config.schedule

    def step() -> None:
        nonlocal state
        state = run_round(
            state,
            clients,
            config.selection,
            config.weighting,
            schedule,
            config.spec,
            config.train,
            ledger=ledger,
            max_workers=config.max_workers,
        )
        metrics = _evaluate_with(evaluator, state.global_params)
        last = state.history[-1]
        state = replace(state, history=(*state.history[:-1], replace(last, metrics=metrics)))
        rows.append(RoundRow(state.round_index, len(last.participants), metrics, ledger.total_bytes))
        if verbose:
            acc = metrics.get("federated")
            acc_text = f"{acc.accuracy:.4f}" if acc else "-"
            print(f"  [round {state.round_index}] 参加 {len(last.participants)}, federated_acc {acc_text}, "
                  f"cost {ledger.total_bytes:,} bytes")

    if isinstance(schedule.level, BatchLevel):
        for epoch in range(schedule.epoch_budget):
            while True:
                try:
                    step()
                except RoundSkipped:
                    break
            start_new_epoch(list(clients))
            if verbose:
                print(f"  epoch {epoch + 1}/{schedule.epoch_budget} 完了")
    else:
        for _ in range(schedule.planned_rounds()):
            try:
                step()
            except RoundSkipped:
                continue

    initial_metrics = _evaluate_with(evaluator, initial)
    final_metrics = rows[-1].metrics if rows else initial_metrics
    report = RunReport(
        label=config.label,
        rows=rows,
        summary=RoundRow(SUMMARY_ROUND, ledger.participations, final_metrics, ledger.total_bytes),
        initial_metrics=initial_metrics,
        ledger=ledger,
    )
    return state.global_params, report
