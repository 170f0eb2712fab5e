"""通信スケジュール（B/E/Cレベル）と通信コスト台帳

各ラウンドで各クライアントが学習するサブセット T^i_n = subset(D_n, i) を決める。

  B(K): K ミニバッチごとに通信。未学習データが足りなければバッチを縮小し、
        尽きたクライアントはそのepochの残りラウンドに参加しない。
  E(f): f epochごとに通信。f はチャンク単位（1 epoch = chunks_per_epoch チャンク）。
  C:    ローカルで収束（early stopping）まで学習し、1回だけ通信。
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from config import BYTES_PER_GB, DEFAULT_CHUNKS_PER_EPOCH, DEFAULT_MAX_LOCAL_EPOCHS, DEFAULT_PATIENCE
from scripts.mlp_model import batch_plan
from scripts.rng_keys import epoch_order, make_rng

if TYPE_CHECKING:
    from scripts.fedavg import ClientState

UP = "up"
DOWN = "down"
LEDGER_COLUMNS = ["round", "client_id", "direction", "bytes"]


class NotClosedFormError(ValueError):
    """閉形式で通信回数を出せない（台帳から数える必要がある）"""


# =====================================
# スケジュール定義
# =====================================

@dataclass(frozen=True)
class BatchLevel:
    k: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"B-level の K は1以上: {self.k}")


@dataclass(frozen=True)
class EpochLevel:
    period_chunks: int = DEFAULT_CHUNKS_PER_EPOCH
    chunks_per_epoch: int = DEFAULT_CHUNKS_PER_EPOCH

    def __post_init__(self):
        if self.period_chunks < 1 or self.chunks_per_epoch < 1:
            raise ValueError(f"E-level のチャンク数は1以上: {self.period_chunks}/{self.chunks_per_epoch}")

    @property
    def epochs_per_round(self) -> Fraction:
        return Fraction(self.period_chunks, self.chunks_per_epoch)


@dataclass(frozen=True)
class ConvergenceLevel:
    patience: int = DEFAULT_PATIENCE
    max_epochs: int = DEFAULT_MAX_LOCAL_EPOCHS

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError(f"C-level の patience/max_epochs は1以上: {self.patience}/{self.max_epochs}")


Level = BatchLevel | EpochLevel | ConvergenceLevel


@dataclass(frozen=True)
class SchedulePlan:
    """通信頻度の指定"""
    level: Level
    epoch_budget: int = 12

    def __post_init__(self):
        if self.epoch_budget < 0:
            raise ValueError(f"epoch_budget は0以上: {self.epoch_budget}")
        level = self.level
        if isinstance(level, EpochLevel) and (self.epoch_budget * level.chunks_per_epoch) % level.period_chunks:
            raise ValueError(
                f"epoch_budget {self.epoch_budget} が通信周期 {level.epochs_per_round} epoch の倍数ではありません"
            )

    def label(self, weighting: str, selection_n: int | None = None) -> str:
        """結果表のラベル（E(1/2)-M, E-100-W, C-W, B-W など）"""
        level = self.level
        if isinstance(level, ConvergenceLevel):
            return f"C-{weighting}"
        if isinstance(level, BatchLevel):
            prefix = "B" if level.k == 1 else f"B({level.k})"
            return f"{prefix}-{weighting}"
        frac = level.epochs_per_round
        if selection_n is None:
            return f"E({frac})-{weighting}"
        if frac == 1:
            return f"E-{selection_n}-{weighting}"
        return f"E({frac})-{selection_n}-{weighting}"

    def planned_rounds(self) -> int | None:
        """E/C の総ラウンド数（Bはepoch内のデータ残量で決まるので None）"""
        level = self.level
        if self.epoch_budget == 0:
            return 0
        if isinstance(level, ConvergenceLevel):
            return 1
        if isinstance(level, EpochLevel):
            return self.epoch_budget * level.chunks_per_epoch // level.period_chunks
        return None


# =====================================
# チャンク分割とラウンドサブセット
# =====================================

@dataclass(frozen=True, eq=False)
class ChunkPlan:
    """シャッフル済み順序 order を連続区間 boundaries で n 分割"""
    order: np.ndarray
    boundaries: tuple[tuple[int, int], ...]

    def chunk(self, j: int) -> np.ndarray:
        start, end = self.boundaries[j]
        return self.order[start:end]

    def sizes(self) -> list[int]:
        return [end - start for start, end in self.boundaries]


def make_chunks(dataset_size: int, n_chunks: int, seed: int | tuple) -> ChunkPlan:
    """シャッフル後、サイズ差1以内の連続チャンクに分割（余りは先頭から）"""
    if n_chunks < 1:
        raise ValueError(f"n_chunks は1以上: {n_chunks}")
    keys = seed if isinstance(seed, tuple) else (seed,)
    order = make_rng(*keys).permutation(max(dataset_size, 0))

    base, extra = divmod(len(order), n_chunks)
    boundaries = []
    start = 0
    for j in range(n_chunks):
        end = start + base + (1 if j < extra else 0)
        boundaries.append((start, end))
        start = end
    return ChunkPlan(order=order, boundaries=tuple(boundaries))


def b_level_batching(remaining: int, k: int, batch_size: int) -> list[int]:
    """B-level のバッチサイズ列（データ不足時は縮小）"""
    if k < 1 or batch_size < 1:
        raise ValueError(f"k, batch_size は1以上: k={k}, batch_size={batch_size}")
    if remaining <= 0:
        return []
    if remaining >= k * batch_size:
        return [batch_size] * k
    if remaining >= k:
        base, extra = divmod(remaining, k)
        return [base + 1] * extra + [base] * (k - extra)
    return [1] * remaining


def b_level_rounds(dataset_size: int, k: int, batch_size: int) -> int:
    """1 epoch で B-level クライアントが通信する回数"""
    rounds = 0
    remaining = dataset_size
    while remaining > 0:
        remaining -= sum(b_level_batching(remaining, k, batch_size))
        rounds += 1
    return rounds


@dataclass(frozen=True, eq=False)
class RoundSubset:
    """クライアントがこのラウンドで学習する事例と、その後のカーソル"""
    client_id: str
    indices: np.ndarray
    batch_sizes: tuple[int, ...]
    cursor_after: int
    epoch_after: int

    @property
    def empty(self) -> bool:
        return len(self.indices) == 0


def chunk_plan_for(client: "ClientState", chunks_per_epoch: int, epoch: int, seed: int) -> ChunkPlan:
    """epochごとのチャンク分割（順序はローカル学習の epoch_order と同じ鍵）"""
    return make_chunks(client.dataset_size, chunks_per_epoch, (seed, client.client_id, epoch))


def has_untrained(client: "ClientState") -> bool:
    """B-level: 現epochに未学習データが残っているか"""
    return client.chunk_cursor < client.dataset_size


def next_subset(
    client: "ClientState",
    plan: SchedulePlan,
    round_index: int,
    *,
    batch_size: int,
    seed: int,
) -> RoundSubset:
    """ラウンド round_index でのサブセット（クライアント状態は変更しない）

    空のサブセットは「このラウンドはモデルを送らない」ことを表す。
    """
    level = plan.level
    size = client.dataset_size

    if isinstance(level, EpochLevel):
        cpe = level.chunks_per_epoch
        segments: dict[int, list[np.ndarray]] = {}
        plans: dict[int, ChunkPlan] = {}
        for c in range(client.chunk_cursor, client.chunk_cursor + level.period_chunks):
            epoch, j = divmod(c, cpe)
            if epoch not in plans:
                plans[epoch] = chunk_plan_for(client, cpe, epoch, seed)
            segments.setdefault(epoch, []).append(plans[epoch].chunk(j))

        pieces = []
        sizes: list[int] = []
        for epoch in sorted(segments):
            seg = np.concatenate(segments[epoch])
            pieces.append(seg)
            sizes.extend(batch_plan(len(seg), batch_size))
        cursor_after = client.chunk_cursor + level.period_chunks
        return RoundSubset(
            client_id=client.client_id,
            indices=np.concatenate(pieces).astype(np.int64),
            batch_sizes=tuple(sizes),
            cursor_after=cursor_after,
            epoch_after=cursor_after // cpe,
        )

    if isinstance(level, BatchLevel):
        remaining = size - client.chunk_cursor
        sizes = b_level_batching(remaining, level.k, batch_size)
        consumed = sum(sizes)
        order = epoch_order(size, seed, client.client_id, client.epoch_index)
        return RoundSubset(
            client_id=client.client_id,
            indices=order[client.chunk_cursor:client.chunk_cursor + consumed],
            batch_sizes=tuple(sizes),
            cursor_after=client.chunk_cursor + consumed,
            epoch_after=client.epoch_index,
        )

    # C-level: 全データ（ローカル学習側で収束まで epoch を繰り返す）
    order = epoch_order(size, seed, client.client_id, client.epoch_index)
    return RoundSubset(
        client_id=client.client_id,
        indices=order,
        batch_sizes=tuple(batch_plan(size, batch_size)),
        cursor_after=client.chunk_cursor,
        epoch_after=client.epoch_index,
    )


def start_new_epoch(clients: list["ClientState"]) -> None:
    """B-level: 全クライアントが再び参加する新しいepochを始める"""
    for client in clients:
        client.chunk_cursor = 0
        client.epoch_index += 1


def communication_events(
    plan: SchedulePlan,
    clients: int,
    epoch_budget: int,
    chunks_per_epoch: int,
    dataset_size: int | None = None,
    batch_size: int | None = None,
) -> int:
    """一様データを仮定したときの参加（アップロード）回数"""
    level = plan.level
    if isinstance(level, ConvergenceLevel):
        return clients
    if isinstance(level, EpochLevel):
        total = clients * epoch_budget * chunks_per_epoch
        if total % level.period_chunks:
            raise NotClosedFormError(
                f"{total} チャンクが周期 {level.period_chunks} で割り切れません（台帳から集計してください）"
            )
        return total // level.period_chunks
    if dataset_size is None or batch_size is None:
        raise NotClosedFormError("B-level は dataset_size と batch_size が必要です")
    return clients * epoch_budget * b_level_rounds(dataset_size, level.k, batch_size)


# =====================================
# 通信コスト台帳
# =====================================

@dataclass(frozen=True)
class TransferEntry:
    round: int
    client_id: str
    direction: str
    bytes: int


@dataclass
class CostLedger:
    """モデル転送の追記専用記録"""
    model_bytes: int
    count_downlink: bool = False
    _entries: list[TransferEntry] = field(default_factory=list, init=False, repr=False)
    _total: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        if self.model_bytes < 1:
            raise ValueError(f"model_bytes は正である必要があります: {self.model_bytes}")

    @property
    def entries(self) -> tuple[TransferEntry, ...]:
        return tuple(self._entries)

    @property
    def total_bytes(self) -> int:
        return self._total

    @property
    def participations(self) -> int:
        """アップロード回数 = FedAvg に参加したクライアント数の延べ"""
        return sum(1 for e in self._entries if e.direction == UP)

    def record(self, round_index: int, client_id: str, direction: str) -> "CostLedger":
        if direction not in (UP, DOWN):
            raise ValueError(f"direction は up/down: {direction}")
        if direction == DOWN and not self.count_downlink:
            return self
        self._entries.append(TransferEntry(round_index, client_id, direction, self.model_bytes))
        self._total += self.model_bytes
        return self

    def to_frame(self) -> pd.DataFrame:
        rows = [(e.round, e.client_id, e.direction, e.bytes) for e in self._entries]
        return pd.DataFrame(rows, columns=LEDGER_COLUMNS)


def record_transfer(ledger: CostLedger, round_index: int, client_id: str, direction: str) -> CostLedger:
    return ledger.record(round_index, client_id, direction)


def bytes_to_gb(n_bytes: int) -> float:
    return n_bytes / BYTES_PER_GB


def total_cost_gb(ledger: CostLedger) -> float:
    return bytes_to_gb(ledger.total_bytes)


def save_ledger_csv(ledger: CostLedger, output_file: Path, verbose: bool = True) -> Path:
    """台帳をCSV保存（round,client_id,direction,bytes）"""
    output_file.parent.mkdir(parents=True, exist_ok=True)
    ledger.to_frame().to_csv(output_file, index=False)
    if verbose:
        print(f"Saved: {output_file} ({len(ledger.entries)}件)")
    return output_file
