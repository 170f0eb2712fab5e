"""話者マニフェストを連合学習用のデータセットに再編成

手順:
  1. 発話数が閾値（116）を超える話者を FL クライアントにする
  2. 各クライアントを 60% train / 20% test / 20% dev に分割
  3. 残りの train を fl/*/train の1/3に削減 → initial/train
  4. dev/test・initial/train・fl/*/train から話者ごとに1発話を final/* に移動
  5. complete/train = initial/train ∪ fl/*/train

マニフェスト形式（UTF-8、ヘッダーなし、タブ区切り）:
  utterance_id  speaker_id  duration_seconds  source_split
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from config import (
    DEFAULT_CLIENT_SPLIT,
    DEFAULT_FL_THRESHOLD,
    DEFAULT_INITIAL_FRACTION,
    INITIAL_OVERSHOOT,
    MANIFEST_DIR,
    PARTITION_DIR,
)
from scripts.rng_keys import make_rng

MANIFEST_COLUMNS = ["utterance_id", "speaker_id", "duration_seconds", "source_split"]
SOURCE_SPLITS = ("train", "dev", "test")
CLIENT_SPLITS = ("train", "test", "dev")
FINAL_SETS = ("unseen_dev", "unseen_test", "pre_dev", "pre_test", "fl_dev", "fl_test")
SECONDS_PER_HOUR = 3600


class ManifestParseError(ValueError):
    """マニフェストの行が読めない"""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class IntegrityError(ValueError):
    """utterance_id の重複・集合の重なり"""

    def __init__(self, message: str, ids: Sequence[str] = ()):
        super().__init__(message)
        self.ids = list(ids)


@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    speaker_id: str
    duration_seconds: float
    source_split: str

    @classmethod
    def from_line(cls, text: str, line_no: int) -> "ManifestRecord":
        parts = text.split("\t")
        if len(parts) != 4:
            raise ManifestParseError(line_no, f"4列必要ですが {len(parts)} 列です")
        utterance_id, speaker_id, duration_raw, source_split = (p.strip() for p in parts)
        if not utterance_id or not speaker_id:
            raise ManifestParseError(line_no, "utterance_id / speaker_id が空です")
        try:
            duration = float(duration_raw)
        except ValueError:
            raise ManifestParseError(line_no, f"duration_seconds が数値ではありません: {duration_raw!r}") from None
        if not math.isfinite(duration) or duration < 0:
            raise ManifestParseError(line_no, f"duration_seconds が不正です: {duration_raw!r}")
        if source_split not in SOURCE_SPLITS:
            raise ManifestParseError(line_no, f"source_split は train/dev/test: {source_split!r}")
        return cls(utterance_id, speaker_id, duration, source_split)


@dataclass(frozen=True)
class PartitionConfig:
    fl_threshold: int = DEFAULT_FL_THRESHOLD
    client_split: tuple[float, float, float] = DEFAULT_CLIENT_SPLIT  # train / test / dev
    initial_fraction: float = DEFAULT_INITIAL_FRACTION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "client_split", tuple(float(r) for r in self.client_split))
        if len(self.client_split) != 3 or any(r <= 0 for r in self.client_split):
            raise ValueError(f"client_split は正の3つの比率: {self.client_split}")
        if abs(sum(self.client_split) - 1.0) > 1e-9:
            raise ValueError(f"client_split の合計が1ではありません: {self.client_split}")
        if self.fl_threshold < 0:
            raise ValueError(f"fl_threshold は0以上: {self.fl_threshold}")
        if not 0 < self.initial_fraction <= 1:
            raise ValueError(f"initial_fraction は (0, 1]: {self.initial_fraction}")


def empty_manifest() -> pd.DataFrame:
    return pd.DataFrame(
        {
            "utterance_id": pd.Series(dtype=str),
            "speaker_id": pd.Series(dtype=str),
            "duration_seconds": pd.Series(dtype=float),
            "source_split": pd.Series(dtype=str),
        }
    )


def records_to_frame(records: Sequence[ManifestRecord]) -> pd.DataFrame:
    if not records:
        return empty_manifest()
    return pd.DataFrame(
        [(r.utterance_id, r.speaker_id, r.duration_seconds, r.source_split) for r in records],
        columns=MANIFEST_COLUMNS,
    )


def _concat(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    frames = [f for f in frames if len(f)]
    if not frames:
        return empty_manifest()
    return pd.concat(frames, ignore_index=True)


@dataclass
class PartitionResult:
    """再編成の結果（complete_train 以外は utterance_id で互いに素）"""
    initial_train: pd.DataFrame
    fl_clients: dict[str, dict[str, pd.DataFrame]]
    final_sets: dict[str, pd.DataFrame] = field(default_factory=dict)
    complete_train: pd.DataFrame = field(default_factory=empty_manifest)
    reserve_train: pd.DataFrame = field(default_factory=empty_manifest)
    server_dev: pd.DataFrame = field(default_factory=empty_manifest)
    server_test: pd.DataFrame = field(default_factory=empty_manifest)

    def fl_train_total(self) -> int:
        return sum(len(sets["train"]) for sets in self.fl_clients.values())

    def output_sets(self) -> dict[str, pd.DataFrame]:
        """出力ファイル名（拡張子なし）→ レコード集合。complete は含まない"""
        sets = {
            "initial/train": self.initial_train,
            "reserve/train": self.reserve_train,
            "server/dev": self.server_dev,
            "server/test": self.server_test,
        }
        for client_id in sorted(self.fl_clients):
            for split in CLIENT_SPLITS:
                sets[f"fl/{client_id}/{split}"] = self.fl_clients[client_id][split]
        for name in FINAL_SETS:
            sets[f"final/{name.replace('_', '-')}"] = self.final_sets.get(name, empty_manifest())
        return sets


# =====================================
# マニフェスト入出力
# =====================================

def load_manifest(source: Iterable[str]) -> pd.DataFrame:
    """行ストリームを読み込み（入力順を保持）。空行は無視"""
    records = []
    seen: set[str] = set()
    for line_no, line in enumerate(source, 1):
        text = line.rstrip("\r\n")
        if not text.strip():
            continue
        record = ManifestRecord.from_line(text, line_no)
        if record.utterance_id in seen:
            raise IntegrityError(f"utterance_id が重複しています: {record.utterance_id}", [record.utterance_id])
        seen.add(record.utterance_id)
        records.append(record)
    return records_to_frame(records)


def read_manifest(path: Path) -> pd.DataFrame:
    with open(path, encoding="utf-8") as f:
        return load_manifest(f)


def manifest_lines(frame: pd.DataFrame) -> list[str]:
    return [
        f"{u}\t{s}\t{float(d)!r}\t{split}"
        for u, s, d, split in frame[MANIFEST_COLUMNS].itertuples(index=False, name=None)
    ]


def write_manifest(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = manifest_lines(frame)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def merge_supersets(parts: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """test-clean + test-other → test のように結合（IDの衝突はエラー）"""
    merged = _concat(parts)
    dup = merged["utterance_id"][merged["utterance_id"].duplicated()]
    if len(dup):
        ids = sorted(set(dup))
        raise IntegrityError(f"結合時に utterance_id が衝突しました: {', '.join(ids[:5])}", ids)
    return merged


# =====================================
# 分割の各ステップ
# =====================================

def split_fl_speakers(manifest: pd.DataFrame, threshold: int) -> tuple[list[str], pd.DataFrame]:
    """発話数 > threshold の話者（全source_split合計）を FL に、残りを remainder に"""
    counts = manifest.groupby("speaker_id").size()
    fl_ids = sorted(counts[counts > threshold].index)
    remainder = manifest[~manifest["speaker_id"].isin(fl_ids)]
    return fl_ids, remainder


def split_client(records: pd.DataFrame, ratios: Sequence[float], seed: int) -> dict[str, pd.DataFrame]:
    """1話者を train/test/dev に分割（test, dev は floor、残りは train）"""
    if len(records) == 0:
        raise ValueError("クライアントのレコードが空です")
    speakers = records["speaker_id"].unique()
    if len(speakers) != 1:
        raise ValueError(f"1話者分のレコードが必要です: {list(speakers)[:5]}")

    n = len(records)
    _, test_ratio, dev_ratio = ratios
    n_test = math.floor(test_ratio * n + 1e-9)
    n_dev = math.floor(dev_ratio * n + 1e-9)
    perm = make_rng(seed, "client-split", str(speakers[0])).permutation(n)

    def pick(positions: np.ndarray) -> pd.DataFrame:
        return records.iloc[np.sort(positions)]

    return {
        "test": pick(perm[:n_test]),
        "dev": pick(perm[n_test:n_test + n_dev]),
        "train": pick(perm[n_test + n_dev:]),
    }


def reduce_initial(
    remainder_train: pd.DataFrame,
    fl_train_total: int,
    fraction: float,
    seed: int,
    exclude_speakers: Iterable[str] = (),
) -> pd.DataFrame:
    """話者単位で initial/train を選ぶ（目標 round(fraction·total)、5%までの超過を許容）"""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction は (0, 1]: {fraction}")
    target = round(fraction * fl_train_total)
    limit = target * INITIAL_OVERSHOOT
    excluded = set(exclude_speakers)

    counts = remainder_train.groupby("speaker_id").size()
    candidates = [s for s in counts.index if s not in excluded]
    order = make_rng(seed, "initial").permutation(len(candidates))

    chosen = []
    total = 0
    for i in order:
        if total >= target:
            break
        size = int(counts[candidates[i]])
        if total + size > limit:
            break
        chosen.append(candidates[i])
        total += size
    return remainder_train[remainder_train["speaker_id"].isin(chosen)]


def _pick_one(group: pd.DataFrame, seed: int, tag: str, speaker_id: str) -> int:
    """話者のレコードから1件選び、その行ラベルを返す"""
    position = make_rng(seed, tag, speaker_id).integers(len(group))
    return group.index[position]


def _move_one_per_speaker(source: pd.DataFrame, seed: int, tag: str) -> tuple[pd.DataFrame, pd.DataFrame]:
    """各話者から1発話を取り出す → (残り, 取り出した分)"""
    if len(source) == 0:
        return source, empty_manifest()
    picked = [_pick_one(group, seed, tag, sid) for sid, group in source.groupby("speaker_id", sort=True)]
    return source.drop(index=picked), source.loc[sorted(picked)]


def _alternate(speakers: Sequence[str], seed: int, tag: str) -> tuple[list[str], list[str]]:
    """シャッフル順の偶数番目 → dev、奇数番目 → test"""
    order = make_rng(seed, tag).permutation(len(speakers))
    to_dev = [speakers[i] for k, i in enumerate(order) if k % 2 == 0]
    to_test = [speakers[i] for k, i in enumerate(order) if k % 2 == 1]
    return to_dev, to_test


def carve_final_sets(result: PartitionResult, seed: int) -> PartitionResult:
    """final/* を作成（移動したレコードは元の集合から消える）

    train 側で残りが1発話しかない話者は対象外。
    """
    server_dev, unseen_dev = _move_one_per_speaker(result.server_dev, seed, "unseen-dev")
    server_test, unseen_test = _move_one_per_speaker(result.server_test, seed, "unseen-test")

    # initial/train → pre-dev / pre-test
    initial = result.initial_train
    counts = initial.groupby("speaker_id").size()
    eligible = [s for s in counts.index if counts[s] >= 2]
    to_dev, to_test = _alternate(eligible, seed, "pre")
    moved: dict[str, list[int]] = {"pre_dev": [], "pre_test": []}
    groups = dict(tuple(initial.groupby("speaker_id", sort=True))) if len(initial) else {}
    for name, speakers in (("pre_dev", to_dev), ("pre_test", to_test)):
        for sid in speakers:
            moved[name].append(_pick_one(groups[sid], seed, "pre-pick", sid))
    initial_left = initial.drop(index=moved["pre_dev"] + moved["pre_test"])

    # fl/*/train → fl-dev / fl-test
    eligible_clients = [cid for cid in sorted(result.fl_clients) if len(result.fl_clients[cid]["train"]) >= 2]
    to_dev, to_test = _alternate(eligible_clients, seed, "fl")
    fl_clients = {cid: dict(sets) for cid, sets in result.fl_clients.items()}
    fl_moved: dict[str, list[pd.DataFrame]] = {"fl_dev": [], "fl_test": []}
    for name, client_ids in (("fl_dev", to_dev), ("fl_test", to_test)):
        for cid in client_ids:
            train = fl_clients[cid]["train"]
            label = _pick_one(train, seed, "fl-pick", cid)
            fl_moved[name].append(train.loc[[label]])
            fl_clients[cid]["train"] = train.drop(index=label)

    final_sets = {
        "unseen_dev": unseen_dev,
        "unseen_test": unseen_test,
        "pre_dev": initial.loc[sorted(moved["pre_dev"])] if moved["pre_dev"] else empty_manifest(),
        "pre_test": initial.loc[sorted(moved["pre_test"])] if moved["pre_test"] else empty_manifest(),
        "fl_dev": _concat(fl_moved["fl_dev"]),
        "fl_test": _concat(fl_moved["fl_test"]),
    }
    return replace(
        result,
        initial_train=initial_left,
        fl_clients=fl_clients,
        final_sets=final_sets,
        server_dev=server_dev,
        server_test=server_test,
    )


def build_complete(initial_train: pd.DataFrame, fl_clients: dict[str, dict[str, pd.DataFrame]]) -> pd.DataFrame:
    """complete/train = initial/train ∪ fl/*/train（重なりはエラー）"""
    parts = [initial_train] + [fl_clients[cid]["train"] for cid in sorted(fl_clients)]
    complete = _concat(parts)
    dup = complete["utterance_id"][complete["utterance_id"].duplicated()]
    if len(dup):
        ids = sorted(set(dup))
        raise IntegrityError(f"initial と fl の train が重なっています: {', '.join(ids[:5])}", ids)
    return complete


def partition_manifest(manifest: pd.DataFrame, config: PartitionConfig) -> PartitionResult:
    """手順1〜5をまとめて実行"""
    fl_ids, remainder = split_fl_speakers(manifest, config.fl_threshold)

    fl_part = manifest[manifest["speaker_id"].isin(fl_ids)]
    fl_clients = {
        str(sid): split_client(group, config.client_split, config.seed)
        for sid, group in fl_part.groupby("speaker_id", sort=True)
    }

    remainder_train = remainder[remainder["source_split"] == "train"]
    server_dev = remainder[remainder["source_split"] == "dev"]
    server_test = remainder[remainder["source_split"] == "test"]

    # dev/test に出てくる話者は unseen 用に initial から外す
    heldout = set(server_dev["speaker_id"]) | set(server_test["speaker_id"])
    fl_train_total = sum(len(sets["train"]) for sets in fl_clients.values())
    initial = reduce_initial(remainder_train, fl_train_total, config.initial_fraction, config.seed, heldout)
    reserve = remainder_train.drop(index=initial.index)

    result = PartitionResult(
        initial_train=initial,
        fl_clients=fl_clients,
        reserve_train=reserve,
        server_dev=server_dev,
        server_test=server_test,
    )
    result = carve_final_sets(result, config.seed)
    return replace(result, complete_train=build_complete(result.initial_train, result.fl_clients))


# =====================================
# 検証・集計・保存
# =====================================

def validate_partition(
    result: PartitionResult,
    manifest: pd.DataFrame | None = None,
    threshold: int | None = None,
) -> list[str]:
    """不変条件の違反を列挙（空リスト = 正常）"""
    violations = []
    sets = result.output_sets()

    # 集合間で utterance_id が重ならない
    owner: dict[str, str] = {}
    for name, frame in sets.items():
        for uid in frame["utterance_id"]:
            if uid in owner:
                violations.append(f"disjointness: {uid} が {owner[uid]} と {name} の両方にあります")
            else:
                owner[uid] = name

    # complete = initial ∪ fl/*/train
    expected = sorted(
        list(result.initial_train["utterance_id"])
        + [u for cid in sorted(result.fl_clients) for u in result.fl_clients[cid]["train"]["utterance_id"]]
    )
    if sorted(result.complete_train["utterance_id"]) != expected:
        violations.append(
            f"completeness: complete/train ({len(result.complete_train)}件) が "
            f"initial ∪ fl/*/train ({len(expected)}件) と一致しません"
        )

    # 話者: クライアント同士・initial と重ならない
    initial_speakers = set(result.initial_train["speaker_id"])
    speaker_owner: dict[str, str] = {}
    for cid in sorted(result.fl_clients):
        for split, frame in result.fl_clients[cid].items():
            for sid in set(frame["speaker_id"]):
                if sid in initial_speakers:
                    violations.append(f"speaker: クライアント {cid} の話者 {sid} が initial/train にもいます")
                if speaker_owner.setdefault(sid, cid) != cid:
                    violations.append(f"speaker: 話者 {sid} がクライアント {speaker_owner[sid]} と {cid} にいます")

    if manifest is not None:
        produced = set(owner)
        source = set(manifest["utterance_id"])
        lost = sorted(source - produced)
        extra = sorted(produced - source)
        if lost:
            violations.append(f"conservation: {len(lost)}件の発話が出力にありません（例: {lost[0]}）")
        if extra:
            violations.append(f"conservation: 入力にない発話が {len(extra)}件あります（例: {extra[0]}）")
        if threshold is not None:
            counts = manifest.groupby("speaker_id").size()
            for cid in result.fl_clients:
                if counts.get(cid, 0) <= threshold:
                    violations.append(f"threshold: クライアント {cid} の発話数 {counts.get(cid, 0)} <= {threshold}")
            fl_set = set(result.fl_clients)
            for sid, count in counts.items():
                if count > threshold and sid not in fl_set:
                    violations.append(f"threshold: 話者 {sid} ({count}発話) が FL になっていません")

    return violations


def _row(group: str, name: str, frame: pd.DataFrame) -> dict:
    return {
        "group": group,
        "dataset": name,
        "utterances": len(frame),
        "duration_h": round(float(frame["duration_seconds"].sum()) / SECONDS_PER_HOUR, 1),
    }


def summarize_partition(result: PartitionResult) -> pd.DataFrame:
    """データセットごとの発話数・時間[h]の集計"""
    fl_train = _concat([result.fl_clients[cid]["train"] for cid in sorted(result.fl_clients)])
    rows = [
        _row("Training", "initial", result.initial_train),
        _row("Training", "federated", fl_train),
        _row("Training", "complete", result.complete_train),
        _row("Test", "initial", result.final_sets.get("pre_test", empty_manifest())),
        _row("Test", "federated", result.final_sets.get("fl_test", empty_manifest())),
        _row("Test", "unseen", result.final_sets.get("unseen_test", empty_manifest())),
        _row("Dev", "initial", result.final_sets.get("pre_dev", empty_manifest())),
        _row("Dev", "federated", result.final_sets.get("fl_dev", empty_manifest())),
        _row("Dev", "unseen", result.final_sets.get("unseen_dev", empty_manifest())),
    ]
    return pd.DataFrame(rows)


def write_partition(result: PartitionResult, out_dir: Path, verbose: bool = True) -> Path:
    """集合ごとに1ファイル + summary.tsv"""
    sets = {**result.output_sets(), "complete/train": result.complete_train}
    for name, frame in sets.items():
        write_manifest(frame, out_dir / f"{name}.tsv")

    summary_file = out_dir / "summary.tsv"
    summarize_partition(result).to_csv(summary_file, sep="\t", index=False)
    if verbose:
        print(f"Saved: {out_dir} ({len(sets)}ファイル)")
        print(f"Saved: {summary_file}")
    return summary_file


# =====================================
# 合成マニフェスト
# =====================================

CountSpec = int | Sequence[int] | Callable[[np.random.Generator], int]


def synth_manifest(
    n_speakers: int,
    utterances_per_speaker: CountSpec,
    seed: int,
    split_probs: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> pd.DataFrame:
    """テスト用の合成マニフェスト（話者ごとに1つの source_split、発話長 U[1, 15] 秒）

    utterances_per_speaker: 固定数 / 話者ごとの数の列（循環） / rng を受け取る関数
    """
    rng = make_rng(seed, "synth-manifest")
    records = []
    for s in range(n_speakers):
        if callable(utterances_per_speaker):
            count = int(utterances_per_speaker(rng))
        elif isinstance(utterances_per_speaker, int):
            count = utterances_per_speaker
        else:
            count = int(utterances_per_speaker[s % len(utterances_per_speaker)])
        if count < 0:
            raise ValueError(f"発話数は非負: {count}")

        speaker_id = f"spk{s:05d}"
        split = SOURCE_SPLITS[int(rng.choice(3, p=split_probs))]
        durations = np.round(rng.uniform(1.0, 15.0, size=count), 3)
        for u, duration in enumerate(durations):
            records.append(ManifestRecord(f"{speaker_id}-{u:04d}", speaker_id, float(duration), split))
    return records_to_frame(records)


def main():
    import argparse

    parser = argparse.ArgumentParser(description="マニフェストを連合学習用に分割")
    parser.add_argument("--manifest", type=Path, default=MANIFEST_DIR / "manifest.tsv", help="入力マニフェスト")
    parser.add_argument("--out", type=Path, default=PARTITION_DIR, help="出力ディレクトリ")
    parser.add_argument("--threshold", type=int, default=DEFAULT_FL_THRESHOLD)
    parser.add_argument("--initial-fraction", type=float, default=DEFAULT_INITIAL_FRACTION)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    manifest = read_manifest(args.manifest)
    config = PartitionConfig(
        fl_threshold=args.threshold,
        initial_fraction=args.initial_fraction,
        seed=args.seed,
    )
    result = partition_manifest(manifest, config)
    write_partition(result, args.out)
    print(summarize_partition(result).to_string(index=False))


if __name__ == "__main__":
    main()
