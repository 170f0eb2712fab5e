"""実験設定ファイル

形式（1行1項目、# 以降はコメント）:

    schedule.level = E        # B / E / C（必須）
    schedule.period = 1/2     # E: 通信間隔（epoch単位、チャンク数に換算）
    weighting = M             # M / W
    selection.mode = random
    selection.n = 100

schedule.level 以外は省略可（既定値は config.py）。未知のキーはエラー。
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from collections.abc import Callable, Iterable
from dataclasses import dataclass, replace
from fractions import Fraction

from config import (
    DEFAULT_CHUNKS_PER_EPOCH,
    DEFAULT_MAX_LOCAL_EPOCHS,
    DEFAULT_PATIENCE,
    FL_BATCH_SIZE,
    FL_EPOCHS,
    INITIAL_EPOCHS,
    LEARNING_RATE,
)
from scripts.comm_schedule import BatchLevel, ConvergenceLevel, EpochLevel, SchedulePlan
from scripts.fedavg import MEAN, FederatedConfig, SelectionPolicy, WeightingScheme
from scripts.mlp_model import ModelSpec, TrainConfig
from scripts.synth_task import SyntheticTaskSpec

REQUIRED_KEYS = ("schedule.level",)


class ConfigError(ValueError):
    """設定ファイルのエラー（key に問題の項目名）"""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    selection: int = 0
    shuffle: int = 0


@dataclass(frozen=True)
class CostConfig:
    model_bytes: int | None = None  # None = ParameterVector のバイト数
    count_downlink: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    train: TrainConfig
    schedule: SchedulePlan
    task: SyntheticTaskSpec = SyntheticTaskSpec()
    weighting: WeightingScheme = WeightingScheme()
    selection: SelectionPolicy = SelectionPolicy()
    cost: CostConfig = CostConfig()
    seeds: Seeds = Seeds()
    initial_epochs: int = INITIAL_EPOCHS
    reference: bool = True
    max_workers: int = 1
    label: str = ""

    @property
    def run_label(self) -> str:
        if self.label:
            return self.label
        n = self.selection.n if self.selection.mode == "random" else None
        return self.schedule.label(self.weighting.kind, n)

    def federated(self) -> FederatedConfig:
        return FederatedConfig(
            spec=self.model,
            train=self.train,
            schedule=self.schedule,
            weighting=self.weighting,
            selection=self.selection,
            model_bytes=self.cost.model_bytes,
            count_downlink=self.cost.count_downlink,
            max_workers=self.max_workers,
            label=self.run_label,
        )


# =====================================
# 値の変換
# =====================================

def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(Fraction(text)) if "/" in text else float(text)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"真偽値ではありません: {text!r}")


def _dims(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    return tuple(int(part) for part in text.split(","))


def _str(text: str) -> str:
    return text


@dataclass(frozen=True)
class _Key:
    convert: Callable[[str], object]
    default: str


# キー → (変換, 既定値の文字列)
KEYS: dict[str, _Key] = {
    "label": _Key(_str, ""),
    "model.hidden_dims": _Key(_dims, "32"),
    "model.activation": _Key(_str, "tanh"),
    "train.learning_rate": _Key(_float, str(LEARNING_RATE)),
    "train.batch_size": _Key(_int, str(FL_BATCH_SIZE)),
    "train.initial_epochs": _Key(_int, str(INITIAL_EPOCHS)),
    "schedule.level": _Key(_str, ""),
    "schedule.epochs": _Key(_int, str(FL_EPOCHS)),
    "schedule.k": _Key(_int, "1"),
    "schedule.period": _Key(Fraction, "1"),
    "schedule.chunks": _Key(_int, str(DEFAULT_CHUNKS_PER_EPOCH)),
    "schedule.patience": _Key(_int, str(DEFAULT_PATIENCE)),
    "schedule.max_epochs": _Key(_int, str(DEFAULT_MAX_LOCAL_EPOCHS)),
    "weighting": _Key(_str, MEAN),
    "selection.mode": _Key(_str, "all"),
    "selection.n": _Key(_int, "0"),
    "task.clients": _Key(_int, str(SyntheticTaskSpec.n_clients)),
    "task.classes": _Key(_int, str(SyntheticTaskSpec.classes)),
    "task.input_dim": _Key(_int, str(SyntheticTaskSpec.input_dim)),
    "task.examples": _Key(_int, str(SyntheticTaskSpec.per_client_examples)),
    "task.skew": _Key(_float, str(SyntheticTaskSpec.client_skew)),
    "task.server_examples": _Key(_int, str(SyntheticTaskSpec.server_examples)),
    "task.heldout_examples": _Key(_int, str(SyntheticTaskSpec.heldout_examples)),
    "task.unseen_clients": _Key(_int, str(SyntheticTaskSpec.unseen_clients)),
    "cost.model_bytes": _Key(_int, "0"),
    "cost.count_downlink": _Key(_bool, "false"),
    "seeds.data": _Key(_int, "0"),
    "seeds.init": _Key(_int, "0"),
    "seeds.selection": _Key(_int, "0"),
    "seeds.shuffle": _Key(_int, "0"),
    "run.reference": _Key(_bool, "true"),
    "run.max_workers": _Key(_int, "1"),
}


def parse_pairs(text: str) -> dict[str, str]:
    """key = value 行を辞書に（コメント・空行は無視、重複はエラー）"""
    pairs: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {line_no}", f"'key = value' の形式ではありません: {body!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(key, "未知のキーです")
        if key in pairs:
            raise ConfigError(key, "キーが重複しています")
        pairs[key] = value
    return pairs


def _values(pairs: dict[str, str]) -> dict[str, object]:
    for key in REQUIRED_KEYS:
        if not pairs.get(key):
            raise ConfigError(key, "必須のキーがありません")
    values = {}
    for key, spec in KEYS.items():
        raw = pairs.get(key, spec.default)
        try:
            values[key] = spec.convert(raw)
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(key, f"値が不正です: {raw!r} ({e})") from None
    return values


def _build(key: str, factory: Callable[[], object]):
    """サブ設定の ValueError を ConfigError に変換"""
    try:
        return factory()
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(key, str(e)) from None


def _schedule(v: dict[str, object]) -> SchedulePlan:
    level_name = str(v["schedule.level"]).upper()
    if level_name == "B":
        level = _build("schedule.k", lambda: BatchLevel(k=v["schedule.k"]))
    elif level_name == "E":
        chunks = v["schedule.chunks"]
        period_chunks = v["schedule.period"] * chunks
        if period_chunks.denominator != 1 or period_chunks < 1:
            raise ConfigError(
                "schedule.period",
                f"{v['schedule.period']} epoch は {chunks} チャンク/epoch で整数チャンクになりません",
            )
        level = _build("schedule.chunks", lambda: EpochLevel(int(period_chunks), chunks))
    elif level_name == "C":
        level = _build(
            "schedule.patience",
            lambda: ConvergenceLevel(patience=v["schedule.patience"], max_epochs=v["schedule.max_epochs"]),
        )
    else:
        raise ConfigError("schedule.level", f"B / E / C のいずれか: {v['schedule.level']!r}")
    return _build("schedule.epochs", lambda: SchedulePlan(level, epoch_budget=v["schedule.epochs"]))


def config_from_pairs(pairs: dict[str, str]) -> ExperimentConfig:
    v = _values(pairs)
    seeds = Seeds(v["seeds.data"], v["seeds.init"], v["seeds.selection"], v["seeds.shuffle"])
    for key in ("seeds.data", "seeds.init", "seeds.selection", "seeds.shuffle"):
        if v[key] < 0:
            raise ConfigError(key, "seed は非負")

    task = _build(
        "task",
        lambda: SyntheticTaskSpec(
            n_clients=v["task.clients"],
            classes=v["task.classes"],
            input_dim=v["task.input_dim"],
            per_client_examples=v["task.examples"],
            client_skew=v["task.skew"],
            server_examples=v["task.server_examples"],
            heldout_examples=v["task.heldout_examples"],
            unseen_clients=v["task.unseen_clients"],
        ),
    )
    model = _build(
        "model.hidden_dims",
        lambda: ModelSpec(task.input_dim, v["model.hidden_dims"], task.classes, v["model.activation"]),
    )
    train = _build(
        "train",
        lambda: TrainConfig(
            learning_rate=v["train.learning_rate"],
            batch_size=v["train.batch_size"],
            epochs=1,
            seed=seeds.shuffle,
        ),
    )
    weighting = _build("weighting", lambda: WeightingScheme(str(v["weighting"]).upper()))

    mode = v["selection.mode"]
    n = v["selection.n"] if mode == "random" else None
    selection = _build("selection.n", lambda: SelectionPolicy(mode=mode, n=n, seed=seeds.selection))
    if n is not None and n > task.n_clients:
        raise ConfigError("selection.n", f"クライアント数 {task.n_clients} を超えています: {n}")

    if v["cost.model_bytes"] < 0:
        raise ConfigError("cost.model_bytes", "0以上（0 = モデルサイズから自動）")
    cost = CostConfig(model_bytes=v["cost.model_bytes"] or None, count_downlink=v["cost.count_downlink"])

    if v["train.initial_epochs"] < 0:
        raise ConfigError("train.initial_epochs", "0以上")
    if v["run.max_workers"] < 1:
        raise ConfigError("run.max_workers", "1以上")

    return ExperimentConfig(
        model=model,
        train=train,
        schedule=_schedule(v),
        task=task,
        weighting=weighting,
        selection=selection,
        cost=cost,
        seeds=seeds,
        initial_epochs=v["train.initial_epochs"],
        reference=v["run.reference"],
        max_workers=v["run.max_workers"],
        label=v["label"],
    )


def parse_config(text: str) -> ExperimentConfig:
    return config_from_pairs(parse_pairs(text))


def load_config(path: Path, seed_overrides: Iterable[str] = ()) -> ExperimentConfig:
    """ファイルを読み、--seed-override k=v を適用"""
    if not path.exists():
        raise ConfigError("--config", f"ファイルが見つかりません: {path}")
    pairs = parse_pairs(path.read_text(encoding="utf-8"))
    return config_from_pairs(apply_seed_overrides(pairs, seed_overrides))


def apply_seed_overrides(pairs: dict[str, str], overrides: Iterable[str]) -> dict[str, str]:
    """data=3 や seeds.data=3 の形式で seeds.* を上書き"""
    result = dict(pairs)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("--seed-override", f"k=v の形式ではありません: {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if not key.startswith("seeds."):
            key = f"seeds.{key}"
        if key not in KEYS:
            raise ConfigError(key, "未知の seed です")
        result[key] = value
    return result


def with_seeds(config: ExperimentConfig, **seeds: int) -> ExperimentConfig:
    """seeds を差し替えた設定（train / selection の seed も追従）"""
    new_seeds = replace(config.seeds, **seeds)
    return replace(
        config,
        seeds=new_seeds,
        train=replace(config.train, seed=new_seeds.shuffle),
        selection=replace(config.selection, seed=new_seeds.selection),
    )


def _period_text(level: EpochLevel) -> str:
    return str(level.epochs_per_round)


def emit_config(config: ExperimentConfig) -> str:
    """parse_config で元に戻せるテキストに変換"""
    level = config.schedule.level
    lines = [f"label = {config.label}" if config.label else "# label = (自動)"]

    lines += [
        "",
        "# モデル",
        f"model.hidden_dims = {','.join(str(h) for h in config.model.hidden_dims)}",
        f"model.activation = {config.model.activation}",
        "",
        "# 学習",
        f"train.learning_rate = {config.train.learning_rate!r}",
        f"train.batch_size = {config.train.batch_size}",
        f"train.initial_epochs = {config.initial_epochs}",
        "",
        "# 通信スケジュール",
    ]
    if isinstance(level, BatchLevel):
        lines += ["schedule.level = B", f"schedule.k = {level.k}"]
    elif isinstance(level, EpochLevel):
        lines += [
            "schedule.level = E",
            f"schedule.period = {_period_text(level)}",
            f"schedule.chunks = {level.chunks_per_epoch}",
        ]
    else:
        lines += [
            "schedule.level = C",
            f"schedule.patience = {level.patience}",
            f"schedule.max_epochs = {level.max_epochs}",
        ]
    lines.append(f"schedule.epochs = {config.schedule.epoch_budget}")

    lines += ["", f"weighting = {config.weighting.kind}", f"selection.mode = {config.selection.mode}"]
    if config.selection.mode == "random":
        lines.append(f"selection.n = {config.selection.n}")

    task = config.task
    lines += [
        "",
        "# 合成タスク",
        f"task.clients = {task.n_clients}",
        f"task.classes = {task.classes}",
        f"task.input_dim = {task.input_dim}",
        f"task.examples = {task.per_client_examples}",
        f"task.skew = {task.client_skew!r}",
        f"task.server_examples = {task.server_examples}",
        f"task.heldout_examples = {task.heldout_examples}",
        f"task.unseen_clients = {task.unseen_clients}",
        "",
        "# 通信コスト",
        f"cost.model_bytes = {config.cost.model_bytes or 0}",
        f"cost.count_downlink = {str(config.cost.count_downlink).lower()}",
        "",
        f"seeds.data = {config.seeds.data}",
        f"seeds.init = {config.seeds.init}",
        f"seeds.selection = {config.seeds.selection}",
        f"seeds.shuffle = {config.seeds.shuffle}",
        "",
        f"run.reference = {str(config.reference).lower()}",
        f"run.max_workers = {config.max_workers}",
    ]
    return "\n".join(lines) + "\n"


def main():
    import argparse

    parser = argparse.ArgumentParser(description="設定ファイルを検証して正規化した形で表示")
    parser.add_argument("config", type=Path)
    parser.add_argument("--seed-override", action="append", default=[], metavar="K=V")
    args = parser.parse_args()

    print(emit_config(load_config(args.config, args.seed_override)), end="")


if __name__ == "__main__":
    main()
