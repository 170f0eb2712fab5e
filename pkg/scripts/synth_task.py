"""合成 non-IID 分類タスク（話者ごとにまとまったデータの代わり）

- クラスごとにガウス分布の中心を持つ特徴量
- クライアントごとにラベル分布を1クラスに偏らせる（client_skew）
- クライアントごとに特徴量のオフセット（話者ごとの音響の違いに相当）

評価用の3分割:
  initial   サーバー側と同じ分布
  federated 各クライアントの held-out
  unseen    新しいクライアント（別のオフセット・偏り）
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from config import SYNTH_DIR
from scripts.mlp_model import LabeledDataset
from scripts.rng_keys import make_rng

EVAL_SPLITS = ("initial", "federated", "unseen")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_clients: int = 50
    classes: int = 4
    input_dim: int = 16
    per_client_examples: int = 60
    client_skew: float = 0.7
    server_examples: int = 600
    heldout_examples: int = 12  # クライアントごとの dev / test 件数
    initial_eval_examples: int = 400
    unseen_clients: int = 20
    class_separation: float = 3.0
    client_shift: float = 1.0
    noise: float = 1.0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError(f"n_clients は1以上: {self.n_clients}")
        if self.classes < 2:
            raise ValueError(f"classes は2以上: {self.classes}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim は1以上: {self.input_dim}")
        if not 0.0 <= self.client_skew <= 1.0:
            raise ValueError(f"client_skew は [0, 1]: {self.client_skew}")
        for name in ("per_client_examples", "server_examples", "heldout_examples", "initial_eval_examples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} は1以上: {getattr(self, name)}")
        if self.unseen_clients < 1:
            raise ValueError(f"unseen_clients は1以上: {self.unseen_clients}")
        if self.class_separation < 0 or self.client_shift < 0 or self.noise <= 0:
            raise ValueError("class_separation, client_shift は非負、noise は正")


@dataclass(frozen=True, eq=False)
class ClientData:
    client_id: str
    dominant_class: int
    train: LabeledDataset
    dev: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    spec: SyntheticTaskSpec
    seed: int
    server: LabeledDataset
    clients: tuple[ClientData, ...]
    eval_splits: dict[str, LabeledDataset]

    def client_datasets(self) -> list[LabeledDataset]:
        return [c.train for c in self.clients]

    def complete_train(self) -> LabeledDataset:
        """サーバー + 全クライアントの学習データ（参照モデル用）"""
        return LabeledDataset.concat([self.server, *self.client_datasets()])

    def signature(self) -> str:
        """評価データのハッシュ（比較可能なレポートかどうかの判定に使う）"""
        digest = hashlib.sha256()
        for name in EVAL_SPLITS:
            data = self.eval_splits[name]
            digest.update(name.encode())
            digest.update(data.features.tobytes())
            digest.update(data.labels.tobytes())
        return digest.hexdigest()[:16]


def label_proportions(classes: int, dominant: int | None, skew: float) -> np.ndarray:
    """skew·onehot(dominant) + (1 - skew)·一様"""
    if dominant is None:
        return np.full(classes, 1.0 / classes)
    p = np.full(classes, (1.0 - skew) / classes)
    p[dominant] += skew
    return p


def label_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """最大剰余法で件数に丸める（同値は小さいクラスを優先）"""
    raw = proportions * total
    counts = np.floor(raw + 1e-9).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _sample(
    rng: np.random.Generator,
    means: np.ndarray,
    offset: np.ndarray,
    counts: np.ndarray,
    noise: float,
) -> LabeledDataset:
    labels = np.repeat(np.arange(len(counts)), counts)
    labels = labels[rng.permutation(len(labels))]
    features = means[labels] + offset + noise * rng.standard_normal((len(labels), means.shape[1]))
    return LabeledDataset(features, labels)


def _client(
    spec: SyntheticTaskSpec,
    means: np.ndarray,
    rng: np.random.Generator,
    client_id: str,
    dominant: int,
) -> ClientData:
    offset = rng.normal(0.0, spec.client_shift / np.sqrt(spec.input_dim), spec.input_dim)
    p = label_proportions(spec.classes, dominant, spec.client_skew)
    train = _sample(rng, means, offset, label_counts(p, spec.per_client_examples), spec.noise)
    dev = _sample(rng, means, offset, label_counts(p, spec.heldout_examples), spec.noise)
    test = _sample(rng, means, offset, label_counts(p, spec.heldout_examples), spec.noise)
    return ClientData(client_id, dominant, train, dev, test)


def client_id_for(index: int) -> str:
    return f"c{index:04d}"


def generate_synthetic_task(spec: SyntheticTaskSpec, seed: int) -> SyntheticTask:
    """seed から決定的にタスクを生成"""
    # 中心間の距離 ≈ class_separation
    scale = spec.class_separation / np.sqrt(2.0 * spec.input_dim)
    means = make_rng(seed, "means").normal(0.0, scale, (spec.classes, spec.input_dim))
    zero = np.zeros(spec.input_dim)
    uniform = label_proportions(spec.classes, None, 0.0)

    server = _sample(make_rng(seed, "server"), means, zero, label_counts(uniform, spec.server_examples), spec.noise)
    initial_eval = _sample(
        make_rng(seed, "initial-eval"), means, zero, label_counts(uniform, spec.initial_eval_examples), spec.noise
    )

    clients = tuple(
        _client(spec, means, make_rng(seed, "client", i), client_id_for(i), i % spec.classes)
        for i in range(spec.n_clients)
    )

    unseen_parts = []
    for j in range(spec.unseen_clients):
        rng = make_rng(seed, "unseen", j)
        dominant = int(rng.integers(spec.classes))
        unseen_parts.append(_client(spec, means, rng, f"u{j:04d}", dominant).test)

    eval_splits = {
        "initial": initial_eval,
        "federated": LabeledDataset.concat([c.test for c in clients]),
        "unseen": LabeledDataset.concat(unseen_parts),
    }
    return SyntheticTask(spec=spec, seed=seed, server=server, clients=clients, eval_splits=eval_splits)


def _save_npz(data: LabeledDataset, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, features=data.features, labels=data.labels)


def load_npz(path: Path) -> LabeledDataset:
    with np.load(path) as f:
        return LabeledDataset(f["features"], f["labels"])


def write_task(task: SyntheticTask, out_dir: Path, verbose: bool = True) -> Path:
    """server.npz, clients/<ID>/{train,dev,test}.npz, eval/<split>.npz, task.json"""
    _save_npz(task.server, out_dir / "server.npz")
    for i, client in enumerate(task.clients, 1):
        for split in ("train", "dev", "test"):
            _save_npz(getattr(client, split), out_dir / "clients" / client.client_id / f"{split}.npz")
        if verbose and (i % 10 == 0 or i == len(task.clients)):
            print(f"  [{i}/{len(task.clients)}] {client.client_id}")
    for name, data in task.eval_splits.items():
        _save_npz(data, out_dir / "eval" / f"{name}.npz")

    meta_file = out_dir / "task.json"
    meta = {
        "seed": task.seed,
        "spec": asdict(task.spec),
        "signature": task.signature(),
        "clients": [
            {"client_id": c.client_id, "dominant_class": c.dominant_class, "train": len(c.train)}
            for c in task.clients
        ],
        "eval": {name: len(data) for name, data in task.eval_splits.items()},
    }
    with open(meta_file, "w", encoding="utf-8") as f:
        json.dump(meta, f, ensure_ascii=False, indent=2)
    if verbose:
        print(f"Saved: {out_dir}")
        print(f"Saved: {meta_file}")
    return meta_file


def main():
    import argparse

    parser = argparse.ArgumentParser(description="合成タスクをファイルに出力")
    parser.add_argument("--out", type=Path, default=SYNTH_DIR, help="出力ディレクトリ")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--clients", type=int, default=SyntheticTaskSpec.n_clients)
    parser.add_argument("--skew", type=float, default=SyntheticTaskSpec.client_skew)
    args = parser.parse_args()

    spec = SyntheticTaskSpec(n_clients=args.clients, client_skew=args.skew)
    write_task(generate_synthetic_task(spec, args.seed), args.out)


if __name__ == "__main__":
    main()
