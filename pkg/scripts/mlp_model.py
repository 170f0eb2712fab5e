"""フィードフォワード分類器とSGD学習

連合学習で平均化する対象（ParameterVector）と、クライアント側の
train_model に相当するローカル学習をまとめたモジュール。

損失: 平均クロスエントロピー
  L = -1/n Σ log p(y_i | x_i)
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from scripts.rng_keys import epoch_order, make_rng

ACTIVATIONS = ("tanh", "relu")

Layout = tuple[tuple[str, tuple[int, ...]], ...]


def layout_size(layout: Layout) -> int:
    """レイアウトから要素数を計算"""
    return sum(int(np.prod(dims)) for _, dims in layout)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """モデルパラメータ（1次元配列 + テンソル形状）"""
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        layout = tuple((str(name), tuple(int(d) for d in dims)) for name, dims in self.layout)
        if values.size != layout_size(layout):
            raise ValueError(
                f"パラメータ数がレイアウトと一致しません: {values.size} != {layout_size(layout)}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("パラメータにNaN/Infが含まれています")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return self.values.size

    @property
    def nbytes(self) -> int:
        """シリアライズ時のバイト数（float64）"""
        return self.values.nbytes

    def same_layout(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout

    def tensors(self) -> dict[str, np.ndarray]:
        """テンソル名 → 形状付きビュー"""
        result = {}
        offset = 0
        for name, dims in self.layout:
            size = int(np.prod(dims))
            result[name] = self.values[offset:offset + size].reshape(dims)
            offset += size
        return result

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def __sub__(self, other: "ParameterVector") -> "ParameterVector":
        require_same_layout([self, other])
        return self.with_values(self.values - other.values)

    def __add__(self, other: "ParameterVector") -> "ParameterVector":
        require_same_layout([self, other])
        return self.with_values(self.values + other.values)


def require_same_layout(vectors: Sequence[ParameterVector]) -> None:
    """全ベクトルのレイアウトが同一であることを確認"""
    first = vectors[0]
    for v in vectors[1:]:
        if not first.same_layout(v):
            raise ValueError("パラメータのレイアウトが一致しません")


@dataclass(frozen=True)
class ModelSpec:
    """ネットワーク構成"""
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_classes: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_classes)
        if any(d <= 0 for d in dims):
            raise ValueError(f"次元は正の整数である必要があります: {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"未対応の活性化関数: {self.activation}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_classes)
        return list(zip(dims[:-1], dims[1:]))

    def layout(self) -> Layout:
        layout = []
        for i, (fan_in, fan_out) in enumerate(self.layer_shapes(), 1):
            layout.append((f"W{i}", (fan_in, fan_out)))
            layout.append((f"b{i}", (fan_out,)))
        return tuple(layout)

    def param_count(self) -> int:
        return layout_size(self.layout())


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """特徴量行列とクラスラベル"""
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            features = features.reshape(len(labels), -1)
        if features.shape[0] != labels.shape[0]:
            raise ValueError(f"特徴量とラベルの件数が違います: {features.shape[0]} != {labels.shape[0]}")
        if labels.size and labels.min() < 0:
            raise ValueError("ラベルは非負である必要があります")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def take(self, indices: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx])

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        return cls(
            np.concatenate([p.features for p in parts], axis=0),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass(frozen=True)
class TrainConfig:
    """ローカル学習の設定"""
    learning_rate: float = 0.1
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate は正である必要があります: {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size は1以上: {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs は0以上: {self.epochs}")
        if self.seed < 0:
            raise ValueError(f"seed は非負: {self.seed}")


def init_model(spec: ModelSpec, seed: int) -> ParameterVector:
    """重み ~ U(-1, 1)/sqrt(fan_in)、バイアス = 0 で初期化"""
    rng = make_rng(seed, "init")
    parts = []
    for fan_in, fan_out in spec.layer_shapes():
        parts.append(rng.uniform(-1.0, 1.0, size=fan_in * fan_out) / np.sqrt(fan_in))
        parts.append(np.zeros(fan_out))
    return ParameterVector(np.concatenate(parts), spec.layout())


# =====================================
# 順伝播・逆伝播（内部は生の配列で計算）
# =====================================

def _unpack(values: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        W = values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = values[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward_values(values: np.ndarray, spec: ModelSpec, X: np.ndarray):
    """(各層の入力, 各層の前活性, 対数確率)"""
    layers = _unpack(values, spec)
    inputs = [X]
    pre = []
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i == len(layers) - 1:
            return inputs, pre, _log_softmax(z)
        pre.append(z)
        h = _activate(z, spec.activation)
        inputs.append(h)
    raise AssertionError("unreachable")


def _loss_values(values: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> float:
    _, _, logp = _forward_values(values, spec, X)
    return float(-logp[np.arange(len(y)), y].mean())


def _gradient_values(values: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    inputs, pre, logp = _forward_values(values, spec, X)
    layers = _unpack(values, spec)
    n = len(y)

    # d(loss)/d(logits) = softmax - onehot
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n

    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append(dz.sum(axis=0))
        grads.append((inputs[i].T @ dz).reshape(-1))
        if i > 0:
            dh = dz @ W.T
            if spec.activation == "tanh":
                dz = dh * (1.0 - inputs[i] ** 2)
            else:
                dz = dh * (pre[i - 1] > 0)
    grads.reverse()
    return np.concatenate(grads)


def _check_inputs(params: ParameterVector, spec: ModelSpec, features: np.ndarray) -> None:
    if params.layout != spec.layout():
        raise ValueError("パラメータのレイアウトがModelSpecと一致しません")
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ValueError(f"入力次元が一致しません: {features.shape} (input_dim={spec.input_dim})")


def _check_dataset(params: ParameterVector, spec: ModelSpec, dataset: LabeledDataset) -> None:
    if len(dataset) == 0:
        raise ValueError("データセットが空です")
    _check_inputs(params, spec, dataset.features)
    if dataset.labels.max() >= spec.output_classes:
        raise ValueError(f"ラベルが output_classes={spec.output_classes} を超えています")


# =====================================
# 公開API
# =====================================

def forward(params: ParameterVector, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    """クラスの対数確率（行ごとにlogsumexp = 0）"""
    X = np.asarray(features, dtype=np.float64)
    _check_inputs(params, spec, X)
    return _forward_values(params.values, spec, X)[2]


def loss(params: ParameterVector, spec: ModelSpec, dataset: LabeledDataset) -> float:
    _check_dataset(params, spec, dataset)
    return _loss_values(params.values, spec, dataset.features, dataset.labels)


def gradient(params: ParameterVector, spec: ModelSpec, dataset: LabeledDataset) -> ParameterVector:
    """誤差逆伝播による損失の厳密な勾配"""
    _check_dataset(params, spec, dataset)
    return params.with_values(_gradient_values(params.values, spec, dataset.features, dataset.labels))


def finite_diff_gradient(
    params: ParameterVector,
    spec: ModelSpec,
    dataset: LabeledDataset | None,
    h: float = 1e-5,
    loss_fn: Callable[[ParameterVector], float] | None = None,
) -> ParameterVector:
    """中心差分による勾配（テスト用オラクル）

    loss_fn を渡すとモデルの損失の代わりにそれを微分する。
    """
    if not h > 0:
        raise ValueError(f"h は正である必要があります: {h}")
    if loss_fn is None:
        def loss_fn(p: ParameterVector) -> float:
            return loss(p, spec, dataset)

    base = params.values
    approx = np.empty_like(base)
    for j in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[j] += h
        minus[j] -= h
        approx[j] = (loss_fn(params.with_values(plus)) - loss_fn(params.with_values(minus))) / (2 * h)
    return params.with_values(approx)


def sgd_step(params: ParameterVector, grad: ParameterVector, lr: float) -> ParameterVector:
    require_same_layout([params, grad])
    return params.with_values(params.values - lr * grad.values)


def batch_plan(n_examples: int, batch_size: int) -> list[int]:
    """n件を batch_size ごとに分割（最後は端数）"""
    full, rest = divmod(n_examples, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def run_minibatches(
    params: ParameterVector,
    spec: ModelSpec,
    dataset: LabeledDataset,
    order: np.ndarray,
    batch_sizes: Sequence[int],
    lr: float,
) -> ParameterVector:
    """与えられた順序・バッチサイズでSGDを回す"""
    if not batch_sizes:
        return params
    _check_dataset(params, spec, dataset)
    if sum(batch_sizes) > len(order):
        raise ValueError(f"バッチ計画が順序より長い: {sum(batch_sizes)} > {len(order)}")

    values = params.values.copy()
    X, y = dataset.features, dataset.labels
    pos = 0
    for size in batch_sizes:
        idx = order[pos:pos + size]
        pos += size
        values -= lr * _gradient_values(values, spec, X[idx], y[idx])
    return params.with_values(values)


def train_local(
    params: ParameterVector,
    spec: ModelSpec,
    dataset: LabeledDataset,
    config: TrainConfig,
    steps: int | None = None,
    *,
    client_id: str = "",
    round_index: int = 0,
) -> ParameterVector:
    """ミニバッチSGDでローカル学習

    steps 指定時はそのミニバッチ数だけ、未指定なら config.epochs 回の全データ走査。
    各走査の順序は (config.seed, client_id, round_index + 走査番号) で決まる。
    """
    if steps == 0 or (steps is None and config.epochs == 0):
        return params
    _check_dataset(params, spec, dataset)

    n = len(dataset)
    if steps is None:
        for e in range(config.epochs):
            order = epoch_order(n, config.seed, client_id, round_index + e)
            params = run_minibatches(params, spec, dataset, order, batch_plan(n, config.batch_size), config.learning_rate)
        return params

    remaining = steps
    e = 0
    while remaining > 0:
        order = epoch_order(n, config.seed, client_id, round_index + e)
        sizes = batch_plan(n, config.batch_size)[:remaining]
        params = run_minibatches(params, spec, dataset, order, sizes, config.learning_rate)
        remaining -= len(sizes)
        e += 1
    return params


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float

    def to_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy}


def evaluate(params: ParameterVector, spec: ModelSpec, dataset: LabeledDataset) -> EvalResult:
    """(平均損失, 正解率)。同点のargmaxは小さいクラス番号を採用"""
    _check_dataset(params, spec, dataset)
    logp = _forward_values(params.values, spec, dataset.features)[2]
    y = dataset.labels
    mean_loss = float(-logp[np.arange(len(y)), y].mean())
    accuracy = float(np.mean(np.argmax(logp, axis=1) == y))
    return EvalResult(loss=mean_loss, accuracy=accuracy)
