"""決定的な乱数生成（カウンタベースのPhiloxをキーで初期化）"""

import zlib

import numpy as np


def key_of(value: int | str) -> int:
    """文字列IDも含めて乱数キー用の非負整数に変換"""
    if isinstance(value, str):
        return zlib.crc32(value.encode("utf-8"))
    if value < 0:
        raise ValueError(f"乱数キーは非負である必要があります: {value}")
    return int(value)


def make_rng(*keys: int | str) -> np.random.Generator:
    """(seed, round, client_id, ...) から独立した乱数ストリームを作る

    同じキーなら実行順序や並列度に関係なく同じ系列になる。
    """
    seq = np.random.SeedSequence([key_of(k) for k in keys])
    return np.random.Generator(np.random.Philox(seq))


def epoch_order(size: int, seed: int, client_id: str, epoch: int) -> np.ndarray:
    """クライアントのepochごとの学習順序（置換）"""
    return make_rng(seed, client_id, epoch).permutation(size)
