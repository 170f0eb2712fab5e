"""連合学習シミュレーション 設定ファイル"""

from pathlib import Path

# ベースディレクトリ
BASE_DIR = Path(__file__).parent

# データディレクトリ
DATA_DIR = BASE_DIR / "data"
CONFIGS_DIR = DATA_DIR / "configs"
MANIFEST_DIR = DATA_DIR / "manifests"
PARTITION_DIR = DATA_DIR / "partition"
SYNTH_DIR = DATA_DIR / "synth"

# 出力ディレクトリ
RESULTS_DIR = BASE_DIR / "results"
HTML_DIR = BASE_DIR / "html"

# テンプレートディレクトリ
TEMPLATES_DIR = BASE_DIR / "templates"

# データ分割
DEFAULT_FL_THRESHOLD = 116  # 発話数がこれを超える話者をクライアントにする
DEFAULT_CLIENT_SPLIT = (0.6, 0.2, 0.2)  # train / test / dev
DEFAULT_INITIAL_FRACTION = 1 / 3  # initial/train = fl/*/train の1/3
INITIAL_OVERSHOOT = 1.05  # initial削減時の許容オーバー

# 学習・通信スケジュール
DEFAULT_CHUNKS_PER_EPOCH = 8
DEFAULT_PATIENCE = 10
DEFAULT_MAX_LOCAL_EPOCHS = 50
FL_BATCH_SIZE = 8
INITIAL_EPOCHS = 24
FL_EPOCHS = 12
LEARNING_RATE = 0.1
REFERENCE_LR_DECAY_EPOCHS = 4  # 参照モデルの学習率が半分になるepoch数

# 通信コスト
BYTES_PER_GB = 10**9
