"""実験の実行（初期モデル → 連合学習 → 評価）

  1. サーバー側データで初期モデル W^0 を学習（train.initial_epochs）
  2. run_federated で連合学習
  3. initial / federated / unseen の3分割で評価
     （run.reference = true なら complete データの参照モデルも）
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from dataclasses import replace

from config import CONFIGS_DIR, REFERENCE_LR_DECAY_EPOCHS, RESULTS_DIR
from scripts.comm_schedule import save_ledger_csv
from scripts.experiment_config import ExperimentConfig, emit_config, load_config
from scripts.fedavg import ClientState, Evaluator, run_federated
from scripts.mlp_model import (
    LabeledDataset,
    ModelSpec,
    ParameterVector,
    TrainConfig,
    batch_plan,
    evaluate,
    init_model,
    run_minibatches,
    train_local,
)
from scripts.rng_keys import epoch_order
from scripts.run_report import RunReport, print_report, report_file_stem, save_report
from scripts.synth_task import SyntheticTask, generate_synthetic_task

SERVER_ID = "server"
REFERENCE_ID = "complete"


def make_evaluator(spec: ModelSpec, eval_splits: dict[str, LabeledDataset]) -> Evaluator:
    def evaluator(params: ParameterVector):
        return {name: evaluate(params, spec, data) for name, data in eval_splits.items()}

    return evaluator


def build_clients(task: SyntheticTask) -> list[ClientState]:
    return [ClientState(c.client_id, c.train, dev_dataset=c.dev) for c in task.clients]


def train_initial_model(
    spec: ModelSpec,
    server_data: LabeledDataset,
    train_config: TrainConfig,
    epochs: int,
    init_seed: int,
) -> ParameterVector:
    """W^0 = train_initial_model(D_0)"""
    params = init_model(spec, init_seed)
    return train_local(params, spec, server_data, replace(train_config, epochs=epochs), client_id=SERVER_ID)


def reference_learning_rate(base: float, epoch: int) -> float:
    """参照モデルのepochごとの学習率 base / (1 + epoch / REFERENCE_LR_DECAY_EPOCHS)"""
    return base / (1 + epoch / REFERENCE_LR_DECAY_EPOCHS)


def train_reference_model(config: ExperimentConfig, task: SyntheticTask) -> ParameterVector:
    """参照モデル: 同じ構成・初期値で complete（サーバー + 全クライアント）を初期 + FL と同じepoch数学習

    学習率はepochごとに reference_learning_rate で減衰させ、
    クライアントdevを連結した集合で正解率が最も高いepochのパラメータを返す。
    devが無ければ最終epochのパラメータ。
    """
    epochs = config.initial_epochs + config.schedule.epoch_budget
    params = init_model(config.model, config.seeds.init)
    data = task.complete_train()
    dev = LabeledDataset.concat([c.dev for c in task.clients])
    n = len(data)

    best = params
    best_acc = evaluate(params, config.model, dev).accuracy if len(dev) else None
    for e in range(epochs):
        order = epoch_order(n, config.train.seed, REFERENCE_ID, e)
        lr = reference_learning_rate(config.train.learning_rate, e)
        params = run_minibatches(params, config.model, data, order, batch_plan(n, config.train.batch_size), lr)
        if best_acc is None:
            best = params
            continue
        acc = evaluate(params, config.model, dev).accuracy
        # 同点なら早いepochを残す
        if acc > best_acc:
            best, best_acc = params, acc
    return best


def run_experiment(config: ExperimentConfig, verbose: bool = False) -> RunReport:
    label = config.run_label
    if verbose:
        print(f"\n{'='*60}")
        print(f"  🚀 {label}")
        print(f"{'='*60}")

    task = generate_synthetic_task(config.task, config.seeds.data)
    evaluator = make_evaluator(config.model, task.eval_splits)
    if verbose:
        sizes = ", ".join(f"{k} {len(v)}" for k, v in task.eval_splits.items())
        print(f"  タスク: {len(task.clients)}クライアント, サーバー {len(task.server)}件, 評価 [{sizes}]")

    # 1. 初期モデル
    initial = train_initial_model(config.model, task.server, config.train, config.initial_epochs, config.seeds.init)
    if verbose:
        print(f"  初期モデル: {config.initial_epochs} epoch 学習済み ({len(initial)} パラメータ)")

    # 2. 連合学習
    clients = build_clients(task)
    _, report = run_federated(initial, clients, config.federated(), evaluator, verbose=verbose)

    # 3. 参照モデル
    reference_metrics = None
    if config.reference:
        reference_metrics = evaluator(train_reference_model(config, task))
        if verbose:
            print(f"  参照モデル: federated_acc {reference_metrics['federated'].accuracy:.4f}")

    return replace(
        report,
        label=label,
        reference_metrics=reference_metrics,
        eval_signature=task.signature(),
        config_text=emit_config(config),
    )


def save_run(report: RunReport, output_dir: Path, verbose: bool = True) -> list[Path]:
    """<label>.csv, <label>.json, <label>.conf, <label>_ledger.csv"""
    csv_file, json_file = save_report(report, output_dir, verbose=verbose)
    stem = report_file_stem(report.label)

    conf_file = output_dir / f"{stem}.conf"
    conf_file.write_text(report.config_text, encoding="utf-8")
    if verbose:
        print(f"Saved: {conf_file}")

    files = [csv_file, json_file, conf_file]
    if report.ledger is not None:
        files.append(save_ledger_csv(report.ledger, output_dir / f"{stem}_ledger.csv", verbose=verbose))
    return files


def main():
    import argparse

    parser = argparse.ArgumentParser(description="設定ファイルから実験を実行")
    parser.add_argument("--config", type=Path, default=CONFIGS_DIR / "e1_m.conf")
    parser.add_argument("--out", type=Path, default=RESULTS_DIR)
    parser.add_argument("--seed-override", action="append", default=[], metavar="K=V")
    args = parser.parse_args()

    config = load_config(args.config, args.seed_override)
    report = run_experiment(config, verbose=True)
    save_run(report, args.out)
    print_report(report)


if __name__ == "__main__":
    main()
