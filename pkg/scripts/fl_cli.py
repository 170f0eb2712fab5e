#!/usr/bin/env python3
"""
連合学習シミュレーション CLI

使い方:
  python scripts/fl_cli.py partition --manifest data/manifests/manifest.tsv --out data/partition
  python scripts/fl_cli.py synth --config data/configs/e1_m.conf --out data/synth
  python scripts/fl_cli.py run --config data/configs/e1-2_m.conf --out results
  python scripts/fl_cli.py run --config data/configs/e1_m.conf --seed-override data=3
  python scripts/fl_cli.py compare results/*.json --html html/compare.html

終了コード: 0 成功 / 2 設定エラー / 3 データ・整合性エラー / 4 実行時エラー
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import argparse

from config import (
    DEFAULT_FL_THRESHOLD,
    DEFAULT_INITIAL_FRACTION,
    HTML_DIR,
    PARTITION_DIR,
    RESULTS_DIR,
    SYNTH_DIR,
)
from scripts.experiment_config import ConfigError, load_config
from scripts.generate_report import generate_comparison_page, with_baselines
from scripts.partition_manifest import (
    IntegrityError,
    ManifestParseError,
    PartitionConfig,
    partition_manifest,
    read_manifest,
    summarize_partition,
    validate_partition,
    write_partition,
)
from scripts.run_experiment import run_experiment, save_run
from scripts.run_report import compare_runs, load_report, print_report
from scripts.synth_task import SyntheticTaskSpec, generate_synthetic_task, write_task

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class DataError(ValueError):
    """入力データ（マニフェスト・レポート）の問題"""


def cmd_partition(args: argparse.Namespace) -> int:
    if not args.manifest.exists():
        raise DataError(f"マニフェストが見つかりません: {args.manifest}")
    try:
        config = PartitionConfig(
            fl_threshold=args.threshold,
            initial_fraction=args.initial_fraction,
            seed=args.seed,
        )
    except ValueError as e:
        raise ConfigError("partition", str(e)) from None

    manifest = read_manifest(args.manifest)
    print(f"Loaded {len(manifest)} utterances / {manifest['speaker_id'].nunique()} speakers")
    result = partition_manifest(manifest, config)

    violations = validate_partition(result, manifest, config.fl_threshold)
    if violations:
        for v in violations[:20]:
            print(f"  ❌ {v}")
        raise IntegrityError(f"分割結果に {len(violations)} 件の不整合があります")

    write_partition(result, args.out)
    print(f"\n{'='*50}")
    print(f"  📊 {len(result.fl_clients)} クライアント")
    print(f"{'='*50}")
    print(summarize_partition(result).to_string(index=False))
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    if args.config is not None:
        config = load_config(args.config, args.seed_override)
        spec, seed = config.task, config.seeds.data
    else:
        spec, seed = SyntheticTaskSpec(), args.seed
    write_task(generate_synthetic_task(spec, seed), args.out)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    configs = [load_config(path, args.seed_override) for path in args.config]
    for i, config in enumerate(configs, 1):
        if len(configs) > 1:
            print(f"[{i}/{len(configs)}] {config.run_label}")
        report = run_experiment(config, verbose=not args.quiet)
        save_run(report, args.out, verbose=not args.quiet)
        if not args.quiet:
            print_report(report)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    files = args.reports or sorted(RESULTS_DIR.glob("*.json"))
    missing = [f for f in files if not f.exists()]
    if missing:
        raise DataError(f"レポートが見つかりません: {missing[0]}")
    if not files:
        raise DataError("比較するレポートがありません")

    reports = [load_report(f) for f in files]
    if not args.no_baselines:
        reports = with_baselines(reports)
    try:
        table = compare_runs(reports)
    except ValueError as e:
        raise DataError(str(e)) from None

    print(f"\n{'='*60}")
    print(f"  📊 {len(reports)} runs")
    print(f"{'='*60}")
    print(table)
    if args.html is not None:
        generate_comparison_page(reports, args.html)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="連合学習シミュレーション")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="マニフェストを連合学習用に分割")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, default=PARTITION_DIR)
    p.add_argument("--threshold", type=int, default=DEFAULT_FL_THRESHOLD)
    p.add_argument("--initial-fraction", type=float, default=DEFAULT_INITIAL_FRACTION)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("synth", help="合成タスクをファイルに出力")
    p.add_argument("--config", type=Path, default=None, help="task.* と seeds.data を使用")
    p.add_argument("--out", type=Path, default=SYNTH_DIR)
    p.add_argument("--seed", type=int, default=0, help="--config なしの場合のseed")
    p.add_argument("--seed-override", action="append", default=[], metavar="K=V")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="設定ファイルから実験を実行")
    p.add_argument("--config", type=Path, action="append", required=True, help="複数指定可")
    p.add_argument("--out", type=Path, default=RESULTS_DIR)
    p.add_argument("--seed-override", action="append", default=[], metavar="K=V")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="レポートを比較表にまとめる")
    p.add_argument("reports", nargs="*", type=Path, help="<label>.json（省略時は results/*.json）")
    p.add_argument("--html", type=Path, nargs="?", const=HTML_DIR / "compare.html", default=None)
    p.add_argument("--no-baselines", action="store_true", help="Initial / Ref 行を出さない")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"❌ 設定エラー: {e}")
        return EXIT_CONFIG
    except (ManifestParseError, IntegrityError, DataError) as e:
        print(f"❌ データエラー: {e}")
        return EXIT_DATA
    except Exception as e:
        print(f"❌ 実行時エラー: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
