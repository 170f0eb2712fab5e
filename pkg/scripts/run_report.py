"""実験レポート（ラウンドごとの評価と累積通信コスト）

CSV列:
  round,participants,initial_loss,initial_acc,federated_loss,federated_acc,
  unseen_loss,unseen_acc,cumulative_bytes
最後の行は round=final のサマリー行。
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import csv
import io
import json
from dataclasses import dataclass, field
from typing import TextIO

import pandas as pd

from scripts.comm_schedule import CostLedger, bytes_to_gb, total_cost_gb
from scripts.mlp_model import EvalResult

SPLITS = ("initial", "federated", "unseen")
CSV_COLUMNS = [
    "round",
    "participants",
    "initial_loss",
    "initial_acc",
    "federated_loss",
    "federated_acc",
    "unseen_loss",
    "unseen_acc",
    "cumulative_bytes",
]
SUMMARY_ROUND = "final"

INITIAL_LABEL = "Initial"
REFERENCE_LABEL = "Ref"

Metrics = dict[str, EvalResult]


def format_float(value: float) -> str:
    """有効数字6桁"""
    return f"{value:.6g}"


@dataclass
class RoundRow:
    """1ラウンド分の行"""
    round: int | str
    participants: int
    metrics: Metrics
    cumulative_bytes: int

    def to_csv_row(self) -> list[str]:
        row = [str(self.round), str(self.participants)]
        for split in SPLITS:
            result = self.metrics.get(split)
            if result is None:
                row += ["", ""]
            else:
                row += [format_float(result.loss), format_float(result.accuracy)]
        row.append(str(self.cumulative_bytes))
        return row

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "participants": self.participants,
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "cumulative_bytes": self.cumulative_bytes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RoundRow":
        return cls(
            round=data["round"],
            participants=int(data["participants"]),
            metrics={k: EvalResult(**v) for k, v in data["metrics"].items()},
            cumulative_bytes=int(data["cumulative_bytes"]),
        )


@dataclass
class RunReport:
    """1回の実験の結果"""
    label: str
    rows: list[RoundRow]
    summary: RoundRow
    initial_metrics: Metrics = field(default_factory=dict)
    reference_metrics: Metrics | None = None
    eval_signature: str = ""
    config_text: str = ""
    ledger: CostLedger | None = field(default=None, repr=False, compare=False)

    @property
    def total_bytes(self) -> int:
        return self.summary.cumulative_bytes

    @property
    def cost_gb(self) -> float:
        """台帳があればそこから、JSONから読んだレポートは最終行の累積バイトから"""
        if self.ledger is not None:
            return total_cost_gb(self.ledger)
        return bytes_to_gb(self.total_bytes)

    def final_metrics(self) -> Metrics:
        return self.summary.metrics

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "rows": [r.to_dict() for r in self.rows],
            "summary": self.summary.to_dict(),
            "initial_metrics": {k: v.to_dict() for k, v in self.initial_metrics.items()},
            "reference_metrics": (
                None if self.reference_metrics is None
                else {k: v.to_dict() for k, v in self.reference_metrics.items()}
            ),
            "eval_signature": self.eval_signature,
            "config_text": self.config_text,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        reference = data.get("reference_metrics")
        return cls(
            label=data["label"],
            rows=[RoundRow.from_dict(r) for r in data["rows"]],
            summary=RoundRow.from_dict(data["summary"]),
            initial_metrics={k: EvalResult(**v) for k, v in data.get("initial_metrics", {}).items()},
            reference_metrics=None if reference is None else {k: EvalResult(**v) for k, v in reference.items()},
            eval_signature=data.get("eval_signature", ""),
            config_text=data.get("config_text", ""),
        )


# =====================================
# CSV / JSON 入出力
# =====================================

def export_csv(report: RunReport, sink: TextIO) -> None:
    """ヘッダー + ラウンド行 + サマリー行"""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in report.rows:
        writer.writerow(row.to_csv_row())
    writer.writerow(report.summary.to_csv_row())


def report_csv_text(report: RunReport) -> str:
    buffer = io.StringIO()
    export_csv(report, buffer)
    return buffer.getvalue()


def read_report_csv(source: TextIO | Path) -> pd.DataFrame:
    """export_csv の出力を読み込み（round列は文字列のまま）"""
    return pd.read_csv(source, dtype={"round": str})


def save_report(report: RunReport, output_dir: Path, verbose: bool = True) -> tuple[Path, Path]:
    """<label>.csv と <label>.json を保存"""
    output_dir.mkdir(parents=True, exist_ok=True)
    stem = report_file_stem(report.label)
    csv_file = output_dir / f"{stem}.csv"
    json_file = output_dir / f"{stem}.json"

    with open(csv_file, "w", encoding="utf-8", newline="") as f:
        export_csv(report, f)
    with open(json_file, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, ensure_ascii=False, indent=2)

    if verbose:
        print(f"Saved: {csv_file}")
        print(f"Saved: {json_file}")
    return csv_file, json_file


def load_report(json_file: Path) -> RunReport:
    with open(json_file, encoding="utf-8") as f:
        return RunReport.from_dict(json.load(f))


def report_file_stem(label: str) -> str:
    """ラベルをファイル名に使える形に（E(1/2)-M → E_1_2_-M）"""
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in label) or "run"


# =====================================
# 比較テーブル
# =====================================

def baseline_reports(report: RunReport) -> list[RunReport]:
    """Initial と Ref（あれば）を1行分のレポートとして取り出す"""
    result = [
        RunReport(
            label=INITIAL_LABEL,
            rows=[],
            summary=RoundRow(SUMMARY_ROUND, 0, dict(report.initial_metrics), 0),
            initial_metrics=dict(report.initial_metrics),
            eval_signature=report.eval_signature,
        )
    ]
    if report.reference_metrics is not None:
        result.append(
            RunReport(
                label=REFERENCE_LABEL,
                rows=[],
                summary=RoundRow(SUMMARY_ROUND, 0, dict(report.reference_metrics), 0),
                initial_metrics=dict(report.initial_metrics),
                eval_signature=report.eval_signature,
            )
        )
    return result


def _label_order(label: str) -> tuple[int, str]:
    if label == INITIAL_LABEL:
        return (0, label)
    if label == REFERENCE_LABEL:
        return (2, label)
    return (1, label)


def comparison_frame(reports: list[RunReport]) -> pd.DataFrame:
    """1実験1行: label, 各分割の正解率・損失, cost_gb"""
    if not reports:
        raise ValueError("比較するレポートがありません")
    signatures = {r.eval_signature for r in reports}
    if len(signatures) > 1:
        raise ValueError(f"評価データが異なるレポートは比較できません: {sorted(signatures)}")

    records = []
    for r in sorted(reports, key=lambda x: _label_order(x.label)):
        record = {"label": r.label}
        metrics = r.final_metrics()
        for split in SPLITS:
            result = metrics.get(split)
            record[f"{split}_acc"] = None if result is None else result.accuracy
            record[f"{split}_loss"] = None if result is None else result.loss
        is_baseline = r.label in (INITIAL_LABEL, REFERENCE_LABEL)
        record["cost_gb"] = None if is_baseline else r.cost_gb
        records.append(record)
    return pd.DataFrame.from_records(records)


def compare_runs(reports: list[RunReport]) -> str:
    """比較テーブル（正解率と通信コスト）"""
    frame = comparison_frame(reports)
    columns = ["label", "unseen_acc", "federated_acc", "initial_acc", "cost_gb"]
    formatters = {
        "unseen_acc": _fmt_metric,
        "federated_acc": _fmt_metric,
        "initial_acc": _fmt_metric,
        "cost_gb": _fmt_cost,
    }
    return frame[columns].to_string(index=False, formatters=formatters)


def _fmt_metric(value) -> str:
    return "-" if value is None or pd.isna(value) else f"{value:.4f}"


def _fmt_cost(value) -> str:
    return "-" if value is None or pd.isna(value) else f"{value:.6g}"


def print_report(report: RunReport) -> None:
    """ラウンドごとの推移を表示"""
    print(f"\n{'='*72}")
    print(f"  📊 {report.label}")
    print(f"{'='*72}")
    print(f"{'round':>6} {'参加':>5} {'initial':>9} {'federated':>10} {'unseen':>9} {'cost[GB]':>12}")
    print("-" * 72)
    for row in [*report.rows, report.summary]:
        accs = [row.metrics[s].accuracy if s in row.metrics else float("nan") for s in SPLITS]
        print(
            f"{str(row.round):>6} {row.participants:>5} {accs[0]:>9.4f} {accs[1]:>10.4f} "
            f"{accs[2]:>9.4f} {bytes_to_gb(row.cumulative_bytes):>12.6g}"
        )
    print("-" * 72)
