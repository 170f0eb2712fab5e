"""Jinja2テンプレートから実験比較ページを生成"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from jinja2 import Environment, FileSystemLoader

from config import HTML_DIR, RESULTS_DIR, TEMPLATES_DIR
from scripts.run_report import SPLITS, RunReport, baseline_reports, comparison_frame, load_report


def setup_jinja_env() -> Environment:
    """Jinja2環境をセットアップ"""
    env = Environment(
        loader=FileSystemLoader(TEMPLATES_DIR),
        autoescape=True,
    )
    env.filters["acc"] = lambda v: "-" if v is None or v != v else f"{v * 100:.2f}"
    env.filters["gb"] = lambda v: "-" if v is None or v != v else f"{v:.6g}"
    return env


def comparison_rows(reports: list[RunReport]) -> list[dict]:
    """テンプレート用の行（NaN は None に）"""
    frame = comparison_frame(reports)
    rows = []
    for record in frame.to_dict(orient="records"):
        rows.append({k: (None if isinstance(v, float) and v != v else v) for k, v in record.items()})
    return rows


def render_comparison(reports: list[RunReport], title: str = "通信スケジュール比較", env: Environment | None = None) -> str:
    env = env or setup_jinja_env()
    template = env.get_template("compare.html")
    return template.render(
        title=title,
        splits=SPLITS,
        rows=comparison_rows(reports),
        signature=reports[0].eval_signature if reports else "",
    )


def generate_comparison_page(reports: list[RunReport], output_file: Path, title: str = "通信スケジュール比較") -> Path:
    output_file.parent.mkdir(parents=True, exist_ok=True)
    output_file.write_text(render_comparison(reports, title), encoding="utf-8")
    print(f"Generated: {output_file}")
    return output_file


def with_baselines(reports: list[RunReport]) -> list[RunReport]:
    """先頭レポートから Initial / Ref の行を追加"""
    if not reports:
        return []
    return [*baseline_reports(reports[0]), *reports]


def main():
    import argparse

    parser = argparse.ArgumentParser(description="実験レポートの比較ページを生成")
    parser.add_argument("reports", nargs="*", type=Path, help="<label>.json（省略時は results/*.json）")
    parser.add_argument("--out", type=Path, default=HTML_DIR / "compare.html")
    args = parser.parse_args()

    files = args.reports or sorted(RESULTS_DIR.glob("*.json"))
    reports = [load_report(f) for f in files]
    if not reports:
        print("❌ レポートが見つかりませんでした")
        return
    generate_comparison_page(with_baselines(reports), args.out)


if __name__ == "__main__":
    main()
