"""
Report Generator - 実行結果の書き出しと複数シードの集計

機能:
- episodes.csv（1エピソード1行）と summary.json（キーソート済み）の書き出し
- 複数シードの集計（Con. Viol. / Best return / Max Episodes / Blocked Ep. の平均±標準偏差）
- 反復ごとのリターン平均±標準偏差と「これまでの最良」曲線
- Markdown形式の集計表
- matplotlib による学習曲線（平均 ± 2σ 帯、ランダム方策ベースラインは破線）
- episodes.csv だけから学習曲線を描き直す
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import structlog  # noqa: E402

from agents.records import RunSummary  # noqa: E402

logger = structlog.get_logger()

CSV_COLUMNS = [
    "run_id",
    "seed",
    "episode",
    "kind",
    "steps",
    "native_return",
    "violated",
    "violation_step",
    "blocked",
    "xi",
    "predicted_risk",
    "wall_ms",
]

# 集計表の行名と summary.aggregates のキー
TABLE_ROWS = [
    ("Con. Viol.", "constraint_violations"),
    ("Best return", "best_safe_return"),
    ("Max Episodes", "executed_episodes"),
    ("Blocked Ep.", "blocked_episodes"),
]

# SVG内のIDを固定してバイト単位で再現可能にする
matplotlib.rcParams["svg.hashsalt"] = "policy-search"
# 文字はパスではなく text 要素として書く
matplotlib.rcParams["svg.fonttype"] = "none"


def _mean_std(values: Sequence[Optional[float]]) -> Dict[str, Optional[float]]:
    """母標準偏差 (ddof=0)。None は除外し、全部 None なら None"""
    clean = np.array([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if clean.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(clean.mean()), "std": float(clean.std(ddof=0)), "n": int(clean.size)}


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def _jsonable(value):
    if isinstance(value, (np.integer, np.floating, np.bool_)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def iteration_returns(summary: RunSummary) -> List[Optional[float]]:
    """反復ごとの報告リターン（評価平均があればそれ、ブロックで終わった反復は None）"""
    values = []
    for it in summary.iterations:
        value = it.get("eval_mean")
        if value is None:
            value = it.get("return")
        values.append(None if value is None else float(value))
    return values


def best_so_far(values: Sequence[Optional[float]]) -> List[Optional[float]]:
    """これまでの反復の中での最良値"""
    best: Optional[float] = None
    curve = []
    for v in values:
        if v is not None and (best is None or v > best):
            best = v
        curve.append(best)
    return curve


class ReportGenerator:
    """1シード・複数シードの成果物を書き出すクラス"""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    # --- 1シード ---
    def episodes_frame(self, summary: RunSummary) -> pd.DataFrame:
        return pd.DataFrame(summary.rows(), columns=CSV_COLUMNS)

    def write_episodes_csv(self, summary: RunSummary) -> Path:
        path = self.output_dir / "episodes.csv"
        self.episodes_frame(summary).to_csv(path, index=False, float_format="%.12g")
        return path

    def write_summary_json(self, summary: RunSummary) -> Path:
        path = self.output_dir / "summary.json"
        _write_json(path, summary.to_dict())
        return path

    def write_error_json(self, error: Exception, run_id: str, seed: int) -> Path:
        path = self.output_dir / "error.json"
        payload = {
            "run_id": run_id,
            "seed": seed,
            "error": str(error),
            "type": type(error).__name__,
            "completed_episodes": len(getattr(error, "history", []) or []),
        }
        _write_json(path, payload)
        return path

    def generate_run_report(self, summary: RunSummary, baseline: Optional[float] = None) -> Dict[str, Path]:
        """episodes.csv / summary.json / learning_curve.svg をまとめて書き出す"""
        paths = {
            "episodes": self.write_episodes_csv(summary),
            "summary": self.write_summary_json(summary),
            "plot": self.plot_learning_curve([iteration_returns(summary)], baseline=baseline),
        }
        logger.info("Run report generated", run_id=summary.run_id, output_dir=str(self.output_dir))
        return paths

    # --- 複数シード ---
    def aggregate_stats(self, summaries: List[RunSummary], failed_seeds: Sequence[int] = ()) -> Dict[str, Any]:
        """
        シード横断の集計

        Args:
            summaries: 成功したシードの結果
            failed_seeds: 失敗したシード（集計からは除外し記録だけ残す）

        Returns:
            集計結果の辞書
        """
        ordered = sorted(summaries, key=lambda s: s.seed)
        rows = {}
        for label, key in TABLE_ROWS:
            rows[label] = _mean_std([s.aggregates[key] for s in ordered])

        curves = [iteration_returns(s) for s in ordered]
        length = max((len(c) for c in curves), default=0)
        per_iteration = []
        for i in range(length):
            stat = _mean_std([c[i] if i < len(c) else None for c in curves])
            per_iteration.append({"iteration": i + 1, **stat})

        return {
            "schema_version": 1,
            "env": ordered[0].env if ordered else None,
            "epsilon": ordered[0].epsilon if ordered else None,
            "seeds": [s.seed for s in ordered],
            "failed_seeds": sorted(int(s) for s in failed_seeds),
            "rows": rows,
            "per_iteration": per_iteration,
            "best_so_far": {str(s.seed): best_so_far(c) for s, c in zip(ordered, curves)},
        }

    def generate_markdown_report(self, stats: Dict[str, Any]) -> str:
        """Markdown形式の集計表"""
        md = f"# {stats['env']} ({len(stats['seeds'])} seeds)\n\n"
        if stats.get("epsilon") is not None:
            md += f"- **ε:** {stats['epsilon']}\n"
        md += f"- **Seeds:** {', '.join(str(s) for s in stats['seeds'])}\n"
        if stats["failed_seeds"]:
            md += f"- **Failed seeds:** {', '.join(str(s) for s in stats['failed_seeds'])}\n"
        if stats.get("random_baseline") is not None:
            md += f"- **Random policy return:** {stats['random_baseline']:.4g}\n"
        md += "\n| Metric | Mean | Std |\n|--------|------|-----|\n"
        for label, _ in TABLE_ROWS:
            row = stats["rows"][label]
            if row["mean"] is None:
                md += f"| {label} | - | - |\n"
            else:
                md += f"| {label} | {row['mean']:.4g} | {row['std']:.4g} |\n"

        if stats["per_iteration"]:
            md += "\n## Return per iteration\n\n| Iteration | Mean | Std | Seeds |\n|---|---|---|---|\n"
            for it in stats["per_iteration"]:
                if it["mean"] is None:
                    md += f"| {it['iteration']} | - | - | 0 |\n"
                else:
                    md += f"| {it['iteration']} | {it['mean']:.4g} | {it['std']:.4g} | {it['n']} |\n"
        return md

    def generate_aggregate_report(
        self,
        summaries: List[RunSummary],
        failed_seeds: Sequence[int] = (),
        baseline: Optional[float] = None,
    ) -> Dict[str, Any]:
        """aggregate.json / aggregate.md / learning_curve.svg を書き出して集計を返す"""
        stats = self.aggregate_stats(summaries, failed_seeds)
        stats["random_baseline"] = baseline
        _write_json(self.output_dir / "aggregate.json", stats)
        (self.output_dir / "aggregate.md").write_text(self.generate_markdown_report(stats))
        curves = [iteration_returns(s) for s in sorted(summaries, key=lambda s: s.seed)]
        self.plot_learning_curve(curves, baseline=baseline)
        logger.info("Aggregate report generated", seeds=stats["seeds"], output_dir=str(self.output_dir))
        return stats

    # --- 描画 ---
    def plot_learning_curve(
        self,
        curves: List[List[Optional[float]]],
        baseline: Optional[float] = None,
        filename: str = "learning_curve.svg",
        title: Optional[str] = None,
    ) -> Path:
        """
        平均曲線と ±2σ 帯（シードが複数のとき）を描く

        Args:
            curves: シードごとの反復リターン列（None は欠損）
            baseline: ランダム方策の平均リターン（破線）
        """
        length = max((len(c) for c in curves), default=0)
        table = np.full((len(curves), length), np.nan)
        for row, curve in enumerate(curves):
            for i, v in enumerate(curve):
                if v is not None:
                    table[row, i] = v

        x = np.arange(1, length + 1)
        fig, ax = plt.subplots(figsize=(6, 4))
        if length:
            counts = np.sum(np.isfinite(table), axis=0)
            filled = np.where(np.isfinite(table), table, 0.0)
            mean = np.where(counts > 0, filled.sum(axis=0) / np.maximum(counts, 1), np.nan)
            centered = np.where(np.isfinite(table), table - mean, 0.0)
            std = np.sqrt((centered ** 2).sum(axis=0) / np.maximum(counts, 1))
            ax.plot(x, mean, color="tab:blue", marker="o", label="mean return")
            if len(curves) > 1:
                ax.fill_between(x, mean - 2 * std, mean + 2 * std, color="tab:blue", alpha=0.2, label="±2 std")
        if baseline is not None:
            ax.axhline(baseline, color="tab:red", linestyle="--", label="random policy")
        ax.set_xlabel("iteration")
        ax.set_ylabel("return")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()

        path = self.output_dir / filename
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        return path


def curves_from_episodes(frame: pd.DataFrame) -> List[List[Optional[float]]]:
    """
    episodes.csv から反復ごとのリターン列を復元する

    learned の行で新しい反復が始まり、直後の eval 行があればその平均を使う。
    """
    curves = []
    for _, group in frame.groupby(["run_id", "seed"], sort=True):
        curve: List[Optional[float]] = []
        learned: Optional[float] = None
        evals: List[float] = []
        for row in group.sort_values("episode").itertuples(index=False):
            if row.kind == "learned":
                if learned is not None:
                    curve.append(float(np.mean(evals)) if evals else learned)
                learned, evals = float(row.native_return), []
            elif row.kind == "eval" and learned is not None:
                evals.append(float(row.native_return))
        if learned is not None:
            curve.append(float(np.mean(evals)) if evals else learned)
        curves.append(curve)
    return curves


def plot_from_csv(
    csv_path: Union[str, Path],
    output_path: Optional[Union[str, Path]] = None,
    baseline: Optional[float] = None,
) -> Path:
    """episodes.csv だけから学習曲線を描き直す（baseline はランダム方策の平均リターン）"""
    csv_path = Path(csv_path)
    frame = pd.read_csv(csv_path)
    missing = [c for c in ("run_id", "seed", "episode", "kind", "native_return") if c not in frame.columns]
    if missing:
        raise ValueError(f"episodes file is missing columns: {', '.join(missing)}")

    output_path = Path(output_path) if output_path else csv_path.with_name("learning_curve.svg")
    generator = ReportGenerator(output_path.parent)
    return generator.plot_learning_curve(curves_from_episodes(frame), baseline=baseline, filename=output_path.name)
