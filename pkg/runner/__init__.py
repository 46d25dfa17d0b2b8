"""
Runner Package - 実験の実行と成果物の書き出し

Components:
- Runner: 実験ファイルから1シード/複数シードを実行
- RunnerConfig: 環境変数による実行設定
- ExperimentConfig: TOML実験ファイルのスキーマ
- JobRegistry / SeedJob: シードごとのジョブ管理
- EpisodeSink: events.jsonl への追記
- ReportGenerator: CSV・JSON・Markdown・SVG の書き出し
"""

from runner.config import ExperimentConfig, RunnerConfig, default_config
from runner.jobs import JobRegistry, SeedJob, run_in_batches
from runner.main import Runner, configure_logging, main
from runner.report import ReportGenerator, plot_from_csv
from runner.sink import EpisodeSink

__all__ = [
    "Runner",
    "RunnerConfig",
    "ExperimentConfig",
    "default_config",
    "JobRegistry",
    "SeedJob",
    "run_in_batches",
    "EpisodeSink",
    "ReportGenerator",
    "plot_from_csv",
    "configure_logging",
    "main",
]
