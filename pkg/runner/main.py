"""
Runner Main - 実験ファイルから学習を実行するCLI

機能:
- run: 1シード実行（episodes.csv / summary.json / learning_curve.svg / events.jsonl）
- multi: 複数シードをバッチ並列で実行し aggregate.json / aggregate.md を出力
- baseline: 同じエピソード数の一様ランダム制御の平均リターン
- plot: episodes.csv から学習曲線を描き直す
- 終了コード: 0 成功 / 1 実行時エラー（途中成果物と error.json）/ 2 設定・引数エラー
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import structlog
from dotenv import load_dotenv

from agents.policy_search_agent import PolicySearchAgent
from agents.records import RunSummary
from core.errors import ConfigError, ExperimentError, PolicySearchError
from runner.config import ExperimentConfig, RunnerConfig
from runner.jobs import JobRegistry, run_in_batches
from runner.report import ReportGenerator, plot_from_csv
from runner.sink import EpisodeSink

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def configure_logging(level: str = "INFO") -> None:
    """structlog をプロセスごとに1回設定する"""
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(logging.getLevelName(level.upper())),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


class Runner:
    """実験ファイルを読み込み、シードごとの学習と集計を行う"""

    def __init__(self, config: Optional[RunnerConfig] = None):
        self.config = config or RunnerConfig()
        self.config.validate()
        self.output_dir = Path(self.config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.registry = JobRegistry()

    @staticmethod
    def load(path: Union[str, Path]) -> ExperimentConfig:
        return ExperimentConfig.load(path)

    def _agent(self, experiment: ExperimentConfig, seed: int, sink=None, **overrides) -> PolicySearchAgent:
        run_config = experiment.run_config(seed=seed, **overrides)
        return PolicySearchAgent(
            env=experiment.build_env(),
            config=run_config,
            reward=experiment.build_reward(),
            safety=experiment.build_safety(),
            sink=sink,
            run_id=f"{experiment.name}-s{seed}",
            record_wall_time=self.config.record_wall_time,
        )

    def run_experiment(
        self,
        experiment: ExperimentConfig,
        seed: Optional[int] = None,
        baseline: Optional[float] = None,
    ) -> RunSummary:
        """
        読み込み済みの実験設定で1シード分を実行し成果物を書き出す

        baseline を渡すと学習曲線にランダム方策の破線を描く。

        Raises:
            ExperimentError: 途中で失敗した場合（途中までの成果物と error.json は書き出し済み）
        """
        seed = experiment.loop.seed if seed is None else seed
        run_id = f"{experiment.name}-s{seed}"
        run_dir = self.output_dir / run_id
        reports = ReportGenerator(run_dir)
        sink = EpisodeSink(run_dir / "events.jsonl", run_id, seed)

        agent = self._agent(experiment, seed, sink=sink)
        logger.info("Run starting", run_id=run_id, env=experiment.env.name, output_dir=str(run_dir))
        try:
            summary = agent.run_experiment()
        except ExperimentError as e:
            partial = RunSummary(
                run_id=run_id,
                seed=seed,
                env=agent.env.spec.name,
                epsilon=None if agent.safety is None else agent.safety.epsilon,
                episodes=list(e.history),
                iterations=list(agent.iterations),
            )
            reports.generate_run_report(partial, baseline=baseline)
            reports.write_error_json(e, run_id, seed)
            logger.error("Run failed", run_id=run_id, error=str(e), completed_episodes=len(e.history))
            raise

        reports.generate_run_report(summary, baseline=baseline)
        return summary

    def run_from_config(
        self, path: Union[str, Path], seed: Optional[int] = None, with_baseline: bool = False
    ) -> RunSummary:
        """実験ファイルを読み込んで1シード分を実行する（with_baseline なら同じシードのランダム方策も）"""
        experiment = self.load(path)
        seed = experiment.loop.seed if seed is None else seed
        baseline = self.random_return(experiment, seed) if with_baseline else None
        return self.run_experiment(experiment, seed, baseline=baseline)

    async def run_multi_seed(
        self, path: Union[str, Path], seeds: Sequence[int], with_baseline: bool = True
    ) -> Dict[str, object]:
        """
        複数シードを独立に実行して集計する

        個々のシードの失敗は記録して残りで集計を続ける。全シード失敗なら ExperimentError。
        with_baseline なら同じシードでランダム方策ベースラインも求め、集計と学習曲線に載せる。
        """
        seeds = _check_seeds(seeds)
        experiment = self.load(path)

        jobs = [
            self.registry.register(
                f"{experiment.name}-s{seed}",
                lambda s: self.run_experiment(experiment, s),
                seed,
            )
            for seed in seeds
        ]
        results = await run_in_batches(jobs, self.config.max_concurrency)

        summaries = [r["result"] for r in results if r["status"] == "success"]
        failed = [r["seed"] for r in results if r["status"] != "success"]
        if failed:
            logger.warning("Seeds failed, aggregating survivors", failed_seeds=failed, survivors=len(summaries))
        if not summaries:
            raise ExperimentError(f"all {len(seeds)} seeds failed for {experiment.name}")

        baseline = None
        if with_baseline:
            try:
                baseline = await self._baseline(experiment, seeds)
            except PolicySearchError as e:
                logger.warning("Random baseline failed, plotting without it", error=str(e))

        logger.info("Seed jobs finished", config=experiment.name, **self.registry.get_stats())
        reports = ReportGenerator(self.output_dir / f"{experiment.name}-multi")
        return reports.generate_aggregate_report(summaries, failed_seeds=failed, baseline=baseline)

    def random_return(self, experiment: ExperimentConfig, seed: int) -> float:
        """J + N 回の一様ランダム制御エピソードの平均リターン"""
        budget = experiment.loop.J + experiment.loop.N
        agent = self._agent(experiment, seed, J=budget)
        records = agent.collect_random_rollouts()
        return float(np.mean([r.native_return for r in records]))

    async def baseline_random(self, path: Union[str, Path], seeds: Sequence[int]) -> float:
        """ランダム方策ベースライン（シード平均）"""
        return await self._baseline(self.load(path), _check_seeds(seeds))

    async def _baseline(self, experiment: ExperimentConfig, seeds: List[int]) -> float:
        jobs = [
            self.registry.register(
                f"{experiment.name}-baseline-s{seed}",
                lambda s: self.random_return(experiment, s),
                seed,
            )
            for seed in seeds
        ]
        results = await run_in_batches(jobs, self.config.max_concurrency)

        errors = [r for r in results if r["status"] != "success"]
        if errors:
            raise errors[0]["exception"]
        value = float(np.mean([r["result"] for r in results]))
        logger.info("Random baseline computed", config=experiment.name, seeds=list(seeds), mean_return=value)
        return value


def _check_seeds(seeds: Sequence[int]) -> List[int]:
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("at least one seed is required", [("seeds", "must not be empty")])
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be unique", [("seeds", "contains duplicates")])
    return seeds


def _parse_seeds(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policy-search", description="Safe model-based policy search runner")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one seed")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--baseline", action="store_true", help="also plot the random-policy baseline")

    multi = sub.add_parser("multi", help="run several seeds and aggregate")
    multi.add_argument("config")
    multi.add_argument("--seeds", type=_parse_seeds, required=True)
    multi.add_argument("--no-baseline", action="store_true", help="skip the random-policy baseline")

    baseline = sub.add_parser("baseline", help="mean return of uniform random controls")
    baseline.add_argument("config")
    baseline.add_argument("--seeds", type=_parse_seeds, required=True)

    plot = sub.add_parser("plot", help="re-render learning_curve.svg from episodes.csv")
    plot.add_argument("episodes")
    plot.add_argument("--output", default=None)
    plot.add_argument("--baseline", type=float, default=None, help="random-policy mean return to draw")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """エントリーポイント（終了コードを返す）"""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG

    try:
        config = RunnerConfig()
        config.validate()
    except ValueError as e:
        print(f"invalid runner settings: {e}", file=sys.stderr)
        return EXIT_CONFIG
    configure_logging(config.log_level)

    try:
        if args.command == "plot":
            path = plot_from_csv(args.episodes, args.output, baseline=args.baseline)
            print(path)
            return EXIT_OK

        runner = Runner(config)
        if args.command == "run":
            summary = runner.run_from_config(args.config, seed=args.seed, with_baseline=args.baseline)
            print(runner.output_dir / summary.run_id)
        elif args.command == "multi":
            stats = asyncio.run(
                runner.run_multi_seed(args.config, args.seeds, with_baseline=not args.no_baseline)
            )
            if stats["failed_seeds"]:
                return EXIT_RUNTIME
        else:
            print(asyncio.run(runner.baseline_random(args.config, args.seeds)))
        return EXIT_OK

    except ConfigError as e:
        logger.critical("Invalid configuration", error=str(e))
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except (PolicySearchError, OSError, ValueError) as e:
        logger.critical("Run failed", error=str(e), type=type(e).__name__)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
