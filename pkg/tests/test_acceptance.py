"""
Tests for Acceptance - 同梱の実験ファイルによる学習シナリオ

どれも数分〜数十分かかるため slow マーカー付き（既定では実行しない）。
実行するには `pytest -m slow`。
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from runner import Runner, RunnerConfig

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
SEEDS = [0, 1, 2, 3, 4]
GOAL_BONUS = 50.0

pytestmark = pytest.mark.slow


def _runner(tmp_path: Path, monkeypatch) -> Runner:
    monkeypatch.setenv("RUNNER_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("RUNNER_MAX_CONCURRENCY", "5")
    return Runner(RunnerConfig())


def _seed_outputs(runner: Runner, name: str, seed: int):
    run_dir = runner.output_dir / f"{name}-s{seed}"
    summary = json.loads((run_dir / "summary.json").read_text())
    episodes = pd.read_csv(run_dir / "episodes.csv")
    return summary, episodes


class TestLinearCarsSafety:
    """2台の車の安全学習"""

    @pytest.mark.asyncio
    async def test_no_violations_and_some_blocks(self, tmp_path, monkeypatch):
        """5シード中4つ以上で違反ゼロ、かつ1つ以上のシードでブロックが起きるか"""
        runner = _runner(tmp_path, monkeypatch)
        stats = await runner.run_multi_seed(CONFIG_DIR / "linear_cars_safe.toml", SEEDS, with_baseline=False)

        summaries = [_seed_outputs(runner, "linear_cars", seed)[0] for seed in stats["seeds"]]
        clean = sum(1 for s in summaries if s["aggregates"]["constraint_violations"] == 0)
        blocked = sum(1 for s in summaries if s["aggregates"]["blocked_episodes"] >= 1)

        assert stats["failed_seeds"] == []
        assert clean >= 4
        assert blocked >= 1


class TestMountainCarLearning:
    """マウンテンカーの学習"""

    @pytest.mark.asyncio
    async def test_beats_random_and_reaches_goal(self, tmp_path, monkeypatch):
        """最終反復のリターンが同シードのランダム方策を4/5で上回り、3/5以上でゴールに着くか"""
        runner = _runner(tmp_path, monkeypatch)
        config = CONFIG_DIR / "mountain_car.toml"
        stats = await runner.run_multi_seed(config, SEEDS, with_baseline=False)
        experiment = runner.load(config)

        beats, reached = 0, 0
        for seed in stats["seeds"]:
            summary, episodes = _seed_outputs(runner, "mountain_car", seed)
            if summary["aggregates"]["final_return"] > runner.random_return(experiment, seed):
                beats += 1
            learned = episodes[episodes["kind"].isin(["learned", "eval"])]
            # ゴール到達の+100は制御コストの合計（最大12.5）より十分大きい
            if (learned["native_return"] > GOAL_BONUS).any():
                reached += 1

        assert beats >= 4
        assert reached >= 3


class TestPendulumTrend:
    """振り子の振り上げ"""

    @pytest.mark.asyncio
    async def test_final_return_keeps_half_of_improvement(self, tmp_path, monkeypatch):
        """シード平均の最終リターンが、初期（ランダム）から最良までの改善幅の半分以上を保つか"""
        runner = _runner(tmp_path, monkeypatch)
        stats = await runner.run_multi_seed(CONFIG_DIR / "pendulum_swingup.toml", [0, 1, 2], with_baseline=False)

        initial = np.mean(
            [
                _seed_outputs(runner, "pendulum_swingup", seed)[1]
                .query("kind == 'random'")["native_return"]
                .mean()
                for seed in stats["seeds"]
            ]
        )
        means = [it["mean"] for it in stats["per_iteration"] if it["mean"] is not None]
        best, final = max(means), means[-1]

        assert best > initial
        assert final >= initial + 0.5 * (best - initial)
