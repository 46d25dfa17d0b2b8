"""
Runner Jobs - シードごとの実験ジョブの定義と管理

機能:
- 1シード分の実験をスレッドで実行するジョブ
- ジョブの登録と実行統計
- 実行結果はステータス辞書で返す（例外は外に出さない）
"""

import asyncio
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional

import structlog

logger = structlog.get_logger()


class SeedJob:
    """1シード分の実験を表すジョブ"""

    def __init__(
        self,
        name: str,
        func: Callable[[int], Any],
        seed: int,
    ):
        """
        Args:
            name: ジョブ名
            func: シードを受け取って実行する同期関数（スレッドで実行される）
            seed: 乱数シード
        """
        self.name = name
        self.func = func
        self.seed = seed
        self.last_run: Optional[datetime] = None
        self.run_count = 0
        self.error_count = 0
        self.last_error: Optional[str] = None

    async def run(self) -> Dict[str, Any]:
        """ジョブを実行"""
        start_time = datetime.now()

        try:
            logger.info("Job starting", job=self.name, seed=self.seed)

            result = await asyncio.to_thread(self.func, self.seed)

            self.last_run = datetime.now()
            self.run_count += 1
            duration = (self.last_run - start_time).total_seconds()

            logger.info("Job completed", job=self.name, seed=self.seed, duration=f"{duration:.2f}s")

            return {
                "status": "success",
                "job": self.name,
                "seed": self.seed,
                "start_time": start_time.isoformat(),
                "duration": duration,
                "result": result,
            }

        except Exception as e:
            self.error_count += 1
            self.last_error = str(e)

            logger.error("Job failed", job=self.name, seed=self.seed, error=str(e))

            return {
                "status": "error",
                "job": self.name,
                "seed": self.seed,
                "start_time": start_time.isoformat(),
                "error": str(e),
                "exception": e,
            }


class JobRegistry:
    """ジョブの登録と管理"""

    def __init__(self):
        self.jobs: Dict[str, SeedJob] = {}

    def register(self, name: str, func: Callable[[int], Any], seed: int) -> SeedJob:
        """ジョブを登録（同名のジョブは置き換える）"""
        job = SeedJob(name, func, seed)
        self.jobs[name] = job
        logger.debug("Job registered", job=name, seed=seed)
        return job

    def get_stats(self) -> Dict[str, Any]:
        """ジョブの統計情報を取得"""
        return {
            "total_jobs": len(self.jobs),
            "total_runs": sum(job.run_count for job in self.jobs.values()),
            "total_errors": sum(job.error_count for job in self.jobs.values()),
        }


async def run_in_batches(jobs: List[SeedJob], max_concurrency: int) -> List[Dict[str, Any]]:
    """max_concurrency 件ずつ asyncio.gather で実行し、ジョブ順に結果を返す"""
    if max_concurrency < 1:
        raise ValueError("max_concurrency must be >= 1")

    results: List[Dict[str, Any]] = []
    for start in range(0, len(jobs), max_concurrency):
        batch = jobs[start:start + max_concurrency]
        results.extend(await asyncio.gather(*(job.run() for job in batch)))
    return results
