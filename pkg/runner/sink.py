"""
Episode Sink - エピソード記録をJSONLに追記する

機能:
- 1エピソード1行の events.jsonl
- 書き込みごとに flush（途中で落ちても完了分は残る）
"""

import json
from pathlib import Path
from typing import Union

import numpy as np
import structlog

from agents.records import EpisodeRecord

logger = structlog.get_logger()


def _jsonable(value):
    if isinstance(value, (np.integer, np.floating, np.bool_)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


class EpisodeSink:
    """PolicySearchAgent の sink として渡すコールバック"""

    def __init__(self, path: Union[str, Path], run_id: str, seed: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self.seed = seed
        self.count = 0
        # 同じ run_id の再実行では古いイベントを残さない
        self.path.write_text("")

    def __call__(self, record: EpisodeRecord) -> None:
        event = {"run_id": self.run_id, "seed": self.seed, **record.to_event()}
        if record.wall_ms:
            event["wall_ms"] = record.wall_ms

        with open(self.path, "a") as f:
            json.dump(event, f, default=_jsonable)
            f.write("\n")
            f.flush()

        self.count += 1
        logger.debug("Episode event written", run_id=self.run_id, episode=record.episode, kind=record.kind)
