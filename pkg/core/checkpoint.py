"""
Checkpoint - モデルと方策のJSON永続化

機能:
- DynamicsModel（データセット・ハイパーパラメータ・正規化フラグ）の保存と復元
- Policy（線形 / RBF、制御範囲つき）の保存と復元
- floatは最短往復表現で書き出すため、読み戻しはビット単位で一致する
"""

import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import structlog

from core.controllers import ControlBounds, LinearPolicy, Policy, RBFPolicy
from core.errors import ContractViolationError
from core.gp_dynamics import DynamicsModel, KernelHyperparams, RegressionDataset

logger = structlog.get_logger()

FORMAT_VERSION = 1

PathLike = Union[str, Path]


def _check_header(data: Dict[str, Any], kind: str) -> None:
    if data.get("kind") != kind:
        raise ContractViolationError(f"expected a {kind} checkpoint, got {data.get('kind')!r}")
    if data.get("format_version") != FORMAT_VERSION:
        raise ContractViolationError(
            f"unsupported {kind} checkpoint format_version {data.get('format_version')!r}"
        )


def model_to_dict(model: DynamicsModel) -> Dict[str, Any]:
    return {
        "kind": "dynamics_model",
        "format_version": FORMAT_VERSION,
        "normalize": model.normalize,
        "inputs": model.dataset.inputs.tolist(),
        "targets": model.dataset.targets.tolist(),
        "hyperparameters": [
            {
                "lengthscales": np.asarray(h.lengthscales).tolist(),
                "signal_variance": float(h.signal_variance),
                "noise_variance": float(h.noise_variance),
            }
            for h in model.hypers
        ],
    }


def model_from_dict(data: Dict[str, Any]) -> DynamicsModel:
    _check_header(data, "dynamics_model")
    dataset = RegressionDataset(data["inputs"], data["targets"])
    hypers = [
        KernelHyperparams(
            np.asarray(h["lengthscales"], dtype=float),
            float(h["signal_variance"]),
            float(h["noise_variance"]),
        )
        for h in data["hyperparameters"]
    ]
    return DynamicsModel(dataset, hypers, normalize=bool(data["normalize"]))


def policy_to_dict(policy: Policy) -> Dict[str, Any]:
    data = {
        "kind": "policy",
        "format_version": FORMAT_VERSION,
        "bounds": {
            "lower": np.asarray(policy.bounds.lower).tolist(),
            "upper": np.asarray(policy.bounds.upper).tolist(),
        },
    }
    data.update(policy.to_dict())
    return data


def policy_from_dict(data: Dict[str, Any]) -> Policy:
    _check_header(data, "policy")
    bounds = ControlBounds(
        np.asarray(data["bounds"]["lower"], dtype=float),
        np.asarray(data["bounds"]["upper"], dtype=float),
    )
    variant = data.get("variant")
    if variant == LinearPolicy.kind:
        return LinearPolicy(data["weights"], data["offset"], bounds)
    if variant == RBFPolicy.kind:
        return RBFPolicy(data["centers"], data["lengthscales"], data["weights"], bounds)
    raise ContractViolationError(f"unknown policy variant {variant!r}")


def _write(path: PathLike, data: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _read(path: PathLike) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_model(model: DynamicsModel, path: PathLike) -> Path:
    path = _write(path, model_to_dict(model))
    logger.info("Model checkpoint saved", path=str(path), n_points=model.dataset.n_points)
    return path


def load_model(path: PathLike) -> DynamicsModel:
    model = model_from_dict(_read(path))
    logger.info("Model checkpoint loaded", path=str(path), n_points=model.dataset.n_points)
    return model


def save_policy(policy: Policy, path: PathLike) -> Path:
    path = _write(path, policy_to_dict(policy))
    logger.info("Policy checkpoint saved", path=str(path), variant=policy.kind)
    return path


def load_policy(path: PathLike) -> Policy:
    return policy_from_dict(_read(path))
