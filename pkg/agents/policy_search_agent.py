"""
Policy Search Agent - モデルベース方策探索の学習ループ

機能:
- ランダム制御による初期ロールアウト収集
- GP遷移モデルの学習と再学習（前回のハイパーパラメータを初期値に追加）
- 方策改善 → 安全ゲート → 実行 → データ追加 の反復
- 安全仕様なしの通常モード（J = R）と安全モード（ゲートあり）
- 実行中の制約違反でエピソードを即時打ち切り
- 評価エピソード、成功リターン到達での早期終了
- エピソードごとにシンクへ記録を送る
"""

import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import structlog

from agents.config import RunConfig
from agents.records import EpisodeRecord, RunSummary, TrainingState
from agents.safety_gate import SafetyGate
from core.belief import GaussianBelief, PredictedTrajectory
from core.controllers import Policy, initialize_linear_policy, initialize_rbf_policy
from core.errors import ContractViolationError, ExperimentError, PolicySearchError
from core.gp_dynamics import DynamicsModel, HyperPrior, RegressionDataset, fit_hyperparameters
from core.objectives import (
    RectangleIntegrator,
    RewardSpec,
    SafetySpec,
    composite_objective,
    episode_safety,
    evaluate_trajectory,
    reward_scale,
)
from core.optimizer import ObjectiveEvaluator, PlanningContext, improve_policy
from core.propagation import rollout_beliefs
from environments.base import Environment

logger = structlog.get_logger()

XI_SCALE = 30.0

EpisodeSinkFn = Callable[[EpisodeRecord], None]


class PolicySearchAgent:
    """
    学習ループを実行するエージェント

    Args:
        env: 環境（制約は env.constraint に設定済みであること）
        config: 学習ループの設定
        reward: 計画用の報酬仕様
        safety: 安全仕様。Noneなら通常モード
        priors: GPハイパー事前分布
        sink: 各エピソード記録を受け取るコールバック
        run_id: 記録に付ける識別子
        record_wall_time: Falseなら wall_ms は常に0
    """

    def __init__(
        self,
        env: Environment,
        config: RunConfig,
        reward: RewardSpec,
        safety: Optional[SafetySpec] = None,
        priors: Optional[HyperPrior] = None,
        sink: Optional[EpisodeSinkFn] = None,
        run_id: Optional[str] = None,
        record_wall_time: bool = False,
    ):
        self.env = env
        self.config = config
        self.state_dim = env.spec.state_dim
        self.bounds = env.spec.control_bounds

        if config.init_mean.shape != (self.state_dim,):
            raise ContractViolationError(
                f"m_init has {config.init_mean.shape[0]} entries, environment state dim is {self.state_dim}"
            )
        self.reward = reward.validate(self.state_dim)
        self.priors = priors
        self.sink = sink
        self.run_id = run_id or f"{env.spec.name}-s{config.seed}"
        self.record_wall_time = record_wall_time

        # シードから独立な乱数列を派生させる
        children = np.random.SeedSequence(config.seed).spawn(5)
        self.env_rng = np.random.default_rng(children[0])
        self.action_rng = np.random.default_rng(children[1])
        self.policy_rng = np.random.default_rng(children[2])
        self.seed_rng = np.random.default_rng(children[3])
        self.integrator = RectangleIntegrator(seed=int(children[4].generate_state(1)[0]))

        self.safety: Optional[SafetySpec] = None
        if safety is not None:
            safety.validate(self.state_dim)
            xi = config.xi_init or XI_SCALE * reward_scale(reward, config.init_mean)
            self.safety = safety.with_xi(xi)
        self.gate = SafetyGate(config)

        self.init_belief = GaussianBelief(config.init_mean, config.init_cov).validated()
        self.history: List[EpisodeRecord] = []
        self.iterations: List[Dict[str, object]] = []
        self._episode_counter = 0

        logger.info(
            "PolicySearchAgent initialized",
            env=env.spec.name,
            mode="safe" if self.safety is not None else "plain",
            seed=config.seed,
            xi=None if self.safety is None else self.safety.xi,
        )

    # --- 内部ヘルパー ---
    def _next_seed(self) -> int:
        return int(self.seed_rng.integers(2 ** 31 - 1))

    def _record(self, record: EpisodeRecord) -> EpisodeRecord:
        self.history.append(record)
        self._episode_counter += 1
        if self.sink is not None:
            self.sink(record)
        return record

    def _run_episode(
        self,
        controller: Callable[[np.ndarray], np.ndarray],
        kind: str,
        iteration: int,
        policy: Optional[Policy] = None,
        xi: Optional[float] = None,
        predicted_risk: Optional[float] = None,
    ) -> EpisodeRecord:
        """
        1エピソード実行する

        制御は SUBS サブステップの間保持し、サブステップごとに潜在状態の安全性を確認する。
        違反した時点でエピソードを打ち切る。
        """
        start = time.perf_counter()
        env = self.env
        obs = env.reset(self.env_rng)
        states, latents = [obs], [env.state]
        controls, rewards = [], []
        violated, violation_step = False, None

        if not env.is_safe(env.state):
            violated, violation_step = True, 0

        sim_step = 0
        for _ in range(self.config.horizon):
            if violated:
                break
            u = np.atleast_1d(controller(obs))
            total, terminal = 0.0, False
            for _ in range(self.config.subs):
                obs, r, terminal = env.step(u)
                sim_step += 1
                total += r
                if not env.is_safe(env.state):
                    violated, violation_step = True, sim_step
                    break
                if terminal:
                    break
            states.append(obs)
            latents.append(env.state)
            controls.append(u)
            rewards.append(total)
            if terminal:
                break

        wall_ms = int((time.perf_counter() - start) * 1000) if self.record_wall_time else 0
        record = EpisodeRecord(
            episode=self._episode_counter,
            kind=kind,
            states=np.asarray(states),
            controls=np.asarray(controls).reshape(len(controls), self.bounds.dim),
            native_rewards=np.asarray(rewards),
            violated=violated,
            violation_step=violation_step,
            latent_states=np.asarray(latents),
            policy_snapshot=policy,
            iteration=iteration,
            xi=xi,
            predicted_risk=predicted_risk,
            wall_ms=wall_ms,
        )
        log = logger.warning if violated else logger.info
        log(
            "Episode executed",
            episode=record.episode,
            kind=kind,
            steps=record.steps,
            native_return=round(record.native_return, 6),
            violated=violated,
        )
        return self._record(record)

    def _dataset(self) -> RegressionDataset:
        parts = [
            RegressionDataset.from_episode(r.states, r.controls)
            for r in self.history
            if r.kind in ("random", "learned") and r.steps > 0
        ]
        if not parts:
            raise ExperimentError("no executed transitions to learn from", history=self.history)
        return RegressionDataset.concat(parts)

    def _fit_model(self, previous: Optional[DynamicsModel]) -> DynamicsModel:
        dataset = self._dataset()
        start = DynamicsModel.with_default_hyperparameters(dataset, self.config.normalize_data)
        model = fit_hyperparameters(
            start,
            priors=self.priors,
            restarts=self.config.gp_restarts,
            fixed_noise=self.config.fixed_noise,
            seed=self._next_seed(),
            warm_start=None if previous is None else previous.hypers,
        )

        executed = sum(r.steps for r in self.history if r.kind in ("random", "learned"))
        if model.dataset.n_points != executed:
            raise ExperimentError(
                f"model has {model.dataset.n_points} rows for {executed} executed transitions",
                history=self.history,
            )
        logger.info("Model fitted", n_points=model.dataset.n_points)
        return model

    def _initial_policy(self, rng: np.random.Generator) -> Policy:
        if self.config.controller == "linear":
            return initialize_linear_policy(self.bounds, self.state_dim, rng)
        observed = np.vstack([r.states for r in self.history if r.steps > 0]) if self.history else None
        return initialize_rbf_policy(
            self.bounds,
            self.config.n_basis,
            self.config.init_mean,
            self.config.init_cov,
            rng,
            states=observed,
        )

    # --- 公開API ---
    def collect_random_rollouts(self) -> List[EpisodeRecord]:
        """J 回、制御範囲内の一様乱数制御でエピソードを実行する（ゲートなし）"""
        records = []
        for _ in range(self.config.J_init_rollouts):
            records.append(
                self._run_episode(lambda _obs: self.bounds.sample(self.action_rng), "random", iteration=0)
            )
        logger.info(
            "Random rollouts collected",
            episodes=len(records),
            violations=sum(r.violated for r in records),
        )
        return records

    def initial_state(self) -> TrainingState:
        """初期ロールアウト後のモデルと方策"""
        model = self._fit_model(None)
        policy = self._initial_policy(self.policy_rng)
        return TrainingState(model, policy, self.safety, self.history, iteration=0)

    def predict(self, model: DynamicsModel, policy: Policy, safety: SafetySpec) -> PredictedTrajectory:
        """ゲート判定用に、検証済みの予測軌道へ期待報酬と安全確率を埋める"""
        traj = rollout_beliefs(model, policy, self.init_belief, self.config.horizon)
        return evaluate_trajectory(traj, self.reward, safety, self.integrator)

    def training_iteration(self, state: TrainingState) -> Tuple[TrainingState, EpisodeRecord]:
        """
        方策改善・安全ゲート・実行・再学習を1回行う

        ブロックされた場合はξを上げて（棄却された最適解から）再最適化する。
        再試行が尽きたら実行せずにブロック記録を返す。

        Returns:
            (更新後の状態, この反復で最後に記録したエピソード)
        """
        config = self.config
        iteration = state.iteration + 1
        context = PlanningContext(
            model=state.model,
            policy=state.policy,
            reward=self.reward,
            safety=state.safety,
            init=self.init_belief,
            horizon=config.horizon,
            integrator=self.integrator,
        )
        evaluator = ObjectiveEvaluator(context)

        def reinitialize(rng: np.random.Generator) -> np.ndarray:
            return self._initial_policy(rng).theta

        policy = state.policy
        safety = state.safety
        blocks = 0
        while True:
            report = improve_policy(
                policy,
                context._replace(safety=safety),
                maxiter=config.maxiter,
                restarts=config.restarts,
                seed=self._next_seed(),
                reinitialize=reinitialize,
                evaluator=evaluator,
            )
            policy = policy.with_theta(report.theta_opt)
            if safety is None:
                risk = None
                break

            predicted = self.predict(state.model, policy, safety)
            q_pred = episode_safety(predicted, safety)
            logger.info(
                "Prediction checked",
                iteration=iteration,
                Q=round(q_pred, 6),
                J=round(composite_objective(predicted, self.reward, safety), 6),
            )
            decision = self.gate.check(q_pred, safety, iteration)
            safety = safety.with_xi(decision.xi)
            risk = decision.risk
            if decision.deploy:
                break

            blocked = self._record(
                EpisodeRecord.blocked(
                    self._episode_counter, iteration, self.state_dim, self.bounds.dim,
                    policy, safety.xi, risk,
                )
            )
            blocks += 1
            if blocks > config.max_gate_retries:
                logger.warning("Gate retries exhausted", iteration=iteration, xi=safety.xi)
                self.safety = safety
                self.iterations.append(
                    {
                        "iteration": iteration,
                        "deployed": False,
                        "return": None,
                        "eval_mean": None,
                        "eval_std": None,
                        "xi": safety.xi,
                        "predicted_risk": risk,
                        "J": report.J_opt,
                        "R": report.R_opt,
                        "Q": report.Q_opt,
                    }
                )
                return TrainingState(state.model, policy, safety, self.history, iteration), blocked

        if safety is not None and risk > safety.epsilon:
            raise ExperimentError(
                f"refusing to execute policy with predicted risk {risk:.4f} > {safety.epsilon}",
                history=self.history,
            )

        xi = None if safety is None else safety.xi
        record = self._run_episode(policy.act, "learned", iteration, policy, xi, risk)

        eval_returns = [
            self._run_episode(policy.act, "eval", iteration, policy, xi, risk).native_return
            for _ in range(config.eval_repeats)
        ]
        eval_mean = float(np.mean(eval_returns)) if eval_returns else None
        self.iterations.append(
            {
                "iteration": iteration,
                "deployed": True,
                "return": eval_mean if eval_mean is not None else record.native_return,
                "eval_mean": eval_mean,
                "eval_std": float(np.std(eval_returns)) if eval_returns else None,
                "xi": xi,
                "predicted_risk": risk,
                "J": report.J_opt,
                "R": report.R_opt,
                "Q": report.Q_opt,
            }
        )

        model = self._fit_model(state.model) if record.steps > 0 else state.model
        self.safety = safety
        return TrainingState(model, policy, safety, self.history, iteration), record

    def run_experiment(self) -> RunSummary:
        """
        ランダムロールアウト → モデル学習 → N回の学習反復

        途中の失敗は、それまでの履歴を持った ExperimentError として送出する。
        """
        try:
            self.collect_random_rollouts()
            state = self.initial_state()
            for _ in range(self.config.N_episodes):
                state, record = self.training_iteration(state)
                if self._succeeded(record):
                    logger.info("Success return reached", iteration=state.iteration)
                    break
        except ExperimentError:
            raise
        except PolicySearchError as e:
            logger.error("Experiment failed", run_id=self.run_id, error=str(e))
            raise ExperimentError(str(e), history=list(self.history)) from e

        summary = RunSummary(
            run_id=self.run_id,
            seed=self.config.seed,
            env=self.env.spec.name,
            epsilon=None if self.safety is None else self.safety.epsilon,
            episodes=list(self.history),
            iterations=list(self.iterations),
        )
        logger.info("Experiment completed", run_id=self.run_id, **summary.aggregates)
        return summary

    def _succeeded(self, record: EpisodeRecord) -> bool:
        target = self.config.success_return
        return (
            target is not None
            and record.kind == "learned"
            and not record.violated
            and record.native_return >= target
        )
