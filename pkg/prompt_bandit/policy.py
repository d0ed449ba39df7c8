"""Prompt-conditioned policies and the rollout driver.

このモジュールは、プロンプトで条件付けられた方策の抽象と、
エピソードを1本実行するロールアウトを担当します。

事前学習済みの Decision Transformer の代わりに、プロンプトから目標を
解析的に読み取る決定的なサロゲート方策を提供します。
ゴール付近の状態を含むプロンプトは目標を正しく復元でき、
原点付近の状態だけのプロンプトは半径を過小評価します。

外部プロセスの方策は server.ExternalPolicy が同じ PromptPolicy として提供します。
"""

import logging
import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Protocol, override

import numpy as np

from .env2d import (
    Action,
    EnvConfig,
    EnvState,
    Task,
    Vec2,
    distance,
    initial_state,
    project_action,
    return_floor,
    step,
    step_toward,
)
from .promptdata import (
    DemoPool,
    Prompt,
    PromptError,
    Trajectory,
    Transition,
    assemble_prompt,
    encode_tokens,
    prompt_states,
    trajectory_from_steps,
)

logger = logging.getLogger(__name__)

RADIUS_CLAMP = 3.5
DEFAULT_CONTEXT_LEN = 20
DEFAULT_INITIAL_RTG = 10.0


@dataclass(frozen=True)
class DecodedGoal:
    """プロンプトから読み取った目標.

    Attributes:
        r_hat: 推定半径（0以上、RADIUS_CLAMPで頭打ち）
        alpha_hat: 推定角度 [rad]
        goal_hat: (r_hat·cos alpha_hat, r_hat·sin alpha_hat)
        degenerate: 全状態が原点だった（alpha_hat = 0 と約束）
    """

    r_hat: float
    alpha_hat: float
    goal_hat: Vec2
    degenerate: bool = False


@dataclass(frozen=True)
class RolloutResult:
    """1エピソードの結果.

    Attributes:
        episodic_return: 割引なしのエピソード報酬 G
        steps: 実行したステップ数
        trajectory: 実際の軌跡（失敗で1ステップも進まなかった場合はNone）
        prompt_mean_state: プロンプト中の全状態トークンの平均
        failed: 外部方策の失敗で G を下限値にした
    """

    episodic_return: float
    steps: int
    trajectory: Trajectory | None
    prompt_mean_state: Vec2
    failed: bool = False


class PromptPolicy(Protocol):
    """プロンプト条件付き方策のインターフェース.

    ライフサイクル:
    1. reset(tokens, max_steps): エピソード開始。tokensはエピソード中固定
    2. act(state, rtg, recent): 各ステップの行動（recentは直近N遷移）
    3. close(): 資源の解放
    """

    def reset(self, tokens: np.ndarray, max_steps: int) -> None: ...

    def act(self, state: EnvState, rtg: float, recent: Sequence[Transition]) -> Action: ...

    def close(self) -> None: ...


def decode_goal(tokens: np.ndarray, num_segments: int, horizon: int) -> DecodedGoal:
    """プロンプトのトークン列から目標を読み取る.

    alpha_hat は全状態の平均座標の角度、r_hat は状態ノルムの最大値を
    [0, RADIUS_CLAMP] に収めたもの。全状態が原点なら alpha_hat = 0。

    Raises:
        PolicyError: 長さが J·H·6 でない、または非有限のトークン
    """
    flat = np.asarray(tokens, dtype=np.float64).ravel()
    expected = num_segments * horizon * 6
    if flat.shape[0] != expected:
        raise PolicyError(f"token vector has length {flat.shape[0]}, expected {expected}")
    return _decode_states(prompt_states(flat))


def surrogate_act(state: EnvState, decoded: DecodedGoal, cfg: EnvConfig) -> Action:
    """サロゲート方策の行動.

    goal_hatへ上限付きで1歩進み、移動後にgoal_hatから δ/2 以内ならstopする。
    """
    translate = step_toward(state.position, decoded.goal_hat, cfg.step_radius)
    landing = (state.position[0] + translate[0], state.position[1] + translate[1])
    stop = distance(landing, decoded.goal_hat) <= cfg.proximity_threshold / 2
    return Action(translate=translate, stop=stop)


class SurrogatePolicy(PromptPolicy):
    """凍結済み方策の代わりに使う決定的なサロゲート.

    reset時にプロンプトから目標を1度だけ読み取り、以後はそこへ直進する。
    rtgと直近文脈は受け取るが使わない。
    """

    def __init__(self, cfg: EnvConfig | None = None) -> None:
        self._cfg = cfg or EnvConfig()
        self._decoded: DecodedGoal | None = None

    @property
    def decoded(self) -> DecodedGoal | None:
        return self._decoded

    @override
    def reset(self, tokens: np.ndarray, max_steps: int) -> None:
        try:
            states = prompt_states(tokens)
        except PromptError as exc:
            raise PolicyError(str(exc)) from exc
        self._decoded = _decode_states(states)

    @override
    def act(self, state: EnvState, rtg: float, recent: Sequence[Transition]) -> Action:
        if self._decoded is None:
            raise PolicyError("act() called before reset()")
        return surrogate_act(state, self._decoded, self._cfg)

    @override
    def close(self) -> None:
        self._decoded = None


def rollout(
    policy: PromptPolicy,
    task: Task,
    prompt: Prompt,
    cfg: EnvConfig,
    context_len: int = DEFAULT_CONTEXT_LEN,
    initial_rtg: float = DEFAULT_INITIAL_RTG,
) -> RolloutResult:
    """プロンプトを固定して方策を1エピソード実行する.

    プロンプトのトークン列は書き込み禁止の配列として方策に渡し、
    エピソード中に変わらない。直近 context_len 遷移の文脈と、
    initial_rtg から獲得報酬を引いたrtgを毎ステップ方策に渡す。

    外部方策が PolicyFailure を出した場合は G を環境の下限値とする。

    Args:
        policy: 方策
        task: タスク
        prompt: プロンプト
        cfg: 環境設定
        context_len: 直近文脈の長さ N
        initial_rtg: 目標return（条件付け用）

    Returns:
        RolloutResult
    """
    tokens = encode_tokens(prompt)
    tokens.setflags(write=False)
    mean_state = prompt.mean_state()

    state = initial_state()
    recent: deque[Transition] = deque(maxlen=context_len)
    rtg = initial_rtg
    states: list[Vec2] = []
    actions: list[Action] = []
    rewards: list[float] = []

    try:
        policy.reset(tokens, cfg.max_steps)
        while not state.done:
            action = policy.act(state, rtg, tuple(recent))
            translate = project_action(action.translate, cfg.step_radius)
            taken = Action(translate=translate, stop=action.stop)
            next_state, reward, _ = step(state, taken, task, cfg)

            recent.append(
                Transition(
                    rtg=rtg,
                    state=state.position,
                    action=(translate[0], translate[1], 1.0 if action.stop else 0.0),
                )
            )
            states.append(state.position)
            actions.append(taken)
            rewards.append(reward)
            rtg -= reward
            state = next_state
    except PolicyFailure as exc:
        logger.warning("Policy failed on task %d: %s (scored as floor return)", task.task_id, exc)
        trajectory = (
            trajectory_from_steps(states, actions, rewards, task.task_id) if rewards else None
        )
        return RolloutResult(
            episodic_return=return_floor(cfg),
            steps=len(rewards),
            trajectory=trajectory,
            prompt_mean_state=mean_state,
            failed=True,
        )

    trajectory = trajectory_from_steps(states, actions, rewards, task.task_id)
    return RolloutResult(
        episodic_return=trajectory.episodic_return,
        steps=len(rewards),
        trajectory=trajectory,
        prompt_mean_state=mean_state,
    )


@dataclass(frozen=True)
class InformativenessReport:
    """プールの「ゴールに近いセグメントほど良い」性質の検査結果.

    violations は、ゴール距離で resolution 以上遠いセグメントに G で
    resolution を超えて負けたセグメントの数。
    """

    task_id: int
    num_segments: int
    violations: int
    max_increase: float
    resolution: float = 0.0

    @property
    def holds(self) -> bool:
        return self.violations == 0


def check_informativeness(
    pool: DemoPool, task: Task, cfg: EnvConfig, resolution: float | None = None
) -> InformativenessReport:
    """単一セグメントのプロンプトで G がゴール距離に対して非増加かを調べる.

    各セグメントについて、平均状態とゴールの距離 d と、そのセグメントだけの
    プロンプトでの G を求める。d の差も G の差も resolution 未満なら同点とみなし、
    d が resolution 以上大きいセグメントの G が resolution を超えて上回る
    セグメントを違反として数える。違反があれば警告を出す。

    Args:
        pool: 検査するプール
        task: プールのタスク
        cfg: 環境設定
        resolution: 同点とみなす幅（Noneなら1ステップの長さ cfg.step_radius）
    """
    resolution = cfg.step_radius if resolution is None else resolution
    policy = SurrogatePolicy(cfg)
    distances = np.empty(len(pool))
    returns = np.empty(len(pool))
    for segment_id in range(len(pool)):
        prompt = assemble_prompt(pool, [segment_id])
        distances[segment_id] = distance(prompt.mean_state(), task.goal)
        returns[segment_id] = rollout(policy, task, prompt, cfg).episodic_return

    order = np.argsort(distances, kind="stable")
    distances = distances[order]
    returns = returns[order]
    # farther[i]: d が d[i] + resolution 以上のセグメントでの G の最大値
    suffix_max = np.append(np.maximum.accumulate(returns[::-1])[::-1], -np.inf)
    farther = suffix_max[np.searchsorted(distances, distances + resolution, side="left")]
    increase = farther - returns
    violating = increase > resolution

    report = InformativenessReport(
        task_id=task.task_id,
        num_segments=len(returns),
        violations=int(violating.sum()),
        max_increase=float(increase[violating].max()) if violating.any() else 0.0,
        resolution=resolution,
    )
    if not report.holds:
        logger.warning(
            "Task %d: return is not monotone in segment distance to goal "
            "(%d of %d segments beaten by a farther one, max increase %.3f)",
            task.task_id,
            report.violations,
            report.num_segments,
            report.max_increase,
        )
    else:
        logger.debug("Task %d: informativeness holds over %d segments", task.task_id, report.num_segments)
    return report


def _decode_states(states: np.ndarray) -> DecodedGoal:
    if not np.all(np.isfinite(states)):
        raise PolicyError("prompt states must be finite")
    if not np.any(states):
        return DecodedGoal(r_hat=0.0, alpha_hat=0.0, goal_hat=(0.0, 0.0), degenerate=True)
    mean = states.mean(axis=0)
    alpha_hat = math.atan2(float(mean[1]), float(mean[0]))
    r_hat = min(max(float(np.max(np.hypot(states[:, 0], states[:, 1]))), 0.0), RADIUS_CLAMP)
    goal_hat = (r_hat * math.cos(alpha_hat), r_hat * math.sin(alpha_hat))
    return DecodedGoal(r_hat=r_hat, alpha_hat=alpha_hat, goal_hat=goal_hat)


class PolicyError(Exception):
    """方策の利用エラー.

    例:
        raise PolicyError("act() called before reset()")
    """

    pass


class PolicyFailure(PolicyError):
    """外部方策のエピソード失敗（タイムアウト・不正な応答）.

    ロールアウトはこれを受け取るとエピソードを下限報酬で打ち切る。
    """

    pass
