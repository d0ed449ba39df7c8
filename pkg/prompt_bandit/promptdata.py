"""Trajectory, segment and prompt data model.

このモジュールは、プロンプトを構成するデータの生成と変換を担当します。

- 専門家デモンストレーションの生成と return-to-go の計算
- 上位パーセンタイルの抽出とセグメントの列挙（DemoPool）
- J個のセグメントからのプロンプト組み立て
- プロンプトとフラットなトークン列との相互変換

トークンは1遷移あたり (rtg, s_x, s_y, a_x, a_y, a_stop) の6個で、
プロンプト全体の長さは J·H·6 になります。
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import accumulate

import numpy as np

from .env2d import (
    Action,
    EnvConfig,
    EnvState,
    Task,
    Vec2,
    expert_action,
    initial_state,
    step,
)

logger = logging.getLogger(__name__)

TOKEN_WIDTH = 6  # rtg(1) + state(2) + action(3)


@dataclass(frozen=True)
class Transition:
    """(return-to-go, 状態, 行動) の三つ組.

    Attributes:
        rtg: return-to-go
        state: 行動前の2D座標
        action: (translate_x, translate_y, stop) でstopは0.0/1.0
    """

    rtg: float
    state: Vec2
    action: tuple[float, float, float]

    def tokens(self) -> tuple[float, float, float, float, float, float]:
        """トークン並び (rtg, s_x, s_y, a_x, a_y, a_stop)."""
        return (self.rtg, *self.state, *self.action)


@dataclass(frozen=True)
class Trajectory:
    """1エピソード分の遷移列.

    rtg_t は t 以降の報酬の総和で、rtg_0 は episodic_return に等しい。
    """

    transitions: tuple[Transition, ...]
    rewards: tuple[float, ...]
    episodic_return: float
    task_id: int
    trajectory_id: int

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass(frozen=True)
class Segment:
    """軌跡から切り出した長さHの連続区間.

    source と segment_id は出自情報で、等価比較には使わない
    （トークンから復元したセグメントは出自を持たない）。
    """

    transitions: tuple[Transition, ...]
    source: tuple[int, int] | None = field(default=None, compare=False)
    segment_id: int | None = field(default=None, compare=False)

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    def mean_state(self) -> Vec2:
        """セグメント内の状態の平均座標."""
        xs = [t.state[0] for t in self.transitions]
        ys = [t.state[1] for t in self.transitions]
        return (math.fsum(xs) / len(xs), math.fsum(ys) / len(ys))


@dataclass(frozen=True)
class Prompt:
    """J個のセグメントからなる軌跡プロンプト."""

    segments: tuple[Segment, ...]

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    @property
    def horizon(self) -> int:
        return self.segments[0].horizon if self.segments else 0

    def states(self) -> np.ndarray:
        """全セグメントの状態を (J·H, 2) 配列で返す."""
        return np.array([t.state for seg in self.segments for t in seg.transitions], dtype=float)

    def mean_state(self) -> Vec2:
        """プロンプト中の全状態トークンの平均座標."""
        mean = self.states().mean(axis=0)
        return (float(mean[0]), float(mean[1]))


@dataclass(frozen=True)
class DemoPool:
    """タスクごとの専門家デモンストレーションと候補セグメント.

    構築後は不変で、並列ロールアウト間で共有できる。
    segments[i].segment_id == i が常に成り立つ。
    """

    task_id: int
    trajectories: tuple[Trajectory, ...]
    segments: tuple[Segment, ...]
    horizon: int
    stride: int

    def __len__(self) -> int:
        return len(self.segments)

    def segment_centroids(self) -> np.ndarray:
        """各セグメントの平均状態を (n, 2) 配列で返す."""
        return np.array([seg.mean_state() for seg in self.segments], dtype=float).reshape(-1, 2)


def compute_rtg(rewards: Sequence[float]) -> list[float]:
    """報酬列から return-to-go（後ろからの累積和）を計算する.

    例: [0, 0, 10] → [10, 10, 10]

    Raises:
        PromptError: 空の入力または非有限値
    """
    if not rewards:
        raise PromptError("rewards must be non-empty")
    if not all(math.isfinite(r) for r in rewards):
        raise PromptError("rewards must be finite")
    suffix = list(accumulate(reversed(rewards)))
    suffix.reverse()
    return [float(v) for v in suffix]


def generate_demonstrations(
    task: Task,
    n_episodes: int,
    noise_scale: float,
    seed: int,
    cfg: EnvConfig | None = None,
) -> list[Trajectory]:
    """スクリプト化された専門家でデモンストレーションを生成する.

    同じseedなら完全に同一の軌跡列を返す。

    Args:
        task: 対象タスク
        n_episodes: エピソード数
        noise_scale: 専門家の行動ノイズの標準偏差
        seed: 乱数シード
        cfg: 環境設定

    Raises:
        PromptError: n_episodes が正でない
    """
    if n_episodes <= 0:
        raise PromptError(f"n_episodes must be positive, got {n_episodes}")
    cfg = cfg or EnvConfig()
    rng = np.random.default_rng(seed)

    trajectories = []
    for episode in range(n_episodes):
        state: EnvState = initial_state()
        states: list[Vec2] = []
        actions: list[Action] = []
        rewards: list[float] = []
        done = False
        while not done:
            action = expert_action(state, task, noise_scale, rng, cfg)
            states.append(state.position)
            actions.append(action)
            state, reward, done = step(state, action, task, cfg)
            rewards.append(reward)
        trajectories.append(trajectory_from_steps(states, actions, rewards, task.task_id, episode))

    logger.debug(
        "Generated %d demonstrations for task %d (noise=%.3f)", n_episodes, task.task_id, noise_scale
    )
    return trajectories


def top_percentile(trajectories: Sequence[Trajectory], pct: float) -> list[Trajectory]:
    """episodic_returnの上位pct%の軌跡を返す.

    ⌈pct/100·n⌉本を return の降順で返し、同点は入力の並びが先のものを優先する。

    Raises:
        PromptError: 空の入力またはpctが (0, 100] の外
    """
    if not trajectories:
        raise PromptError("cannot take a percentile of an empty trajectory list")
    if not 0 < pct <= 100:
        raise PromptError(f"pct must lie in (0, 100], got {pct}")
    n = len(trajectories)
    keep = min(n, max(1, math.ceil(pct * n / 100)))
    order = sorted(range(n), key=lambda i: (-trajectories[i].episodic_return, i))
    return [trajectories[i] for i in order[:keep]]


def enumerate_segments(
    trajectories: Sequence[Trajectory], horizon: int, stride: int
) -> list[Segment]:
    """軌跡から長さHのセグメントをstride間隔で列挙する.

    開始位置は 0, stride, 2·stride, … (start+H ≤ L)。最後の窓が軌跡の末尾に
    届かない場合は、末尾に揃えた窓 (start = L−H) を1つ追加する。
    ゴール直前の状態は必ずどれかのセグメントに入る。

    segment_idは軌跡順→開始位置順の通し番号。Hより短い軌跡からは何も出ない。
    """
    if horizon < 1:
        raise PromptError(f"H must be at least 1, got {horizon}")
    if stride < 1:
        raise PromptError(f"stride must be at least 1, got {stride}")

    segments: list[Segment] = []
    for trajectory in trajectories:
        last = len(trajectory) - horizon
        if last < 0:
            continue
        starts = list(range(0, last + 1, stride))
        if starts[-1] != last:
            starts.append(last)
        for start in starts:
            segments.append(
                Segment(
                    transitions=trajectory.transitions[start : start + horizon],
                    source=(trajectory.trajectory_id, start),
                    segment_id=len(segments),
                )
            )
    return segments


def build_pool(
    task: Task,
    horizon: int,
    n_episodes: int = 100,
    noise_scale: float = 0.05,
    top_pct: float = 10.0,
    stride: int | None = None,
    seed: int = 0,
    cfg: EnvConfig | None = None,
) -> DemoPool:
    """デモ生成→上位抽出→セグメント列挙をまとめて行う.

    strideを省略するとHと同じ（重ならないセグメント）になる。
    """
    stride = stride or horizon
    demos = generate_demonstrations(task, n_episodes, noise_scale, seed, cfg)
    kept = top_percentile(demos, top_pct)
    return make_pool(task.task_id, kept, horizon, stride)


def make_pool(
    task_id: int, trajectories: Sequence[Trajectory], horizon: int, stride: int
) -> DemoPool:
    """保持する軌跡からDemoPoolを作る."""
    segments = enumerate_segments(trajectories, horizon, stride)
    if not segments:
        raise PromptError(f"task {task_id}: no trajectory is long enough for H={horizon}")
    return DemoPool(
        task_id=task_id,
        trajectories=tuple(trajectories),
        segments=tuple(segments),
        horizon=horizon,
        stride=stride,
    )


def assemble_prompt(pool: DemoPool, indices: Sequence[int]) -> Prompt:
    """segment_idの列からプロンプトを組み立てる（重複可）.

    Raises:
        PromptError: 範囲外のsegment_id
    """
    if not indices:
        raise PromptError("a prompt needs at least one segment")
    for index in indices:
        if not 0 <= index < len(pool.segments):
            raise PromptError(
                f"segment_id {index} out of range for a pool of {len(pool.segments)} segments"
            )
    return Prompt(segments=tuple(pool.segments[index] for index in indices))


def encode_tokens(prompt: Prompt) -> np.ndarray:
    """プロンプトをフラットなトークン列に変換する.

    並びはセグメント順→時刻順で、各遷移が (rtg, s_x, s_y, a_x, a_y, a_stop)。
    """
    return np.array(
        [token for seg in prompt.segments for t in seg.transitions for token in t.tokens()],
        dtype=np.float64,
    )


def decode_tokens(tokens: np.ndarray | Sequence[float], num_segments: int, horizon: int) -> Prompt:
    """トークン列をプロンプトに戻す（encode_tokensの逆変換）.

    復元したセグメントは出自情報を持たない。

    Raises:
        PromptError: 長さが J·H·6 と一致しない
    """
    flat = np.asarray(tokens, dtype=np.float64).ravel()
    expected = num_segments * horizon * TOKEN_WIDTH
    if flat.shape[0] != expected:
        raise PromptError(
            f"token vector has length {flat.shape[0]}, expected {expected} "
            f"(J={num_segments}, H={horizon})"
        )
    rows = flat.reshape(num_segments, horizon, TOKEN_WIDTH).tolist()
    segments = tuple(
        Segment(
            transitions=tuple(
                Transition(rtg=row[0], state=(row[1], row[2]), action=(row[3], row[4], row[5]))
                for row in seg_rows
            )
        )
        for seg_rows in rows
    )
    return Prompt(segments=segments)


def prompt_states(tokens: np.ndarray) -> np.ndarray:
    """トークン列から状態トークンだけを (n, 2) 配列で取り出す."""
    flat = np.asarray(tokens, dtype=np.float64).ravel()
    if flat.shape[0] == 0 or flat.shape[0] % TOKEN_WIDTH:
        raise PromptError(f"token vector length {flat.shape[0]} is not a multiple of {TOKEN_WIDTH}")
    return flat.reshape(-1, TOKEN_WIDTH)[:, 1:3]


def trajectory_from_steps(
    states: Sequence[Vec2],
    actions: Sequence[Action],
    rewards: Sequence[float],
    task_id: int,
    trajectory_id: int = 0,
) -> Trajectory:
    """ロールアウトの記録 (行動前の状態, 行動, 報酬) から Trajectory を作る."""
    rtg = compute_rtg(rewards)
    transitions = tuple(
        Transition(
            rtg=g,
            state=s,
            action=(a.translate[0], a.translate[1], 1.0 if a.stop else 0.0),
        )
        for g, s, a in zip(rtg, states, actions, strict=True)
    )
    return Trajectory(
        transitions=transitions,
        rewards=tuple(rewards),
        episodic_return=rtg[0],
        task_id=task_id,
        trajectory_id=trajectory_id,
    )


class PromptError(Exception):
    """プロンプトデータの不正.

    例:
        raise PromptError("segment_id 999 out of range for a pool of 40 segments")
        raise PromptError("token vector has length 17, expected 18 (J=1, H=3)")
    """

    pass
