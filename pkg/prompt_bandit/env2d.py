"""2D point-navigation environment with goal-parameterized tasks.

このモジュールは、原点から出発して目標座標へ移動する2Dナビゲーション環境を担当します。

- タスクは (半径, 角度) で決まる60個の目標座標
- 行動は並進ベクトル (半径0.1の円に射影) と二値のstop
- 報酬はstop時 (またはステップ上限到達時) にだけ与えられる疎な終端報酬

環境は純粋関数と小さな状態レコードで構成されており、共有される可変状態はありません。
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

Vec2 = tuple[float, float]

TASK_RADII: tuple[float, ...] = (0.9, 1.9, 2.9)
TASK_ANGLE_STEPS = 20
ANGLE_STEP = 0.1 * math.pi

# 射影の許容誤差（ゴールへのスナップが丸め誤差で縮まないようにする）
PROJECTION_TOLERANCE = 1e-9
_GRID_TOLERANCE = 1e-9


@dataclass(frozen=True)
class EnvConfig:
    """環境の定数.

    Attributes:
        step_radius: 1ステップの最大移動量
        stop_bonus: ゴール近傍でstopしたときのボーナス
        proximity_threshold: ボーナスが与えられる距離 δ
        bonus_discount: 最適ステップ数を超過したときのボーナス割引 γ_b
        max_steps: エピソードの最大ステップ数（到達すると強制stop）
    """

    step_radius: float = 0.1
    stop_bonus: float = 10.0
    proximity_threshold: float = 0.15
    bonus_discount: float = 0.99
    max_steps: int = 100

    def __post_init__(self) -> None:
        if not self.step_radius > 0:
            raise EnvError(f"step_radius must be positive, got {self.step_radius}")
        if not 0 < self.proximity_threshold < min(TASK_RADII):
            raise EnvError(
                f"proximity_threshold must lie in (0, {min(TASK_RADII)}), "
                f"got {self.proximity_threshold}"
            )
        if not 0 < self.bonus_discount <= 1:
            raise EnvError(f"bonus_discount must lie in (0, 1], got {self.bonus_discount}")
        min_steps = _ceil_steps(max(TASK_RADII), self.step_radius)
        if self.max_steps < min_steps:
            raise EnvError(f"max_steps must be at least {min_steps}, got {self.max_steps}")

    def to_dict(self) -> dict[str, float | int]:
        """実行メタデータに埋め込むための辞書表現."""
        return asdict(self)


@dataclass(frozen=True)
class Task:
    """1つのナビゲーションタスク.

    Attributes:
        radius: 目標までの距離（0.9, 1.9, 2.9のいずれか）
        angle: 目標の角度 [rad]（0.1π刻み、0.1π〜2π）
        goal: 目標座標 (radius·cos angle, radius·sin angle)
        task_id: 0〜59のタスク番号（半径が主、角度が従）
    """

    radius: float
    angle: float
    goal: Vec2
    task_id: int


@dataclass(frozen=True)
class EnvState:
    """エピソード中の環境状態.

    done は吸収状態で、doneな状態に対してstep()を呼ぶことは契約違反です。
    """

    position: Vec2
    step_count: int
    done: bool


@dataclass(frozen=True)
class Action:
    """エージェントの行動（translateは射影前のベクトル）."""

    translate: Vec2
    stop: bool


def make_task(radius: float, angle: float) -> Task:
    """(radius, angle) からタスクを生成する.

    Args:
        radius: 目標半径（TASK_RADIIのいずれか）
        angle: 目標角度（0.1π·k, k = 1..20）

    Returns:
        目標座標とtask_idを持つTask

    Raises:
        EnvError: 離散グリッド外のパラメータ
    """
    radius_index = _grid_index(radius, TASK_RADII)
    if radius_index is None:
        raise EnvError(f"radius must be one of {TASK_RADII}, got {radius}")

    if not math.isfinite(angle):
        raise EnvError(f"angle must be finite, got {angle}")
    k = round(angle / ANGLE_STEP)
    if not 1 <= k <= TASK_ANGLE_STEPS or abs(angle / ANGLE_STEP - k) > _GRID_TOLERANCE:
        raise EnvError(f"angle must be 0.1*pi*k for k in 1..{TASK_ANGLE_STEPS}, got {angle}")

    canonical_radius = TASK_RADII[radius_index]
    canonical_angle = k * ANGLE_STEP
    goal = (
        canonical_radius * math.cos(canonical_angle),
        canonical_radius * math.sin(canonical_angle),
    )
    task_id = radius_index * TASK_ANGLE_STEPS + (k - 1)
    return Task(radius=canonical_radius, angle=canonical_angle, goal=goal, task_id=task_id)


def make_task_by_id(task_id: int) -> Task:
    """task_idからタスクを生成する."""
    if not 0 <= task_id < len(TASK_RADII) * TASK_ANGLE_STEPS:
        raise EnvError(f"task_id out of range: {task_id}")
    radius_index, angle_index = divmod(task_id, TASK_ANGLE_STEPS)
    return make_task(TASK_RADII[radius_index], (angle_index + 1) * ANGLE_STEP)


def all_tasks() -> list[Task]:
    """60タスクすべてをtask_id順に返す."""
    return [make_task_by_id(task_id) for task_id in range(len(TASK_RADII) * TASK_ANGLE_STEPS)]


def tasks_with_radius(radius: float | None) -> list[Task]:
    """半径でフィルタしたタスク一覧（Noneなら全タスク）."""
    if radius is None:
        return all_tasks()
    if _grid_index(radius, TASK_RADII) is None:
        raise EnvError(f"radius must be one of {TASK_RADII}, got {radius}")
    return [task for task in all_tasks() if math.isclose(task.radius, radius)]


def initial_state() -> EnvState:
    """初期状態（原点、0ステップ）."""
    return EnvState(position=(0.0, 0.0), step_count=0, done=False)


def project_action(raw: Vec2, step_radius: float = 0.1) -> Vec2:
    """並進ベクトルを半径step_radiusの円に射影する.

    ノルムがstep_radius以下（許容誤差込み）ならそのまま返し、
    超えていれば方向を保ったままstep_radiusに縮める。

    Raises:
        EnvError: 非有限の入力
    """
    x, y = raw
    if not (math.isfinite(x) and math.isfinite(y)):
        raise EnvError(f"translate must be finite, got {raw!r}")
    norm = math.hypot(x, y)
    if norm <= step_radius + PROJECTION_TOLERANCE:
        return (x, y)
    scale = step_radius / norm
    return (x * scale, y * scale)


def step_toward(position: Vec2, target: Vec2, step_radius: float = 0.1) -> Vec2:
    """targetへ向かう上限付きの1ステップ.

    targetまでの距離がstep_radius以内ならtargetにぴったり乗る差分を返す。
    """
    dx = target[0] - position[0]
    dy = target[1] - position[1]
    dist = math.hypot(dx, dy)
    if dist <= step_radius + PROJECTION_TOLERANCE:
        return (dx, dy)
    scale = step_radius / dist
    return (dx * scale, dy * scale)


def distance(a: Vec2, b: Vec2) -> float:
    """2点間のユークリッド距離."""
    return math.hypot(a[0] - b[0], a[1] - b[1])


def optimal_steps(task: Task, cfg: EnvConfig) -> int:
    """原点からゴールまでの最短ステップ数 ceil(radius / step_radius)."""
    return _ceil_steps(task.radius, cfg.step_radius)


def return_floor(cfg: EnvConfig) -> float:
    """エピソード報酬の下限 −(最大半径 + max_steps·step_radius)."""
    return -(max(TASK_RADII) + cfg.max_steps * cfg.step_radius)


def step(
    state: EnvState, action: Action, task: Task, cfg: EnvConfig
) -> tuple[EnvState, float, bool]:
    """環境を1ステップ進める.

    stop行動も並進を適用してから終了する。終端報酬は移動後の位置で測った
    ゴールまでの距離 d を使い、−d に加えて d ≤ δ ならボーナス
    stop_bonus·γ_b^max(0, step_count+1 − optimal_steps) を与える。
    step_count+1 が max_steps に達した場合は強制stopとして同じ式を使う。

    Returns:
        (次の状態, 報酬, done)

    Raises:
        EnvError: doneな状態をstepした（契約違反）
    """
    if state.done:
        raise EnvError("step() called on a finished episode")

    dx, dy = project_action(action.translate, cfg.step_radius)
    position = (state.position[0] + dx, state.position[1] + dy)
    step_count = state.step_count + 1

    if action.stop or step_count >= cfg.max_steps:
        d = distance(position, task.goal)
        reward = -d
        if d <= cfg.proximity_threshold:
            overage = max(0, step_count - optimal_steps(task, cfg))
            reward += cfg.stop_bonus * cfg.bonus_discount**overage
        return EnvState(position=position, step_count=step_count, done=True), reward, True

    return EnvState(position=position, step_count=step_count, done=False), 0.0, False


def expert_action(
    state: EnvState,
    task: Task,
    noise_scale: float,
    rng: np.random.Generator,
    cfg: EnvConfig | None = None,
) -> Action:
    """スクリプト化された専門家の行動.

    ゴールへ向かう上限付きステップに等方ガウスノイズを加え、再射影する。
    stopは移動後の位置がゴールから δ/2 以内になるときにTrue。
    ノイズ0ならちょうど optimal_steps ステップ目にゴール上でstopする。
    """
    cfg = cfg or EnvConfig()
    if noise_scale < 0:
        raise EnvError(f"noise_scale must be non-negative, got {noise_scale}")

    translate = step_toward(state.position, task.goal, cfg.step_radius)
    if noise_scale > 0:
        noise = rng.normal(0.0, noise_scale, size=2)
        translate = project_action(
            (translate[0] + float(noise[0]), translate[1] + float(noise[1])), cfg.step_radius
        )

    landing = (state.position[0] + translate[0], state.position[1] + translate[1])
    stop = distance(landing, task.goal) <= cfg.proximity_threshold / 2
    return Action(translate=translate, stop=stop)


def _ceil_steps(radius: float, step_radius: float) -> int:
    # 0.9 / 0.1 = 9.000000000000002 のような丸めを吸収
    return math.ceil(radius / step_radius - _GRID_TOLERANCE)


def _grid_index(value: float, grid: tuple[float, ...]) -> int | None:
    for index, candidate in enumerate(grid):
        if abs(value - candidate) <= _GRID_TOLERANCE:
            return index
    return None


class EnvError(Exception):
    """環境の契約違反・不正パラメータ.

    例:
        raise EnvError("radius must be one of (0.9, 1.9, 2.9), got 1.0")
        raise EnvError("step() called on a finished episode")
    """

    pass
