"""Contextual bandit over prompt segments.

このモジュールは、プロンプトの各位置（アーム）ごとに報酬モデルを持ち、
プールのセグメントからプロンプトを選ぶコンテキスト付きバンディットを担当します。

- features(): セグメント→特徴ベクトル（d = 6H + 1）
- ArmState: アームごとのリッジ回帰（A, A_inv, b）
- build_prediction_matrix(): |P|×J の予測行列 Y
- select_prompt(): 列ごとのargmax（UCB/Thompson）または ε-greedy
- update(): 正規化したエピソード報酬で全アームを更新
- save_snapshot()/load_snapshot(): 途中再開用のバージョン付きJSON

アーム数はJに比例して増えるだけで、セグメントの組み合わせは扱いません。
"""

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np

from .promptdata import TOKEN_WIDTH, DemoPool, Prompt, Segment, assemble_prompt
from .storage import StorageError, atomic_write_text

logger = logging.getLogger(__name__)

STATE_SCALE = 3.0
RTG_SCALE = 10.0
SNAPSHOT_VERSION = 1


class Strategy(StrEnum):
    """探索戦略"""

    UCB = "ucb"
    EPS_GREEDY = "eps_greedy"
    THOMPSON = "thompson"


@dataclass(frozen=True)
class BanditConfig:
    """バンディットの設定.

    Attributes:
        strategy: 探索戦略
        alpha: UCBの信頼幅係数
        epsilon: ε-greedyの探索確率
        sigma: Thompsonの事後分布スケール
        ridge: リッジ正則化 λ（Aの初期対角）
        g_min: 報酬正規化の下限
        g_max: 報酬正規化の上限
    """

    strategy: Strategy = Strategy.UCB
    alpha: float = 1.0
    epsilon: float = 0.1
    sigma: float = 0.5
    ridge: float = 1.0
    g_min: float = -6.0
    g_max: float = 10.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.alpha < 0:
            raise BanditError(f"alpha must be non-negative, got {self.alpha}")
        if not 0 <= self.epsilon <= 1:
            raise BanditError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.sigma < 0:
            raise BanditError(f"sigma must be non-negative, got {self.sigma}")
        if not self.ridge > 0:
            raise BanditError(f"ridge must be positive, got {self.ridge}")
        if not self.g_max > self.g_min:
            raise BanditError(f"g_max must exceed g_min, got ({self.g_min}, {self.g_max})")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["strategy"] = str(self.strategy)
        return data


_METHOD_STRATEGIES = {
    "bandit_ucb": Strategy.UCB,
    "bandit_eps": Strategy.EPS_GREEDY,
    "bandit_thompson": Strategy.THOMPSON,
}


def make_bandit_config(method: str, base: BanditConfig | None = None) -> BanditConfig:
    """手法名から戦略を決めた設定を作る.

    Raises:
        BanditError: バンディット系の手法名でない
    """
    strategy = _METHOD_STRATEGIES.get(method)
    if strategy is None:
        raise BanditError(f"'{method}' is not a bandit method")
    return replace(base or BanditConfig(), strategy=strategy)


@dataclass
class ArmState:
    """1アーム分のリッジ回帰モデル.

    A は λI + Σ x xᵀ、A_inv はその逆行列を Sherman–Morrison で逐次更新したもの。
    """

    A: np.ndarray
    A_inv: np.ndarray
    b: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, dim: int, ridge: float = 1.0) -> "ArmState":
        """観測なしのアーム（A = λI, b = 0）"""
        return cls(
            A=np.eye(dim) * ridge,
            A_inv=np.eye(dim) / ridge,
            b=np.zeros(dim),
        )

    @property
    def dim(self) -> int:
        return int(self.b.shape[0])

    @property
    def theta(self) -> np.ndarray:
        """リッジ回帰の係数 θ = A⁻¹b"""
        return self.A_inv @ self.b

    def observe(self, x: np.ndarray, reward: float) -> None:
        """1観測 (x, r̃) を取り込む"""
        a_inv_x = self.A_inv @ x
        denom = 1.0 + float(x @ a_inv_x)
        self.A += np.outer(x, x)
        self.A_inv -= np.outer(a_inv_x, a_inv_x) / denom
        self.b += reward * x
        self.count += 1

    def inverse_error(self) -> float:
        """‖A·A_inv − I‖_max"""
        return float(np.max(np.abs(self.A @ self.A_inv - np.eye(self.dim))))


@dataclass
class BanditState:
    """J本のアームと選択履歴.

    history には1ラウンドごとに (選んだsegment_id列, G) を1つ追加する。
    """

    arms: list[ArmState]
    feature_dim: int
    config: BanditConfig
    history: list[tuple[tuple[int, ...], float]] = field(default_factory=list)

    @classmethod
    def fresh(cls, num_arms: int, feature_dim: int, config: BanditConfig) -> "BanditState":
        if num_arms < 1:
            raise BanditError(f"need at least one arm, got {num_arms}")
        arms = [ArmState.fresh(feature_dim, config.ridge) for _ in range(num_arms)]
        return cls(arms=arms, feature_dim=feature_dim, config=config)

    @property
    def num_arms(self) -> int:
        return len(self.arms)


@dataclass(frozen=True)
class PredictionMatrix:
    """予測行列 Y.

    Attributes:
        values: 選択スコア (|P|, J)
        means: 平均予測 (|P|, J)
    """

    values: np.ndarray
    means: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        rows, cols = self.values.shape
        return int(rows), int(cols)


def features(segment: Segment) -> np.ndarray:
    """セグメントの特徴ベクトル.

    トークンを平坦化し、rtgを RTG_SCALE、状態を STATE_SCALE で割り、
    末尾にバイアス項 1.0 を付ける。長さは 6H + 1。
    """
    rows = np.array([t.tokens() for t in segment.transitions], dtype=np.float64).reshape(
        -1, TOKEN_WIDTH
    )
    rows[:, 0] /= RTG_SCALE
    rows[:, 1:3] /= STATE_SCALE
    return np.append(rows.ravel(), 1.0)


def feature_matrix(segments: Sequence[Segment]) -> np.ndarray:
    """全セグメントの特徴を (n, d) 行列にまとめる"""
    if not segments:
        raise BanditError("cannot build features for an empty pool")
    return np.stack([features(seg) for seg in segments])


def normalize_return(g: float, config: BanditConfig) -> float:
    """G を [0, 1] に正規化する（範囲外は切り詰め）"""
    scaled = (g - config.g_min) / (config.g_max - config.g_min)
    return min(max(scaled, 0.0), 1.0)


def predict(
    arm: ArmState,
    x: np.ndarray,
    config: BanditConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """1セグメント×1アームの選択スコア.

    - ucb: xᵀθ + α·sqrt(xᵀA⁻¹x)
    - thompson: xᵀθ̃（θ̃ ~ N(θ, σ²A⁻¹)）
    - eps_greedy: xᵀθ

    Raises:
        BanditError: 次元が一致しない、またはthompsonでrngがない
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (arm.dim,):
        raise BanditError(f"feature vector has shape {x.shape}, expected ({arm.dim},)")

    if config.strategy is Strategy.UCB:
        width = math.sqrt(max(float(x @ arm.A_inv @ x), 0.0))
        return float(x @ arm.theta) + config.alpha * width
    if config.strategy is Strategy.THOMPSON:
        return float(x @ _sample_theta(arm, config.sigma, rng))
    return float(x @ arm.theta)


def build_prediction_matrix(
    state: BanditState, contexts: np.ndarray, rng: np.random.Generator | None = None
) -> PredictionMatrix:
    """全セグメント×全アームの予測行列を作る.

    thompsonでは呼び出しごとにアームあたり1回 θ̃ を引く。

    Args:
        state: バンディットの状態
        contexts: 特徴行列 (|P|, d)
        rng: thompson用の乱数生成器

    Returns:
        PredictionMatrix
    """
    if contexts.ndim != 2 or contexts.shape[0] == 0:
        raise BanditError("prediction needs a non-empty (n, d) feature matrix")
    if contexts.shape[1] != state.feature_dim:
        raise BanditError(
            f"feature matrix has {contexts.shape[1]} columns, expected {state.feature_dim}"
        )

    config = state.config
    means = np.column_stack([contexts @ arm.theta for arm in state.arms])

    if config.strategy is Strategy.UCB:
        widths = np.column_stack(
            [
                np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", contexts, arm.A_inv, contexts), 0.0))
                for arm in state.arms
            ]
        )
        values = means + config.alpha * widths
    elif config.strategy is Strategy.THOMPSON:
        values = np.column_stack(
            [contexts @ _sample_theta(arm, config.sigma, rng) for arm in state.arms]
        )
    else:
        values = means

    return PredictionMatrix(values=values, means=means)


def select_indices(
    matrix: PredictionMatrix, config: BanditConfig, rng: np.random.Generator
) -> list[int]:
    """予測行列から各位置のsegment_idを選ぶ.

    ucb/thompsonは列ごとのargmax（同点は小さいsegment_id）。
    eps_greedyは列ごとに確率εで一様ランダム、それ以外は平均のargmax。
    """
    rows, cols = matrix.shape
    indices: list[int] = []
    for j in range(cols):
        if config.strategy is Strategy.EPS_GREEDY:
            if rng.random() < config.epsilon:
                indices.append(int(rng.integers(rows)))
            else:
                indices.append(int(np.argmax(matrix.means[:, j])))
        else:
            indices.append(int(np.argmax(matrix.values[:, j])))
    return indices


def select_prompt(
    state: BanditState,
    pool: DemoPool,
    rng: np.random.Generator,
    contexts: np.ndarray | None = None,
) -> tuple[list[int], Prompt]:
    """プールからJ個のセグメントを選んでプロンプトを組み立てる.

    同じセグメントが複数の位置に入ってもよい。
    """
    if contexts is None:
        contexts = feature_matrix(pool.segments)
    matrix = build_prediction_matrix(state, contexts, rng)
    indices = select_indices(matrix, state.config, rng)
    return indices, assemble_prompt(pool, indices)


def update(
    state: BanditState, indices: Sequence[int], g: float, contexts: np.ndarray
) -> BanditState:
    """エピソード報酬 G で全アームを更新する.

    位置jのアームは選ばれたセグメントの特徴 x_j と、同じ正規化報酬 r̃ で更新する。

    Raises:
        BanditError: indicesの長さがJでない、Gが非有限、範囲外のsegment_id
    """
    if len(indices) != state.num_arms:
        raise BanditError(f"expected {state.num_arms} segment ids, got {len(indices)}")
    if not math.isfinite(g):
        raise BanditError(f"return must be finite, got {g}")
    n = contexts.shape[0]
    for index in indices:
        if not 0 <= index < n:
            raise BanditError(f"segment_id {index} out of range for {n} segments")

    reward = normalize_return(g, state.config)
    for arm, index in zip(state.arms, indices, strict=True):
        arm.observe(contexts[index], reward)
    state.history.append((tuple(int(i) for i in indices), float(g)))
    logger.debug("Bandit update %s G=%.3f r=%.3f", list(indices), g, reward)
    return state


class PromptBandit:
    """1タスク分のバンディット.

    責務:
    - プールの特徴行列を一度だけ計算して保持
    - ラウンドごとのプロンプト選択と報酬による更新

    ライフサイクル:
    1. PromptBandit(pool, config, J)
    2. 各ラウンドで select_prompt(rng) → ロールアウト → update(indices, G)
    """

    def __init__(
        self,
        pool: DemoPool,
        config: BanditConfig,
        num_segments: int,
        state: BanditState | None = None,
    ) -> None:
        """バンディットを初期化.

        Args:
            pool: タスクのデモプール
            config: バンディット設定
            num_segments: プロンプトのセグメント数 J（アーム数）
            state: 再開用の状態（Noneなら新規）
        """
        self._pool = pool
        self._contexts = feature_matrix(pool.segments)
        dim = int(self._contexts.shape[1])
        if state is None:
            state = BanditState.fresh(num_segments, dim, config)
        elif state.feature_dim != dim or state.num_arms != num_segments:
            raise BanditError(
                f"snapshot has {state.num_arms} arms of dimension {state.feature_dim}, "
                f"expected {num_segments} of dimension {dim}"
            )
        self.state = state

    @property
    def contexts(self) -> np.ndarray:
        return self._contexts

    def build_prediction_matrix(self, rng: np.random.Generator | None = None) -> PredictionMatrix:
        return build_prediction_matrix(self.state, self._contexts, rng)

    def select_prompt(self, rng: np.random.Generator) -> tuple[list[int], Prompt]:
        return select_prompt(self.state, self._pool, rng, self._contexts)

    def update(self, indices: Sequence[int], g: float) -> None:
        update(self.state, indices, g, self._contexts)


def save_snapshot(state: BanditState, path: Path) -> None:
    """状態をバージョン付きJSONに保存する（行列は行優先の入れ子リスト）.

    Raises:
        BanditError: 書き込みに失敗した
    """
    payload = {
        "version": SNAPSHOT_VERSION,
        "feature_dim": state.feature_dim,
        "config": state.config.to_dict(),
        "arms": [
            {
                "A": arm.A.tolist(),
                "A_inv": arm.A_inv.tolist(),
                "b": arm.b.tolist(),
                "count": arm.count,
            }
            for arm in state.arms
        ],
        "history": [{"indices": list(indices), "G": g} for indices, g in state.history],
    }
    try:
        atomic_write_text(Path(path), json.dumps(payload, indent=1) + "\n")
    except StorageError as exc:
        raise BanditError(f"cannot save bandit snapshot: {exc}") from exc


def load_snapshot(path: Path) -> BanditState:
    """save_snapshot() で保存した状態を読み込む.

    Raises:
        BanditError: 読めない、バージョン違い、形状の不一致
    """
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise BanditError(f"cannot read bandit snapshot {path}: {exc}") from exc

    version = payload.get("version")
    if version != SNAPSHOT_VERSION:
        raise BanditError(f"{path}: unsupported snapshot version {version!r}")

    try:
        dim = int(payload["feature_dim"])
        config = BanditConfig(**payload["config"])
        arms = []
        for raw in payload["arms"]:
            arm = ArmState(
                A=np.array(raw["A"], dtype=np.float64),
                A_inv=np.array(raw["A_inv"], dtype=np.float64),
                b=np.array(raw["b"], dtype=np.float64),
                count=int(raw["count"]),
            )
            if arm.A.shape != (dim, dim) or arm.A_inv.shape != (dim, dim) or arm.b.shape != (dim,):
                raise BanditError(f"{path}: arm matrices do not match feature_dim {dim}")
            arms.append(arm)
        history = [(tuple(int(i) for i in h["indices"]), float(h["G"])) for h in payload["history"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise BanditError(f"{path}: malformed snapshot ({exc})") from exc

    return BanditState(arms=arms, feature_dim=dim, config=config, history=history)


def _sample_theta(arm: ArmState, sigma: float, rng: np.random.Generator | None) -> np.ndarray:
    theta = arm.theta
    if sigma == 0:
        return theta
    if rng is None:
        raise BanditError("thompson sampling needs a random generator")
    cov = (arm.A_inv + arm.A_inv.T) / 2
    chol = np.linalg.cholesky(cov)
    return theta + sigma * (chol @ rng.standard_normal(arm.dim))


class BanditError(Exception):
    """バンディットの利用エラー.

    例:
        raise BanditError("expected 2 segment ids, got 1")
        raise BanditError("return must be finite, got nan")
    """

    pass
