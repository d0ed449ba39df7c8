"""Prompt-space baselines: rank-based zeroth-order ascent and hill climbing.

このモジュールは、フラットなプロンプトトークン列を直接動かす比較手法を担当します。

- anneal(): 1 → 0.1 の線形スケジュール（ノイズ幅・学習率）
- perturb(): ガウスノイズによる摂動
- rank_gradient(): m個の摂動の順位から勾配方向を推定
- zo_round(): 1ラウンド = m回の評価 + 1回の勾配上昇
- hc_round(): 1ラウンド = 1回の評価、厳密に良くなったときだけ採用

摂動後のトークンはクリップせず、そのまま方策に渡します。
"""

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

Evaluate = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class ZoConfig:
    """摂動系手法の設定.

    Attributes:
        m: ZOの1ラウンドあたりの摂動数
        eta_start, eta_end: 学習率スケジュール
        eps_start, eps_end: ノイズ幅スケジュール
    """

    m: int = 5
    eta_start: float = 1.0
    eta_end: float = 0.1
    eps_start: float = 1.0
    eps_end: float = 0.1

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ZoError(f"m must be at least 2, got {self.m}")
        for name in ("eta_start", "eta_end", "eps_start", "eps_end"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ZoError(f"{name} must be a non-negative number, got {value}")

    def to_dict(self) -> dict[str, float | int]:
        return asdict(self)


@dataclass(frozen=True)
class ZoState:
    """ZO-RankSGDの反復状態."""

    rho: np.ndarray
    k: int
    K: int
    config: ZoConfig

    @classmethod
    def initial(cls, rho0: np.ndarray, K: int, config: ZoConfig | None = None) -> "ZoState":
        rho = _check_vector(rho0)
        if K < 1:
            raise ZoError(f"K must be at least 1, got {K}")
        return cls(rho=rho, k=0, K=K, config=config or ZoConfig())

    @property
    def finished(self) -> bool:
        return self.k >= self.K


@dataclass(frozen=True)
class HcState:
    """ヒルクライミングの状態.

    g_best はこれまでに評価した候補の最大値（未評価なら -inf）。
    """

    rho_best: np.ndarray
    g_best: float
    config: ZoConfig

    @classmethod
    def initial(cls, rho0: np.ndarray, config: ZoConfig | None = None) -> "HcState":
        return cls(rho_best=_check_vector(rho0), g_best=-math.inf, config=config or ZoConfig())


def anneal(k: int, K: int, start: float = 1.0, end: float = 0.1) -> float:
    """start から end への線形スケジュール.

    例: anneal(125, 250) → 0.55

    Raises:
        ZoError: K < 1 または k が [0, K] の外
    """
    if K < 1:
        raise ZoError(f"K must be at least 1, got {K}")
    if not 0 <= k <= K:
        raise ZoError(f"round {k} outside [0, {K}]")
    return start + (end - start) * k / K


def perturb(rho: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """各要素に N(0, eps²) のノイズを加えた新しいベクトルを返す"""
    if eps < 0:
        raise ZoError(f"eps must be non-negative, got {eps}")
    rho = np.asarray(rho, dtype=np.float64)
    return rho + eps * rng.standard_normal(rho.shape)


def rank_gradient(directions: np.ndarray, returns: np.ndarray, eps: float) -> np.ndarray:
    """摂動方向と評価値の順位から勾配を推定する.

    評価値の降順に順位を付け（同点は平均順位）、重み w_i = (m+1)/2 − rank_i で
    方向を足し合わせて eps·m で割る。重みの総和は0で、評価値を反転すると
    推定値の符号が反転する。

    Args:
        directions: 摂動方向 u_i (m, d)
        returns: 評価値 G_i (m,)
        eps: 摂動の大きさ

    Returns:
        推定勾配 (d,)

    Raises:
        ZoError: m < 2、形状の不一致、非有限の評価値、eps ≤ 0
    """
    directions = np.asarray(directions, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    m = returns.shape[0]
    if m < 2:
        raise ZoError(f"rank gradient needs at least 2 evaluations, got {m}")
    if directions.ndim != 2 or directions.shape[0] != m:
        raise ZoError(f"directions have shape {directions.shape}, expected ({m}, d)")
    if not np.all(np.isfinite(returns)):
        raise ZoError("returns must be finite")
    if not eps > 0:
        raise ZoError(f"eps must be positive, got {eps}")

    ranks = rankdata(-returns, method="average")
    weights = (m + 1) / 2 - ranks
    return np.asarray(weights @ directions / (eps * m), dtype=np.float64)


def zo_round(
    state: ZoState, evaluate: Evaluate, rng: np.random.Generator
) -> tuple[ZoState, list[float], np.ndarray]:
    """ZO-RankSGDを1ラウンド進める.

    anneal(k)の幅で m 個の摂動を作って全て評価し、
    ρ ← ρ + η(k)·∇̂ と更新する。評価の失敗はそのまま伝える。

    Returns:
        (更新後の状態, m個の評価値, 評価した候補 (m, d))
    """
    if state.finished:
        raise ZoError(f"all {state.K} rounds are already done")

    cfg = state.config
    eps = anneal(state.k, state.K, cfg.eps_start, cfg.eps_end)
    eta = anneal(state.k, state.K, cfg.eta_start, cfg.eta_end)

    directions = rng.standard_normal((cfg.m, state.rho.shape[0]))
    candidates = state.rho + eps * directions
    returns = [float(evaluate(candidate)) for candidate in candidates]

    if eps > 0:
        rho = state.rho + eta * rank_gradient(directions, np.array(returns), eps)
    else:
        rho = state.rho
    if not np.all(np.isfinite(rho)):
        raise ZoError(f"iterate became non-finite at round {state.k}")

    logger.debug("ZO round %d: eps=%.3f eta=%.3f best=%.3f", state.k, eps, eta, max(returns))
    return replace(state, rho=rho, k=state.k + 1), returns, candidates


def hc_round(
    state: HcState, evaluate: Evaluate, rng: np.random.Generator, k: int, K: int
) -> tuple[HcState, float, np.ndarray]:
    """ヒルクライミングを1ラウンド進める.

    最良プロンプトを anneal(k) の幅で摂動して1回評価し、
    g_best を厳密に上回ったときだけ採用する。

    Returns:
        (更新後の状態, 候補の評価値, 候補)
    """
    cfg = state.config
    candidate = perturb(state.rho_best, anneal(k, K, cfg.eps_start, cfg.eps_end), rng)
    g = float(evaluate(candidate))
    if g > state.g_best:
        logger.debug("HC round %d: accepted %.3f (was %.3f)", k, g, state.g_best)
        return replace(state, rho_best=candidate, g_best=g), g, candidate
    return state, g, candidate


def _check_vector(rho: np.ndarray) -> np.ndarray:
    rho = np.array(rho, dtype=np.float64).ravel()
    if rho.shape[0] == 0 or not np.all(np.isfinite(rho)):
        raise ZoError("prompt vector must be non-empty and finite")
    return rho


class ZoError(Exception):
    """摂動系手法の利用エラー.

    例:
        raise ZoError("rank gradient needs at least 2 evaluations, got 1")
    """

    pass
