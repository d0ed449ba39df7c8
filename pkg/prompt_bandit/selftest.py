"""Built-in invariant checks (`python -m prompt_bandit selftest`).

このモジュールは、インストール先でそのまま実行できる検査スイートを担当します。
各スイートは SelftestResult を返し、失敗しても残りのスイートは続けて実行します。
"""

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .cmab import (
    BanditConfig,
    BanditState,
    Strategy,
    build_prediction_matrix,
    select_indices,
    update,
)
from .config import RunConfig
from .env2d import (
    Action,
    EnvConfig,
    all_tasks,
    expert_action,
    initial_state,
    make_task,
    step,
)
from .harness import run_cell
from .promptdata import assemble_prompt, build_pool, encode_tokens
from .zoopt import rank_gradient

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelftestResult:
    """1スイートの結果"""

    name: str
    passed: bool
    detail: str
    seconds: float


@dataclass(frozen=True)
class IdentificationResult:
    """合成バンディット問題での識別結果"""

    optimal_fraction: float
    early_regret: float
    late_regret: float


def check_token_count() -> tuple[bool, str]:
    """J=1, H=3 のプロンプトが18トークンになる"""
    task = make_task(2.9, 0.1 * math.pi)
    pool = build_pool(task, horizon=3, n_episodes=10, seed=0)
    length = encode_tokens(assemble_prompt(pool, [0])).shape[0]
    return length == 18, f"J=1, H=3 prompt has {length} tokens"


def check_env_contract(steps: int = 100_000, seed: int = 0) -> tuple[bool, str]:
    """ランダム行動の移動量が上限以内、ノイズなし専門家が全タスクで10.0"""
    cfg = EnvConfig()
    rng = np.random.default_rng(seed)
    tasks = all_tasks()
    worst = 0.0
    state = initial_state()
    task = tasks[0]
    for _ in range(steps):
        if state.done:
            state = initial_state()
            task = tasks[int(rng.integers(len(tasks)))]
        raw = rng.normal(0.0, 0.5, size=2)
        action = Action(translate=(float(raw[0]), float(raw[1])), stop=bool(rng.random() < 0.05))
        next_state, _, _ = step(state, action, task, cfg)
        worst = max(worst, math.dist(next_state.position, state.position))
        state = next_state
    displacement_ok = worst <= cfg.step_radius + 1e-9

    expert_returns = []
    for task in tasks:
        state = initial_state()
        total = 0.0
        while not state.done:
            action = expert_action(state, task, 0.0, rng, cfg)
            state, reward, _ = step(state, action, task, cfg)
            total += reward
        expert_returns.append(total)
    expert_ok = all(g == 10.0 for g in expert_returns)

    return displacement_ok and expert_ok, (
        f"max displacement {worst:.12f} over {steps} steps; "
        f"expert returns in [{min(expert_returns)}, {max(expert_returns)}]"
    )


def check_bandit_linear_algebra(updates: int = 500, dim: int = 19, seed: int = 0) -> tuple[bool, str]:
    """逐次逆行列が直接の逆行列と、θがリッジ回帰の閉形式解と一致する"""
    rng = np.random.default_rng(seed)
    config = BanditConfig(g_min=0.0, g_max=1.0)
    state = BanditState.fresh(1, dim, config)
    contexts = rng.normal(size=(updates, dim))
    rewards = rng.uniform(size=updates)
    for i in range(updates):
        update(state, [i], float(rewards[i]), contexts)

    arm = state.arms[0]
    inverse_err = float(np.max(np.abs(arm.A_inv - np.linalg.inv(arm.A))))
    ridge = np.linalg.solve(config.ridge * np.eye(dim) + contexts.T @ contexts, contexts.T @ rewards)
    theta_err = float(np.max(np.abs(arm.theta - ridge)))
    return inverse_err < 1e-8 and theta_err < 1e-8, (
        f"inverse error {inverse_err:.2e}, ridge error {theta_err:.2e}"
    )


def synthetic_identification(
    seed: int = 0, noise: float = 0.0, rounds: int = 250, num_segments: int = 10
) -> IdentificationResult:
    """正規直交な特徴と線形報酬の合成問題でUCBを回す.

    最適セグメントの報酬は1.0、その他は [0, 0.6]。観測には標準偏差 noise の
    ガウスノイズを加える。後悔は期待報酬の差で数える。
    """
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(num_segments, num_segments)))
    contexts = basis
    rewards = rng.uniform(0.0, 0.6, size=num_segments)
    best = int(rng.integers(num_segments))
    rewards[best] = 1.0
    theta_star = np.linalg.lstsq(contexts, rewards, rcond=None)[0]
    expected = contexts @ theta_star

    config = BanditConfig(strategy=Strategy.UCB, alpha=1.0, g_min=0.0, g_max=1.0)
    state = BanditState.fresh(1, num_segments, config)
    chosen = []
    for _ in range(rounds):
        matrix = build_prediction_matrix(state, contexts, rng)
        index = select_indices(matrix, config, rng)[0]
        observed = float(expected[index] + noise * rng.standard_normal())
        update(state, [index], observed, contexts)
        chosen.append(index)

    regret = [float(expected[best] - expected[i]) for i in chosen]
    late = chosen[150:200]
    return IdentificationResult(
        optimal_fraction=sum(1 for i in late if i == best) / max(len(late), 1),
        early_regret=float(np.mean(regret[:50])),
        late_regret=float(np.mean(regret[200:250])) if rounds >= 250 else math.nan,
    )


def check_identification() -> tuple[bool, str]:
    """ノイズなしで最適を95%以上選び、ノイズありで後悔が20%未満に下がる"""
    clean = synthetic_identification(seed=0, noise=0.0)
    noisy = synthetic_identification(seed=0, noise=0.05)
    ok = clean.optimal_fraction >= 0.95 and noisy.late_regret < 0.2 * noisy.early_regret
    return ok, (
        f"optimal in {clean.optimal_fraction:.0%} of rounds 150-200; "
        f"noisy regret {noisy.early_regret:.4f} -> {noisy.late_regret:.4f}"
    )


def gradient_cosine(trials: int = 100, dim: int = 18, m: int = 5, eps: float = 0.1) -> float:
    """f(ρ) = −‖ρ − ρ*‖² での推定勾配と真の勾配のコサイン類似度の平均"""
    cosines = []
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        target = rng.normal(size=dim)
        rho = rng.normal(size=dim)
        directions = rng.standard_normal((m, dim))
        returns = np.array([-np.sum((rho + eps * u - target) ** 2) for u in directions])
        estimate = rank_gradient(directions, returns, eps)
        true = -2.0 * (rho - target)
        norm = np.linalg.norm(estimate) * np.linalg.norm(true)
        cosines.append(float(estimate @ true / norm) if norm > 0 else 0.0)
    return float(np.mean(cosines))


def check_gradient_oracle() -> tuple[bool, str]:
    cosine = gradient_cosine()
    return cosine > 0.3, f"mean cosine similarity {cosine:.3f}"


def check_budget(rounds: int = 250) -> tuple[bool, str]:
    """ZOはm·K、その他はKエピソードを消費する"""
    task = make_task(2.9, 0.1 * math.pi)
    pool = build_pool(task, horizon=3, n_episodes=20, seed=0)
    counts = {}
    for method in ("uniform", "bandit_ucb", "gaussian_hc", "zo_ranksgd"):
        config = RunConfig(method=method, K=rounds, J=1, H=3, seeds=(0,))
        counts[method] = len(run_cell(config, task, pool, seed=0))
    m = RunConfig().zoopt.m
    ok = counts["zo_ranksgd"] == m * rounds and all(
        count == rounds for method, count in counts.items() if method != "zo_ranksgd"
    )
    return ok, ", ".join(f"{method}={count}" for method, count in counts.items())


def run_selftests(quick: bool = False) -> list[SelftestResult]:
    """全スイートを実行する.

    quick では重いスイートの規模を小さくする（判定基準は同じ）。
    """
    suites: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
        ("token_count", check_token_count),
        ("env_contract", lambda: check_env_contract(10_000 if quick else 100_000)),
        ("bandit_linear_algebra", check_bandit_linear_algebra),
        ("bandit_identification", check_identification),
        ("zo_gradient_oracle", check_gradient_oracle),
        ("budget_accounting", lambda: check_budget(20 if quick else 250)),
    ]
    results = []
    for name, suite in suites:
        started = time.perf_counter()
        try:
            passed, detail = suite()
        except Exception as exc:
            logger.exception("Selftest %s raised", name)
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - started
        level = logging.INFO if passed else logging.ERROR
        logger.log(level, "%s %s (%.2fs): %s", "PASS" if passed else "FAIL", name, elapsed, detail)
        results.append(SelftestResult(name=name, passed=passed, detail=detail, seconds=elapsed))
    return results
