"""Tuning runs, metric aggregation and exploration analysis.

このモジュールは、実験の実行と集計を担当します。

- run_cell(): 1つの (手法, タスク, シード) をKラウンド実行する
- run_tuning(): 全セルを（必要なら並列に）実行し、記録を決定的な順に並べる
- aggregate() / regret_curves(): ラウンドごとの平均・標準偏差の曲線
- scatter_rows() / exploration_summary(): 前半・後半ウィンドウでのプロンプト位置の分析
- generate_pools(): 設定に従ったタスクごとのデモプールの生成
- run_sweep(): プロンプトサイズ J を変えた比較

各セルの乱数は SeedSequence([seed, task_id, 手法コード]) から作るので、
結果はワーカー数や実行順に依存しません。
"""

import logging
import math
import time
from collections import Counter, defaultdict
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .cmab import PromptBandit, make_bandit_config, save_snapshot
from .config import METHODS, PolicyConfig, RunConfig
from .env2d import EnvConfig, Task, Vec2, distance, tasks_with_radius
from .policy import (
    InformativenessReport,
    PromptPolicy,
    RolloutResult,
    SurrogatePolicy,
    check_informativeness,
    rollout,
)
from .promptdata import DemoPool, Prompt, assemble_prompt, build_pool, decode_tokens, encode_tokens
from .server import ExternalPolicy
from .storage import PoolStore, load_pools
from .zoopt import HcState, ZoState, hc_round, zo_round

logger = logging.getLogger(__name__)

METHOD_CODES = {method: code for code, method in enumerate(METHODS)}
EARLY_WINDOW = (0, 20)
LATE_WINDOW = (70, 90)
DEFAULT_SWEEP_J = (1, 2, 4)


@dataclass(frozen=True)
class RoundRecord:
    """1エピソード分の記録.

    ZOは1ラウンドにm件（episode = 0..m-1）、それ以外は1ラウンド1件。
    wall_time は記録ファイルには書かない。

    Attributes:
        round: ラウンド番号 k（0始まり）
        task_id: タスク番号
        method: 手法名
        seed: シード
        episode: ラウンド内のエピソード番号
        episodic_return: G
        segment_ids: 選んだsegment_id列（トークン空間の手法はNone）
        prompt_mean_state: プロンプト中の状態の平均座標
        origin_mean_state: 初期プロンプト ρ_0 の平均座標（トークン空間の手法のみ）
        policy_failed: 外部方策の失敗で下限報酬にした
        wall_time: このエピソードにかかった時間 [秒]
    """

    round: int
    task_id: int
    method: str
    seed: int
    episode: int
    episodic_return: float
    segment_ids: tuple[int, ...] | None
    prompt_mean_state: Vec2
    origin_mean_state: Vec2 | None = None
    policy_failed: bool = False
    wall_time: float = field(default=0.0, compare=False)

    @property
    def sort_key(self) -> tuple[str, int, int, int, int]:
        return (self.method, self.task_id, self.seed, self.round, self.episode)

    def to_dict(self) -> dict[str, Any]:
        """JSON/CSV用の辞書（wall_timeは含めない）"""
        return {
            "method": self.method,
            "task_id": self.task_id,
            "seed": self.seed,
            "round": self.round,
            "episode": self.episode,
            "return": self.episodic_return,
            "segment_ids": list(self.segment_ids) if self.segment_ids is not None else None,
            "mean_x": self.prompt_mean_state[0],
            "mean_y": self.prompt_mean_state[1],
            "origin_x": self.origin_mean_state[0] if self.origin_mean_state else None,
            "origin_y": self.origin_mean_state[1] if self.origin_mean_state else None,
            "policy_failed": self.policy_failed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RoundRecord":
        segment_ids = data.get("segment_ids")
        origin = (
            (float(data["origin_x"]), float(data["origin_y"]))
            if data.get("origin_x") is not None
            else None
        )
        return cls(
            round=int(data["round"]),
            task_id=int(data["task_id"]),
            method=str(data["method"]),
            seed=int(data["seed"]),
            episode=int(data.get("episode", 0)),
            episodic_return=float(data["return"]),
            segment_ids=tuple(int(i) for i in segment_ids) if segment_ids is not None else None,
            prompt_mean_state=(float(data["mean_x"]), float(data["mean_y"])),
            origin_mean_state=origin,
            policy_failed=bool(data.get("policy_failed", False)),
        )


@dataclass(frozen=True)
class Curve:
    """手法ごとのラウンド別 平均・標準偏差.

    runs は平均を取った (タスク, シード) の数。
    """

    method: str
    mean: np.ndarray
    std: np.ndarray
    runs: int

    def __len__(self) -> int:
        return int(self.mean.shape[0])


@dataclass(frozen=True)
class ScatterRow:
    """空間・時間分析用の1点（ウィンドウ内の1エピソード）"""

    method: str
    window: str
    task_id: int
    seed: int
    round: int
    mean_x: float
    mean_y: float
    episodic_return: float


@dataclass(frozen=True)
class ExplorationSummary:
    """手法ごとの探索の広がり.

    Attributes:
        early_goal_distance: 前半ウィンドウでのプロンプト平均状態とゴールの平均距離
        late_goal_distance: 後半ウィンドウでの同じ量
        late_drift: 後半ウィンドウの平均位置と初期プロンプト位置の距離（トークン空間の手法のみ）
        early_span: 前半ウィンドウの点の広がり / プールのセグメント重心の広がり（対角線長の比）
    """

    method: str
    early_goal_distance: float
    late_goal_distance: float
    late_drift: float | None
    early_span: float


@dataclass(frozen=True)
class SweepRow:
    """プロンプトサイズ比較の1行（final_std は (タスク, シード) 間のばらつき）"""

    method: str
    J: int
    final_mean: float
    final_std: float
    runs: int


@dataclass(frozen=True)
class GeneratedPool:
    """gen-data で作った1タスク分のプール.

    Attributes:
        pool: デモプール
        meta: プールファイルのメタデータ行（生成設定・環境定数）
        informativeness: 単一セグメントのプロンプトでの情報性の検査結果
    """

    pool: DemoPool
    meta: dict[str, object]
    informativeness: InformativenessReport


def task_pool_seed(seed: int, task_id: int) -> int:
    """タスクごとのプール生成シード"""
    return int(np.random.SeedSequence([seed, task_id]).generate_state(1)[0])


def generate_pools(config: RunConfig) -> list[GeneratedPool]:
    """config.pool と config.env に従って、config.radius のタスクのプールを作る.

    セグメント長は config.H、間隔は config.pool.stride（Noneなら H）。
    各プールの情報性を検査し、違反は警告として残す。

    Returns:
        task_id順の GeneratedPool
    """
    pool_cfg = config.pool
    tasks = tasks_with_radius(config.radius)
    logger.info("Generating pools for %d tasks (seed %d)", len(tasks), pool_cfg.seed)

    generated = []
    for task in tasks:
        task_seed = task_pool_seed(pool_cfg.seed, task.task_id)
        pool = build_pool(
            task,
            horizon=config.H,
            n_episodes=pool_cfg.episodes,
            noise_scale=pool_cfg.noise,
            top_pct=pool_cfg.top_pct,
            stride=pool_cfg.stride,
            seed=task_seed,
            cfg=config.env,
        )
        meta: dict[str, object] = {
            "radius": task.radius,
            "angle": task.angle,
            "episodes": pool_cfg.episodes,
            "noise": pool_cfg.noise,
            "top_pct": pool_cfg.top_pct,
            "seed": pool_cfg.seed,
            "task_seed": task_seed,
            **config.env.to_dict(),
        }
        report = check_informativeness(pool, task, config.env)
        generated.append(GeneratedPool(pool=pool, meta=meta, informativeness=report))
    return generated


def make_policy(policy_cfg: PolicyConfig, env_cfg: EnvConfig) -> PromptPolicy:
    """設定に応じた方策を作る"""
    if policy_cfg.kind == "external":
        assert policy_cfg.command is not None
        return ExternalPolicy(policy_cfg.command, policy_cfg.step_timeout)
    return SurrogatePolicy(env_cfg)


def cell_rng(seed: int, task_id: int, method: str) -> np.random.Generator:
    """セルごとの独立した乱数生成器"""
    return np.random.default_rng(np.random.SeedSequence([seed, task_id, METHOD_CODES[method]]))


class _Episodes:
    """方策とタスクを束ね、エピソードを実行して記録を作る"""

    def __init__(self, config: RunConfig, task: Task, seed: int, policy: PromptPolicy) -> None:
        self._config = config
        self._task = task
        self._seed = seed
        self._policy = policy
        self._episode_counts: Counter[int] = Counter()
        self.records: list[RoundRecord] = []

    def run(
        self,
        prompt: Prompt,
        k: int,
        segment_ids: Sequence[int] | None = None,
        origin: Vec2 | None = None,
    ) -> RolloutResult:
        episode = self._episode_counts[k]
        self._episode_counts[k] += 1
        started = time.perf_counter()
        result = rollout(
            self._policy,
            self._task,
            prompt,
            self._config.env,
            self._config.policy.context_len,
            self._config.policy.initial_rtg,
        )
        self.records.append(
            RoundRecord(
                round=k,
                task_id=self._task.task_id,
                method=self._config.method,
                seed=self._seed,
                episode=episode,
                episodic_return=result.episodic_return,
                segment_ids=tuple(segment_ids) if segment_ids is not None else None,
                prompt_mean_state=result.prompt_mean_state,
                origin_mean_state=origin,
                policy_failed=result.failed,
                wall_time=time.perf_counter() - started,
            )
        )
        return result

    def token_evaluator(self, k: Callable[[], int], origin: Vec2) -> Callable[[np.ndarray], float]:
        """トークン列を評価する関数（ZO/HC用）"""
        cfg = self._config

        def evaluate(rho: np.ndarray) -> float:
            prompt = decode_tokens(rho, cfg.J, cfg.H)
            return self.run(prompt, k(), origin=origin).episodic_return

        return evaluate


def run_cell(config: RunConfig, task: Task, pool: DemoPool, seed: int) -> list[RoundRecord]:
    """1つの (手法, タスク, シード) をKラウンド実行する.

    Args:
        config: 実行設定（config.method で手法を選ぶ）
        task: タスク
        pool: タスクのデモプール（H・strideは config と一致していること）
        seed: シード

    Returns:
        このセルの記録（K件、ZOはm·K件）

    Raises:
        HarnessError: 未知の手法、またはプールのHが一致しない
    """
    if pool.horizon != config.H:
        raise HarnessError(
            f"pool for task {task.task_id} has H={pool.horizon}, run expects H={config.H}"
        )

    rng = cell_rng(seed, task.task_id, config.method)
    policy = make_policy(config.policy, config.env)
    episodes = _Episodes(config, task, seed, policy)
    logger.info("Running %s on task %d (seed %d)", config.method, task.task_id, seed)

    try:
        method = config.method
        if method in ("uniform", "external"):
            _run_uniform(config, pool, rng, episodes)
        elif method.startswith("bandit_"):
            _run_bandit(config, task, pool, seed, rng, episodes)
        elif method == "gaussian_hc":
            _run_hill_climb(config, pool, rng, episodes)
        elif method == "zo_ranksgd":
            _run_zo(config, pool, rng, episodes)
        else:
            raise HarnessError(f"unknown method '{method}'")
    finally:
        policy.close()

    failures = sum(1 for r in episodes.records if r.policy_failed)
    if failures:
        logger.warning(
            "%s task %d seed %d: %d episodes scored as policy failures",
            config.method,
            task.task_id,
            seed,
            failures,
        )
    return episodes.records


def _run_uniform(
    config: RunConfig, pool: DemoPool, rng: np.random.Generator, episodes: _Episodes
) -> None:
    for k in range(config.K):
        indices = [int(i) for i in rng.integers(len(pool), size=config.J)]
        episodes.run(assemble_prompt(pool, indices), k, segment_ids=indices)


def _run_bandit(
    config: RunConfig,
    task: Task,
    pool: DemoPool,
    seed: int,
    rng: np.random.Generator,
    episodes: _Episodes,
) -> None:
    bandit = PromptBandit(pool, make_bandit_config(config.method, config.bandit), config.J)
    for k in range(config.K):
        indices, prompt = bandit.select_prompt(rng)
        result = episodes.run(prompt, k, segment_ids=indices)
        bandit.update(indices, result.episodic_return)

    if config.snapshots:
        path = Path(config.out) / "snapshots" / f"{config.method}_task_{task.task_id:02d}_seed_{seed}.json"
        save_snapshot(bandit.state, path)
        logger.info("Saved bandit snapshot to %s", path)


def _initial_prompt(config: RunConfig, pool: DemoPool, rng: np.random.Generator) -> Prompt:
    indices = [int(i) for i in rng.integers(len(pool), size=config.J)]
    return assemble_prompt(pool, indices)


def _run_hill_climb(
    config: RunConfig, pool: DemoPool, rng: np.random.Generator, episodes: _Episodes
) -> None:
    start = _initial_prompt(config, pool, rng)
    origin = start.mean_state()
    state = HcState.initial(encode_tokens(start), config.zoopt)
    current = 0
    evaluate = episodes.token_evaluator(lambda: current, origin)
    for k in range(config.K):
        current = k
        state, _, _ = hc_round(state, evaluate, rng, k, config.K)


def _run_zo(
    config: RunConfig, pool: DemoPool, rng: np.random.Generator, episodes: _Episodes
) -> None:
    start = _initial_prompt(config, pool, rng)
    origin = start.mean_state()
    state = ZoState.initial(encode_tokens(start), config.K, config.zoopt)
    evaluate = episodes.token_evaluator(lambda: state.k, origin)
    while not state.finished:
        state, _, _ = zo_round(state, evaluate, rng)


def run_tuning(config: RunConfig, store: PoolStore | None = None) -> list[RoundRecord]:
    """設定された全 (タスク, シード) でチューニングを実行する.

    Args:
        config: 実行設定
        store: 読み込み済みのプール（Noneなら config.pool.directory から読む）

    Returns:
        (手法, タスク, シード, ラウンド, エピソード) 順に並べた記録

    Raises:
        StorageError: 選んだタスクのプールがない（タスク名入り）
    """
    tasks = tasks_with_radius(config.radius)
    task_ids = [task.task_id for task in tasks]
    if store is None:
        store = load_pools(Path(config.pool.directory), task_ids, config.H, config.pool.stride)
    pools = {task.task_id: store.require(task.task_id) for task in tasks}

    cells = [(task, seed) for task in tasks for seed in config.seeds]
    logger.info(
        "Tuning %s: %d tasks x %d seeds, K=%d, J=%d, H=%d, jobs=%d",
        config.method,
        len(tasks),
        len(config.seeds),
        config.K,
        config.J,
        config.H,
        config.jobs,
    )

    records: list[RoundRecord] = []
    if config.jobs == 1:
        for task, seed in cells:
            records.extend(run_cell(config, task, pools[task.task_id], seed))
    else:
        with ProcessPoolExecutor(max_workers=config.jobs) as executor:
            futures = [
                executor.submit(run_cell, config, task, pools[task.task_id], seed)
                for task, seed in cells
            ]
            for future in futures:
                records.extend(future.result())

    records.sort(key=lambda r: r.sort_key)
    logger.info("Finished %s: %d records", config.method, len(records))
    return records


def run_methods(
    config: RunConfig, methods: Sequence[str], store: PoolStore | None = None
) -> list[RoundRecord]:
    """複数の手法を同じ設定で順に実行する"""
    if store is None:
        task_ids = [task.task_id for task in tasks_with_radius(config.radius)]
        store = load_pools(Path(config.pool.directory), task_ids, config.H, config.pool.stride)
    records: list[RoundRecord] = []
    for method in methods:
        records.extend(run_tuning(replace(config, method=method), store))
    records.sort(key=lambda r: r.sort_key)
    return records


def expert_reference(cfg: EnvConfig) -> float:
    """後悔の基準値（ノイズなし専門家のエピソード報酬）"""
    return cfg.stop_bonus


def cumulative_regret(returns: Iterable[float], reference: float) -> list[float]:
    """max(0, reference − G_k) の累積和.

    例: [8, 10], reference 10 → [2, 2]
    """
    series: list[float] = []
    total = 0.0
    for g in returns:
        total += max(0.0, reference - g)
        series.append(total)
    return series


def round_series(records: Iterable[RoundRecord]) -> dict[str, dict[tuple[int, int], np.ndarray]]:
    """手法→(タスク, シード)→ラウンドごとの値（ZOはラウンド内の最大値）.

    Raises:
        HarnessError: ラウンドの抜けがある、または同じ手法内でラウンド数が揃っていない
    """
    grouped: dict[str, dict[tuple[int, int], dict[int, float]]] = defaultdict(
        lambda: defaultdict(dict)
    )
    for record in records:
        cell = grouped[record.method][(record.task_id, record.seed)]
        best = cell.get(record.round, -math.inf)
        cell[record.round] = max(best, record.episodic_return)

    series: dict[str, dict[tuple[int, int], np.ndarray]] = {}
    for method, cells in grouped.items():
        lengths = set()
        series[method] = {}
        for key, by_round in cells.items():
            rounds = sorted(by_round)
            if rounds != list(range(len(rounds))):
                raise HarnessError(
                    f"{method} task {key[0]} seed {key[1]}: rounds are not contiguous from 0"
                )
            lengths.add(len(rounds))
            series[method][key] = np.array([by_round[k] for k in rounds])
        if len(lengths) > 1:
            raise HarnessError(f"{method}: runs cover different round grids {sorted(lengths)}")
    return series


def aggregate(records: Iterable[RoundRecord]) -> dict[str, Curve]:
    """手法ごとのラウンド別 平均・標準偏差（母標準偏差）.

    例: 2つの実行で k ラウンド目が 4 と 6 → 平均 5、標準偏差 1
    """
    return {
        method: _curve(method, list(cells.values()))
        for method, cells in sorted(round_series(records).items())
    }


def regret_curves(records: Iterable[RoundRecord], reference: float) -> dict[str, Curve]:
    """手法ごとの累積後悔の平均・標準偏差"""
    return {
        method: _curve(
            method, [np.array(cumulative_regret(values, reference)) for values in cells.values()]
        )
        for method, cells in sorted(round_series(records).items())
    }


def _curve(method: str, runs: list[np.ndarray]) -> Curve:
    stacked = np.vstack(runs)
    return Curve(method=method, mean=stacked.mean(axis=0), std=stacked.std(axis=0), runs=len(runs))


def final_window_mean(curve: Curve, width: int = 50) -> float:
    """最後の width ラウンドの平均"""
    return float(curve.mean[-width:].mean())


def rounds_to_fraction(curve: Curve, reference: float, fraction: float = 0.95) -> int | None:
    """平均が fraction·reference に初めて届いたラウンド（届かなければNone）"""
    reached = np.flatnonzero(curve.mean >= fraction * reference)
    return int(reached[0]) if reached.size else None


def _window_name(k: int) -> str | None:
    if EARLY_WINDOW[0] <= k < EARLY_WINDOW[1]:
        return "early"
    if LATE_WINDOW[0] <= k < LATE_WINDOW[1]:
        return "late"
    return None


def scatter_rows(records: Iterable[RoundRecord]) -> list[ScatterRow]:
    """前半 [0, 20) と後半 [70, 90) のラウンドのプロンプト位置と報酬"""
    rows = []
    for record in records:
        window = _window_name(record.round)
        if window is None:
            continue
        rows.append(
            ScatterRow(
                method=record.method,
                window=window,
                task_id=record.task_id,
                seed=record.seed,
                round=record.round,
                mean_x=record.prompt_mean_state[0],
                mean_y=record.prompt_mean_state[1],
                episodic_return=record.episodic_return,
            )
        )
    return rows


def exploration_summary(
    records: Iterable[RoundRecord], store: PoolStore, tasks: Sequence[Task]
) -> dict[str, ExplorationSummary]:
    """手法ごとの探索の広がりを前半・後半ウィンドウで比べる.

    ゴール距離は全点の平均、広がりと初期位置からのずれは (タスク, シード) ごとに
    計算してから平均する。
    """
    goals = {task.task_id: task.goal for task in tasks}
    cells: dict[str, dict[tuple[int, int], list[ScatterRow]]] = defaultdict(lambda: defaultdict(list))
    origins: dict[tuple[str, int, int], Vec2] = {}
    for record in records:
        if record.origin_mean_state is not None:
            origins[(record.method, record.task_id, record.seed)] = record.origin_mean_state
    for row in scatter_rows(records):
        if row.task_id in goals:
            cells[row.method][(row.task_id, row.seed)].append(row)

    summaries = {}
    for method, by_cell in sorted(cells.items()):
        early_dist: list[float] = []
        late_dist: list[float] = []
        drifts: list[float] = []
        spans: list[float] = []
        for (task_id, seed), rows in sorted(by_cell.items()):
            goal = goals[task_id]
            early = [(r.mean_x, r.mean_y) for r in rows if r.window == "early"]
            late = [(r.mean_x, r.mean_y) for r in rows if r.window == "late"]
            early_dist.extend(distance(p, goal) for p in early)
            late_dist.extend(distance(p, goal) for p in late)

            origin = origins.get((method, task_id, seed))
            if origin is not None and late:
                centroid = np.mean(np.array(late), axis=0)
                drifts.append(distance((float(centroid[0]), float(centroid[1])), origin))

            pool_diag = _bbox_diagonal(store.require(task_id).segment_centroids())
            if early and pool_diag > 0:
                spans.append(_bbox_diagonal(np.array(early)) / pool_diag)

        summaries[method] = ExplorationSummary(
            method=method,
            early_goal_distance=float(np.mean(early_dist)) if early_dist else math.nan,
            late_goal_distance=float(np.mean(late_dist)) if late_dist else math.nan,
            late_drift=float(np.mean(drifts)) if drifts else None,
            early_span=float(np.mean(spans)) if spans else math.nan,
        )
    return summaries


def _bbox_diagonal(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    extent = points.max(axis=0) - points.min(axis=0)
    return float(np.hypot(extent[0], extent[1]))


def run_sweep(
    config: RunConfig,
    methods: Sequence[str],
    J_values: Sequence[int] = DEFAULT_SWEEP_J,
    width: int = 50,
    store: PoolStore | None = None,
) -> tuple[list[SweepRow], dict[int, list[RoundRecord]]]:
    """プロンプトサイズ J ごとに run_methods を繰り返し、最終ウィンドウの平均を並べる.

    Returns:
        (J×手法の集計行, J→記録)
    """
    rows: list[SweepRow] = []
    by_size: dict[int, list[RoundRecord]] = {}
    for J in J_values:
        records = run_methods(replace(config, J=J), methods, store)
        by_size[J] = records
        for method, cells in sorted(round_series(records).items()):
            finals = np.array([values[-width:].mean() for values in cells.values()])
            rows.append(
                SweepRow(
                    method=method,
                    J=J,
                    final_mean=float(finals.mean()),
                    final_std=float(finals.std()),
                    runs=len(finals),
                )
            )
        logger.info("Sweep J=%d done", J)
    return rows, by_size


class HarnessError(Exception):
    """実験の実行・集計エラー.

    例:
        raise HarnessError("zo_ranksgd: runs cover different round grids [249, 250]")
    """

    pass
