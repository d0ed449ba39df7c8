"""Step 06: チューニングの実行と集計 - テスト

このテストは、harness モジュールの実行ループと指標の計算を検証します。

テスト内容:
- run_cell: 手法ごとの記録数、ZOのエピソード番号、再現性、スナップショット
- run_tuning / run_methods: 並び順、欠けたプールのエラー、並列実行との一致
- 指標: 累積後悔、ラウンド別の平均・標準偏差、ZOのラウンド内最大値
- 探索の分析: ウィンドウの切り出し、ゴール距離、初期位置からのずれ
- run_sweep: プロンプトサイズごとの集計行

実行方法: pytest tests/step06_harness/test_harness.py -v
"""

from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from prompt_bandit.cmab import load_snapshot
from prompt_bandit.config import PoolConfig, RunConfig
from prompt_bandit.env2d import EnvConfig, Vec2, make_task_by_id, return_floor, tasks_with_radius
from prompt_bandit.harness import (
    HarnessError,
    RoundRecord,
    aggregate,
    cumulative_regret,
    expert_reference,
    exploration_summary,
    final_window_mean,
    regret_curves,
    round_series,
    rounds_to_fraction,
    run_cell,
    run_methods,
    run_sweep,
    run_tuning,
    scatter_rows,
)
from prompt_bandit.promptdata import build_pool
from prompt_bandit.storage import PoolStore, StorageError

TUNABLE = ("uniform", "bandit_ucb", "bandit_eps", "bandit_thompson", "gaussian_hc", "zo_ranksgd")


def small_store(radius: float = 0.9, horizon: int = 3) -> PoolStore:
    """半径 radius の20タスク分の小さなプール."""
    store = PoolStore()
    for task in tasks_with_radius(radius):
        store.set(build_pool(task, horizon=horizon, n_episodes=30, seed=task.task_id))
    return store


def small_config(out: Path, **kwargs: object) -> RunConfig:
    values: dict[str, object] = {"K": 5, "seeds": (0,), "radius": 0.9, "out": str(out)}
    values.update(kwargs)
    return RunConfig(**values)  # type: ignore[arg-type]


def record(
    method: str,
    k: int,
    g: float,
    task_id: int = 0,
    seed: int = 0,
    episode: int = 0,
    mean: Vec2 = (0.0, 0.0),
    origin: Vec2 | None = None,
) -> RoundRecord:
    return RoundRecord(
        round=k,
        task_id=task_id,
        method=method,
        seed=seed,
        episode=episode,
        episodic_return=g,
        segment_ids=None,
        prompt_mean_state=mean,
        origin_mean_state=origin,
    )


@pytest.fixture(scope="module")
def store() -> PoolStore:
    return small_store()


class TestStep06RunCell:
    """Step 06: 1セルの実行のテスト."""

    def test_uniform_records(self, store: PoolStore, tmp_path: Path) -> None:
        """一様ランダムの記録を検証.

        検証内容:
        - K件、ラウンド 0..K-1、episode は0
        - segment_ids は長さJでプールの範囲内
        - 初期プロンプトの位置は持たない
        """
        task = make_task_by_id(3)
        pool = store.require(3)

        records = run_cell(small_config(tmp_path, method="uniform", J=2), task, pool, 0)

        assert [r.round for r in records] == list(range(5))
        assert all(r.episode == 0 for r in records)
        for r in records:
            assert r.segment_ids is not None
            assert len(r.segment_ids) == 2
            assert all(0 <= i < len(pool) for i in r.segment_ids)
            assert r.origin_mean_state is None
            assert r.method == "uniform"
            assert r.task_id == 3

    def test_zo_records(self, store: PoolStore, tmp_path: Path) -> None:
        """ZO-RankSGD が1ラウンドにm=5件を記録することを検証.

        検証内容:
        - K=4 で20件
        - 各ラウンドのepisodeは 0..4
        - 全件が同じ初期プロンプト位置を持つ
        """
        task = make_task_by_id(0)

        records = run_cell(small_config(tmp_path, method="zo_ranksgd", K=4), task, store.require(0), 0)

        assert len(records) == 20
        assert Counter(r.round for r in records) == {k: 5 for k in range(4)}
        for k in range(4):
            assert sorted(r.episode for r in records if r.round == k) == list(range(5))
        assert all(r.segment_ids is None for r in records)
        assert len({r.origin_mean_state for r in records}) == 1
        assert records[0].origin_mean_state is not None

    def test_hill_climb_records(self, store: PoolStore, tmp_path: Path) -> None:
        """ヒルクライミングが1ラウンド1件を記録することを検証."""
        task = make_task_by_id(5)

        records = run_cell(small_config(tmp_path, method="gaussian_hc", K=6), task, store.require(5), 1)

        assert [r.round for r in records] == list(range(6))
        assert all(r.origin_mean_state is not None for r in records)

    @pytest.mark.parametrize("method", TUNABLE)
    def test_deterministic(self, store: PoolStore, tmp_path: Path, method: str) -> None:
        """同じ (手法, タスク, シード) で同じ記録になることを検証."""
        task = make_task_by_id(7)
        config = small_config(tmp_path, method=method, K=3)

        first = run_cell(config, task, store.require(7), 2)
        second = run_cell(config, task, store.require(7), 2)

        assert first == second

    def test_bandit_snapshot(self, store: PoolStore, tmp_path: Path) -> None:
        """snapshots 有効時にバンディットの最終状態が保存されることを検証."""
        task = make_task_by_id(2)
        config = small_config(tmp_path, method="bandit_ucb", snapshots=True)

        run_cell(config, task, store.require(2), 0)

        path = tmp_path / "snapshots" / "bandit_ucb_task_02_seed_0.json"
        assert path.exists()
        assert len(load_snapshot(path).history) == 5

    def test_horizon_mismatch(self, store: PoolStore, tmp_path: Path) -> None:
        """プールのHが設定と違う場合にエラーになることを検証."""
        with pytest.raises(HarnessError, match="H=3"):
            run_cell(small_config(tmp_path, H=2), make_task_by_id(0), store.require(0), 0)

    def test_returns_bounded(self, store: PoolStore, tmp_path: Path) -> None:
        """記録された報酬が [下限, 10] に収まることを検証."""
        config = small_config(tmp_path, method="uniform", K=10)

        records = run_cell(config, make_task_by_id(9), store.require(9), 0)

        floor = return_floor(config.env)
        assert all(floor <= r.episodic_return <= 10.0 for r in records)


class TestStep06RunTuning:
    """Step 06: 全セルの実行のテスト."""

    def test_sorted_and_complete(self, store: PoolStore, tmp_path: Path) -> None:
        """記録数と並び順を検証.

        検証内容:
        - 20タスク × 2シード × K=3 で120件
        - (手法, タスク, シード, ラウンド, エピソード) の昇順
        """
        config = small_config(tmp_path, method="uniform", K=3, seeds=(0, 1))

        records = run_tuning(config, store)

        assert len(records) == 120
        assert [r.sort_key for r in records] == sorted(r.sort_key for r in records)
        assert {r.task_id for r in records} == set(range(20))

    def test_missing_pool_in_store(self, tmp_path: Path) -> None:
        """ストアに欠けたタスクがあるとタスク番号入りのエラーになることを検証."""
        partial = small_store()
        partial.delete(7)

        with pytest.raises(StorageError, match="task 7"):
            run_tuning(small_config(tmp_path, method="uniform"), partial)

    def test_missing_pool_files(self, tmp_path: Path) -> None:
        """プールファイルのないディレクトリでタスク番号入りのエラーになることを検証."""
        config = small_config(
            tmp_path, method="uniform", pool=PoolConfig(directory=str(tmp_path / "none"))
        )

        with pytest.raises(StorageError, match="task 0"):
            run_tuning(config)

    def test_parallel_matches_serial(self, store: PoolStore, tmp_path: Path) -> None:
        """ワーカー数を変えても記録が一致することを検証."""
        config = small_config(tmp_path, method="bandit_thompson", K=3)

        serial = run_tuning(config, store)
        parallel = run_tuning(replace(config, jobs=2), store)

        assert serial == parallel

    def test_run_methods(self, store: PoolStore, tmp_path: Path) -> None:
        """複数手法の記録がまとめて並ぶことを検証."""
        config = small_config(tmp_path, K=2)

        records = run_methods(config, ["uniform", "bandit_ucb"], store)

        assert Counter(r.method for r in records) == {"bandit_ucb": 40, "uniform": 40}
        assert [r.sort_key for r in records] == sorted(r.sort_key for r in records)


class TestStep06Metrics:
    """Step 06: 指標の計算のテスト."""

    def test_cumulative_regret(self) -> None:
        """累積後悔の例を検証.

        検証内容:
        - [10, 10] → [0, 0]
        - [8, 10] → [2, 2]
        - 基準値を超えた報酬は0として数える
        """
        assert cumulative_regret([10.0, 10.0], 10.0) == [0.0, 0.0]
        assert cumulative_regret([8.0, 10.0], 10.0) == [2.0, 2.0]
        assert cumulative_regret([12.0], 10.0) == [0.0]

    def test_expert_reference(self) -> None:
        assert expert_reference(EnvConfig()) == 10.0

    def test_aggregate_mean_std(self) -> None:
        """2つの実行で 4 と 6 → 平均5、標準偏差1 を検証."""
        records = [record("uniform", 0, 4.0, seed=0), record("uniform", 0, 6.0, seed=1)]

        curve = aggregate(records)["uniform"]

        assert curve.mean.tolist() == [5.0]
        assert curve.std.tolist() == [1.0]
        assert curve.runs == 2

    def test_single_run_std_zero(self) -> None:
        curve = aggregate([record("uniform", k, float(k)) for k in range(3)])["uniform"]

        assert curve.mean.tolist() == [0.0, 1.0, 2.0]
        assert curve.std.tolist() == [0.0, 0.0, 0.0]

    def test_zo_best_of_round(self) -> None:
        """ZOのラウンド値がラウンド内の最大値になることを検証."""
        records = [
            record("zo_ranksgd", 0, g, episode=i) for i, g in enumerate([1.0, 5.0, 3.0, -2.0, 0.0])
        ]

        assert aggregate(records)["zo_ranksgd"].mean.tolist() == [5.0]

    def test_regret_curves(self) -> None:
        records = [record("uniform", 0, 8.0), record("uniform", 1, 10.0)]

        curve = regret_curves(records, 10.0)["uniform"]

        assert curve.mean.tolist() == [2.0, 2.0]

    def test_round_grid_errors(self) -> None:
        """ラウンドの抜けとラウンド数の不一致がエラーになることを検証."""
        with pytest.raises(HarnessError, match="contiguous"):
            round_series([record("uniform", 0, 1.0), record("uniform", 2, 1.0)])
        with pytest.raises(HarnessError, match="different round grids"):
            round_series(
                [record("uniform", 0, 1.0, seed=0)]
                + [record("uniform", k, 1.0, seed=1) for k in range(2)]
            )

    def test_final_window_and_threshold(self) -> None:
        """最終ウィンドウの平均と 95% 到達ラウンドを検証."""
        curve = aggregate([record("uniform", k, float(k) / 10) for k in range(100)])["uniform"]

        assert final_window_mean(curve, width=50) == pytest.approx(7.45)
        assert rounds_to_fraction(curve, 5.0) == 48
        assert rounds_to_fraction(curve, 20.0) is None


class TestStep06Exploration:
    """Step 06: 空間・時間分析のテスト."""

    def test_scatter_windows(self) -> None:
        """前半 [0, 20) と後半 [70, 90) だけが切り出されることを検証."""
        rows = scatter_rows([record("uniform", k, 0.0) for k in range(100)])

        assert [r.round for r in rows if r.window == "early"] == list(range(20))
        assert [r.round for r in rows if r.window == "late"] == list(range(70, 90))

    def test_summary(self) -> None:
        """ゴール距離・ずれ・広がりを検証.

        検証内容:
        - 前半は原点（ゴール距離 = 半径0.9）、後半はゴール上（距離0）
        - 初期位置が原点なら後半のずれは0.9
        - 前半の点が1箇所に集まっていれば広がりは0
        - 初期位置を持たない手法のずれは None
        """
        task = make_task_by_id(0)
        store = PoolStore()
        store.set(build_pool(task, horizon=3, n_episodes=30, seed=0))
        records = []
        for method, origin in (("zo_ranksgd", (0.0, 0.0)), ("uniform", None)):
            for k in range(90):
                mean = (0.0, 0.0) if k < 20 else task.goal
                records.append(record(method, k, 0.0, mean=mean, origin=origin))

        summary = exploration_summary(records, store, [task])

        zo = summary["zo_ranksgd"]
        assert zo.early_goal_distance == pytest.approx(0.9)
        assert zo.late_goal_distance == pytest.approx(0.0, abs=1e-12)
        assert zo.late_drift == pytest.approx(0.9)
        assert zo.early_span == 0.0
        assert summary["uniform"].late_drift is None


class TestStep06Sweep:
    """Step 06: プロンプトサイズ比較のテスト."""

    def test_sweep_rows(self, store: PoolStore, tmp_path: Path) -> None:
        """J ごとに集計行と記録が得られることを検証."""
        config = small_config(tmp_path, K=3)

        rows, by_size = run_sweep(config, ["uniform"], J_values=(1, 2), width=2, store=store)

        assert [(row.method, row.J, row.runs) for row in rows] == [("uniform", 1, 20), ("uniform", 2, 20)]
        assert sorted(by_size) == [1, 2]
        for J, records in by_size.items():
            assert all(r.segment_ids is not None and len(r.segment_ids) == J for r in records)
        assert all(np.isfinite(row.final_mean) for row in rows)
