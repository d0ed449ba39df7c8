"""Step 04: 文脈付きバンディット - テスト

このテストは、cmab モジュールの報酬モデルとプロンプト選択を検証します。

テスト内容:
- 特徴ベクトル: 次元 6H+1、バイアス項、スケーリング
- predict: 新しいアームのUCBスコア、1回更新後の平均、σ=0のThompson
- 予測行列の形状と選択（UCBの最大ノルム、ε-greedy の ε=0 / ε=1、スケール不変性）
- update: 報酬の正規化、逐次逆行列とリッジ回帰の一致、入力の検証
- スナップショットの保存・読み込み
- 合成問題での最適セグメントの識別と後悔の減少

実行方法: pytest tests/step04_cmab/ -v
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from prompt_bandit.cmab import (
    ArmState,
    BanditConfig,
    BanditError,
    BanditState,
    PredictionMatrix,
    PromptBandit,
    Strategy,
    build_prediction_matrix,
    feature_matrix,
    features,
    load_snapshot,
    make_bandit_config,
    normalize_return,
    predict,
    save_snapshot,
    select_indices,
    select_prompt,
    update,
)
from prompt_bandit.env2d import Action
from prompt_bandit.promptdata import DemoPool, decode_tokens, make_pool, trajectory_from_steps
from prompt_bandit.selftest import check_bandit_linear_algebra, synthetic_identification


def line_pool(num_trajectories: int = 4, length: int = 30) -> DemoPool:
    """x軸上を進む軌跡から作った H=3, stride=3 のプール."""
    trajectories = []
    for i in range(num_trajectories):
        states = [(0.1 * t, 0.0) for t in range(length)]
        actions = [Action((0.1, 0.0), t == length - 1) for t in range(length)]
        rewards = [0.0] * (length - 1) + [10.0]
        trajectories.append(trajectory_from_steps(states, actions, rewards, 0, i))
    return make_pool(0, trajectories, horizon=3, stride=3)


@pytest.fixture
def pool() -> DemoPool:
    return line_pool()


class TestStep04Features:
    """Step 04: 特徴ベクトルのテスト."""

    def test_dimension_and_bias(self, pool: DemoPool) -> None:
        """H=3 で19次元、最後がバイアス1.0であることを検証."""
        x = features(pool.segments[0])

        assert x.shape == (19,)
        assert x[-1] == 1.0

    def test_zero_segment(self) -> None:
        """ゼロのセグメントは (0, …, 0, 1) になることを検証."""
        segment = decode_tokens(np.zeros(18), 1, 3).segments[0]

        expected = np.zeros(19)
        expected[-1] = 1.0
        assert np.array_equal(features(segment), expected)

    def test_scaling(self, pool: DemoPool) -> None:
        """rtg は ÷10、状態は ÷3、行動はそのままであることを検証."""
        segment = pool.segments[1]
        x = features(segment)
        first = segment.transitions[0]

        assert x[0] == pytest.approx(first.rtg / 10.0)
        assert x[1] == pytest.approx(first.state[0] / 3.0)
        assert x[2] == pytest.approx(first.state[1] / 3.0)
        assert x[3:6].tolist() == list(first.action)

    def test_identical_segments(self, pool: DemoPool) -> None:
        """同じ内容のセグメントは同じ特徴になることを検証."""
        assert np.array_equal(features(pool.segments[2]), features(pool.segments[12]))

    def test_empty_pool(self) -> None:
        with pytest.raises(BanditError):
            feature_matrix([])


class TestStep04Predict:
    """Step 04: アームごとのスコアのテスト."""

    def test_fresh_ucb(self) -> None:
        """新しいアーム (A=I, b=0)、α=1、‖x‖=2 でスコア2.0を検証."""
        arm = ArmState.fresh(4)
        x = np.array([1.0, 1.0, 1.0, 1.0])

        assert predict(arm, x, BanditConfig(alpha=1.0)) == pytest.approx(2.0)

    def test_mean_after_one_update(self) -> None:
        """x=e₁、r̃=1 の1回更新で e₁ の平均予測が0.5になることを検証.

        検証内容:
        - A = diag(2, 1, …)
        - ε-greedy のスコア（平均）が 0.5
        """
        arm = ArmState.fresh(3)
        e1 = np.array([1.0, 0.0, 0.0])
        arm.observe(e1, 1.0)

        assert np.array_equal(arm.A, np.diag([2.0, 1.0, 1.0]))
        assert arm.count == 1
        config = BanditConfig(strategy=Strategy.EPS_GREEDY)
        assert predict(arm, e1, config) == pytest.approx(0.5)

    def test_thompson_zero_sigma(self) -> None:
        """σ=0 のThompsonスコアが平均と一致することを検証."""
        arm = ArmState.fresh(3)
        arm.observe(np.array([1.0, 2.0, 0.0]), 0.7)
        x = np.array([0.5, -1.0, 2.0])

        thompson = predict(arm, x, BanditConfig(strategy=Strategy.THOMPSON, sigma=0.0))

        assert thompson == pytest.approx(float(x @ arm.theta))

    def test_thompson_needs_rng(self) -> None:
        """σ>0 のThompsonで乱数生成器がないとエラーになることを検証."""
        arm = ArmState.fresh(3)
        with pytest.raises(BanditError, match="random"):
            predict(arm, np.ones(3), BanditConfig(strategy=Strategy.THOMPSON, sigma=0.5))

    def test_dimension_mismatch(self) -> None:
        with pytest.raises(BanditError, match="shape"):
            predict(ArmState.fresh(3), np.ones(4), BanditConfig())


class TestStep04Selection:
    """Step 04: 予測行列とプロンプト選択のテスト."""

    def test_matrix_shape(self, pool: DemoPool) -> None:
        """40セグメント・J=2 で 40×2、J=1 で 40×1 になることを検証."""
        contexts = feature_matrix(pool.segments)

        two = build_prediction_matrix(BanditState.fresh(2, 19, BanditConfig()), contexts)
        one = build_prediction_matrix(BanditState.fresh(1, 19, BanditConfig()), contexts)

        assert two.shape == (40, 2)
        assert one.shape == (40, 1)

    def test_fresh_ucb_scores(self, pool: DemoPool) -> None:
        """新しいバンディットでは各列が α·‖特徴‖ になることを検証."""
        contexts = feature_matrix(pool.segments)
        config = BanditConfig(alpha=1.5)

        matrix = build_prediction_matrix(BanditState.fresh(2, 19, config), contexts)

        norms = 1.5 * np.linalg.norm(contexts, axis=1)
        assert np.allclose(matrix.values[:, 0], norms)
        assert np.allclose(matrix.values[:, 1], norms)
        assert np.array_equal(matrix.means, np.zeros((40, 2)))

    def test_fresh_ucb_selects_max_norm(self, pool: DemoPool) -> None:
        """新しいUCBバンディットが特徴ノルム最大のセグメントを選ぶことを検証.

        検証内容:
        - 同点は最小の segment_id
        - 同じセグメントが複数の位置に入る
        """
        state = BanditState.fresh(2, 19, BanditConfig())
        contexts = feature_matrix(pool.segments)
        best = int(np.argmax(np.linalg.norm(contexts, axis=1)))

        indices, prompt = select_prompt(state, pool, np.random.default_rng(0))

        assert best == 9
        assert indices == [9, 9]
        assert prompt.segments == (pool.segments[9], pool.segments[9])

    def test_eps_greedy_exploit(self) -> None:
        """ε=0 では列ごとに平均の argmax を選ぶことを検証."""
        means = np.array([[0.1, 0.9], [0.5, 0.2], [0.3, 0.4]])
        matrix = PredictionMatrix(values=means, means=means)
        config = BanditConfig(strategy=Strategy.EPS_GREEDY, epsilon=0.0)

        assert select_indices(matrix, config, np.random.default_rng(0)) == [1, 0]

    def test_eps_greedy_explore(self) -> None:
        """ε=1 では列ごとに一様ランダムに選ぶことを検証."""
        means = np.zeros((10, 1))
        means[3, 0] = 1.0
        matrix = PredictionMatrix(values=means, means=means)
        config = BanditConfig(strategy=Strategy.EPS_GREEDY, epsilon=1.0)
        rng = np.random.default_rng(1)

        chosen = [select_indices(matrix, config, rng)[0] for _ in range(500)]

        assert set(chosen) == set(range(10))
        assert chosen.count(3) < 100

    def test_scale_invariance(self) -> None:
        """列を正の定数倍しても UCB の選択が変わらないことを検証."""
        rng = np.random.default_rng(2)
        values = rng.normal(size=(15, 3))
        config = BanditConfig()

        base = select_indices(PredictionMatrix(values, values), config, rng)
        scaled = select_indices(PredictionMatrix(values * [2.0, 0.5, 7.0], values), config, rng)

        assert base == scaled

    def test_thompson_is_stochastic(self, pool: DemoPool) -> None:
        """Thompson の予測行列が呼び出しごとに変わり、同じシードでは再現することを検証."""
        contexts = feature_matrix(pool.segments)
        state = BanditState.fresh(1, 19, BanditConfig(strategy=Strategy.THOMPSON))

        first = build_prediction_matrix(state, contexts, np.random.default_rng(5))
        again = build_prediction_matrix(state, contexts, np.random.default_rng(5))
        other = build_prediction_matrix(state, contexts, np.random.default_rng(6))

        assert np.array_equal(first.values, again.values)
        assert not np.array_equal(first.values, other.values)


class TestStep04Update:
    """Step 04: 報酬による更新のテスト."""

    def test_normalize_return(self) -> None:
        """既定の範囲 (−6, 10) での正規化を検証.

        検証内容:
        - G=10 → 1.0、G=−6 → 0.0、G=2 → 0.5
        - 範囲外は切り詰め
        """
        config = BanditConfig()

        assert normalize_return(10.0, config) == 1.0
        assert normalize_return(-6.0, config) == 0.0
        assert normalize_return(2.0, config) == 0.5
        assert normalize_return(-12.9, config) == 0.0
        assert normalize_return(25.0, config) == 1.0

    def test_update_all_arms(self, pool: DemoPool) -> None:
        """全アームが同じ正規化報酬で更新され、履歴が1つ増えることを検証."""
        contexts = feature_matrix(pool.segments)
        state = BanditState.fresh(2, 19, BanditConfig())

        update(state, [3, 7], 2.0, contexts)

        assert state.history == [((3, 7), 2.0)]
        assert [arm.count for arm in state.arms] == [1, 1]
        assert np.allclose(state.arms[0].b, 0.5 * contexts[3])
        assert np.allclose(state.arms[1].b, 0.5 * contexts[7])

    def test_incremental_inverse(self) -> None:
        """逐次逆行列と θ が直接計算と1e-8以内で一致することを検証."""
        ok, detail = check_bandit_linear_algebra(updates=300, dim=19, seed=3)

        assert ok, detail

    def test_inverse_after_pool_updates(self, pool: DemoPool) -> None:
        """プールの特徴で何度更新しても ‖A·A_inv − I‖ < 1e-8 を保つことを検証."""
        contexts = feature_matrix(pool.segments)
        state = BanditState.fresh(1, 19, BanditConfig())
        rng = np.random.default_rng(4)
        for _ in range(200):
            update(state, [int(rng.integers(40))], float(rng.uniform(-6, 10)), contexts)

        assert state.arms[0].inverse_error() < 1e-8
        assert np.all(np.isfinite(state.arms[0].theta))

    def test_invalid_updates(self, pool: DemoPool) -> None:
        """不正な更新が拒否されることを検証.

        検証内容:
        - indices の長さが J と違う
        - G が非有限
        - 範囲外の segment_id
        """
        contexts = feature_matrix(pool.segments)
        state = BanditState.fresh(2, 19, BanditConfig())

        with pytest.raises(BanditError, match="expected 2"):
            update(state, [1], 1.0, contexts)
        with pytest.raises(BanditError, match="finite"):
            update(state, [1, 2], math.nan, contexts)
        with pytest.raises(BanditError, match="out of range"):
            update(state, [1, 40], 1.0, contexts)
        assert state.history == []


class TestStep04PromptBandit:
    """Step 04: PromptBandit のテスト."""

    def test_round_loop(self, pool: DemoPool) -> None:
        """選択→更新のラウンドで履歴が1つずつ増えることを検証."""
        bandit = PromptBandit(pool, BanditConfig(), num_segments=2)
        rng = np.random.default_rng(0)

        for k in range(5):
            indices, prompt = bandit.select_prompt(rng)
            assert len(indices) == 2
            assert prompt.num_segments == 2
            bandit.update(indices, float(k))

        assert len(bandit.state.history) == 5
        assert bandit.contexts.shape == (40, 19)
        assert bandit.build_prediction_matrix().shape == (40, 2)

    def test_state_mismatch(self, pool: DemoPool) -> None:
        """アーム数・次元が合わない状態での再開が拒否されることを検証."""
        state = BanditState.fresh(1, 19, BanditConfig())

        with pytest.raises(BanditError, match="snapshot"):
            PromptBandit(pool, BanditConfig(), num_segments=2, state=state)

    def test_make_bandit_config(self) -> None:
        """手法名から戦略が決まり、他の値は引き継がれることを検証."""
        base = BanditConfig(alpha=2.0)

        assert make_bandit_config("bandit_eps", base).strategy is Strategy.EPS_GREEDY
        assert make_bandit_config("bandit_thompson", base).alpha == 2.0
        with pytest.raises(BanditError):
            make_bandit_config("uniform")

    def test_invalid_config(self) -> None:
        with pytest.raises(BanditError):
            BanditConfig(epsilon=1.5)
        with pytest.raises(BanditError):
            BanditConfig(g_min=10.0, g_max=10.0)
        with pytest.raises(BanditError):
            BanditConfig(ridge=0.0)
        with pytest.raises(ValueError):
            BanditConfig(strategy="greedy")  # type: ignore[arg-type]


class TestStep04Snapshot:
    """Step 04: スナップショットのテスト."""

    def test_save_and_load(self, pool: DemoPool, tmp_path: Path) -> None:
        """保存した状態を読み込むと行列・履歴・設定が一致することを検証."""
        bandit = PromptBandit(pool, BanditConfig(strategy=Strategy.THOMPSON), num_segments=2)
        rng = np.random.default_rng(0)
        for k in range(4):
            indices, _ = bandit.select_prompt(rng)
            bandit.update(indices, float(k) - 1.0)
        path = tmp_path / "snap" / "bandit.json"

        save_snapshot(bandit.state, path)
        loaded = load_snapshot(path)

        assert loaded.config == bandit.state.config
        assert loaded.history == bandit.state.history
        for got, want in zip(loaded.arms, bandit.state.arms, strict=True):
            assert np.array_equal(got.A, want.A)
            assert np.array_equal(got.A_inv, want.A_inv)
            assert np.array_equal(got.b, want.b)
            assert got.count == want.count

        resumed = PromptBandit(pool, loaded.config, num_segments=2, state=loaded)
        assert resumed.state.num_arms == 2

    def test_version_mismatch(self, tmp_path: Path) -> None:
        """未対応のバージョンが拒否されることを検証."""
        path = tmp_path / "bandit.json"
        save_snapshot(BanditState.fresh(1, 3, BanditConfig()), path)
        payload = json.loads(path.read_text())
        payload["version"] = 99
        path.write_text(json.dumps(payload))

        with pytest.raises(BanditError, match="version"):
            load_snapshot(path)

    def test_shape_mismatch(self, tmp_path: Path) -> None:
        """行列の形が feature_dim と合わないと拒否されることを検証."""
        path = tmp_path / "bandit.json"
        save_snapshot(BanditState.fresh(1, 3, BanditConfig()), path)
        payload = json.loads(path.read_text())
        payload["feature_dim"] = 4
        path.write_text(json.dumps(payload))

        with pytest.raises(BanditError, match="feature_dim"):
            load_snapshot(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(BanditError, match="cannot read"):
            load_snapshot(tmp_path / "nope.json")


class TestStep04Identification:
    """Step 04: 合成問題での識別のテスト."""

    def test_noiseless_identification(self) -> None:
        """ノイズなしの線形報酬で、ラウンド150〜200の95%以上で最適を選ぶことを検証."""
        for seed in range(3):
            result = synthetic_identification(seed=seed, noise=0.0)
            assert result.optimal_fraction >= 0.95

    def test_noisy_regret_decreases(self) -> None:
        """観測ノイズ0.05で、後半の後悔が序盤の20%未満になることを検証."""
        result = synthetic_identification(seed=0, noise=0.05)

        assert result.late_regret < 0.2 * result.early_regret
