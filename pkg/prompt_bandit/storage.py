"""Demonstration pool store and per-task pool files.

このモジュールは、タスクごとのDemoPoolの保持と、
プールファイル（1タスク1ファイルの行指向CSV）の読み書きを担当します。

ファイル形式:
    # key=value            ← メタデータ行（task_id, 生成設定, 環境定数）
    trajectory_id,rtg,s_x,s_y,a_x,a_y,a_stop,reward,t   ← 固定ヘッダ
    0,10.0,0.0,0.0,...     ← 1遷移1行

ファイルはHに依存しない生の軌跡を保存し、読み込み時にセグメントを列挙し直します。
"""

import csv
import io
import logging
import os
import tempfile
from collections.abc import Mapping
from pathlib import Path

from .promptdata import DemoPool, Trajectory, Transition, compute_rtg, make_pool

logger = logging.getLogger(__name__)

POOL_FIELDS = ("trajectory_id", "rtg", "s_x", "s_y", "a_x", "a_y", "a_stop", "reward", "t")


class PoolStore:
    """インメモリのDemoPoolレジストリ.

    責務:
    - task_id → DemoPool の保存・取得・削除
    - ハーネスが要求するタスクのプールが揃っているかの確認
    """

    def __init__(self) -> None:
        """ストアを初期化."""
        self._pools: dict[int, DemoPool] = {}

    def get(self, task_id: int) -> DemoPool | None:
        return self._pools.get(task_id)

    def set(self, pool: DemoPool) -> None:
        self._pools[pool.task_id] = pool

    def delete(self, task_id: int) -> bool:
        try:
            self._pools.pop(task_id)
            return True
        except KeyError:
            return False

    def exists(self, task_id: int) -> bool:
        return task_id in self._pools

    def get_all_task_ids(self) -> list[int]:
        """保持しているtask_idの一覧（昇順）."""
        return sorted(self._pools)

    def require(self, task_id: int) -> DemoPool:
        """プールを取得する.

        Raises:
            StorageError: 該当タスクのプールがない
        """
        pool = self._pools.get(task_id)
        if pool is None:
            raise StorageError(f"no demonstration pool for task {task_id}")
        return pool


def pool_path(directory: Path, task_id: int) -> Path:
    """タスクのプールファイルのパス."""
    return Path(directory) / f"pool_task_{task_id:02d}.csv"


def save_pool(pool: DemoPool, directory: Path, meta: Mapping[str, object] | None = None) -> Path:
    """プールをCSVファイルに書き出す（一時ファイル経由で置き換え）.

    Args:
        pool: 保存するプール
        directory: 出力ディレクトリ
        meta: ヘッダに書くメタデータ（生成設定・環境定数）

    Returns:
        書き出したファイルのパス
    """
    buffer = io.StringIO()
    buffer.write(f"# task_id={pool.task_id}\n")
    for key, value in (meta or {}).items():
        buffer.write(f"# {key}={value}\n")

    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(POOL_FIELDS)
    for trajectory in pool.trajectories:
        for t, (transition, reward) in enumerate(
            zip(trajectory.transitions, trajectory.rewards, strict=True)
        ):
            writer.writerow(
                [
                    trajectory.trajectory_id,
                    *(repr(v) for v in transition.tokens()),
                    repr(reward),
                    t,
                ]
            )

    path = pool_path(directory, pool.task_id)
    atomic_write_text(path, buffer.getvalue())
    logger.info("Saved pool for task %d (%d trajectories) to %s", pool.task_id, len(pool.trajectories), path)
    return path


def read_pool_meta(path: Path) -> dict[str, str]:
    """プールファイルのメタデータ行を読む."""
    meta: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.startswith("#"):
                    break
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
    except OSError as exc:
        raise StorageError(f"cannot read pool file {path}: {exc}") from exc
    return meta


def load_pool(path: Path, horizon: int, stride: int | None = None) -> DemoPool:
    """プールファイルを読み込み、指定のH・strideでセグメントを列挙する.

    Raises:
        StorageError: ファイルが読めない、またはヘッダ・数値が不正
    """
    stride = stride or horizon
    meta = read_pool_meta(path)
    try:
        task_id = int(meta["task_id"])
    except (KeyError, ValueError) as exc:
        raise StorageError(f"{path}: missing or invalid task_id header") from exc

    try:
        with open(path, encoding="utf-8") as f:
            lines = [line for line in f if not line.startswith("#")]
    except OSError as exc:
        raise StorageError(f"cannot read pool file {path}: {exc}") from exc

    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(header) != POOL_FIELDS:
        raise StorageError(f"{path}: expected header {','.join(POOL_FIELDS)}, got {header}")

    grouped: dict[int, list[list[str]]] = {}
    trajectories = []
    try:
        for row in reader:
            if not row:
                continue
            if len(row) != len(POOL_FIELDS):
                raise StorageError(f"{path}: malformed row {row}")
            grouped.setdefault(int(row[0]), []).append(row)

        for trajectory_id, rows in grouped.items():
            rows.sort(key=lambda r: int(r[8]))
            rewards = [float(r[7]) for r in rows]
            transitions = tuple(
                Transition(
                    rtg=float(r[1]),
                    state=(float(r[2]), float(r[3])),
                    action=(float(r[4]), float(r[5]), float(r[6])),
                )
                for r in rows
            )
            trajectories.append(
                Trajectory(
                    transitions=transitions,
                    rewards=tuple(rewards),
                    episodic_return=compute_rtg(rewards)[0],
                    task_id=task_id,
                    trajectory_id=trajectory_id,
                )
            )
    except ValueError as exc:
        raise StorageError(f"{path}: non-numeric value ({exc})") from exc

    return make_pool(task_id, trajectories, horizon, stride)


def load_pools(
    directory: Path, task_ids: list[int], horizon: int, stride: int | None = None
) -> PoolStore:
    """指定タスクのプールをまとめて読み込む.

    Raises:
        StorageError: プールファイルがないタスクがある（タスク名入り）
    """
    store = PoolStore()
    for task_id in task_ids:
        path = pool_path(directory, task_id)
        if not path.exists():
            raise StorageError(f"missing demonstration pool for task {task_id}: {path}")
        store.set(load_pool(path, horizon, stride))
    return store


def atomic_write_text(path: Path, text: str) -> None:
    """一時ファイルに書いてからrenameで置き換える.

    Raises:
        StorageError: 書き込みに失敗した（パス入り）
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
                f.write(text)
            os.replace(tmp_name, path)
        except BaseException:
            Path(tmp_name).unlink(missing_ok=True)
            raise
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


class StorageError(Exception):
    """プールの保存・読み込みエラー.

    例:
        raise StorageError("missing demonstration pool for task 41: pools/pool_task_41.csv")
    """

    pass
