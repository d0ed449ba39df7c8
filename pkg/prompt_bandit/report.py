"""Run-directory outputs: records, curves, scatter data and plots.

このモジュールは、実験結果のファイル出力と読み戻しを担当します。

出力（すべて一時ファイル経由の置き換えで書く）:
    records.jsonl / records.csv   1エピソード1行（wall_timeは含めない）
    curve_<method>.csv            round, mean, std
    regret_<method>.csv           round, mean, std（累積後悔）
    scatter.csv                   前半・後半ウィンドウのプロンプト位置と報酬
    summary.json                  手法ごとの要約
    run_meta.json                 実効設定・環境定数・後悔の基準値・実行時間
    curves.svg / scatter_<method>.svg

CSVの数値は repr() で書くので、読み戻しても値が変わりません。
"""

import csv
import io
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import matplotlib
from matplotlib.figure import Figure

from .harness import (
    Curve,
    ExplorationSummary,
    RoundRecord,
    ScatterRow,
    SweepRow,
    final_window_mean,
    regret_curves,
    rounds_to_fraction,
    scatter_rows,
)
from .storage import StorageError, atomic_write_text

logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "prompt-bandit"

RECORD_FIELDS = (
    "method",
    "task_id",
    "seed",
    "round",
    "episode",
    "return",
    "segment_ids",
    "mean_x",
    "mean_y",
    "origin_x",
    "origin_y",
    "policy_failed",
)
SCATTER_FIELDS = ("method", "window", "task_id", "seed", "round", "mean_x", "mean_y", "return")
CURVE_BAND = 0.25


def emit_outputs(
    records: Sequence[RoundRecord],
    curves: Mapping[str, Curve],
    out_dir: Path,
    meta: Mapping[str, Any],
    reference: float,
    exploration: Mapping[str, ExplorationSummary] | None = None,
) -> list[Path]:
    """実行ディレクトリに全出力を書く.

    Args:
        records: 記録（並び順はそのまま書く）
        curves: 手法ごとの報酬曲線
        out_dir: 出力ディレクトリ
        meta: run_meta.json に書く内容
        reference: 後悔の基準値
        exploration: 探索の広がりの要約（summary.json に入れる）

    Returns:
        書いたファイルのパス

    Raises:
        ReportError: 書き込みに失敗した（パス入り）
    """
    out_dir = Path(out_dir)
    written = [
        _write(out_dir / "records.jsonl", records_jsonl(records)),
        _write(out_dir / "records.csv", records_csv(records)),
    ]

    regrets = regret_curves(records, reference)
    for method, curve in curves.items():
        written.append(_write(out_dir / f"curve_{method}.csv", curve_csv(curve)))
    for method, curve in regrets.items():
        written.append(_write(out_dir / f"regret_{method}.csv", curve_csv(curve)))

    rows = scatter_rows(records)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SCATTER_FIELDS)
    for row in rows:
        writer.writerow(
            [
                row.method,
                row.window,
                row.task_id,
                row.seed,
                row.round,
                repr(row.mean_x),
                repr(row.mean_y),
                repr(row.episodic_return),
            ]
        )
    written.append(_write(out_dir / "scatter.csv", buffer.getvalue()))

    summary = summarize(records, curves, regrets, reference, exploration)
    written.append(_write(out_dir / "summary.json", _json(summary)))

    wall = [r.wall_time for r in records]
    full_meta = dict(meta)
    full_meta["regret_reference"] = reference
    full_meta["episodes"] = len(records)
    if any(wall) or "wall_time_total" not in full_meta:
        full_meta["wall_time_total"] = sum(wall)
        full_meta["wall_time_mean"] = sum(wall) / len(wall) if wall else 0.0
    written.append(_write(out_dir / "run_meta.json", _json(full_meta)))

    if curves:
        written.append(_write(out_dir / "curves.svg", plot_curves(curves, reference)))
    for method in sorted({r.method for r in rows}):
        method_rows = [r for r in rows if r.method == method]
        written.append(_write(out_dir / f"scatter_{method}.svg", plot_scatter(method, method_rows)))

    logger.info("Wrote %d files to %s", len(written), out_dir)
    return written


def records_jsonl(records: Iterable[RoundRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), allow_nan=False) + "\n" for r in records)


def records_csv(records: Iterable[RoundRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RECORD_FIELDS)
    for record in records:
        data = record.to_dict()
        ids = data["segment_ids"]
        data["segment_ids"] = ";".join(str(i) for i in ids) if ids is not None else ""
        writer.writerow([_cell(data[name]) for name in RECORD_FIELDS])
    return buffer.getvalue()


def curve_csv(curve: Curve) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("round", "mean", "std"))
    for k, (mean, std) in enumerate(zip(curve.mean, curve.std, strict=True)):
        writer.writerow([k, repr(float(mean)), repr(float(std))])
    return buffer.getvalue()


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("method", "J", "final_mean", "final_std", "runs"))
    for row in rows:
        writer.writerow([row.method, row.J, repr(row.final_mean), repr(row.final_std), row.runs])
    return buffer.getvalue()


def emit_sweep(rows: Sequence[SweepRow], out_dir: Path) -> Path:
    """sweep.csv を書く"""
    return _write(Path(out_dir) / "sweep.csv", sweep_csv(rows))


def summarize(
    records: Sequence[RoundRecord],
    curves: Mapping[str, Curve],
    regrets: Mapping[str, Curve],
    reference: float,
    exploration: Mapping[str, ExplorationSummary] | None = None,
) -> dict[str, Any]:
    """手法ごとの要約（summary.json の中身）"""
    summary: dict[str, Any] = {}
    for method, curve in curves.items():
        method_records = [r for r in records if r.method == method]
        entry: dict[str, Any] = {
            "rounds": len(curve),
            "runs": curve.runs,
            "episodes": len(method_records),
            "policy_failures": sum(1 for r in method_records if r.policy_failed),
            "final_window_mean": final_window_mean(curve),
            "rounds_to_95pct": rounds_to_fraction(curve, reference),
        }
        regret = regrets.get(method)
        if regret is not None:
            entry["final_cumulative_regret"] = float(regret.mean[-1])
        if exploration and method in exploration:
            ex = exploration[method]
            entry["exploration"] = {
                "early_goal_distance": ex.early_goal_distance,
                "late_goal_distance": ex.late_goal_distance,
                "late_drift": ex.late_drift,
                "early_span": ex.early_span,
            }
        summary[method] = entry
    return summary


def plot_curves(curves: Mapping[str, Curve], reference: float) -> str:
    """報酬曲線（平均 ± 0.25σ の帯）のSVG"""
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot()
    for method, curve in sorted(curves.items()):
        rounds = range(len(curve))
        ax.plot(rounds, curve.mean, label=method, linewidth=1.2)
        ax.fill_between(
            rounds,
            curve.mean - CURVE_BAND * curve.std,
            curve.mean + CURVE_BAND * curve.std,
            alpha=0.2,
        )
    ax.axhline(reference, color="gray", linestyle="--", linewidth=0.8, label="expert")
    ax.set_xlabel("round")
    ax.set_ylabel("return")
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    return _svg(fig)


def plot_scatter(method: str, rows: Sequence[ScatterRow]) -> str:
    """前半・後半ウィンドウのプロンプト平均位置（色は報酬）のSVG"""
    fig = Figure(figsize=(8, 4))
    axes = fig.subplots(1, 2, sharex=True, sharey=True)
    for ax, window in zip(axes, ("early", "late"), strict=True):
        points = [r for r in rows if r.window == window]
        if points:
            sc = ax.scatter(
                [r.mean_x for r in points],
                [r.mean_y for r in points],
                c=[r.episodic_return for r in points],
                cmap="viridis",
                s=8,
            )
            fig.colorbar(sc, ax=ax, label="return")
        ax.set_title(f"{method} ({window})")
        ax.set_aspect("equal")
    fig.tight_layout()
    return _svg(fig)


def load_records(run_dir: Path) -> list[RoundRecord]:
    """records.jsonl を読み戻す.

    Raises:
        ReportError: ファイルがない、または行が不正
    """
    path = Path(run_dir) / "records.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc

    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(RoundRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ReportError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records


def load_meta(run_dir: Path) -> dict[str, Any]:
    """run_meta.json を読む（なければ空）"""
    path = Path(run_dir) / "run_meta.json"
    if not path.exists():
        return {}
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ReportError(f"{path}: expected a JSON object")
    return data


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json(payload: object) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n"


def _svg(fig: Figure) -> str:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue().decode("utf-8")


def _write(path: Path, text: str) -> Path:
    try:
        atomic_write_text(path, text)
    except StorageError as exc:
        raise ReportError(str(exc)) from exc
    logger.debug("Wrote %s", path)
    return path


class ReportError(Exception):
    """出力の書き込み・読み戻しエラー.

    例:
        raise ReportError("cannot write runs/x/records.csv: [Errno 13] Permission denied")
    """

    pass
