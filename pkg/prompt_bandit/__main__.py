"""prompt-bandit entry point.

このモジュールは、コマンドラインのエントリポイントです。
`python -m prompt_bandit <subcommand>` で実行します。

    gen-data      タスクごとのデモプールを生成してファイルに保存
    tune          チューニングを実行し、実行ディレクトリに結果を出力
    sweep         プロンプトサイズ J を変えて tune を繰り返す
    report        実行ディレクトリの records.jsonl から集計・図を作り直す
    selftest      組み込みの検査スイートを実行
    serve-policy  サロゲート方策を標準入出力のプロトコルで提供
"""

import argparse
import asyncio
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any, TextIO

from . import __version__
from .cmab import BanditError
from .config import METHODS, ConfigError, PolicyConfig, RunConfig, build_run_config, parse_radius
from .env2d import EnvConfig, EnvError, tasks_with_radius
from .harness import (
    HarnessError,
    RoundRecord,
    aggregate,
    expert_reference,
    exploration_summary,
    generate_pools,
    run_methods,
    run_sweep,
)
from .policy import PolicyError, SurrogatePolicy
from .promptdata import PromptError
from .protocol import PolicyProtocolError
from .report import ReportError, emit_outputs, emit_sweep, load_meta, load_records
from .selftest import run_selftests
from .server import serve_stdio
from .storage import PoolStore, StorageError, load_pools, save_pool
from .zoopt import ZoError

logger = logging.getLogger(__name__)

KNOWN_ERRORS = (
    EnvError,
    PromptError,
    StorageError,
    PolicyError,
    PolicyProtocolError,
    BanditError,
    ZoError,
    ConfigError,
    HarnessError,
    ReportError,
)
TUNABLE_METHODS = tuple(m for m in METHODS if m != "external")


def setup_logging(level: str = "INFO", stream: TextIO | None = None) -> None:
    """ログ設定を初期化."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(stream or sys.stderr)],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prompt_bandit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING, ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate demonstration pools")
    gen.add_argument("--episodes", type=int, default=None)
    gen.add_argument("--noise", type=float, default=None)
    gen.add_argument("--top-pct", type=float, default=None)
    gen.add_argument("--stride", type=int, default=None)
    gen.add_argument("--H", type=int, default=None)
    gen.add_argument("--radius", default="all", help="task radius filter or 'all'")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--config", type=Path, default=None)
    gen.add_argument("--out", type=Path, default=None, help="pool directory (pool.directory)")

    for name, help_text in (("tune", "run prompt tuning"), ("sweep", "repeat tuning over J")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument(
            "--method",
            action="append",
            help=f"one of {', '.join(METHODS)} or 'all' (repeatable)",
        )
        if name == "sweep":
            p.add_argument("--J", type=int, nargs="+", default=[1, 2, 4])
        else:
            p.add_argument("--J", type=int, default=None)
        p.add_argument("--H", type=int, default=None)
        p.add_argument("--K", type=int, default=None)
        p.add_argument("--radius", default=None, help="task radius filter or 'all'")
        p.add_argument("--seeds", type=int, nargs="+", default=None)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--pools", type=Path, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--policy", default=None, help="surrogate | external:<cmd>")
        p.add_argument("--snapshots", action="store_true", default=None)

    rep = sub.add_parser("report", help="re-aggregate a run directory")
    rep.add_argument("run_dir", type=Path)
    rep.add_argument("--pools", type=Path, default=None)

    st = sub.add_parser("selftest", help="run the built-in invariant suites")
    st.add_argument("--quick", action="store_true")

    sub.add_parser("serve-policy", help="serve the surrogate policy on stdin/stdout")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        elif args.command == "tune":
            return cmd_tune(args)
        elif args.command == "sweep":
            return cmd_sweep(args)
        elif args.command == "report":
            return cmd_report(args)
        elif args.command == "selftest":
            return cmd_selftest(args)
        elif args.command == "serve-policy":
            return cmd_serve_policy()
        raise ConfigError(f"unknown command {args.command!r}")
    except KNOWN_ERRORS as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 2
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    except Exception as e:
        logger.exception("Unexpected error: %s", e)
        return 1


def cmd_gen_data(args: argparse.Namespace) -> int:
    overrides: dict[str, Any] = {
        "H": args.H,
        "pool.episodes": args.episodes,
        "pool.noise": args.noise,
        "pool.top_pct": args.top_pct,
        "pool.stride": args.stride,
        "pool.seed": args.seed,
        "pool.directory": str(args.out) if args.out else None,
    }
    config = build_run_config(args.config, overrides)
    # プールはタスク単位なので、--radius がなければ全タスク
    config = replace(config, radius=parse_radius(args.radius))

    out = Path(config.pool.directory)
    for generated in generate_pools(config):
        save_pool(generated.pool, out, generated.meta)
    return 0


def _methods(args: argparse.Namespace, config: RunConfig) -> list[str]:
    requested = args.method or [config.method]
    methods: list[str] = []
    for method in requested:
        for name in TUNABLE_METHODS if method == "all" else [method]:
            if name not in methods:
                methods.append(name)
    if "external" in methods and config.policy.kind != "external":
        raise ConfigError("method 'external' needs --policy external:<cmd>")
    return methods


def _run_config(args: argparse.Namespace, J: int | None) -> RunConfig:
    overrides: dict[str, Any] = {
        "K": args.K,
        "J": J,
        "H": args.H,
        "seeds": tuple(args.seeds) if args.seeds else None,
        "out": str(args.out) if args.out else None,
        "jobs": args.jobs,
        "snapshots": args.snapshots,
        "pool.directory": str(args.pools) if args.pools else None,
    }
    if args.radius is not None and args.radius.lower() != "all":
        overrides["radius"] = parse_radius(args.radius)
    if args.method and len(args.method) == 1 and args.method[0] != "all":
        overrides["method"] = args.method[0]
    if args.policy is not None:
        policy = PolicyConfig.parse(args.policy)
        overrides["policy.kind"] = policy.kind
        overrides["policy.command"] = policy.command

    config = build_run_config(args.config, overrides)
    if args.radius is not None and args.radius.lower() == "all":
        config = replace(config, radius=None)
    return config


def _load_store(config: RunConfig) -> PoolStore:
    task_ids = [task.task_id for task in tasks_with_radius(config.radius)]
    return load_pools(Path(config.pool.directory), task_ids, config.H, config.pool.stride)


def _meta(config: RunConfig, methods: Sequence[str]) -> dict[str, Any]:
    return {
        "version": __version__,
        "methods": list(methods),
        "config": config.to_dict(),
        "env": config.env.to_dict(),
        "regret_reference_source": "noise-free scripted expert return",
    }


def _emit(config: RunConfig, methods: Sequence[str], records: Sequence[RoundRecord], store: PoolStore, out: Path) -> None:
    reference = expert_reference(config.env)
    curves = aggregate(records)
    exploration = exploration_summary(records, store, tasks_with_radius(config.radius))
    emit_outputs(records, curves, out, _meta(config, methods), reference, exploration)


def cmd_tune(args: argparse.Namespace) -> int:
    config = _run_config(args, args.J)
    methods = _methods(args, config)
    store = _load_store(config)
    records = run_methods(config, methods, store)
    _emit(config, methods, records, store, Path(config.out))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _run_config(args, None)
    methods = _methods(args, config)
    store = _load_store(config)
    rows, by_size = run_sweep(config, methods, args.J, store=store)

    out = Path(config.out)
    for J, records in by_size.items():
        _emit(replace(config, J=J), methods, records, store, out / f"J{J}")
    emit_sweep(rows, out)
    for row in rows:
        logger.info("J=%d %-16s final mean %.3f (std %.3f)", row.J, row.method, row.final_mean, row.final_std)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    records = load_records(args.run_dir)
    meta = load_meta(args.run_dir)
    reference = float(meta.get("regret_reference", expert_reference(EnvConfig())))
    curves = aggregate(records)

    exploration = None
    if args.pools is not None:
        run_cfg = meta.get("config", {})
        H = int(run_cfg.get("H", 3))
        task_ids = sorted({r.task_id for r in records})
        store = load_pools(args.pools, task_ids, H, (run_cfg.get("pool") or {}).get("stride"))
        tasks = [t for t in tasks_with_radius(None) if t.task_id in task_ids]
        exploration = exploration_summary(records, store, tasks)

    emit_outputs(records, curves, args.run_dir, meta, reference, exploration)
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    results = run_selftests(quick=args.quick)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("Selftest failed: %s", ", ".join(failed))
        return 1
    logger.info("All %d selftests passed", len(results))
    return 0


def cmd_serve_policy() -> int:
    # stdoutはプロトコル専用、ログはstderrのまま
    asyncio.run(serve_stdio(SurrogatePolicy(EnvConfig())))
    return 0


if __name__ == "__main__":
    sys.exit(main())
