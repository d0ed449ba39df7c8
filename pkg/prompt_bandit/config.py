"""Run configuration: typed sections, YAML loading and CLI overrides.

このモジュールは、実験の設定（RunConfig とその下位セクション）を担当します。

優先順位は「dataclassの既定値 < 設定ファイル < CLIフラグ」です。
シードがどこにも指定されていない場合は環境変数 PROMPT_BANDIT_SEED を使います。
スキーマは docs/configuration.md を参照してください。
"""

import logging
import os
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .cmab import BanditConfig, BanditError
from .env2d import EnvConfig, EnvError
from .zoopt import ZoConfig, ZoError

logger = logging.getLogger(__name__)

METHODS = (
    "uniform",
    "bandit_ucb",
    "bandit_eps",
    "bandit_thompson",
    "gaussian_hc",
    "zo_ranksgd",
    "external",
)
SEED_ENV_VAR = "PROMPT_BANDIT_SEED"
DEFAULT_SEEDS = (0, 1, 2)
EXTERNAL_PREFIX = "external:"


@dataclass(frozen=True)
class PoolConfig:
    """デモプールの生成・読み込み設定."""

    episodes: int = 100
    noise: float = 0.05
    top_pct: float = 10.0
    stride: int | None = None
    seed: int = 0
    directory: str = "pools"

    def __post_init__(self) -> None:
        if self.episodes < 1:
            raise ConfigError(f"pool.episodes must be positive, got {self.episodes}")
        if self.noise < 0:
            raise ConfigError(f"pool.noise must be non-negative, got {self.noise}")
        if not 0 < self.top_pct <= 100:
            raise ConfigError(f"pool.top_pct must lie in (0, 100], got {self.top_pct}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError(f"pool.stride must be positive, got {self.stride}")


@dataclass(frozen=True)
class PolicyConfig:
    """方策の設定.

    kind は "surrogate" か "external"。external では command が必須。
    """

    kind: str = "surrogate"
    command: str | None = None
    step_timeout: float = 5.0
    context_len: int = 20
    initial_rtg: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in ("surrogate", "external"):
            raise ConfigError(f"policy.kind must be 'surrogate' or 'external', got {self.kind!r}")
        if self.kind == "external" and not self.command:
            raise ConfigError("policy.kind 'external' needs policy.command")
        if not self.step_timeout > 0:
            raise ConfigError(f"policy.step_timeout must be positive, got {self.step_timeout}")
        if self.context_len < 1:
            raise ConfigError(f"policy.context_len must be positive, got {self.context_len}")

    @classmethod
    def parse(cls, spec: str, base: "PolicyConfig | None" = None) -> "PolicyConfig":
        """CLIの --policy 値（surrogate / external:<cmd>）を解釈する"""
        base = base or cls()
        if spec == "surrogate":
            return replace(base, kind="surrogate", command=None)
        if spec.startswith(EXTERNAL_PREFIX):
            return replace(base, kind="external", command=spec[len(EXTERNAL_PREFIX) :].strip())
        raise ConfigError(f"--policy must be 'surrogate' or 'external:<cmd>', got {spec!r}")


@dataclass(frozen=True)
class RunConfig:
    """1回のチューニング実行の設定.

    Attributes:
        method: 手法名（METHODS のいずれか）
        K: ラウンド数
        J: プロンプトのセグメント数
        H: セグメント長
        seeds: シード列
        radius: タスクの半径フィルタ（Noneなら全60タスク）
        out: 出力ディレクトリ
        jobs: 並列ワーカー数
        snapshots: バンディットの最終状態を保存する
    """

    method: str = "bandit_ucb"
    K: int = 250
    J: int = 1
    H: int = 3
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    radius: float | None = 2.9
    out: str = "runs/latest"
    jobs: int = 1
    snapshots: bool = False
    env: EnvConfig = field(default_factory=EnvConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    zoopt: ZoConfig = field(default_factory=ZoConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r} (choose from {', '.join(METHODS)})")
        if self.K < 1:
            raise ConfigError(f"K must be at least 1, got {self.K}")
        if self.J < 1:
            raise ConfigError(f"J must be at least 1, got {self.J}")
        if self.H < 1:
            raise ConfigError(f"H must be at least 1, got {self.H}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {self.jobs}")
        if self.method == "external" and self.policy.kind != "external":
            raise ConfigError("method 'external' needs --policy external:<cmd>")

    def to_dict(self) -> dict[str, Any]:
        """run_meta.json に書き出す全設定"""
        data = asdict(self)
        data["seeds"] = list(self.seeds)
        data["bandit"] = self.bandit.to_dict()
        return data


_SECTIONS: dict[str, type] = {
    "env": EnvConfig,
    "pool": PoolConfig,
    "bandit": BanditConfig,
    "zoopt": ZoConfig,
    "policy": PolicyConfig,
}
_RUN_KEYS = ("method", "K", "J", "H", "seeds", "radius", "out", "jobs", "snapshots")


def load_config_file(path: Path) -> dict[str, Any]:
    """YAML設定ファイルを読み、キーを検証した辞書を返す.

    Raises:
        ConfigError: 読めない、YAMLとして不正、未知のキー
    """
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc

    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    unknown = set(raw) - set(_RUN_KEYS) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for name, cls in _SECTIONS.items():
        section = raw.get(name)
        if section is None:
            continue
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: section '{name}' must be a mapping")
        allowed = {f.name for f in fields(cls)}
        extra = set(section) - allowed
        if extra:
            raise ConfigError(f"{path}: unknown keys in '{name}': {sorted(extra)}")
    return raw


def build_run_config(
    path: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """既定値・設定ファイル・CLIフラグを重ねて RunConfig を作る.

    overrides のうち値が None のものは無視する。ネストしたセクションは
    "section.key" 形式のキーで上書きできる（例: "pool.directory"）。

    Raises:
        ConfigError: 値が不正
    """
    raw = load_config_file(path) if path is not None else {}
    environ = os.environ if environ is None else environ

    run_values: dict[str, Any] = {key: raw[key] for key in _RUN_KEYS if key in raw}
    section_values: dict[str, dict[str, Any]] = {
        name: dict(raw.get(name) or {}) for name in _SECTIONS
    }

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, dot, sub = key.partition(".")
        if dot:
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            section_values[section][sub] = value
        elif key in _RUN_KEYS:
            run_values[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")

    if "seeds" not in run_values:
        fallback = env_seed(environ)
        if fallback is not None:
            run_values["seeds"] = (fallback,)
            section_values["pool"].setdefault("seed", fallback)

    try:
        sections = {name: _SECTIONS[name](**values) for name, values in section_values.items()}
        return RunConfig(**run_values, **sections)
    except (TypeError, ValueError, EnvError, BanditError, ZoError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def env_seed(environ: Mapping[str, str] | None = None) -> int | None:
    """PROMPT_BANDIT_SEED を整数として読む（未設定なら None）"""
    environ = os.environ if environ is None else environ
    value = environ.get(SEED_ENV_VAR)
    if value is None or not value.strip():
        return None
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {value!r}") from exc


def parse_radius(value: str) -> float | None:
    """--radius の値（数値または all）"""
    if value.lower() == "all":
        return None
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"--radius must be a number or 'all', got {value!r}") from exc


class ConfigError(Exception):
    """設定の不正.

    例:
        raise ConfigError("config.yaml: unknown keys in 'bandit': ['alpah']")
    """

    pass
