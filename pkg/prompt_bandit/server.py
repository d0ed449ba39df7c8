"""External policy adapter and stdio policy server.

このモジュールは、外部プロセスで動く方策とのやり取りを担当します。

- AsyncPolicyClient: 子プロセスを起動し、標準入出力で1行1メッセージをやり取りする
- ExternalPolicy: AsyncPolicyClientを同期のPromptPolicyとして包む
- PolicyRequestHandler: 要求を読み→方策を呼び→応答を書く処理ループ
- serve_stdio(): 標準入出力にハンドラを接続する（`python -m prompt_bandit serve-policy`）

1ステップごとにタイムアウトを設け、タイムアウトや不正な応答は
PolicyFailureとしてロールアウトに伝えます（そのエピソードは下限報酬になります）。
"""

import asyncio
import logging
import shlex
import sys
from asyncio import StreamReader, StreamWriter
from collections.abc import Sequence
from contextlib import suppress
from types import TracebackType
from typing import Self, override

import numpy as np

from .env2d import Action, EnvState
from .policy import PolicyError, PolicyFailure, PromptPolicy
from .promptdata import PromptError, Transition
from .protocol import (
    MAX_LINE_BYTES,
    ActionReply,
    ActRequest,
    CloseRequest,
    ErrorReply,
    OkReply,
    PolicyProtocolError,
    PolicyWireProtocol,
    Reply,
    Request,
    ResetRequest,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP_TIMEOUT = 5.0


class AsyncPolicyClient:
    """外部方策プロセスのクライアント.

    責務:
    - 子プロセスの起動・停止
    - reset/act要求の送信と応答の検証
    - タイムアウト・切断・不正応答をPolicyFailureに変換

    失敗した子プロセスは次のreset()で作り直す。
    """

    def __init__(
        self,
        command: Sequence[str],
        step_timeout: float = DEFAULT_STEP_TIMEOUT,
        protocol: PolicyWireProtocol | None = None,
    ) -> None:
        """クライアントを初期化.

        Args:
            command: 子プロセスのコマンドライン
            step_timeout: 1メッセージあたりの応答待ち時間 [秒]
            protocol: ワイヤプロトコル（Noneの場合は新規作成）
        """
        if not command:
            raise PolicyError("external policy command is empty")
        self._command = list(command)
        self._timeout = step_timeout
        self._protocol = protocol or PolicyWireProtocol()
        self._process: asyncio.subprocess.Process | None = None
        self._broken = False
        self._steps = 0

    @property
    def running(self) -> bool:
        return self._process is not None and self._process.returncode is None

    async def start(self) -> None:
        """子プロセスを起動する.

        Raises:
            RuntimeError: 既に起動している場合
            PolicyError: 起動に失敗した場合
        """
        if self._process is not None:
            raise RuntimeError("External policy is already running")

        logger.info("Starting external policy: %s", shlex.join(self._command))
        try:
            self._process = await asyncio.create_subprocess_exec(
                *self._command,
                stdin=asyncio.subprocess.PIPE,
                stdout=asyncio.subprocess.PIPE,
                limit=MAX_LINE_BYTES,
            )
        except OSError as exc:
            raise PolicyError(f"cannot start external policy {self._command[0]!r}: {exc}") from exc
        self._broken = False

    async def stop(self) -> None:
        """子プロセスを停止する.

        closeを送って終了を待ち、応じなければkillする。
        失敗の後はcloseを送らずにkillする。起動していない場合は何もしない。
        """
        process = self._process
        if process is None:
            return
        self._process = None

        if process.returncode is None:
            if self._broken:
                process.kill()
                await process.wait()
            else:
                try:
                    if process.stdin is not None:
                        process.stdin.write(self._protocol.encode_request(CloseRequest()))
                        await asyncio.wait_for(process.stdin.drain(), self._timeout)
                        process.stdin.close()
                    await asyncio.wait_for(process.wait(), self._timeout)
                except (TimeoutError, OSError):
                    process.kill()
                    await process.wait()
        logger.info("External policy stopped (exit code %s)", process.returncode)

    async def reset(self, tokens: Sequence[float], max_steps: int) -> None:
        """エピソードを開始する."""
        if self._broken:
            logger.info("Restarting external policy after a failure")
            await self._kill()
        if self._process is None:
            await self.start()

        self._steps = 0
        reply = await self._exchange(ResetRequest(prompt=[float(v) for v in tokens], max_steps=max_steps))
        if not isinstance(reply, OkReply):
            self._broken = True
            raise PolicyFailure(f"expected 'ok' after reset, got {reply!r}")

    async def act(self, state: EnvState, rtg: float, recent: Sequence[Transition]) -> Action:
        """1ステップ分の行動を問い合わせる."""
        reply = await self._exchange(
            ActRequest(
                state=state.position,
                rtg=rtg,
                recent=[list(t.tokens()) for t in recent],
            )
        )
        if not isinstance(reply, ActionReply):
            self._broken = True
            raise PolicyFailure(f"expected 'action' after act, got {reply!r}")
        self._steps += 1
        return Action(translate=reply.translate, stop=reply.stop)

    async def _exchange(self, request: Request) -> Reply:
        process = self._process
        if process is None or process.stdin is None or process.stdout is None:
            raise PolicyFailure("external policy is not running")

        try:
            process.stdin.write(self._protocol.encode_request(request))
            await asyncio.wait_for(process.stdin.drain(), self._timeout)
            line = await asyncio.wait_for(self._protocol.read_line(process.stdout), self._timeout)
            reply = self._protocol.parse_reply(line)
        except TimeoutError as exc:
            self._broken = True
            raise PolicyFailure(f"no reply within {self._timeout}s") from exc
        except (asyncio.IncompleteReadError, ConnectionError) as exc:
            self._broken = True
            raise PolicyFailure(f"external policy stream closed: {exc}") from exc
        except PolicyProtocolError as exc:
            self._broken = True
            raise PolicyFailure(f"malformed reply: {exc}") from exc

        if isinstance(reply, ErrorReply):
            self._broken = True
            raise PolicyFailure(f"external policy reported an error: {reply.message}")
        return reply

    async def _kill(self) -> None:
        process = self._process
        self._process = None
        if process is not None and process.returncode is None:
            process.kill()
            await process.wait()


class ExternalPolicy(PromptPolicy):
    """外部プロセスの方策を同期のPromptPolicyとして使うアダプタ.

    内部に専用のイベントループ（asyncio.Runner）を持ち、
    1つのインスタンスは1つの子プロセスを直列に使う。
    並列実行ではワーカーごとにインスタンスを作る。
    """

    def __init__(self, command: str | Sequence[str], step_timeout: float = DEFAULT_STEP_TIMEOUT) -> None:
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._client = AsyncPolicyClient(argv, step_timeout)
        self._runner: asyncio.Runner | None = asyncio.Runner()

    @override
    def reset(self, tokens: np.ndarray, max_steps: int) -> None:
        self._run_reset(tokens, max_steps)

    @override
    def act(self, state: EnvState, rtg: float, recent: Sequence[Transition]) -> Action:
        return self._require_runner().run(self._client.act(state, rtg, recent))

    @override
    def close(self) -> None:
        if self._runner is None:
            return
        try:
            self._runner.run(self._client.stop())
        finally:
            self._runner.close()
            self._runner = None

    def __enter__(self) -> Self:
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.close()

    def _run_reset(self, tokens: np.ndarray, max_steps: int) -> None:
        self._require_runner().run(self._client.reset(tokens.tolist(), max_steps))

    def _require_runner(self) -> asyncio.Runner:
        if self._runner is None:
            raise PolicyError("external policy is closed")
        return self._runner


class PolicyRequestHandler:
    """外部方策プロトコルの要求を処理するハンドラ.

    1行読む→パース→方策を呼ぶ→応答を書く、をcloseか切断まで繰り返す。
    処理できない要求にはerror応答を返し、ループは続ける。
    """

    def __init__(self, policy: PromptPolicy, protocol: PolicyWireProtocol | None = None) -> None:
        """ハンドラを初期化.

        Args:
            policy: 要求に答える方策
            protocol: ワイヤプロトコル（Noneの場合は新規作成）
        """
        self._policy = policy
        self._protocol = protocol or PolicyWireProtocol()
        self._step_count = 0

    async def handle(self, reader: StreamReader, writer: StreamWriter) -> None:
        """要求処理のメインループ.

        Args:
            reader: 要求を読むStreamReader
            writer: 応答を書くStreamWriter
        """
        logger.info("Policy server ready")

        try:
            while True:
                try:
                    line = await self._protocol.read_line(reader)
                    request = self._protocol.parse_request(line)
                    if isinstance(request, CloseRequest):
                        logger.info("Close requested")
                        break
                    reply = self.execute(request)

                except (PolicyProtocolError, PolicyError, PromptError) as e:
                    reply = ErrorReply(str(e))

                except asyncio.IncompleteReadError:
                    logger.info("Client disconnected")
                    break

                except Exception:
                    logger.exception("Unexpected error")
                    reply = ErrorReply("internal policy error")

                writer.write(self._protocol.encode_reply(reply))
                await writer.drain()

        finally:
            writer.close()
            with suppress(ConnectionError, BrokenPipeError):
                await writer.wait_closed()
            self._policy.close()
            logger.info("Policy server closed")

    def execute(self, request: ResetRequest | ActRequest) -> Reply:
        """reset/act要求を方策に渡して応答を作る"""
        if isinstance(request, ResetRequest):
            self._policy.reset(np.asarray(request.prompt, dtype=np.float64), request.max_steps)
            self._step_count = 0
            return OkReply()

        state = EnvState(position=request.state, step_count=self._step_count, done=False)
        recent = [
            Transition(rtg=row[0], state=(row[1], row[2]), action=(row[3], row[4], row[5]))
            for row in request.recent
            if len(row) == 6
        ]
        action = self._policy.act(state, request.rtg, recent)
        self._step_count += 1
        return ActionReply(translate=action.translate, stop=action.stop)


async def serve_stdio(policy: PromptPolicy, protocol: PolicyWireProtocol | None = None) -> None:
    """標準入出力でPolicyRequestHandlerを動かす.

    標準出力はプロトコル専用なので、ログは標準エラーに出すこと。
    """
    loop = asyncio.get_running_loop()
    reader = StreamReader(limit=MAX_LINE_BYTES)
    await loop.connect_read_pipe(lambda: asyncio.StreamReaderProtocol(reader), sys.stdin)
    transport, stream_protocol = await loop.connect_write_pipe(
        asyncio.streams.FlowControlMixin, sys.stdout
    )
    writer = StreamWriter(transport, stream_protocol, reader, loop)

    handler = PolicyRequestHandler(policy, protocol)
    await handler.handle(reader, writer)
