"""Line-delimited wire protocol for external prompt-conditioned policies.

このモジュールは、外部プロセスの方策とやり取りするメッセージの
パース（バイト列→Pythonオブジェクト）とエンコード（Pythonオブジェクト→バイト列）を担当します。

1行に1メッセージのJSONオブジェクトで、"type" キーで種類を区別します。
数値はすべて10進テキストで、NaN/Infinityは受け付けません。

    → {"type":"reset","task_hint":null,"prompt":[...],"max_steps":100}
    ← {"type":"ok"}
    → {"type":"act","state":[x,y],"rtg":10.0,"recent":[[rtg,s_x,s_y,a_x,a_y,a_stop],...]}
    ← {"type":"action","translate":[x,y],"stop":0}
    → {"type":"close"}
"""

import json
import math
from asyncio import LimitOverrunError, StreamReader
from dataclasses import dataclass, field
from typing import Any

MAX_LINE_BYTES = 1 << 20


@dataclass
class ResetRequest:
    """エピソード開始 (reset)"""
    prompt: list[float]
    max_steps: int
    task_hint: None = None

@dataclass
class ActRequest:
    """行動要求 (act)"""
    state: tuple[float, float]
    rtg: float
    recent: list[list[float]] = field(default_factory=list)

@dataclass
class CloseRequest:
    """終了要求 (close)"""

@dataclass
class OkReply:
    """resetへの応答 (ok)"""

@dataclass
class ActionReply:
    """actへの応答 (action)"""
    translate: tuple[float, float]
    stop: bool

@dataclass
class ErrorReply:
    """処理できなかった要求への応答 (error)"""
    message: str


Request = ResetRequest | ActRequest | CloseRequest
Reply = OkReply | ActionReply | ErrorReply


class PolicyWireProtocol:
    """外部方策プロトコルのパーサ・エンコーダ.

    責務:
    - 要求・応答メッセージのエンコード（1行のJSON）
    - 受信した1行のパースと型・値の検証
    """

    async def read_line(self, reader: StreamReader) -> bytes:
        """1メッセージ分の行を読む（改行は除く）.

        長すぎる行は次の改行まで読み捨ててから PolicyProtocolError を出すので、
        次の呼び出しは後続の行から読める。

        Raises:
            asyncio.IncompleteReadError: 相手が行の途中で切断した
            PolicyProtocolError: 行が長すぎる
        """
        try:
            line = await reader.readuntil(b"\n")
        except LimitOverrunError as exc:
            await self._skip_line(reader, exc.consumed)
            raise PolicyProtocolError("message exceeds the line limit") from exc
        if len(line) > MAX_LINE_BYTES:
            raise PolicyProtocolError(f"message exceeds {MAX_LINE_BYTES} bytes")
        return line[:-1]

    async def _skip_line(self, reader: StreamReader, consumed: int) -> None:
        while True:
            await reader.readexactly(consumed)
            try:
                await reader.readuntil(b"\n")
                return
            except LimitOverrunError as exc:
                consumed = exc.consumed

    def encode_request(self, request: Request) -> bytes:
        """要求をエンコードする"""
        if isinstance(request, ResetRequest):
            payload: dict[str, Any] = {
                "type": "reset",
                "task_hint": None,
                "prompt": [float(v) for v in request.prompt],
                "max_steps": int(request.max_steps),
            }
        elif isinstance(request, ActRequest):
            payload = {
                "type": "act",
                "state": [float(request.state[0]), float(request.state[1])],
                "rtg": float(request.rtg),
                "recent": [[float(v) for v in row] for row in request.recent],
            }
        elif isinstance(request, CloseRequest):
            payload = {"type": "close"}
        else:
            raise ValueError(f"Unsupported type: {type(request)}")
        return self._dump(payload)

    def encode_reply(self, reply: Reply) -> bytes:
        """応答をエンコードする"""
        if isinstance(reply, OkReply):
            payload: dict[str, Any] = {"type": "ok"}
        elif isinstance(reply, ActionReply):
            payload = {
                "type": "action",
                "translate": [float(reply.translate[0]), float(reply.translate[1])],
                "stop": 1 if reply.stop else 0,
            }
        elif isinstance(reply, ErrorReply):
            payload = {"type": "error", "message": reply.message}
        else:
            raise ValueError(f"Unsupported type: {type(reply)}")
        return self._dump(payload)

    def parse_request(self, line: bytes) -> Request:
        """要求の1行をパースする"""
        payload = self._load(line)
        kind = payload.get("type")

        if kind == "reset":
            prompt = _number_list(payload.get("prompt"), "prompt")
            if not prompt:
                raise PolicyProtocolError("reset: empty prompt")
            max_steps = payload.get("max_steps")
            if not isinstance(max_steps, int) or isinstance(max_steps, bool) or max_steps < 1:
                raise PolicyProtocolError(f"reset: invalid max_steps {max_steps!r}")
            return ResetRequest(prompt=prompt, max_steps=max_steps)
        elif kind == "act":
            state = _number_list(payload.get("state"), "state")
            if len(state) != 2:
                raise PolicyProtocolError(f"act: state must have 2 numbers, got {len(state)}")
            rtg = _number(payload.get("rtg"), "rtg")
            recent_raw = payload.get("recent", [])
            if not isinstance(recent_raw, list):
                raise PolicyProtocolError("act: recent must be a list")
            recent = [_number_list(row, "recent") for row in recent_raw]
            return ActRequest(state=(state[0], state[1]), rtg=rtg, recent=recent)
        elif kind == "close":
            return CloseRequest()
        else:
            raise PolicyProtocolError(f"unknown request type {kind!r}")

    def parse_reply(self, line: bytes) -> Reply:
        """応答の1行をパースする"""
        payload = self._load(line)
        kind = payload.get("type")

        if kind == "ok":
            return OkReply()
        elif kind == "action":
            translate = _number_list(payload.get("translate"), "translate")
            if len(translate) != 2:
                raise PolicyProtocolError(
                    f"action: translate must have 2 numbers, got {len(translate)}"
                )
            stop = payload.get("stop")
            if stop not in (0, 1) or isinstance(stop, float):
                raise PolicyProtocolError(f"action: stop must be 0 or 1, got {stop!r}")
            return ActionReply(translate=(translate[0], translate[1]), stop=bool(stop))
        elif kind == "error":
            return ErrorReply(message=str(payload.get("message", "")))
        else:
            raise PolicyProtocolError(f"unknown reply type {kind!r}")

    def _dump(self, payload: dict[str, Any]) -> bytes:
        try:
            text = json.dumps(payload, allow_nan=False, separators=(",", ":"))
        except ValueError as exc:
            raise PolicyProtocolError(f"cannot encode non-finite number: {exc}") from exc
        return text.encode("utf-8") + b"\n"

    def _load(self, line: bytes) -> dict[str, Any]:
        try:
            payload = json.loads(line.decode("utf-8"), parse_constant=_reject_constant)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise PolicyProtocolError(f"malformed message: {exc}") from exc
        if not isinstance(payload, dict):
            raise PolicyProtocolError("message must be a JSON object")
        return payload


def _reject_constant(name: str) -> float:
    raise PolicyProtocolError(f"non-finite number {name} is not allowed")


def _number(value: object, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, int | float):
        raise PolicyProtocolError(f"{name}: expected a number, got {value!r}")
    number = float(value)
    if not math.isfinite(number):
        raise PolicyProtocolError(f"{name}: non-finite number")
    return number


def _number_list(value: object, name: str) -> list[float]:
    if not isinstance(value, list):
        raise PolicyProtocolError(f"{name}: expected a list of numbers, got {value!r}")
    return [_number(v, name) for v in value]


class PolicyProtocolError(Exception):
    """外部方策プロトコルのパースエラー.

    例:
        raise PolicyProtocolError("unknown reply type 'hello'")
        raise PolicyProtocolError("action: stop must be 0 or 1, got 2")
    """

    pass
