"""Live session service over WebSocket.

One connection drives one dialogue session on a fixed-cadence frame clock.
Client messages stage at most one user symbol; each tick consumes the latest
staged symbol (or user silence) and replies with the frame's outcome. The
protocol is plain JSON text frames:

  client -> server: {"type":"hello","frame_ms":250}
                    {"type":"user_token","token":"a7"}
                    {"type":"reset"}
                    {"type":"bye"}
  server -> client: {"type":"ready","session":"<id>","vocab":{...}}
                    {"type":"tick","t":17,"user":"a7","agent":"<SIL>",
                     "g":0.04,"phase":"LISTENING"}
                    {"type":"error","reason":"..."}

Unknown fields are ignored; an unknown "type" draws an error reply and the
session stays intact.
"""

from __future__ import annotations

import asyncio
import json
import logging
import uuid

from websockets.asyncio.server import serve as _ws_serve
from websockets.exceptions import ConnectionClosed

from .engine import Session
from .model import ModelParams
from .vocab import Vocabs

log = logging.getLogger("duplexthink.server")


class _Connection:
    """Per-connection state: the session, the one-slot mailbox, the clock."""

    def __init__(self, service: "SessionService", ws):
        self.service = service
        self.ws = ws
        self.session: Session | None = None
        self.session_id: str | None = None
        self.mailbox: int | None = None  # staged audio id; latest wins
        self.frame_ms = service.frame_ms
        self.ticker: asyncio.Task | None = None

    async def send(self, obj: dict) -> None:
        await self.ws.send(json.dumps(obj))

    async def error(self, reason: str) -> None:
        await self.send({"type": "error", "reason": reason})

    def start_session(self) -> dict:
        self.session = Session(self.service.params)
        self.session_id = uuid.uuid4().hex[:12]
        self.mailbox = None
        v = self.service.vocabs
        return {
            "type": "ready",
            "session": self.session_id,
            "vocab": {
                "audio": list(v.audio.tokens),
                "text": list(v.text.tokens),
                "frame_ms": self.frame_ms,
            },
        }

    async def run_clock(self) -> None:
        loop = asyncio.get_running_loop()
        period = self.frame_ms / 1000.0
        deadline = loop.time() + period
        try:
            while True:
                await asyncio.sleep(max(0.0, deadline - loop.time()))
                deadline += period
                session = self.session
                if session is None:
                    continue
                symbol = self.mailbox if self.mailbox is not None else self.service.vocabs.audio.USIL_ID
                self.mailbox = None
                try:
                    out = session.step(symbol)
                except ValueError as exc:
                    await self.error(f"session exhausted: {exc}")
                    return
                await self.send({
                    "type": "tick",
                    "t": session.frame - 1,
                    "user": self.service.vocabs.audio.surface(symbol),
                    "agent": self.service.vocabs.text.surface(out.token),
                    "g": round(out.ghat, 4),
                    "phase": out.phase,
                })
        except (ConnectionClosed, asyncio.CancelledError):
            return

    async def handle(self) -> None:
        try:
            async for raw in self.ws:
                try:
                    msg = json.loads(raw)
                    if not isinstance(msg, dict):
                        raise ValueError("message must be a JSON object")
                except (json.JSONDecodeError, ValueError) as exc:
                    await self.error(f"malformed message: {exc}")
                    continue
                kind = msg.get("type")
                if kind == "hello":
                    frame_ms = msg.get("frame_ms")
                    if isinstance(frame_ms, (int, float)) and frame_ms > 0:
                        self.frame_ms = float(frame_ms)
                    await self.send(self.start_session())
                    if self.ticker is None:
                        self.ticker = asyncio.ensure_future(self.run_clock())
                elif kind == "user_token":
                    if self.session is None:
                        await self.error("no session: send hello first")
                        continue
                    token = msg.get("token")
                    try:
                        self.mailbox = self.service.vocabs.audio.id(token)
                    except (KeyError, TypeError):
                        await self.error(f"unknown user token {token!r}")
                elif kind == "reset":
                    if self.session is None:
                        await self.error("no session: send hello first")
                        continue
                    await self.send(self.start_session())
                elif kind == "bye":
                    break
                else:
                    await self.error(f"unknown message type {kind!r}")
        finally:
            if self.ticker is not None:
                self.ticker.cancel()


class SessionService:
    def __init__(self, params: ModelParams, frame_ms: float = 250.0):
        self.params = params
        self.vocabs: Vocabs = params.config.vocabs()
        self.frame_ms = frame_ms

    async def handler(self, ws) -> None:
        conn = _Connection(self, ws)
        log.info("connection open")
        try:
            await conn.handle()
        finally:
            log.info("connection closed")

    async def serve_async(self, host: str, port: int):
        return await _ws_serve(self.handler, host, port)


def serve(params: ModelParams, bind: str = "127.0.0.1:8731", frame_ms: float = 250.0) -> None:
    """Serve sessions until interrupted. bind is host:port; the port must be
    free or the call raises OSError."""
    host, _, port_s = bind.rpartition(":")
    host = host or "127.0.0.1"
    port = int(port_s)
    service = SessionService(params, frame_ms=frame_ms)

    async def main():
        server = await service.serve_async(host, port)
        log.info("serving on ws://%s:%d (frame %.0f ms)", host, port, frame_ms)
        await server.wait_closed()

    asyncio.run(main())
