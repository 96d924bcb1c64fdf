"""OpenAI-style completion endpoints streaming tokens over server-sent events."""

from __future__ import annotations

import asyncio
import itertools
import json
import logging
import time
from typing import Any, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .frontend import NoFreeSlot, RequestRecord
from .ring_buffer import ArenaExhausted
from .system import System
from .transport import TransportError

logger = logging.getLogger(__name__)

DONE_EVENT = b"data: [DONE]\n\n"
RETRY_AFTER_S = 1
DEFAULT_MAX_TOKENS = 16


def sse_event(obj: dict) -> bytes:
    """One event: ``data: `` + single-line JSON + blank line."""
    return b"data: " + json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode() + b"\n\n"


class BadRequest(ValueError):
    pass


def _error(status: int, message: str, kind: str, headers: Optional[dict] = None) -> JSONResponse:
    return JSONResponse({"error": {"message": message, "type": kind}}, status_code=status,
                        headers=headers)


def parse_body(body: Any, chat: bool) -> dict:
    if not isinstance(body, dict):
        raise BadRequest("request body must be a JSON object")
    if chat:
        msgs = body.get("messages")
        if not isinstance(msgs, list) or not msgs:
            raise BadRequest("messages must be a nonempty list")
        parts = []
        for m in msgs:
            if not isinstance(m, dict) or not isinstance(m.get("content"), str):
                raise BadRequest("each message needs string content")
            parts.append(f"{m.get('role', 'user')}: {m['content']}\n")
        prompt = "".join(parts)
    else:
        prompt = body.get("prompt")
        if isinstance(prompt, list) and len(prompt) == 1 and isinstance(prompt[0], str):
            prompt = prompt[0]
        if not isinstance(prompt, str):
            raise BadRequest("prompt must be a string")
    if not prompt:
        raise BadRequest("prompt must be nonempty")
    max_tokens = body.get("max_tokens", DEFAULT_MAX_TOKENS)
    if isinstance(max_tokens, bool) or not isinstance(max_tokens, int) or max_tokens < 1:
        raise BadRequest("max_tokens must be an integer >= 1")
    for key in ("temperature", "top_p"):
        v = body.get(key)
        if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise BadRequest(f"{key} must be a number")
    stream = body.get("stream", False)
    if not isinstance(stream, bool):
        raise BadRequest("stream must be a boolean")
    seed = body.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise BadRequest("seed must be a non-negative integer")
    return {"prompt": prompt, "max_tokens": max_tokens, "stream": stream, "seed": seed,
            "model": str(body.get("model", "pseudo"))}


class _Bridge:
    """Carries frontend callbacks (reader thread) onto the event loop."""

    def __init__(self, loop: asyncio.AbstractEventLoop) -> None:
        self.loop = loop
        self.queue: asyncio.Queue = asyncio.Queue()
        self.submitted: asyncio.Future = loop.create_future()

    def sink(self, rec: RequestRecord, ids: Optional[list[int]], now: float) -> None:
        self.loop.call_soon_threadsafe(self.queue.put_nowait, ids)

    def settle(self, exc: Optional[BaseException]) -> None:
        def _set():
            if not self.submitted.done():
                if exc is None:
                    self.submitted.set_result(None)
                else:
                    self.submitted.set_exception(exc)
        self.loop.call_soon_threadsafe(_set)


def create_app(system: System) -> FastAPI:
    app = FastAPI(title="ringserve")
    fe = system.frontend
    tok = system.tokenizer
    ids = itertools.count(1)

    def submit_proc(rec: RequestRecord, bridge: _Bridge):
        try:
            yield from fe.submit(rec)
        except BaseException as exc:  # reported to the handler, never to the runtime
            bridge.settle(exc)
            return
        bridge.settle(None)

    async def handle(request: Request, chat: bool):
        try:
            body = await request.json()
        except (json.JSONDecodeError, UnicodeDecodeError):
            return _error(400, "malformed JSON body", "invalid_request_error")
        try:
            params = parse_body(body, chat)
        except BadRequest as exc:
            return _error(400, str(exc), "invalid_request_error")
        prompt_ids = tok.encode(params["prompt"])
        bridge = _Bridge(asyncio.get_running_loop())
        rec = fe.new_request(prompt_ids, params["max_tokens"], params["seed"], sink=bridge.sink)
        system.runtime.spawn(submit_proc(rec, bridge), f"submit-{rec.request_id}")
        try:
            await bridge.submitted
        except (NoFreeSlot, ArenaExhausted):
            return _error(429, "no free request slot; retry later", "rate_limit_error",
                          {"Retry-After": str(RETRY_AFTER_S)})
        except TransportError as exc:
            return _error(500, f"transport failure: {exc}", "server_error")

        rid = f"{'chatcmpl' if chat else 'cmpl'}-{next(ids)}"
        created = int(time.time())
        obj_name = "chat.completion.chunk" if chat else "text_completion"

        def chunk(text: str, finish: Optional[str]) -> dict:
            choice = {"index": 0, "finish_reason": finish}
            if chat:
                choice["delta"] = {"content": text}
            else:
                choice["text"] = text
            return {"id": rid, "object": obj_name, "created": created, "model": params["model"],
                    "choices": [choice]}

        async def tokens(flush_tail: bool):
            """Text per delivered token; raises TransportError if the request failed.

            A trailing incomplete UTF-8 sequence only appears when ``flush_tail``
            is set, so streams carry exactly one event per token.
            """
            detok = tok.detokenizer()
            while True:
                ids_ = await bridge.queue.get()
                if ids_ is None:
                    if rec.error:
                        raise TransportError(rec.error)
                    tail = detok.flush()
                    if tail and flush_tail:
                        yield tail
                    return
                for i in ids_:
                    yield detok.feed([i])

        if params["stream"]:
            async def stream():
                try:
                    async for text in tokens(False):
                        yield sse_event(chunk(text, None))
                    yield DONE_EVENT
                except TransportError as exc:
                    yield sse_event({"error": {"message": str(exc), "type": "server_error"}})
                    yield DONE_EVENT
                finally:
                    if not rec.finished:
                        fe.disconnect(rec)

            return StreamingResponse(stream(), media_type="text/event-stream",
                                     headers={"Cache-Control": "no-cache"})

        try:
            text = "".join([t async for t in tokens(True)])
        except TransportError as exc:
            return _error(500, f"transport failure: {exc}", "server_error")
        finish = "stop" if len(rec.tokens) < rec.max_output else "length"
        choice = {"index": 0, "finish_reason": finish}
        if chat:
            choice["message"] = {"role": "assistant", "content": text}
        else:
            choice["text"] = text
        return {"id": rid, "object": "chat.completion" if chat else "text_completion",
                "created": created, "model": params["model"], "choices": [choice],
                "usage": {"prompt_tokens": len(prompt_ids), "completion_tokens": len(rec.tokens)}}

    @app.post("/v1/completions")
    async def completions(request: Request):
        return await handle(request, chat=False)

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        return await handle(request, chat=True)

    @app.get("/health")
    async def health():
        return {"ok": system.runtime.active, "active_requests": len(fe.tracker.by_slot)}

    return app
