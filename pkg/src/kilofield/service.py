"""Frame-streaming render service: a WebSocket endpoint driving a live renderer.

Control messages are JSON text frames, rendered frames are binary messages
with a fixed 32-byte header (see docs/protocol.md). The session keeps a
latest-wins mailbox: the render loop always snapshots the newest camera and
settings, aborting a stale in-flight frame between tile bands. Frames for a
congested client are dropped through a bounded queue, never buffered.
"""

from __future__ import annotations

import asyncio
import json
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np
import websockets
from websockets.asyncio.server import serve as ws_serve

from .cameras import look_at_pose
from .images import to_uint8
from .pathtrace import ConstantEnv, NeuralObject, Scene, render_pathtraced
from .surface import (
    PASSES,
    FieldSurface,
    RenderAborted,
    RenderSettings,
    pass_image,
    render_frame,
)

PROTOCOL_VERSION = 1
CLOSE_VERSION_MISMATCH = 4001
FRAME_HEADER = struct.Struct("<QIIHHfII")  # seq, w, h, format, renderer, ms, spp, camgen
PIXEL_RGB8 = 1
RENDERER_SPHERE = 0
RENDERER_PATH = 1
RENDERER_NAMES = {"sphere": RENDERER_SPHERE, "path": RENDERER_PATH}
SEND_QUEUE_FRAMES = 2


@dataclass(frozen=True)
class SessionState:
    position: tuple = (0.0, 0.0, 2.5)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov: float = 0.6911503837897545
    generation: int = 0
    render_pass: str = "color"
    width: int = 256
    height: int = 256
    spp: int = 16
    renderer: str = "sphere"

    def accumulation_key(self):
        return (self.position, self.look_at, self.up, self.fov, self.width, self.height, self.renderer, self.render_pass)


@dataclass
class FrameMeta:
    sequence: int
    width: int
    height: int
    renderer_kind: int
    render_ms: float
    spp: int
    camera_generation: int
    pixel_format: int = PIXEL_RGB8


def encode_frame(image_u8: np.ndarray, meta: FrameMeta) -> bytes:
    h, w = image_u8.shape[:2]
    if (w, h) != (meta.width, meta.height):
        raise ValueError("image does not match meta dimensions")
    head = FRAME_HEADER.pack(
        meta.sequence, meta.width, meta.height, meta.pixel_format,
        meta.renderer_kind, meta.render_ms, meta.spp, meta.camera_generation,
    )
    return head + image_u8.astype(np.uint8).tobytes()


def decode_frame(data: bytes) -> tuple[FrameMeta, np.ndarray]:
    seq, w, h, fmt, rk, ms, spp, gen = FRAME_HEADER.unpack_from(data, 0)
    expect = FRAME_HEADER.size + 3 * w * h
    if len(data) != expect:
        raise ValueError(f"frame is {len(data)} bytes, expected {expect}")
    img = np.frombuffer(data, dtype=np.uint8, offset=FRAME_HEADER.size).reshape(h, w, 3)
    return FrameMeta(seq, w, h, rk, ms, spp, gen, fmt), img.copy()


def _finite_vec3(v) -> bool:
    try:
        arr = np.asarray(v, dtype=np.float64)
    except (TypeError, ValueError):
        return False
    return arr.shape == (3,) and bool(np.all(np.isfinite(arr)))


def handle_message(state: SessionState, msg: dict, max_resolution: int = 512):
    """Pure session transition; returns (new_state, reply dicts)."""
    kind = msg.get("type")
    if kind == "ping":
        return state, [{"type": "pong"}]
    if kind == "camera":
        vecs = [msg.get("position"), msg.get("look_at"), msg.get("up")]
        if not all(_finite_vec3(v) for v in vecs):
            return state, [{"type": "error", "message": "camera vectors must be finite 3-vectors"}]
        fov = msg.get("fov", state.fov)
        if not (isinstance(fov, (int, float)) and 0 < fov < np.pi):
            return state, [{"type": "error", "message": "fov must be in (0, pi)"}]
        new = replace(
            state,
            position=tuple(map(float, msg["position"])),
            look_at=tuple(map(float, msg["look_at"])),
            up=tuple(map(float, msg["up"])),
            fov=float(fov),
            generation=state.generation + 1,
        )
        return new, []
    if kind == "settings":
        replies = []
        updates = {}
        if "pass" in msg:
            if msg["pass"] not in PASSES:
                return state, [{"type": "error", "message": f"unknown pass {msg['pass']!r}"}]
            updates["render_pass"] = msg["pass"]
        if "resolution" in msg:
            try:
                w, h = (int(x) for x in msg["resolution"])
            except (TypeError, ValueError):
                return state, [{"type": "error", "message": "resolution must be [width, height]"}]
            if w < 1 or h < 1:
                return state, [{"type": "error", "message": "resolution must be positive"}]
            if w > max_resolution or h > max_resolution:
                w = min(w, max_resolution)
                h = min(h, max_resolution)
                replies.append({"type": "warning", "message": f"resolution clamped to {w}x{h}"})
            updates["width"], updates["height"] = w, h
        if "spp" in msg:
            spp = int(msg["spp"])
            if spp < 1:
                spp = 1
                replies.append({"type": "warning", "message": "spp clamped to 1"})
            updates["spp"] = spp
        if "renderer" in msg:
            if msg["renderer"] not in RENDERER_NAMES:
                return state, [{"type": "error", "message": f"unknown renderer {msg['renderer']!r}"}]
            updates["renderer"] = msg["renderer"]
        return replace(state, **updates), replies
    return state, [{"type": "error", "message": f"unknown message type {kind!r}"}]


class _Session:
    """Mailbox shared between the socket reader and the render loop."""

    def __init__(self):
        self.state = SessionState()

    def changed_since(self, snapshot: SessionState) -> bool:
        return self.state.accumulation_key() != snapshot.accumulation_key() or self.state.generation != snapshot.generation


class RenderService:
    def __init__(self, kfield, host: str = "127.0.0.1", port: int = 0, max_resolution: int = 512, background=(0.05, 0.06, 0.08)):
        self.surface = FieldSurface(kfield)
        self.scene = Scene([NeuralObject(self.surface)], ConstantEnv((1.0, 1.0, 1.0)))
        self.host = host
        self.port = port
        self.max_resolution = max_resolution
        self.background = background
        self._server = None

    async def start(self) -> int:
        self._server = await ws_serve(self._handler, self.host, self.port, max_size=2**22)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self):
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def serve_forever(self):
        await self.start()
        try:
            await asyncio.Future()
        finally:
            await self.stop()

    # -- session plumbing ---------------------------------------------------

    async def _handler(self, ws):
        await ws.send(json.dumps({"type": "hello", "version": PROTOCOL_VERSION}))
        try:
            first = await asyncio.wait_for(ws.recv(), timeout=10.0)
            hello = json.loads(first)
        except (asyncio.TimeoutError, json.JSONDecodeError, websockets.ConnectionClosed):
            await ws.close(CLOSE_VERSION_MISMATCH, "expected hello")
            return
        if hello.get("type") != "hello" or hello.get("version") != PROTOCOL_VERSION:
            await ws.close(CLOSE_VERSION_MISMATCH, "protocol version mismatch")
            return

        session = _Session()
        queue: asyncio.Queue[bytes] = asyncio.Queue(maxsize=SEND_QUEUE_FRAMES)
        tasks = [
            asyncio.create_task(self._reader(ws, session)),
            asyncio.create_task(self._render_loop(ws, session, queue)),
            asyncio.create_task(self._sender(ws, queue)),
        ]
        try:
            done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_COMPLETED)
        finally:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)

    async def _reader(self, ws, session: _Session):
        async for raw in ws:
            if isinstance(raw, bytes):
                await ws.send(json.dumps({"type": "error", "message": "binary messages are not accepted"}))
                continue
            try:
                msg = json.loads(raw)
            except json.JSONDecodeError:
                await ws.send(json.dumps({"type": "error", "message": "malformed JSON"}))
                continue
            session.state, replies = handle_message(session.state, msg, self.max_resolution)
            for r in replies:
                await ws.send(json.dumps(r))

    async def _sender(self, ws, queue: asyncio.Queue):
        while True:
            frame = await queue.get()
            await ws.send(frame)

    async def _render_loop(self, ws, session: _Session, queue: asyncio.Queue):
        loop = asyncio.get_running_loop()
        seq = 0
        accum_key = None
        accum_hdr = None
        accum_spp = 0
        while True:
            snapshot = session.state
            if snapshot.renderer == "path" and accum_key == snapshot.accumulation_key() and accum_spp >= snapshot.spp:
                await asyncio.sleep(0.01)  # converged; wait for input
                continue
            t0 = time.perf_counter()
            try:
                payload = await loop.run_in_executor(
                    None, self._render_once, snapshot, session, accum_key, accum_hdr, accum_spp
                )
            except RenderAborted:
                continue
            img_u8, accum_key, accum_hdr, accum_spp = payload
            ms = (time.perf_counter() - t0) * 1000.0
            seq += 1
            meta = FrameMeta(
                sequence=seq,
                width=snapshot.width,
                height=snapshot.height,
                renderer_kind=RENDERER_NAMES[snapshot.renderer],
                render_ms=ms,
                spp=accum_spp if snapshot.renderer == "path" else 1,
                camera_generation=snapshot.generation,
            )
            frame = encode_frame(img_u8, meta)
            while True:
                try:
                    queue.put_nowait(frame)
                    break
                except asyncio.QueueFull:
                    queue.get_nowait()  # drop the stalest frame
            await asyncio.sleep(0)

    def _render_once(self, snapshot: SessionState, session: _Session, accum_key, accum_hdr, accum_spp):
        pose = look_at_pose(
            snapshot.position, snapshot.look_at, snapshot.up, snapshot.fov, snapshot.width, snapshot.height
        )
        abort = lambda: session.changed_since(snapshot)
        if snapshot.renderer == "sphere":
            settings = RenderSettings(render_pass=snapshot.render_pass)
            buffers = render_frame(self.surface, pose, settings, background=self.background, abort_check=abort)
            img = pass_image(buffers, snapshot.render_pass, self.background)
            return to_uint8(img), None, None, 0
        # progressive path tracing: one spp batch per cycle, reset on change
        key = snapshot.accumulation_key()
        if accum_key != key:
            accum_hdr = np.zeros((snapshot.height, snapshot.width, 3))
            accum_spp = 0
        result = render_pathtraced(self.scene, pose, spp=1, seed=12345, sample_offset=accum_spp)
        if session.changed_since(snapshot):
            raise RenderAborted("stale path-trace batch")
        accum_hdr = accum_hdr + result.hdr
        accum_spp += 1
        ldr = np.clip(accum_hdr / accum_spp, 0.0, 1.0) ** (1.0 / 2.2)
        return to_uint8(ldr), key, accum_hdr, accum_spp


def serve(kfield, bind: str = "127.0.0.1:8765", max_resolution: int = 512):
    """Blocking entry: serve the field until interrupted."""
    host, _, port = bind.partition(":")
    service = RenderService(kfield, host or "127.0.0.1", int(port or 8765), max_resolution)

    async def _run():
        actual = await service.start()
        print(f"serving ws://{service.host}:{actual}/render (protocol v{PROTOCOL_VERSION})")
        try:
            await asyncio.Future()
        except asyncio.CancelledError:
            pass
        finally:
            await service.stop()

    try:
        asyncio.run(_run())
    except KeyboardInterrupt:
        pass
    return 0
