"""Interactive frame service.

One WebSocket session per client; each session owns its camera, its level
range / screensize threshold, and a background subset builder. Wire
protocol (text JSON envelopes; frames are binary messages of
[u32 header length | header JSON | PNG bytes]):

  client -> server: hello{protocol_version}, set_view{rotation_wxyz,
      translation, fx, fy, width, height, [cx, cy, near, ref_policy]},
      set_lod{l_start, l_end, gamma}, request_frame{}, bye{}
  server -> client: hello_ack{protocol_version, tau, rho, l_max, levels,
      defaults}, error{code, message}, frame{generation, stats} + PNG
"""

from __future__ import annotations

import json
import struct
import time

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .camera import Camera, camera_from_quat
from .cli import DEFAULTS
from .io import encode_png, load_model
from .rasterizer import render
from .selective import SelectionConfig, _BackgroundBuilder, build_subset

PROTOCOL_VERSION = 1


class Session:
    """Per-client state: camera, LOD config, subset snapshot, builder."""

    def __init__(self, model, manifest: dict):
        self.model = model
        self.manifest = manifest
        defaults = manifest.get("defaults") or {}
        self.gamma = float(defaults.get("gamma", DEFAULTS["gamma"]))
        self.update_period = int(defaults.get("update_period", DEFAULTS["update_period"]))
        self.l_start = 1
        self.l_end = model.l_max
        self.ref_policy = "average"
        self.camera: Camera | None = None
        self.generation = 0
        self.snapshot = None
        self.snapshot_info = None
        self.frames_since_rebuild = 0
        self.frame_index = 0
        self.builder = _BackgroundBuilder(model, self._config())

    def _config(self) -> SelectionConfig:
        return SelectionConfig(l_start=self.l_start, l_end=self.l_end,
                               gamma=self.gamma, ref_policy=self.ref_policy,
                               update_period=self.update_period)

    def _ref_pos(self) -> np.ndarray:
        if self.ref_policy == "current" and self.camera is not None:
            return self.camera.position
        ref = self.manifest.get("ref_pos")
        if ref is not None:
            return np.asarray(ref, dtype=np.float64)
        return self.camera.position if self.camera is not None else np.zeros(3)

    def set_lod(self, l_start: int, l_end: int, gamma: float, ref_policy: str | None) -> None:
        if not 1 <= l_start <= l_end <= self.model.l_max:
            raise ValueError(
                f"level range [{l_start}, {l_end}] out of bounds 1..{self.model.l_max}")
        if gamma <= 0:
            raise ValueError("gamma must be > 0")
        if ref_policy is not None:
            if ref_policy not in ("average", "current"):
                raise ValueError(f"unknown ref policy {ref_policy!r}")
            self.ref_policy = ref_policy
        self.l_start, self.l_end, self.gamma = l_start, l_end, gamma
        self.builder.cfg = self._config()
        self._rebuild_sync()

    def _focal(self) -> float:
        return self.camera.fx if self.camera is not None else 64.0

    def _rebuild_sync(self) -> None:
        self.generation += 1
        splats, info = build_subset(self.model, self._ref_pos(), self._config(), self._focal())
        self.snapshot, self.snapshot_info = splats, info
        self.frames_since_rebuild = 0

    def render_frame(self) -> tuple[bytes, dict]:
        if self.camera is None:
            raise ValueError("set_view required before request_frame")
        if self.snapshot is None:
            self._rebuild_sync()
        snap, _err = self.builder.poll()
        if snap is not None:
            self.snapshot, self.snapshot_info = snap.splats, snap.info
            self.generation = snap.generation
            self.frames_since_rebuild = 0
        t0 = time.perf_counter()
        out = render(self.snapshot, self.camera)
        ms = (time.perf_counter() - t0) * 1000.0
        self.frame_index += 1
        self.frames_since_rebuild += 1
        if self.frames_since_rebuild >= self.update_period:
            self.builder.request(self.generation + 1, self._ref_pos(),
                                 self._focal(), self.frame_index)
            self.frames_since_rebuild = 0
        stats = {
            "gaussian_count": self.snapshot_info["count"],
            "render_ms": ms,
            "levels_used": list(self.snapshot_info["levels"]),
            "gamma": self.gamma,
            "view_index": self.frame_index - 1,
        }
        header = {"type": "frame", "generation": self.generation, "stats": stats}
        png = encode_png(out.rgb)
        blob = json.dumps(header).encode()
        return struct.pack(">I", len(blob)) + blob + png, stats

    def close(self) -> None:
        self.builder.close()


def _error(code: str, message: str) -> str:
    return json.dumps({"type": "error", "code": code, "message": message})


def create_app(model_dir) -> FastAPI:
    model, manifest = load_model(model_dir)
    app = FastAPI(title="flod frame service")

    @app.get("/health")
    def health():
        return {"status": "ok", "l_max": model.l_max,
                "levels": {lv.level: len(lv) for lv in model.levels}}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        session = Session(model, manifest)
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                    if not isinstance(msg, dict) or "type" not in msg:
                        raise ValueError("message must be an object with a 'type'")
                except ValueError as exc:
                    await ws.send_text(_error("bad_message", str(exc)))
                    continue
                kind = msg["type"]
                try:
                    if kind == "hello":
                        version = msg.get("protocol_version")
                        if version != PROTOCOL_VERSION:
                            await ws.send_text(_error(
                                "protocol_version",
                                f"server speaks version {PROTOCOL_VERSION}, client sent {version}"))
                            continue
                        await ws.send_text(json.dumps({
                            "type": "hello_ack",
                            "protocol_version": PROTOCOL_VERSION,
                            "tau": model.tau,
                            "rho": model.rho,
                            "l_max": model.l_max,
                            "levels": [{"level": lv.level, "count": len(lv)}
                                       for lv in model.levels],
                            "defaults": {"gamma": session.gamma,
                                         "update_period": session.update_period},
                        }))
                    elif kind == "set_view":
                        width = int(msg["width"])
                        height = int(msg["height"])
                        session.camera = camera_from_quat(
                            msg["rotation_wxyz"], msg["translation"],
                            fx=float(msg["fx"]), fy=float(msg["fy"]),
                            cx=float(msg.get("cx", width / 2.0)),
                            cy=float(msg.get("cy", height / 2.0)),
                            width=width, height=height,
                            near=float(msg.get("near", 0.01)))
                        if msg.get("ref_policy"):
                            session.set_lod(session.l_start, session.l_end,
                                            session.gamma, msg["ref_policy"])
                    elif kind == "set_lod":
                        session.set_lod(int(msg["l_start"]), int(msg["l_end"]),
                                        float(msg.get("gamma", session.gamma)),
                                        msg.get("ref_policy"))
                    elif kind == "request_frame":
                        blob, _stats = session.render_frame()
                        await ws.send_bytes(blob)
                    elif kind == "bye":
                        break
                    else:
                        await ws.send_text(_error("bad_message", f"unknown type {kind!r}"))
                except (KeyError, TypeError) as exc:
                    await ws.send_text(_error("bad_message", f"missing/invalid field: {exc}"))
                except ValueError as exc:
                    await ws.send_text(_error("invalid", str(exc)))
        except WebSocketDisconnect:
            pass
        finally:
            session.close()

    return app
