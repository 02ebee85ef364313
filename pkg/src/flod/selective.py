"""Distance-banded multi-level subset construction and the session runtime.

Each level in the requested range owns a half-open distance band
[d(l), d(l-1)) measured from a reference position; d(l) = s_min(l) * f / gamma
except that the finest selected level starts at 0 and the coarsest extends to
infinity. The bands partition [0, inf), so a Gaussian is drawn from exactly
one level and a Gaussian exactly на an edge goes to the finer level.

Long trajectories rebuild the subset every `update_period` views. In
background mode the rebuild runs on a worker thread and the renderer keeps
using the previous snapshot until the new one is swapped in atomically; a
recorded swap schedule can be replayed synchronously to reproduce the exact
frame stream.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .model import FrozenSplats, MultiLevelModel
from .rasterizer import DEFAULT_CONFIG, RasterConfig, RenderOutput, render

DEFAULT_GAMMA = 8.0
DEFAULT_UPDATE_PERIOD = 50


@dataclass(frozen=True)
class SelectionConfig:
    l_start: int
    l_end: int
    gamma: float = DEFAULT_GAMMA
    ref_policy: str = "average"  # or "current"
    update_period: int = DEFAULT_UPDATE_PERIOD

    def __post_init__(self):
        if self.l_start < 1 or self.l_end < self.l_start:
            raise ValueError(f"invalid level range [{self.l_start}, {self.l_end}]")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.ref_policy not in ("average", "current"):
            raise ValueError(f"unknown reference policy {self.ref_policy!r}")
        if self.update_period < 1:
            raise ValueError("update period must be >= 1")

    def validate_for(self, model: MultiLevelModel) -> None:
        if self.l_end > model.l_max:
            raise ValueError(f"l_end={self.l_end} exceeds model l_max={model.l_max}")


def d_proj(s_min: float, gamma: float, f: float) -> float:
    """Distance at which a Gaussian of scale s_min covers gamma pixels."""
    if gamma <= 0 or f <= 0:
        raise ValueError("gamma and f must be > 0")
    return s_min * f / gamma


@dataclass
class SelectionBands:
    """Half-open distance interval per level; a partition of [0, inf)."""

    levels: list[int]  # ascending
    lower: dict[int, float]
    upper: dict[int, float]

    def band(self, level: int) -> tuple[float, float]:
        return self.lower[level], self.upper[level]

    def assign(self, distance: float) -> int:
        """Level owning a distance; finest level wins edges by construction."""
        for level in reversed(self.levels):
            lo, hi = self.lower[level], self.upper[level]
            if lo <= distance < hi:
                return level
        raise AssertionError(f"distance {distance} not covered by bands")


def selection_bands(model: MultiLevelModel, cfg: SelectionConfig, f: float) -> SelectionBands:
    cfg.validate_for(model)
    levels = list(range(cfg.l_start, cfg.l_end + 1))
    lower: dict[int, float] = {}
    upper: dict[int, float] = {}
    for level in levels:
        if level == cfg.l_end:
            lower[level] = 0.0
        else:
            lower[level] = d_proj(model.level(level).s_min, cfg.gamma, f)
        if level == cfg.l_start:
            upper[level] = math.inf
        else:
            upper[level] = d_proj(model.level(level - 1).s_min, cfg.gamma, f)
    return SelectionBands(levels=levels, lower=lower, upper=upper)


def build_subset(model: MultiLevelModel, ref_pos, cfg: SelectionConfig, f: float):
    """Composite renderable set: per level, the Gaussians whose distance to
    ref_pos falls in that level's band. Returns (FrozenSplats, info dict).

    For banding each Gaussian counts as having its level's s_min scale; its
    actual attributes are kept unchanged in the composite.
    """
    bands = selection_bands(model, cfg, f)
    ref = np.asarray(ref_pos, dtype=np.float64).reshape(3)
    parts: list[FrozenSplats] = []
    level_counts: dict[int, int] = {}
    for level in bands.levels:
        splats = model.level(level).activate()
        lo, hi = bands.band(level)
        if len(splats) == 0:
            level_counts[level] = 0
            continue
        if lo == 0.0 and hi == math.inf:
            mask = np.ones(len(splats), dtype=bool)
        else:
            diff = splats.positions - ref
            dist = np.sqrt(np.sum(diff * diff, axis=1))
            mask = (dist >= lo) & (dist < hi)
        level_counts[level] = int(np.count_nonzero(mask))
        if level_counts[level]:
            parts.append(FrozenSplats(
                positions=splats.positions[mask],
                scales=splats.scales[mask],
                rotations=splats.rotations[mask],
                opacities=splats.opacities[mask],
                colors=splats.colors[mask],
            ))
    subset = parts[0] if len(parts) == 1 else FrozenSplats.concatenate(parts)
    info = {
        "levels": bands.levels,
        "level_counts": level_counts,
        "count": len(subset),
        "bands": {lv: bands.band(lv) for lv in bands.levels},
        "gamma": cfg.gamma,
        "f": f,
    }
    return subset, info


@dataclass
class Snapshot:
    generation: int
    splats: FrozenSplats
    info: dict
    ref_pos: np.ndarray


@dataclass
class SessionResult:
    stats: list[dict] = field(default_factory=list)
    builds: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    frames: list[np.ndarray] = field(default_factory=list)

    def swap_schedule(self) -> list[dict]:
        """Replayable schedule: generation, reference position, activation view."""
        return [
            {"generation": b["generation"], "ref_pos": b["ref_pos"],
             "f": b["f"], "activated_at": b["activated_at"]}
            for b in self.builds
        ]


class _BackgroundBuilder:
    """Single worker building subsets; latest pending request wins."""

    def __init__(self, model: MultiLevelModel, cfg: SelectionConfig):
        self.model = model
        self.cfg = cfg
        self._lock = threading.Lock()
        self._pending = None
        self._ready: Snapshot | None = None
        self._error: dict | None = None
        self._wake = threading.Event()
        self._stop = False
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def request(self, generation: int, ref_pos: np.ndarray, f: float, view: int) -> None:
        with self._lock:
            self._pending = (generation, ref_pos, f, view)
        self._wake.set()

    def poll(self) -> tuple[Snapshot | None, dict | None]:
        with self._lock:
            snap, err = self._ready, self._error
            self._ready, self._error = None, None
            return snap, err

    def idle(self) -> bool:
        with self._lock:
            return self._pending is None and not self._wake.is_set()

    def close(self) -> None:
        self._stop = True
        self._wake.set()
        self._thread.join(timeout=5.0)

    def _run(self) -> None:
        while True:
            self._wake.wait()
            if self._stop:
                return
            with self._lock:
                job = self._pending
                self._pending = None
                self._wake.clear()
            if job is None:
                continue
            generation, ref_pos, f, view = job
            try:
                splats, info = build_subset(self.model, ref_pos, self.cfg, f)
                snap = Snapshot(generation=generation, splats=splats, info=info,
                                ref_pos=np.asarray(ref_pos, dtype=np.float64))
                with self._lock:
                    self._ready = snap
            except Exception as exc:  # keep serving the old snapshot
                with self._lock:
                    self._error = {"event": "rebuild_failed", "generation": generation,
                                   "view": view, "error": repr(exc)}


def selective_session(model: MultiLevelModel, cameras: list[Camera],
                      cfg: SelectionConfig, *, default_ref_pos=None,
                      background=(0.0, 0.0, 0.0), raster: RasterConfig = DEFAULT_CONFIG,
                      mode: str = "background", swap_schedule: list[dict] | None = None,
                      keep_frames: bool = False) -> SessionResult:
    """Render a trajectory against periodically rebuilt subsets.

    mode="sync": rebuilds run inline at every update-period boundary.
    mode="background": rebuilds run on a worker thread; rendering never
    blocks and the previous snapshot serves until the new one is ready.
    mode="replay": applies a recorded swap schedule deterministically.
    """
    if len(cameras) == 0:
        raise ValueError("empty trajectory")
    if mode not in ("sync", "background", "replay"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "replay" and swap_schedule is None:
        raise ValueError("replay mode needs a swap schedule")
    cfg.validate_for(model)

    def ref_for(view: int) -> np.ndarray:
        if cfg.ref_policy == "current" or default_ref_pos is None:
            return cameras[view].position
        return np.asarray(default_ref_pos, dtype=np.float64)

    result = SessionResult()
    builder = _BackgroundBuilder(model, cfg) if mode == "background" else None

    def make_snapshot(generation: int, ref_pos, f: float) -> Snapshot:
        splats, info = build_subset(model, ref_pos, cfg, f)
        return Snapshot(generation=generation, splats=splats, info=info,
                        ref_pos=np.asarray(ref_pos, dtype=np.float64))

    try:
        if mode == "replay":
            schedule = sorted(swap_schedule, key=lambda b: b["activated_at"])
            sched_idx = 0
            current: Snapshot | None = None
            for view, cam in enumerate(cameras):
                t0 = time.perf_counter()
                while sched_idx < len(schedule) and schedule[sched_idx]["activated_at"] == view:
                    entry = schedule[sched_idx]
                    current = make_snapshot(entry["generation"], entry["ref_pos"], entry["f"])
                    result.builds.append({
                        "generation": current.generation,
                        "ref_pos": [float(v) for v in current.ref_pos],
                        "f": entry["f"], "requested_at": view, "activated_at": view,
                    })
                    sched_idx += 1
                if current is None:
                    raise ValueError("replay schedule does not cover the first view")
                out = render(current.splats, cam, background, raster)
                _record(result, view, cam, current, out, t0, cfg, keep_frames)
            return result

        generation = 1
        first_f = cameras[0].fx
        current = make_snapshot(generation, ref_for(0), first_f)
        result.builds.append({
            "generation": generation, "ref_pos": [float(v) for v in current.ref_pos],
            "f": first_f, "requested_at": 0, "activated_at": 0,
        })
        pending_requests: dict[int, dict] = {}

        for view, cam in enumerate(cameras):
            t0 = time.perf_counter()
            if mode == "background" and builder is not None:
                snap, err = builder.poll()
                if err is not None:
                    result.diagnostics.append(err)
                    pending_requests.pop(err["generation"], None)
                if snap is not None:
                    current = snap
                    record = pending_requests.pop(snap.generation, None)
                    if record is not None:
                        record["activated_at"] = view
                        result.builds.append(record)
                    # older requests were superseded before they built
                    for gen in [g for g in pending_requests if g < snap.generation]:
                        stale = pending_requests.pop(gen)
                        result.diagnostics.append({"event": "rebuild_superseded",
                                                   "generation": gen,
                                                   "requested_at": stale["requested_at"]})
            if view > 0 and view % cfg.update_period == 0:
                generation += 1
                ref = ref_for(view)
                if mode == "sync":
                    try:
                        current = make_snapshot(generation, ref, cam.fx)
                        result.builds.append({
                            "generation": generation,
                            "ref_pos": [float(v) for v in current.ref_pos],
                            "f": cam.fx, "requested_at": view, "activated_at": view,
                        })
                    except Exception as exc:
                        result.diagnostics.append({
                            "event": "rebuild_failed", "generation": generation,
                            "view": view, "error": repr(exc)})
                else:
                    pending_requests[generation] = {
                        "generation": generation, "ref_pos": [float(v) for v in ref],
                        "f": cam.fx, "requested_at": view,
                    }
                    builder.request(generation, ref, cam.fx, view)
            out = render(current.splats, cam, background, raster)
            _record(result, view, cam, current, out, t0, cfg, keep_frames)
        return result
    finally:
        if builder is not None:
            builder.close()


def _record(result: SessionResult, view: int, cam: Camera, snap: Snapshot,
            out: RenderOutput, t0: float, cfg: SelectionConfig, keep_frames: bool) -> None:
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    result.stats.append({
        "view": view,
        "generation": snap.generation,
        "gaussian_count": snap.info["count"],
        "render_ms": elapsed_ms,
        "levels_used": list(snap.info["levels"]),
        "gamma": cfg.gamma,
    })
    if keep_frames:
        result.frames.append(out.rgb)
