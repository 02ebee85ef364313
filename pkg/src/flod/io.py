"""Persistence and ingestion.

Formats (all versioned; loaders reject unknown versions):
  - SplatFileV1: binary little-endian PLY, one file per level. Header
    comments carry level, s_min, tau, rho, l_max and the format version;
    per-vertex float32 properties x y z scale_opt_0..2 rot_0..3 (wxyz)
    opacity_logit r g b. Round trips are bit-exact at float32.
  - CameraFileV1: JSON camera list (intrinsics, world-to-camera quaternion +
    translation, image path).
  - Model manifest: JSON (tau, rho, l_max, level files + counts, defaults,
    config digest, scene reference position/extent).
  - Training event log: one JSON record per line.
  - Checkpoints: npz with full float64 trainer state (parameters, Adam
    moments, accumulated gradient stats, RNG state) for bit-exact resume.

Ground-truth and rendered images persist as float32 .npy (lossless for the
float64 math path) with 8-bit PNG previews alongside.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, camera_from_quat, look_at, rotmat_to_quat
from .model import GaussianLevelSet, MultiLevelModel, scale_constraint
from .rasterizer import DEFAULT_CONFIG, render
from .trainer import Adam, GradStats, SceneDataset, TrainConfig

SPLAT_FORMAT_VERSION = 1
CAMERA_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

_PROPERTIES = ("x", "y", "z", "scale_opt_0", "scale_opt_1", "scale_opt_2",
               "rot_0", "rot_1", "rot_2", "rot_3", "opacity_logit", "r", "g", "b")


class ParseError(ValueError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# SplatFileV1

def save_level(path, level_set: GaussianLevelSet, *, tau: float, rho: float,
               l_max: int) -> None:
    path = Path(path)
    n = len(level_set)
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment flod_format_version {SPLAT_FORMAT_VERSION}",
        f"comment flod_level {level_set.level}",
        f"comment flod_s_min {level_set.s_min!r}",
        f"comment flod_tau {tau!r}",
        f"comment flod_rho {rho!r}",
        f"comment flod_l_max {l_max}",
        f"element vertex {n}",
    ]
    header += [f"property float {p}" for p in _PROPERTIES]
    header.append("end_header")
    data = np.empty((n, len(_PROPERTIES)), dtype="<f4")
    data[:, 0:3] = level_set.positions
    data[:, 3:6] = level_set.scale_params
    data[:, 6:10] = level_set.rotations
    data[:, 10] = level_set.opacity_params
    data[:, 11:14] = level_set.colors
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_level(path) -> tuple[GaussianLevelSet, dict]:
    """Load a SplatFileV1; validates header consistency (s_min vs tau/rho/level)."""
    path = Path(path)
    raw = path.read_bytes()
    offset = 0

    def next_line() -> str:
        nonlocal offset
        end = raw.find(b"\n", offset)
        if end < 0:
            raise ParseError("unterminated header line", offset)
        line = raw[offset:end].decode("ascii", errors="replace")
        offset = end + 1
        return line

    if next_line() != "ply":
        raise ParseError("not a PLY file (bad magic)", 0)
    if next_line() != "format binary_little_endian 1.0":
        raise ParseError("unsupported PLY format", 4)

    meta: dict = {}
    props: list[str] = []
    n = None
    while True:
        line_start = offset
        line = next_line()
        if line == "end_header":
            break
        if line.startswith("comment flod_"):
            _, key, value = line.split(" ", 2)
            meta[key.removeprefix("flod_")] = value
        elif line.startswith("element vertex "):
            n = int(line.removeprefix("element vertex "))
        elif line.startswith("element "):
            raise ParseError(f"unsupported element: {line}", line_start)
        elif line.startswith("property "):
            parts = line.split(" ")
            if len(parts) != 3 or parts[1] != "float":
                raise ParseError(f"unsupported property: {line}", line_start)
            props.append(parts[2])
        elif line.startswith("comment"):
            continue
        else:
            raise ParseError(f"unrecognized header line: {line}", line_start)

    if "format_version" not in meta:
        raise ParseError("missing flod_format_version", offset)
    if int(meta["format_version"]) != SPLAT_FORMAT_VERSION:
        raise ParseError(f"unknown format version {meta['format_version']}", offset)
    if n is None:
        raise ParseError("missing vertex element", offset)
    if tuple(props) != _PROPERTIES:
        raise ParseError(f"unexpected property list {props}", offset)
    for key in ("level", "s_min", "tau", "rho", "l_max"):
        if key not in meta:
            raise ParseError(f"missing flod_{key} header", offset)

    level = int(meta["level"])
    s_min = float(meta["s_min"])
    tau = float(meta["tau"])
    rho = float(meta["rho"])
    l_max = int(meta["l_max"])
    expected = scale_constraint(level, tau, rho, l_max)
    if s_min != expected:
        raise ParseError(
            f"header s_min {s_min} inconsistent with scale_constraint"
            f"({level}, {tau}, {rho}, {l_max}) = {expected}", offset)

    body = raw[offset:]
    expected_bytes = n * len(_PROPERTIES) * 4
    if len(body) != expected_bytes:
        raise ParseError(
            f"payload is {len(body)} bytes, expected {expected_bytes}", offset)
    data = np.frombuffer(body, dtype="<f4").reshape(n, len(_PROPERTIES))
    level_set = GaussianLevelSet(
        positions=data[:, 0:3],
        scale_params=data[:, 3:6],
        rotations=data[:, 6:10],
        opacity_params=data[:, 10],
        colors=data[:, 11:14],
        s_min=s_min,
        level=level,
    )
    return level_set, {"tau": tau, "rho": rho, "l_max": l_max}


# ---------------------------------------------------------------------------
# CameraFileV1

def _camera_to_dict(cam: Camera, image_path: str = "") -> dict:
    return {
        "id": cam.cam_id,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation_wxyz": [float(v) for v in rotmat_to_quat(cam.rotation)],
        "translation": [float(v) for v in cam.translation],
        "near": cam.near,
        "image": image_path,
    }


def _camera_from_dict(d: dict) -> tuple[Camera, str]:
    cam = camera_from_quat(
        d["rotation_wxyz"], d["translation"],
        fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
        width=d["width"], height=d["height"], near=d.get("near", 0.01),
        cam_id=d.get("id", ""),
    )
    return cam, d.get("image", "")


def save_cameras(path, cameras: list[Camera], image_paths: list[str] | None = None) -> None:
    image_paths = image_paths or [""] * len(cameras)
    doc = {
        "format": "flod-cameras",
        "version": CAMERA_FORMAT_VERSION,
        "cameras": [_camera_to_dict(c, p) for c, p in zip(cameras, image_paths)],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_cameras(path) -> list[tuple[Camera, str]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "flod-cameras":
        raise ValueError(f"{path}: not a camera file")
    if doc.get("version") != CAMERA_FORMAT_VERSION:
        raise ValueError(f"{path}: unknown camera file version {doc.get('version')}")
    return [_camera_from_dict(d) for d in doc["cameras"]]


# ---------------------------------------------------------------------------
# images

def save_image(path, img: np.ndarray, preview: bool = True) -> None:
    """float32 .npy (authoritative) plus an 8-bit PNG preview next to it."""
    path = Path(path)
    np.save(path, np.asarray(img, dtype=np.float32))
    if preview:
        png = path.with_suffix(".png")
        arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(png)


def load_image(path) -> np.ndarray:
    return np.load(path).astype(np.float64)


def encode_png(img: np.ndarray) -> bytes:
    import io as _io

    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    buf = _io.BytesIO()
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# synthetic scenes

def generate_synthetic_scene(seed: int, n_gaussians: int, n_views: int,
                             resolution: int, *, n_test_views: int = 3,
                             raster_config=DEFAULT_CONFIG):
    """Self-verifying dataset: sample a ground-truth Gaussian set in a
    unit-scale volume, render it from cameras on a ring around the origin,
    and jitter the positions (sigma=0.05) for the SfM-substitute init points.

    Returns (SceneDataset, ground-truth GaussianLevelSet).
    """
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-0.45, 0.45, (n_gaussians, 3))
    scales = rng.uniform(0.10, 0.30, (n_gaussians, 3))
    quats = rng.normal(size=(n_gaussians, 4))
    quats /= np.sqrt(np.sum(quats * quats, axis=1, keepdims=True))
    opac = rng.uniform(0.65, 0.95, n_gaussians)
    colors = rng.uniform(0.15, 1.0, (n_gaussians, 3))
    gt = GaussianLevelSet(
        positions=pos,
        scale_params=np.log(scales),
        rotations=quats,
        opacity_params=np.log(opac) - np.log1p(-opac),
        colors=colors,
        s_min=0.0,
        level=1,
    )

    fx = float(resolution)
    radius = 2.6

    def ring_cam(angle: float, elevation: float, cam_id: str) -> Camera:
        pos_cam = np.array([radius * np.cos(angle), elevation, radius * np.sin(angle)])
        return look_at(pos_cam, (0.0, 0.0, 0.0), fx=fx,
                       width=resolution, height=resolution, cam_id=cam_id)

    train_views = []
    for k in range(n_views):
        angle = 2.0 * np.pi * k / n_views
        elev = 0.5 if k % 2 == 0 else -0.5
        cam = ring_cam(angle, elev, f"train_{k:03d}")
        img = render(gt, cam, (0.0, 0.0, 0.0), raster_config).rgb
        train_views.append((cam, img))

    test_views = []
    for k in range(n_test_views):
        angle = 2.0 * np.pi * (k + 0.5) / max(n_test_views, 1)
        cam = ring_cam(angle, 0.15, f"test_{k:03d}")
        img = render(gt, cam, (0.0, 0.0, 0.0), raster_config).rgb
        test_views.append((cam, img))

    points = pos + rng.normal(0.0, 0.05, pos.shape)
    scene = SceneDataset(
        train_views=train_views,
        test_views=test_views,
        points=points,
        point_colors=colors.copy(),
    )
    return scene, gt


# ---------------------------------------------------------------------------
# dataset directories

def save_dataset(outdir, scene: SceneDataset, gt: GaussianLevelSet | None = None) -> None:
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    for split, views in (("train", scene.train_views), ("test", scene.test_views)):
        cams, paths = [], []
        for idx, (cam, img) in enumerate(views):
            rel = f"images/{split}_{idx:03d}.npy"
            save_image(outdir / rel, img)
            cams.append(cam)
            paths.append(rel)
        save_cameras(outdir / f"cameras_{split}.json", cams, paths)
    np.savez(outdir / "init_points.npz",
             points=scene.points.astype(np.float32),
             colors=scene.point_colors.astype(np.float32))
    if gt is not None:
        save_level(outdir / "gt_splats.ply", gt, tau=0.2, rho=4.0, l_max=1)


def load_dataset(path) -> SceneDataset:
    path = Path(path)
    views = {}
    for split in ("train", "test"):
        cam_file = path / f"cameras_{split}.json"
        views[split] = []
        if cam_file.exists():
            for cam, rel in load_cameras(cam_file):
                views[split].append((cam, load_image(path / rel)))
    pts = np.load(path / "init_points.npz")
    return SceneDataset(
        train_views=views["train"],
        test_views=views["test"],
        points=pts["points"].astype(np.float64),
        point_colors=pts["colors"].astype(np.float64),
    )


# ---------------------------------------------------------------------------
# model directories (manifest + per-level splat files + event log)

def config_digest(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.digest_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_model(outdir, model: MultiLevelModel, *, cfg: TrainConfig | None = None,
               ref_pos=None, extent: float | None = None, defaults: dict | None = None) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    levels = []
    for lv in model.levels:
        name = f"level_{lv.level}.ply"
        save_level(outdir / name, lv, tau=model.tau, rho=model.rho, l_max=model.l_max)
        levels.append({"level": lv.level, "file": name, "count": len(lv),
                       "s_min": lv.s_min})
    manifest = {
        "format": "flod-model",
        "version": MANIFEST_FORMAT_VERSION,
        "tau": model.tau,
        "rho": model.rho,
        "l_max": model.l_max,
        "levels": levels,
        "config_digest": config_digest(cfg) if cfg is not None else None,
        "defaults": defaults or {},
    }
    if ref_pos is not None:
        manifest["ref_pos"] = [float(v) for v in ref_pos]
    if extent is not None:
        manifest["extent"] = float(extent)
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(path) -> tuple[MultiLevelModel, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "flod-model":
        raise ValueError(f"{path}: not a model directory")
    if manifest.get("version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"{path}: unknown manifest version {manifest.get('version')}")
    levels = []
    for entry in manifest["levels"]:
        lv, meta = load_level(path / entry["file"])
        if (meta["tau"], meta["rho"], meta["l_max"]) != \
                (manifest["tau"], manifest["rho"], manifest["l_max"]):
            raise ValueError(f"{entry['file']}: header disagrees with manifest")
        levels.append(lv)
    model = MultiLevelModel(levels=levels, tau=manifest["tau"],
                            rho=manifest["rho"], l_max=manifest["l_max"])
    return model, manifest


# ---------------------------------------------------------------------------
# checkpoints

def make_checkpoint(state: GaussianLevelSet, adam: Adam, rng: np.random.Generator,
                    *, level: int, iteration: int,
                    grad_stats: GradStats | None = None) -> dict:
    ckpt = {
        "version": np.int64(CHECKPOINT_FORMAT_VERSION),
        "level": np.int64(level),
        "iteration": np.int64(iteration),
        "s_min": np.float64(state.s_min),
        "positions": state.positions,
        "scale_params": state.scale_params,
        "rotations": state.rotations,
        "opacity_params": state.opacity_params,
        "colors": state.colors,
        "rng_state": np.frombuffer(
            json.dumps(rng.bit_generator.state).encode(), dtype=np.uint8),
        "grad_accum": grad_stats.accum if grad_stats is not None else np.zeros(len(state)),
        "grad_count": grad_stats.count if grad_stats is not None else np.zeros(len(state)),
    }
    for key, val in adam.state_dict().items():
        ckpt[f"adam_{key}"] = np.asarray(val)
    return ckpt


def save_checkpoint(path, ckpt: dict) -> None:
    if len(ckpt["positions"]) == 0:
        raise ValueError("refusing to checkpoint an empty model")
    np.savez(path, **ckpt)


def load_checkpoint(path, *, expected_level: int | None = None):
    """Returns (state, adam, rng, iteration, grad_stats)."""
    with np.load(path) as data:
        if int(data["version"]) != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"checkpoint version {int(data['version'])} not supported "
                f"(expected {CHECKPOINT_FORMAT_VERSION})")
        level = int(data["level"])
        if expected_level is not None and level != expected_level:
            raise ValueError(f"checkpoint is for level {level}, expected {expected_level}")
        state = GaussianLevelSet(
            positions=data["positions"],
            scale_params=data["scale_params"],
            rotations=data["rotations"],
            opacity_params=data["opacity_params"],
            colors=data["colors"],
            s_min=float(data["s_min"]),
            level=level,
        )
        adam_dict = {key.removeprefix("adam_"): data[key]
                     for key in data.files if key.startswith("adam_")}
        adam = Adam.from_state_dict(state, adam_dict)
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(bytes(data["rng_state"]).decode())
        grad_stats = GradStats(accum=data["grad_accum"].astype(np.float64),
                               count=data["grad_count"].astype(np.float64))
        return state, adam, rng, int(data["iteration"]), grad_stats


# ---------------------------------------------------------------------------
# event log + training sink

def append_events(path, records: list[dict]) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_events(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


class FileTrainingSink:
    """Writes the event log, per-level checkpoints and level files as training runs."""

    def __init__(self, outdir, *, tau: float, rho: float, l_max: int):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.events_path = self.outdir / "events.jsonl"
        self.events_path.write_text("")
        self.tau, self.rho, self.l_max = tau, rho, l_max

    def event(self, record: dict) -> None:
        append_events(self.events_path, [record])

    def checkpoint(self, level: int, state, adam, rng) -> None:
        ckpt = make_checkpoint(state, adam, rng, level=level,
                               iteration=0, grad_stats=None)
        save_checkpoint(self.outdir / f"checkpoint_level_{level}.npz", ckpt)

    def level_done(self, level: int, clone) -> None:
        save_level(self.outdir / f"level_{level}.ply", clone,
                   tau=self.tau, rho=self.rho, l_max=self.l_max)
