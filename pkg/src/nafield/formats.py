"""On-disk formats: binary scene files, JSON demonstrations/poses and flat configs.

Scene files store float32 little-endian arrays behind a fixed header; loading
widens to float64 exactly.  Everything else is JSON, whose float repr
round-trips doubles bit-for-bit.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .effector import EffectorModel, rotate6d_to_matrix, split_pose
from .energy import EnergyConfig
from .scene import FeaturedCloud
from .training import TrainingConfig


class FormatError(ValueError):
    """A file is malformed, truncated or of an unsupported version."""


SCENE_MAGIC = b"NAFC"
SCENE_VERSION = 1
FLAG_LABELS = 1
_SCENE_HEADER = struct.Struct("<4sIIII")  # magic, version, N, C, flags

DEMO_FORMAT = "nafield-demo"
POSE_FORMAT = "nafield-pose"
JSON_VERSION = 1


def atomic_write(path, data: bytes | str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# -- scenes ------------------------------------------------------------------------

def scene_to_bytes(cloud: FeaturedCloud) -> bytes:
    flags = FLAG_LABELS if cloud.labels is not None else 0
    parts = [_SCENE_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, cloud.n, cloud.dim, flags),
             cloud.points.astype("<f4").tobytes(), cloud.features.astype("<f4").tobytes()]
    if cloud.labels is not None:
        if cloud.labels.min() < -2 ** 31 or cloud.labels.max() >= 2 ** 31:
            raise FormatError("labels do not fit in int32")
        parts.append(cloud.labels.astype("<i4").tobytes())
    return b"".join(parts)


def scene_from_bytes(blob: bytes) -> FeaturedCloud:
    if len(blob) < _SCENE_HEADER.size:
        raise FormatError("scene file shorter than its header")
    magic, version, n, c, flags = _SCENE_HEADER.unpack_from(blob)
    if magic != SCENE_MAGIC:
        raise FormatError(f"bad scene magic {magic!r}")
    if version != SCENE_VERSION:
        raise FormatError(f"unsupported scene version {version}")
    if flags & ~FLAG_LABELS:
        raise FormatError(f"unknown scene flags {flags:#x}")
    has_labels = bool(flags & FLAG_LABELS)
    expected = _SCENE_HEADER.size + 4 * n * (3 + c) + (4 * n if has_labels else 0)
    if len(blob) != expected:
        raise FormatError(f"scene file is {len(blob)} bytes, header implies {expected}")
    if n < 1 or c < 1:
        raise FormatError("scene needs N >= 1 and C >= 1")
    off = _SCENE_HEADER.size
    pts = np.frombuffer(blob, "<f4", 3 * n, off).reshape(n, 3).astype(np.float64)
    off += 12 * n
    feats = np.frombuffer(blob, "<f4", c * n, off).reshape(n, c).astype(np.float64)
    off += 4 * c * n
    labels = np.frombuffer(blob, "<i4", n, off).astype(np.int64) if has_labels else None
    try:
        return FeaturedCloud(pts, feats, labels)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_scene(path, cloud: FeaturedCloud) -> None:
    atomic_write(path, scene_to_bytes(cloud))


def load_scene(path) -> FeaturedCloud:
    return scene_from_bytes(_read_bytes(path))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None


def _read_json(path, fmt: str) -> dict:
    try:
        data = json.loads(_read_bytes(path))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict) or data.get("format") != fmt:
        raise FormatError(f"{path}: not a {fmt} file")
    if data.get("version") != JSON_VERSION:
        raise FormatError(f"{path}: unsupported {fmt} version {data.get('version')!r}")
    return data


# -- poses and demonstrations -------------------------------------------------------

def pose_to_dict(beta) -> dict:
    t, r6, joints = (np.asarray(x) for x in split_pose(np.asarray(beta, dtype=np.float64)))
    return {"translation": t.tolist(), "rotate6d": r6.tolist(), "joints": joints.tolist()}


def pose_from_dict(d: dict, model: EffectorModel | None = None) -> np.ndarray:
    try:
        t = np.asarray(d["translation"], dtype=np.float64)
        r6 = np.asarray(d["rotate6d"], dtype=np.float64)
        joints = np.asarray(d["joints"], dtype=np.float64).reshape(-1)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed pose: {exc}") from None
    if t.shape != (3,) or r6.shape != (6,):
        raise FormatError("pose needs a 3-vector translation and a 6-vector rotate6d")
    if model is not None and joints.shape[0] != model.n_joints:
        raise FormatError(f"pose has {joints.shape[0]} joints, effector {model.name!r} has {model.n_joints}")
    beta = np.concatenate([t, r6, joints])
    if not np.all(np.isfinite(beta)):
        raise FormatError("pose has non-finite entries")
    return beta


@dataclasses.dataclass
class DemoFile:
    effector: str   # paths as written; resolved relative to the demo file
    scene: str
    beta: np.ndarray

    def to_dict(self) -> dict:
        return {"format": DEMO_FORMAT, "version": JSON_VERSION, "effector": self.effector,
                "scene": self.scene, "pose": pose_to_dict(self.beta)}

    def save(self, path) -> None:
        atomic_write(path, _dump_json(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DemoFile":
        data = _read_json(path, DEMO_FORMAT)
        for key in ("effector", "scene", "pose"):
            if key not in data:
                raise FormatError(f"{path}: missing {key!r}")
        return cls(str(data["effector"]), str(data["scene"]), pose_from_dict(data["pose"]))

    def resolve(self, demo_path) -> tuple[Path, Path]:
        base = Path(demo_path).parent
        return base / self.effector, base / self.scene


def load_effector(path) -> EffectorModel:
    try:
        return EffectorModel.from_dict(json.loads(_read_bytes(path)))
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad effector model ({exc})") from None


def load_demo(path) -> tuple[EffectorModel, FeaturedCloud, np.ndarray]:
    """Demo file plus the effector and source scene it names, pose validated against the effector."""
    demo = DemoFile.load(path)
    eff_path, scene_path = demo.resolve(path)
    model = load_effector(eff_path)
    beta = pose_from_dict(pose_to_dict(demo.beta), model)
    try:
        rotate6d_to_matrix(beta[3:9])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return model, load_scene(scene_path), beta


def save_pose(path, beta, extra: dict | None = None) -> None:
    data = {"format": POSE_FORMAT, "version": JSON_VERSION, "pose": pose_to_dict(beta)}
    data.update(extra or {})
    atomic_write(path, _dump_json(data))


def load_pose(path, model: EffectorModel | None = None) -> np.ndarray:
    """Accepts pose files and demo files alike."""
    try:
        data = json.loads(_read_bytes(path))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    fmt = data.get("format") if isinstance(data, dict) else None
    if fmt not in (POSE_FORMAT, DEMO_FORMAT):
        raise FormatError(f"{path}: not a pose file")
    data = _read_json(path, fmt)
    return pose_from_dict(data.get("pose", {}), model)


# -- config ---------------------------------------------------------------------

SECTIONS = {"training": TrainingConfig, "energy": EnergyConfig}


def load_config(path) -> dict[str, dict]:
    """Flat dotted keys (``training.tau``, ``energy.lambda_pen``) grouped by section."""
    if path is None:
        return {k: {} for k in SECTIONS}
    try:
        flat = json.loads(_read_bytes(path))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(flat, dict):
        raise FormatError(f"{path}: config must be a JSON object of dotted keys")
    return group_config(flat)


def group_config(flat: dict) -> dict[str, dict]:
    out: dict[str, dict] = {k: {} for k in SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise FormatError(f"unknown config key {key!r}")
        names = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if name not in names:
            raise FormatError(f"unknown config key {key!r}")
        out[section][name] = value
    return out


def build_config(section: str, values: dict, overrides: dict | None = None):
    merged = dict(values)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return SECTIONS[section](**merged)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad {section} config: {exc}") from None


__all__ = [
    "DemoFile", "FormatError", "atomic_write", "build_config", "group_config", "load_config",
    "load_demo", "load_effector", "load_pose", "load_scene", "pose_from_dict", "pose_to_dict",
    "save_pose", "save_scene", "scene_from_bytes", "scene_to_bytes",
]
