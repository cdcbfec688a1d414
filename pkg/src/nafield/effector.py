"""Articulated end-effector: kinematic tree, pose vector and surface query points.

A pose vector is laid out as ``[t (3), r6 (6), joints (J)]`` where ``r6`` holds
the first two columns of the base rotation matrix.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .numerics import DTYPE, as_tensor, hinge

FORMAT = "nafield-effector"
VERSION = 1


def rotate6d_to_matrix(r6) -> torch.Tensor:
    """Gram-Schmidt on the two stored columns; (..., 6) -> (..., 3, 3)."""
    r6 = as_tensor(r6)
    c1, c2 = r6[..., 0:3], r6[..., 3:6]
    with torch.no_grad():
        n1 = torch.linalg.vector_norm(c1, dim=-1)
        cross = torch.linalg.vector_norm(torch.linalg.cross(c1, c2, dim=-1), dim=-1)
        n2 = torch.linalg.vector_norm(c2, dim=-1)
        if bool((n1 < 1e-12).any()) or bool((cross <= 1e-12 * n1 * n2).any()) or bool((n2 < 1e-12).any()):
            raise ValueError("rotate6D columns are zero or parallel")
    b1 = c1 / torch.linalg.vector_norm(c1, dim=-1, keepdim=True)
    u2 = c2 - (b1 * c2).sum(-1, keepdim=True) * b1
    b2 = u2 / torch.linalg.vector_norm(u2, dim=-1, keepdim=True)
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], -1)


def matrix_to_rotate6d(rot) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], -1)


def axis_angle_matrix(axis: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula; axis (..., 3) unit, angle (...) -> (..., 3, 3)."""
    axis = torch.as_tensor(axis, dtype=DTYPE)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack([torch.stack([zero, -z, y], -1), torch.stack([z, zero, -x], -1),
                     torch.stack([-y, x, zero], -1)], -2)
    s = torch.sin(angle)[..., None, None]
    c = torch.cos(angle)[..., None, None]
    return torch.eye(3, dtype=DTYPE) + s * k + (1 - c) * (k @ k)


@dataclass(frozen=True, eq=False)
class EffectorModel:
    names: tuple[str, ...]
    parents: np.ndarray         # (L,), -1 for the root
    offsets: np.ndarray         # (L, 4, 4) fixed parent -> link transforms
    axes: np.ndarray            # (L, 3); unused for the root
    limits: np.ndarray          # (L, 2); unused for the root
    sample_points: np.ndarray   # (S, 3) in link coordinates
    sample_links: np.ndarray    # (S,)
    sample_radii: np.ndarray    # (S,)
    name: str = "effector"

    def __post_init__(self):
        parents = np.asarray(self.parents)
        roots = np.flatnonzero(parents < 0)
        if roots.size != 1 or roots[0] != 0:
            raise ValueError("an effector needs exactly one root, listed first")
        for i in range(1, len(parents)):
            if not 0 <= parents[i] < i:
                raise ValueError(f"link {self.names[i]!r} must come after its parent")
        axes = np.asarray(self.axes, dtype=np.float64)
        if np.any(np.abs(np.linalg.norm(axes[1:], axis=1) - 1) > 1e-9):
            raise ValueError("joint axes must be unit vectors")
        limits = np.asarray(self.limits, dtype=np.float64)
        if np.any(limits[1:, 0] > limits[1:, 1]):
            raise ValueError("joint limits need lo <= hi")
        if len(self.sample_points) < 1:
            raise ValueError("an effector needs at least one sample point")
        if np.any(np.asarray(self.sample_radii) <= 0):
            raise ValueError("sample radii must be positive")
        if np.any((self.sample_links < 0) | (self.sample_links >= len(parents))):
            raise ValueError("sample refers to an unknown link")

    @property
    def n_links(self) -> int:
        return len(self.names)

    @property
    def n_joints(self) -> int:
        return self.n_links - 1

    @property
    def pose_dim(self) -> int:
        return 9 + self.n_joints

    @property
    def n_samples(self) -> int:
        return self.sample_points.shape[0]

    @property
    def joint_limits(self) -> np.ndarray:
        return self.limits[1:]

    def self_collision_mask(self) -> np.ndarray:
        """Ordered sample pairs checked for self-penetration (same/adjacent links skipped)."""
        a = self.sample_links[:, None]
        b = self.sample_links[None, :]
        pa = self.parents[a]
        pb = self.parents[b]
        return (a != b) & (pa != b) & (pb != a)

    def identity_pose(self) -> np.ndarray:
        return pose_vector(np.zeros(3), np.eye(3), np.zeros(self.n_joints))

    # -- file format -------------------------------------------------------------
    def to_dict(self) -> dict:
        links = []
        for i, name in enumerate(self.names):
            off = self.offsets[i]
            entry = {"name": name,
                     "parent": None if self.parents[i] < 0 else self.names[self.parents[i]],
                     "offset": {"translation": off[:3, 3].tolist(),
                                "rotate6d": matrix_to_rotate6d(off[:3, :3]).tolist()}}
            if i > 0:
                entry["axis"] = self.axes[i].tolist()
                entry["limits"] = self.limits[i].tolist()
            links.append(entry)
        samples = [{"link": self.names[l], "xyz": p.tolist(), "radius": float(r)}
                   for p, l, r in zip(self.sample_points, self.sample_links, self.sample_radii)]
        return {"format": FORMAT, "version": VERSION, "name": self.name, "links": links, "samples": samples}

    @classmethod
    def from_dict(cls, data: dict) -> "EffectorModel":
        if data.get("format") != FORMAT:
            raise ValueError(f"not an effector model file (format={data.get('format')!r})")
        if data.get("version") != VERSION:
            raise ValueError(f"unsupported effector model version {data.get('version')!r}")
        links = data["links"]
        names = tuple(l["name"] for l in links)
        index = {n: i for i, n in enumerate(names)}
        if len(index) != len(names):
            raise ValueError("duplicate link names")
        parents = np.array([-1 if l["parent"] is None else index[l["parent"]] for l in links])
        offsets = np.zeros((len(links), 4, 4))
        axes = np.zeros((len(links), 3))
        limits = np.zeros((len(links), 2))
        for i, l in enumerate(links):
            off = l.get("offset", {})
            offsets[i] = np.eye(4)
            offsets[i, :3, :3] = rotate6d_to_matrix(off.get("rotate6d", [1, 0, 0, 0, 1, 0])).numpy()
            offsets[i, :3, 3] = off.get("translation", [0, 0, 0])
            if i > 0:
                axes[i] = l["axis"]
                limits[i] = l["limits"]
        samples = data["samples"]
        try:
            sample_links = np.array([index[s["link"]] for s in samples], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"sample on unknown link {exc}") from None
        return cls(names, parents, offsets, axes, limits,
                   np.array([s["xyz"] for s in samples], dtype=np.float64).reshape(-1, 3),
                   sample_links, np.array([s["radius"] for s in samples], dtype=np.float64),
                   data.get("name", "effector"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "EffectorModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def pose_vector(translation, rotation, joints) -> np.ndarray:
    return np.concatenate([np.asarray(translation, dtype=np.float64).reshape(3),
                           matrix_to_rotate6d(rotation),
                           np.asarray(joints, dtype=np.float64).reshape(-1)])


def split_pose(beta):
    return beta[..., 0:3], beta[..., 3:9], beta[..., 9:]


def link_transforms(model: EffectorModel, beta) -> tuple[torch.Tensor, torch.Tensor]:
    """World rotations (..., L, 3, 3) and origins (..., L, 3) of every link."""
    beta = as_tensor(beta)
    if beta.shape[-1] != model.pose_dim:
        raise ValueError(f"pose has {beta.shape[-1] - 9} joint angles, model has {model.n_joints}")
    t, r6, joints = split_pose(beta)
    base = rotate6d_to_matrix(r6)
    offsets = torch.from_numpy(model.offsets)
    joint_rots = axis_angle_matrix(torch.from_numpy(model.axes[1:]), joints)   # (..., J, 3, 3)
    fixed = offsets[1:, :3, :3] @ joint_rots                                  # offset then joint
    rots = [base @ offsets[0, :3, :3]]
    origins = [t + base @ offsets[0, :3, 3]]
    for i in range(1, model.n_links):
        par = model.parents[i]
        rots.append(rots[par] @ fixed[..., i - 1, :, :])
        origins.append(origins[par] + rots[par] @ offsets[i, :3, 3])
    return torch.stack(rots, -3), torch.stack(origins, -2)


def sample_queries(model: EffectorModel, beta) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """World coordinates (..., Q, 3) of the canonical samples at pose beta."""
    rots, origins = link_transforms(model, beta)
    links = torch.from_numpy(model.sample_links)
    local = torch.from_numpy(model.sample_points)
    r = rots[..., links, :, :]
    pts = origins[..., links, :] + (r @ local.unsqueeze(-1)).squeeze(-1)
    return pts, model.sample_links, model.sample_radii


def joint_limit_excess(model: EffectorModel, beta) -> torch.Tensor:
    beta = as_tensor(beta)
    if beta.shape[-1] != model.pose_dim:
        raise ValueError(f"pose has {beta.shape[-1] - 9} joint angles, model has {model.n_joints}")
    joints = beta[..., 9:]
    lim = torch.from_numpy(model.joint_limits)
    return hinge(lim[:, 0] - joints) + hinge(joints - lim[:, 1])


def _phalanx_samples(length: float, ring: float, stations: int = 4) -> np.ndarray:
    ys = np.linspace(length * 0.15, length * 0.9, stations)
    ring_pts = np.array([[ring, 0, 0], [-ring, 0, 0], [0, 0, ring], [0, 0, -ring]])
    return np.array([[rp[0], y, rp[2]] for y in ys for rp in ring_pts])


def default_hand(radius: float = 0.008) -> EffectorModel:
    """Palm plus three two-joint fingers (J=6): two fingers above, one opposed thumb.

    The palm lies in its local z=0 plane and faces +z; joints curl toward +z.
    24 palm samples, 32 per finger (16 per phalanx).
    """
    prox_len, dist_len = 0.022, 0.018
    names = ["palm"]
    parents = [-1]
    offsets = [np.eye(4)]
    axes = [np.zeros(3)]
    limits = [np.zeros(2)]
    flip = np.diag([-1.0, -1.0, 1.0])  # thumb points along -y
    fingers = [("index", np.array([0.009, 0.018, 0.0]), np.eye(3)),
               ("middle", np.array([-0.009, 0.018, 0.0]), np.eye(3)),
               ("thumb", np.array([0.0, -0.018, 0.0]), flip)]
    for fname, base, rot in fingers:
        for seg, (trans, r) in enumerate([(base, rot), (np.array([0.0, prox_len, 0.0]), np.eye(3))]):
            off = np.eye(4)
            off[:3, :3] = r
            off[:3, 3] = trans
            names.append(f"{fname}_{'proximal' if seg == 0 else 'distal'}")
            parents.append(0 if seg == 0 else len(names) - 2)
            offsets.append(off)
            axes.append(np.array([1.0, 0.0, 0.0]))
            limits.append(np.array([-0.2, 1.6]))
    xs = np.linspace(-0.012, 0.012, 4)
    ys = np.linspace(-0.015, 0.015, 6)
    palm = np.array([[x, y, 0.0] for y in ys for x in xs])
    pts, links = [palm], [np.zeros(len(palm), dtype=np.int64)]
    for li in range(1, len(names)):
        length = prox_len if names[li].endswith("proximal") else dist_len
        s = _phalanx_samples(length, 0.004)
        pts.append(s)
        links.append(np.full(len(s), li, dtype=np.int64))
    pts = np.concatenate(pts)
    links = np.concatenate(links)
    return EffectorModel(tuple(names), np.array(parents), np.array(offsets), np.array(axes),
                         np.array(limits), pts, links, np.full(len(pts), radius), "three-finger-hand")
