"""Transfer objective and the restarted gradient-descent pose optimiser."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import DEFAULT_ATTENTION_EPSILON, DecoderParams, FieldContext, normalisation
from .effector import (EffectorModel, joint_limit_excess, pose_vector, rotate6d_to_matrix,
                       sample_queries)
from .numerics import as_tensor, hinge, pairwise_sqdist, safe_norm
from .scene import FeaturedCloud, idw_log_weights

log = logging.getLogger(__name__)


@dataclass
class EnergyConfig:
    lambda_pen: float = 1e-1
    lambda_spen: float = 1e-2
    lambda_pose: float = 1e-2
    delta: float = 0.01
    steps: int = 300
    learning_rate: float = 1.0   # in the scaled variables used by descend()
    momentum: float = 0.9
    restarts: int = 8
    seed: int = 0
    max_halvings: int = 20
    workers: int = 1

    def __post_init__(self):
        if min(self.lambda_pen, self.lambda_spen, self.lambda_pose) < 0:
            raise ValueError("energy weights must be non-negative")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.steps < 0 or self.restarts < 1:
            raise ValueError("need steps >= 0 and restarts >= 1")


@dataclass(frozen=True)
class EnergyReport:
    e_feat: float
    e_pen: float
    e_spen: float
    e_pose: float
    total: float

    def as_dict(self) -> dict:
        return {"E_feat": self.e_feat, "E_pen": self.e_pen, "E_spen": self.e_spen,
                "E_pose": self.e_pose, "total": self.total}


class IDWContext:
    """Inverse-distance field with the same query interface as FieldContext.

    Defaults to the decoder's smoothing, so the baseline differs from an
    attention field only by the learned logits.
    """

    def __init__(self, cloud: FeaturedCloud, epsilon: float = DEFAULT_ATTENTION_EPSILON):
        self.cloud = cloud
        self.epsilon = epsilon
        self.points = cloud.points_t()
        self.features = cloud.features_t()

    def query(self, q):
        return torch.exp(idw_log_weights(self.points, as_tensor(q), self.epsilon)) @ self.features


def field_context(params: DecoderParams | None, cloud: FeaturedCloud):
    """Attention field for ``params``; ``None`` selects the inverse-distance baseline."""
    return IDWContext(cloud) if params is None else FieldContext(params, cloud)


def query_in_chunks(ctx, queries: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    flat = queries.reshape(-1, 3)
    out = torch.cat([ctx.query(flat[s:s + chunk]) for s in range(0, flat.shape[0], chunk)])
    return out.reshape(*queries.shape[:-1], -1)


@dataclass
class Demonstration:
    model: EffectorModel
    source: FeaturedCloud
    beta: np.ndarray
    features: torch.Tensor  # (Q, C) field features at the demonstrated pose

    @classmethod
    def create(cls, params: DecoderParams | None, model: EffectorModel, source: FeaturedCloud,
               beta) -> "Demonstration":
        beta = np.asarray(beta, dtype=np.float64)
        with torch.no_grad():
            q, _, _ = sample_queries(model, beta)
            feats = field_context(params, source).query(q)
        return cls(model, source, beta, feats)


def feature_energy(params: DecoderParams | None, demo: Demonstration, target: FeaturedCloud, beta) -> torch.Tensor:
    q, _, _ = sample_queries(demo.model, beta)
    return (demo.features - field_context(params, target).query(q)).abs().sum()


def penetration_energy(cloud_points, queries, radii) -> torch.Tensor:
    """Sum over scene points of their depth inside the union of sample spheres."""
    pts = as_tensor(cloud_points)
    q = as_tensor(queries)
    r = as_tensor(radii)
    with torch.no_grad():
        near = (pairwise_sqdist(pts, q.detach()) < r.max() ** 2 * (1 + 1e-6) + 1e-12).any(-1)
    if not bool(near.any()):
        return (q * 0).sum()
    # only points inside some sphere's reach can have non-zero depth
    dist = safe_norm(pts[near].unsqueeze(-2) - q.unsqueeze(-3))   # (n_near, Q)
    return hinge((r - dist).amax(-1)).sum(-1)


def self_penetration_energy(queries, mask, delta: float) -> torch.Tensor:
    """Ordered pairs p != q allowed by ``mask`` closer than delta (each pair counts twice)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    q = as_tensor(queries)
    mask = torch.as_tensor(np.asarray(mask, dtype=bool))
    with torch.no_grad():
        close = (pairwise_sqdist(q.detach(), q.detach()) < delta * delta * (1 + 1e-6) + 1e-12) & mask
    i, j = torch.nonzero(close, as_tuple=True)
    if i.numel() == 0:
        return (q * 0).sum()
    return hinge(delta - safe_norm(q[i] - q[j])).sum()


def pose_energy(model: EffectorModel, beta) -> torch.Tensor:
    return (joint_limit_excess(model, beta) ** 2).sum(-1)


class TransferObjective:
    """Energy terms at a pose for one (field, demonstration, target) triple."""

    def __init__(self, params: DecoderParams | None, demo: Demonstration, target: FeaturedCloud,
                 config: EnergyConfig | None = None):
        self.config = config or EnergyConfig()
        self.demo = demo
        self.model = demo.model
        self.target = target
        self.ctx = field_context(params, target)
        self.points = target.points_t()
        self.radii = torch.from_numpy(self.model.sample_radii)
        self.mask = self.model.self_collision_mask()

    def terms(self, beta) -> dict[str, torch.Tensor]:
        beta = as_tensor(beta)
        q, _, _ = sample_queries(self.model, beta)
        cfg = self.config
        e_feat = (self.demo.features - self.ctx.query(q)).abs().sum()
        e_pen = penetration_energy(self.points, q, self.radii)
        e_spen = self_penetration_energy(q, self.mask, cfg.delta)
        e_pose = pose_energy(self.model, beta)
        total = e_feat + cfg.lambda_pen * e_pen + cfg.lambda_spen * e_spen + cfg.lambda_pose * e_pose
        return {"E_feat": e_feat, "E_pen": e_pen, "E_spen": e_spen, "E_pose": e_pose, "total": total}

    def report(self, beta) -> EnergyReport:
        with torch.no_grad():
            t = self.terms(beta)
        return EnergyReport(float(t["E_feat"]), float(t["E_pen"]), float(t["E_spen"]),
                            float(t["E_pose"]), float(t["total"]))


def total_energy(params: DecoderParams | None, demo: Demonstration, target: FeaturedCloud, beta,
                 config: EnergyConfig | None = None) -> EnergyReport:
    return TransferObjective(params, demo, target, config).report(beta)


# -- optimisation -----------------------------------------------------------------

@dataclass
class RestartOutcome:
    index: int
    beta: np.ndarray
    total: float
    failed: bool
    message: str = ""
    trajectory: list[tuple[np.ndarray, EnergyReport]] = field(default_factory=list, repr=False)


@dataclass
class OptimizationResult:
    beta: np.ndarray
    report: EnergyReport
    trajectory: list[tuple[np.ndarray, EnergyReport]]
    restarts: list[RestartOutcome]
    best_restart: int


class OptimizationError(RuntimeError):
    """Every restart hit a non-finite energy."""


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                     [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                     [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def initial_pose(model: EffectorModel, target: FeaturedCloud, seed: int, restart: int) -> np.ndarray:
    """Translation uniform in the target's bounding box grown by 20%, rotation
    uniform on SO(3), joints uniform within their limits."""
    rng = np.random.default_rng([seed, restart])
    lo, hi = target.points.min(0), target.points.max(0)
    pad = 0.1 * (hi - lo)
    t = rng.uniform(lo - pad, hi + pad)
    rot = random_rotation(rng)
    lim = model.joint_limits
    joints = rng.uniform(lim[:, 0], lim[:, 1])
    return pose_vector(t, rot, joints)


def _reorthonormalise(beta: np.ndarray) -> np.ndarray:
    out = beta.copy()
    rot = rotate6d_to_matrix(beta[3:9]).numpy()
    out[3:9] = np.concatenate([rot[:, 0], rot[:, 1]])
    return out


def descend(objective: TransferObjective, beta0, steps: int | None = None, index: int = 0) -> RestartOutcome:
    """Momentum gradient descent with step halving whenever a step would raise the energy.

    Translation is descended in units of the target's bounding radius and the
    energy in units of Q*C so one learning rate serves every coordinate.
    """
    cfg = objective.config
    steps = cfg.steps if steps is None else steps
    model = objective.model
    _, radius = normalisation(objective.points)
    scale = np.ones(model.pose_dim)
    scale[:3] = float(radius)
    norm = 1.0 / (model.n_samples * objective.demo.features.shape[1])
    scale_t = torch.from_numpy(scale)

    def evaluate(beta: np.ndarray):
        b = torch.from_numpy(beta).requires_grad_(True)
        terms = objective.terms(b)
        total = terms["total"]
        if not torch.isfinite(total):
            return math.inf, None, None
        (g,) = torch.autograd.grad(total, b)
        rep = EnergyReport(*(terms[k].item() for k in ("E_feat", "E_pen", "E_spen", "E_pose", "total")))
        return total.item(), (g * scale_t).numpy() * norm, rep

    beta = np.asarray(beta0, dtype=np.float64).copy()
    try:
        energy, grad, rep = evaluate(beta)
    except ValueError as exc:
        return RestartOutcome(index, beta, math.inf, True, str(exc))
    if grad is None:
        return RestartOutcome(index, beta, math.inf, True, "non-finite energy at initialisation")
    trajectory = [(beta.copy(), rep)]
    lr, vel = cfg.learning_rate, np.zeros_like(beta)
    for step in range(steps):
        v_new = cfg.momentum * vel + grad
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            trial = beta - lr * scale * v_new
            try:
                e_try, g_try, r_try = evaluate(trial)
            except ValueError as exc:  # degenerate rotate6D
                return RestartOutcome(index, beta, energy, True, f"step {step}: {exc}", trajectory)
            if g_try is None:
                return RestartOutcome(index, beta, energy, True, f"non-finite energy at step {step}", trajectory)
            if e_try <= energy:
                accepted = True
                break
            lr *= 0.5
            v_new = grad
        if not accepted:
            break
        beta, energy, grad, vel = _reorthonormalise(trial), e_try, g_try, v_new
        trajectory.append((beta.copy(), r_try))
        lr = min(cfg.learning_rate, lr * 1.1)
    return RestartOutcome(index, beta, energy, False, "", trajectory)


def optimize_pose(params: DecoderParams | None, demo: Demonstration, target: FeaturedCloud,
                  config: EnergyConfig | None = None, inits=None) -> OptimizationResult:
    """Run every restart and keep the one with the lowest final total energy."""
    config = config or EnergyConfig()
    objective = TransferObjective(params, demo, target, config)
    if inits is None:
        inits = [initial_pose(demo.model, target, config.seed, r) for r in range(config.restarts)]

    def run(i):
        return descend(objective, inits[i], index=i)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            outcomes = list(pool.map(run, range(len(inits))))
    else:
        outcomes = [run(i) for i in range(len(inits))]
    ok = [o for o in outcomes if not o.failed]
    for o in outcomes:
        if o.failed:
            log.warning("restart %d abandoned: %s", o.index, o.message)
    if not ok:
        raise OptimizationError("all restarts failed: " + "; ".join(o.message for o in outcomes))
    best = min(ok, key=lambda o: (o.total, o.index))
    return OptimizationResult(best.beta, objective.report(best.beta), best.trajectory, outcomes, best.index)


def write_trajectory_csv(path, trajectory, n_joints: int) -> None:
    cols = ([f"t{i}" for i in range(3)] + [f"r6_{i}" for i in range(6)]
            + [f"joint{i}" for i in range(n_joints)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *cols, "E_feat", "E_pen", "E_spen", "E_pose", "total"])
        for step, (beta, rep) in enumerate(trajectory):
            w.writerow([step, *(repr(float(v)) for v in beta),
                        *(repr(v) for v in (rep.e_feat, rep.e_pen, rep.e_spen, rep.e_pose, rep.total))])


def energy_slice(params: DecoderParams | None, demo: Demonstration, target: FeaturedCloud, height: float,
                 grid: int, axis: str = "z") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feature energy with the hand base swept over a grid on an axis-aligned plane.

    Orientation and joints stay at the demonstration's values.  Returns the two
    in-plane coordinate vectors and the (grid, grid) energy array, row-major in
    the first in-plane axis.
    """
    if grid < 2:
        raise ValueError("grid needs at least 2 cells per side")
    ax = "xyz".index(axis)
    inplane = [i for i in range(3) if i != ax]
    lo, hi = target.points.min(0), target.points.max(0)
    u = np.linspace(lo[inplane[0]], hi[inplane[0]], grid)
    v = np.linspace(lo[inplane[1]], hi[inplane[1]], grid)
    ctx = field_context(None if params is None else params, target)
    with torch.no_grad():
        q0, _, _ = sample_queries(demo.model, demo.beta)
        rel = q0 - torch.from_numpy(demo.beta[:3])
        energies = np.empty((grid, grid))
        for i, a in enumerate(u):
            t = np.empty((grid, 3))
            t[:, inplane[0]] = a
            t[:, inplane[1]] = v
            t[:, ax] = height
            q = torch.from_numpy(t)[:, None, :] + rel[None]
            f = query_in_chunks(ctx, q)
            energies[i] = (demo.features[None] - f).abs().sum((-1, -2)).numpy()
    return u, v, energies
