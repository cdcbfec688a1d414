"""Procedural part-labelled scenes, the hand-to-region metric and the transfer benchmark."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .attention import DecoderParams
from .effector import EffectorModel, default_hand, pose_vector, sample_queries
from .energy import Demonstration, EnergyConfig, optimize_pose, random_rotation
from .scene import FeaturedCloud
from .training import TrainingConfig, train

log = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 0.03  # m, mean hand-sample distance to the target region
REGION_STRIDE = 100       # region label = instance * REGION_STRIDE + part index


@dataclass(frozen=True)
class Part:
    center: tuple[float, float, float]
    radius: float
    label: str
    name: str = ""


@dataclass(frozen=True)
class SynthObject:
    name: str
    parts: tuple[Part, ...]
    density: float = 9000.0  # surface samples per m^2

    def part_index(self, name: str) -> int:
        for i, p in enumerate(self.parts):
            if p.name == name:
                return i
        raise KeyError(name)


def _critter(name: str, arm_r: float = 0.018, arm_x: float = 0.05, head_r: float = 0.025,
             body_len: float = 0.0) -> SynthObject:
    """Toy-animal stand-in: torso, head, two arms sharing a label, two legs, a tail."""
    parts = [Part((0.0, 0.0, 0.0), 0.04, "torso", "torso")]
    if body_len:
        parts.append(Part((0.0, -body_len, 0.0), 0.04, "torso", "torso_rear"))
    parts += [
        Part((0.0, 0.055, 0.04), head_r, "head", "head"),
        Part((arm_x, 0.02, 0.015), arm_r, "arm", "arm_right"),
        Part((-arm_x, 0.02, 0.015), arm_r, "arm", "arm_left"),
        Part((0.025, -0.01 - body_len, -0.04), 0.015, "leg", "leg_right"),
        Part((-0.025, -0.01 - body_len, -0.04), 0.015, "leg", "leg_left"),
        Part((0.0, -0.045 - body_len, 0.015), 0.012, "tail", "tail"),
    ]
    return SynthObject(name, tuple(parts))


CATALOG: dict[str, SynthObject] = {
    "critter": _critter("critter"),
    # same semantics, re-proportioned parts
    "critter_long": _critter("critter_long", arm_r=0.021, arm_x=0.056, head_r=0.03, body_len=0.035),
    "ball": SynthObject("ball", (Part((0.0, 0.0, 0.0), 0.03, "ball", "ball"),)),
    "gadget": SynthObject("gadget", (Part((0.0, 0.0, 0.0), 0.025, "gadget_body", "body"),
                                     Part((0.0, 0.0, 0.035), 0.015, "gadget_cap", "cap"))),
    "totem": SynthObject("totem", (Part((0.0, 0.0, -0.02), 0.022, "totem_base", "base"),
                                   Part((0.0, 0.0, 0.02), 0.02, "totem_top", "top"))),
}

DEFAULT_LABELS = ("torso", "head", "arm", "leg", "tail", "ball", "gadget_body", "gadget_cap",
                  "totem_base", "totem_top")


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Seeded per-label embeddings (unit norm) plus per-label positional maps."""

    labels: tuple[str, ...]
    embeddings: np.ndarray   # (V, C)
    positional: np.ndarray   # (V, C, 3)

    @classmethod
    def build(cls, dim: int = 8, seed: int = 0, labels=DEFAULT_LABELS, positional_scale: float = 0.3):
        rng = np.random.default_rng(seed)
        v = len(labels)
        if v <= dim:
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            emb = q[:, :v].T.copy()
        else:
            emb = rng.standard_normal((v, dim))
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        pos = rng.standard_normal((v, dim, 3))
        pos *= positional_scale / np.linalg.norm(pos, axis=1, keepdims=True)
        return cls(tuple(labels), emb, pos)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class Placement:
    object: str
    rotation: tuple  # 3x3 nested tuple
    translation: tuple[float, float, float]


@dataclass(frozen=True)
class SynthSceneSpec:
    target: Placement
    distractors: tuple[Placement, ...] = ()
    sigma: float = 0.05
    seed: int = 0
    confusable: float = 0.0  # chance that a distractor part borrows one of the target's labels


def placement(obj: str, rotation=None, translation=(0.0, 0.0, 0.0)) -> Placement:
    rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    if abs(np.linalg.det(rot) - 1) > 1e-9 or np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
        raise ValueError("placement rotation must be a proper rotation matrix")
    return Placement(obj, tuple(map(tuple, rot.tolist())), tuple(float(x) for x in translation))


def _sphere_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_object(obj: SynthObject, vocab: Vocabulary, rng: np.random.Generator, labels=None):
    """Surface points (object frame), noise-free features and part indices.

    ``labels`` optionally overrides the semantic label of each part.
    """
    labels = [p.label for p in obj.parts] if labels is None else list(labels)
    pts, feats, parts = [], [], []
    centers = np.array([p.center for p in obj.parts])
    radii = np.array([p.radius for p in obj.parts])
    for i, part in enumerate(obj.parts):
        n = max(8, int(round(obj.density * 4 * np.pi * part.radius ** 2)))
        u = _sphere_directions(rng, n)
        x = np.asarray(part.center) + part.radius * u
        inside = np.zeros(n, dtype=bool)
        for j in range(len(obj.parts)):
            if j != i:
                inside |= np.linalg.norm(x - centers[j], axis=1) < radii[j] - 1e-9
        u, x = u[~inside], x[~inside]
        li = vocab.index(labels[i])
        pts.append(x)
        feats.append(vocab.embeddings[li] + u @ vocab.positional[li].T)
        parts.append(np.full(len(x), i))
    return np.concatenate(pts), np.concatenate(feats), np.concatenate(parts)


def generate_scene(spec: SynthSceneSpec, vocab: Vocabulary) -> FeaturedCloud:
    """Featured cloud with region labels ``instance * 100 + part``; instance 0 is the target.

    Coordinates and features are rounded to float32 so the on-disk form is exact.
    """
    if spec.sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not 0.0 <= spec.confusable <= 1.0:
        raise ValueError("confusable must lie in [0, 1]")
    for pl in (spec.target, *spec.distractors):
        if pl.object not in CATALOG:
            raise ValueError(f"unknown object {pl.object!r}")
    target_labels = sorted({p.label for p in CATALOG[spec.target.object].parts})
    all_pts, all_feats, all_labels = [], [], []
    for inst, pl in enumerate((spec.target, *spec.distractors)):
        obj = CATALOG[pl.object]
        rng = np.random.default_rng([spec.seed, inst, 0])
        labels = [p.label for p in obj.parts]
        if inst > 0 and spec.confusable > 0:
            swap = np.random.default_rng([spec.seed, inst, 2])
            for i in range(len(labels)):
                if swap.uniform() < spec.confusable:
                    labels[i] = target_labels[swap.integers(len(target_labels))]
        x, f, part = sample_object(obj, vocab, rng, labels)
        rot = np.asarray(pl.rotation)
        all_pts.append(x @ rot.T + np.asarray(pl.translation))
        all_feats.append(f)
        all_labels.append(inst * REGION_STRIDE + part)
    feats = np.concatenate(all_feats)
    if spec.sigma > 0:
        feats = feats + spec.sigma * np.random.default_rng([spec.seed, 0, 1]).standard_normal(feats.shape)
    pts = np.concatenate(all_pts).astype(np.float32).astype(np.float64)
    feats = feats.astype(np.float32).astype(np.float64)
    return FeaturedCloud(pts, feats, np.concatenate(all_labels))


def success_metric(beta, model: EffectorModel, region, cloud: FeaturedCloud) -> float:
    """Mean over hand samples of the distance to the nearest target-region point.

    ``region`` is a region label (needs ``cloud.labels``) or an index mask.
    """
    if isinstance(region, (int, np.integer)):
        if cloud.labels is None:
            raise ValueError("cloud has no region labels")
        mask = cloud.labels == region
    else:
        mask = np.asarray(region, dtype=bool)
    if not mask.any():
        raise ValueError("target region is empty")
    with torch.no_grad():
        q, _, _ = sample_queries(model, beta)
    diff = q.numpy()[:, None, :] - cloud.points[mask][None]
    return float(np.sqrt((diff ** 2).sum(-1)).min(1).mean())


# -- poses --------------------------------------------------------------------

def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def grasp_pose(part_center, approach, up, standoff: float, joints) -> np.ndarray:
    """Palm facing the part centre from ``approach``, fingers pointing along ``up``."""
    n = np.asarray(approach, dtype=np.float64)
    n /= np.linalg.norm(n)
    z = -n
    y = np.asarray(up, dtype=np.float64) - np.dot(up, z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    rot = np.stack([x, y, z], 1)
    return pose_vector(np.asarray(part_center) + standoff * n, rot, joints)


def demo_grasp(obj: SynthObject, part: str = "arm_right", placement_: Placement | None = None,
               model: EffectorModel | None = None) -> np.ndarray:
    """Authored demonstration: palm on the outer side of ``part``, fingers wrapping it."""
    model = model or default_hand()
    p = obj.parts[obj.part_index(part)]
    center = np.asarray(p.center)
    approach = center - np.asarray(obj.parts[0].center)
    approach[2] = 0.0
    rot = np.eye(3) if placement_ is None else np.asarray(placement_.rotation)
    trans = np.zeros(3) if placement_ is None else np.asarray(placement_.translation)
    beta = grasp_pose(center, approach, np.array([0.0, 0.0, 1.0]), p.radius + 0.010,
                      np.tile([0.9, 0.6], model.n_joints // 2 + 1)[:model.n_joints])
    if placement_ is not None:
        from .effector import rotate6d_to_matrix
        r0 = rotate6d_to_matrix(beta[3:9]).numpy()
        beta = pose_vector(rot @ beta[:3] + trans, rot @ r0, beta[9:])
    return beta


# -- benchmark ----------------------------------------------------------------

@dataclass
class SuiteSpec:
    name: str = "distractor"
    kind: str = "distractor"          # self | distractor | cross-object
    seeds: tuple[int, ...] = tuple(range(10))
    methods: tuple[str, ...] = ("attention", "idw")
    feature_dim: int = 8
    sigma: float = 0.05
    vocab_seed: int = 0
    pretrain_scenes: int = 4
    pretrain_distractors: int = 0
    decoy_clearance: float = 0.005  # m between decoys and the demonstrated hand in distractor scenes
    demo_object: str = "critter"
    demo_part: str = "arm_right"
    test_object: str = "critter"
    threshold: float = SUCCESS_THRESHOLD
    confusable: float = 0.0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)


@dataclass
class BenchmarkRow:
    scene: str
    seed: int
    method: str
    metric: float
    success: bool
    beta: np.ndarray = field(repr=False, default=None)


DECOYS = ("ball", "gadget", "totem")


def _decoy_around(name: str, obj: SynthObject, azimuth: float, rng, rot, trans,
                  keep_clear=None, clearance: float = 0.0) -> Placement:
    """Place decoy ``name`` beside ``obj`` at an object-frame azimuth, a small gap off its extent.

    ``keep_clear`` is an optional (points, radii) set of world-frame spheres the
    decoy may not come within ``clearance`` of; the decoy backs off outward
    in 5 mm steps until it does not.
    """
    decoy = CATALOG[name]
    size = max(np.hypot(*p.center[:2]) + p.radius for p in decoy.parts)
    reach = max(np.hypot(*p.center[:2]) + p.radius for p in obj.parts)
    gap = rng.uniform(0.01, 0.03)
    z = rng.uniform(-0.02, 0.02)
    spin = rotation_z(rng.uniform(-np.pi, np.pi))
    direction = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    while True:
        c = direction * (reach + gap + size)
        c[2] = z
        pl = placement(name, rot @ spin, rot @ c + trans)
        if keep_clear is None or _clear_of(decoy, pl, *keep_clear, clearance):
            return pl
        gap += 0.005


def _clear_of(obj: SynthObject, pl: Placement, points, radii, clearance: float) -> bool:
    rot, trans = np.asarray(pl.rotation), np.asarray(pl.translation)
    for p in obj.parts:
        c = rot @ np.asarray(p.center) + trans
        if np.any(np.linalg.norm(points - c, axis=1) - radii - p.radius < clearance):
            return False
    return True


def pretrain_specs(suite: SuiteSpec) -> list[SynthSceneSpec]:
    """The demo object in random poses, each scene with its own random clutter."""
    specs = []
    obj = CATALOG[suite.demo_object]
    for i in range(suite.pretrain_scenes):
        rng = np.random.default_rng([suite.vocab_seed, 1000 + i])
        rot = random_rotation(rng)
        trans = rng.uniform(-0.1, 0.1, 3)
        decoys = tuple(_decoy_around(DECOYS[rng.integers(len(DECOYS))], obj, rng.uniform(-np.pi, np.pi),
                                     rng, rot, trans) for _ in range(suite.pretrain_distractors))
        specs.append(SynthSceneSpec(placement(suite.demo_object, rot, trans), decoys,
                                    sigma=suite.sigma, seed=1000 + i, confusable=suite.confusable))
    return specs


def demo_spec(suite: SuiteSpec) -> SynthSceneSpec:
    return SynthSceneSpec(placement(suite.demo_object), sigma=suite.sigma, seed=500)


def test_spec(suite: SuiteSpec, seed: int) -> SynthSceneSpec:
    if suite.kind == "self":
        return demo_spec(suite)
    rng = np.random.default_rng([suite.vocab_seed, 2000 + seed])
    rot = rotation_z(rng.uniform(-np.pi, np.pi))
    trans = np.array([*rng.uniform(-0.05, 0.05, 2), 0.0])
    target = placement(suite.test_object, rot, trans)
    distractors = ()
    if suite.kind == "distractor":
        obj = CATALOG[suite.test_object]
        # clutter spread around the target, never blocking the demonstrated grasp
        model = default_hand()
        beta = demo_grasp(obj, suite.demo_part, target, model)
        with torch.no_grad():
            hand = sample_queries(model, beta)[0].numpy()
        keep = (hand, model.sample_radii)
        phase = rng.uniform(-np.pi, np.pi)
        distractors = tuple(
            _decoy_around(name, obj, phase + 2 * np.pi * k / len(DECOYS) + rng.uniform(-0.4, 0.4), rng, rot, trans,
                          keep, suite.decoy_clearance)
            for k, name in enumerate(DECOYS))
    elif suite.kind != "cross-object":
        raise ValueError(f"unknown suite kind {suite.kind!r}")
    return SynthSceneSpec(target, distractors, suite.sigma, seed, suite.confusable)


def target_region(suite: SuiteSpec) -> int:
    return CATALOG[suite.test_object].part_index(suite.demo_part)


def fit_method(method: str, suite: SuiteSpec, vocab: Vocabulary) -> DecoderParams | None:
    if method == "idw":
        return None
    if method != "attention":
        raise ValueError(f"unknown method {method!r}")
    clouds = [generate_scene(s, vocab) for s in pretrain_specs(suite)]
    return train(clouds, suite.training).params


def benchmark(suite: SuiteSpec, model: EffectorModel | None = None,
              fitted: dict | None = None) -> list[BenchmarkRow]:
    """Train (attention) or skip training (idw), then transfer the demo to every test scene."""
    model = model or default_hand()
    vocab = Vocabulary.build(suite.feature_dim, suite.vocab_seed)
    source = generate_scene(demo_spec(suite), vocab)
    beta_hat = demo_grasp(CATALOG[suite.demo_object], suite.demo_part, model=model)
    region = target_region(suite)
    rows = []
    for method in suite.methods:
        params = fitted[method] if fitted and method in fitted else fit_method(method, suite, vocab)
        demo = Demonstration.create(params, model, source, beta_hat)
        for seed in suite.seeds:
            target = generate_scene(test_spec(suite, seed), vocab)
            cfg = replace(suite.energy, seed=seed)
            result = optimize_pose(params, demo, target, cfg)
            metric = success_metric(result.beta, model, region, target)
            rows.append(BenchmarkRow(suite.name, seed, method, metric, metric <= suite.threshold, result.beta))
            log.info("%s seed=%d %s metric=%.4f", suite.name, seed, method, metric)
    return rows


def success_counts(rows) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in rows:
        out[r.method] = out.get(r.method, 0) + int(r.success)
    return out


def write_benchmark_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "seed", "method", "metric", "success"])
        for r in rows:
            w.writerow([r.scene, r.seed, r.method, repr(r.metric), int(r.success)])
        by_method: dict[str, list] = {}
        for r in rows:
            by_method.setdefault(r.method, []).append(r)
        for method, rs in by_method.items():
            rate = sum(r.success for r in rs) / len(rs)
            w.writerow(["summary", "", method, repr(float(np.mean([r.metric for r in rs]))), repr(rate)])
