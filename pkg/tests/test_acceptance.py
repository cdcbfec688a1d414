"""Acceptance criteria, one test each; every test records a PASS/FAIL line that is
printed in the terminal summary."""
import json
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy.spatial import Delaunay

from conftest import random_cloud, record
from test_cli import run_pipeline
from test_keypoints import oracle_chains
from test_synth import naive_metric
from test_training import naive_infonce
from nafield.attention import DecoderParams, init_params, query_feature, self_attention_features
from nafield.cli import main
from nafield.effector import EffectorModel, default_hand, sample_queries
from nafield.energy import (Demonstration, EnergyConfig, TransferObjective, energy_slice, optimize_pose,
                            penetration_energy, pose_energy, self_penetration_energy, total_energy)
from nafield.formats import DemoFile, load_demo, load_scene, save_scene
from nafield.keypoints import EmptyKeypointsError, select_keypoints
from nafield.numerics import finite_diff_check
from nafield.scene import FeaturedCloud, idw_feature, idw_weights, knn
from nafield.synth import (CATALOG, REGION_STRIDE, SuiteSpec, SynthSceneSpec, Vocabulary, benchmark,
                           demo_grasp, demo_spec, generate_scene, placement, pretrain_specs, rotation_z,
                           success_counts, success_metric, test_spec as make_test_spec)
from nafield.training import infonce_loss, retrieval_accuracy, train

VOCAB = Vocabulary.build(8, 0)


@pytest.fixture(scope="module")
def trained():
    suite = SuiteSpec()
    clouds = [generate_scene(s, VOCAB) for s in pretrain_specs(suite)]
    return train(clouds, suite.training)


@pytest.fixture(scope="module")
def demo_setup():
    model = default_hand()
    scene = generate_scene(demo_spec(SuiteSpec()), VOCAB)
    return model, scene, demo_grasp(CATALOG["critter"], model=model)


def mini_hand() -> EffectorModel:
    h = default_hand()
    idx = np.arange(0, h.n_samples, 8)
    return EffectorModel(h.names, h.parents, h.offsets, h.axes, h.limits, h.sample_points[idx],
                         h.sample_links[idx], h.sample_radii[idx], "mini")


# 1 ------------------------------------------------------------------------------

def test_criterion_01_gradient_suite():
    t0 = time.time()
    rng = np.random.default_rng(11)
    checks = {}

    def fd(program, inputs):
        return finite_diff_check(program, inputs, tolerance=1e-4)

    cloud = random_cloud(rng, 24, 6, scale=0.05)
    w = torch.from_numpy(rng.standard_normal(6))
    q0 = rng.uniform(-0.05, 0.05, 3)
    checks["idw_feature"] = fd(lambda q: idw_feature(cloud, q, 1e-4) @ w, [q0])

    params = init_params(6, 2, 4, seed=3, mode="random")
    checks["query_feature/q"] = fd(lambda q: query_feature(params, cloud, q)[0] @ w, [q0])
    for slot, t in enumerate(params.tensors()):
        def qf(x, slot=slot):
            ts = list(params.tensors())
            ts[slot] = x
            return query_feature(params.with_tensors(ts), cloud, q0)[0] @ w
        checks[f"query_feature/W{slot}"] = fd(qf, [t.numpy()])

    model = mini_hand()
    beta = demo_grasp(CATALOG["critter"], model=model)
    beta[9:] += rng.uniform(-0.1, 0.1, model.n_joints)
    wq = torch.from_numpy(rng.standard_normal((model.n_samples, 3)))
    checks["FK"] = fd(lambda b: (sample_queries(model, b)[0] * wq).sum(), [beta])

    q = sample_queries(model, beta)[0].numpy()
    near = q[rng.integers(0, len(q), 20)] + rng.normal(scale=0.004, size=(20, 3))
    source = FeaturedCloud(q[rng.integers(0, len(q), 28)] + rng.normal(scale=0.01, size=(28, 3)),
                           rng.standard_normal((28, 6)))
    target = FeaturedCloud(np.concatenate([near, source.points[:8]]), rng.standard_normal((28, 6)))
    demo = Demonstration.create(None, model, source, beta)
    obj = TransferObjective(None, demo, target)
    moved = beta + rng.normal(scale=1e-3, size=beta.shape)
    checks["E_feat"] = fd(lambda b: obj.terms(b)["E_feat"], [moved])
    checks["E_pen"] = fd(lambda b: penetration_energy(target.points, sample_queries(model, b)[0],
                                                                     model.sample_radii), [moved])
    mask = model.self_collision_mask()
    checks["E_spen"] = fd(lambda b: self_penetration_energy(sample_queries(model, b)[0], mask, 0.03),
                                         [moved])
    over = moved.copy()
    over[9:] = [1.8, -0.4, 0.5, 1.7, -0.3, 1.9]
    checks["E_pose"] = fd(lambda b: pose_energy(model, b), [over])
    checks["InfoNCE"] = fd(lambda a, b: infonce_loss([a, b], 0.5),
                                          [rng.standard_normal((4, 6)), rng.standard_normal((4, 6))])
    checks["total_energy"] = fd(lambda b: obj.terms(b)["total"], [moved])
    elapsed = time.time() - t0
    worst = max(r.max_rel_error for r in checks.values())
    active = {k: r.compared for k, r in checks.items()}
    ok = all(r.passed for r in checks.values()) and elapsed < 60 and all(active.values())
    record(1, ok, f"{len(checks)} checks, worst rel err {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 60 s)")
    assert all(r.passed and r.max_rel_error < 1e-4 for r in checks.values()), {k: str(r) for k, r in checks.items()}
    assert all(active.values()) and elapsed < 60


# 2 ------------------------------------------------------------------------------

def test_criterion_02_zero_logit_reduction():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):
        cloud = random_cloud(rng, int(rng.integers(5, 40)), 4)
        params = init_params(4)
        for _ in range(10):
            q = rng.uniform(-0.12, 0.12, 3)
            _, trace = query_feature(params, cloud, q)
            want = idw_weights(cloud, q, params.epsilon)
            worst = max(worst, float((trace.weights - want).abs().max()))
    record(2, worst <= 1e-12, f"max |attention - IDW weight| = {worst:.1e} over 100 queries")
    assert worst <= 1e-12


# 3 ------------------------------------------------------------------------------

def naive_idw(points, feats, q, eps):
    w = [1.0 / (sum((q[a] - x[a]) ** 2 for a in range(3)) + eps) for x in points]
    return sum(wi * f for wi, f in zip(w, feats)) / sum(w)


def test_criterion_03_oracles(demo_setup):
    rng = np.random.default_rng(3)
    errs = {}
    cloud = random_cloud(rng, 16, 4)
    q = rng.uniform(-0.1, 0.1, 3)
    errs["idw_feature"] = float(np.abs(idw_feature(cloud, q, 1e-8).numpy()
                                       - naive_idw(cloud.points, cloud.features, q, 1e-8)).max())
    big = random_cloud(rng, 32, 3)
    knn_ok = all(list(knn(big, big.points[i], 5)) ==
                 sorted(range(32), key=lambda j: (float(((big.points[j] - big.points[i]) ** 2).sum()), j))[:5]
                 for i in range(32))
    mnn_ok = True
    for trial in range(6):
        n_scenes = 2 + trial % 2
        clouds = [FeaturedCloud(rng.uniform(-1, 1, (n, 3)), rng.standard_normal((n, 2)))
                  for n in rng.integers(6, 13, n_scenes)]
        want = oracle_chains(clouds, 3, trial)
        try:
            got = select_keypoints(clouds, 3, trial).indices.tolist()
        except EmptyKeypointsError:
            got = []
        mnn_ok &= got == want
    sets = [rng.standard_normal((5, 4)) for _ in range(3)]
    errs["infonce"] = abs(infonce_loss(sets, 0.2).item() - naive_infonce(sets, 0.2, "exclusive"))
    model, scene, beta = demo_setup
    errs["success_metric"] = abs(success_metric(beta, model, 2, scene)
                                 - naive_metric(beta, model, scene.points[scene.labels == 2]))
    ok = knn_ok and mnn_ok and max(errs.values()) <= 1e-10
    record(3, ok, f"knn exact={knn_ok}, select_keypoints exact={mnn_ok}, "
                  f"max float err {max(errs.values()):.1e} (<= 1e-10)")
    assert knn_ok and mnn_ok and max(errs.values()) <= 1e-10, errs


# 4 ------------------------------------------------------------------------------

def test_criterion_04_hand_computed_loss():
    e = np.eye(2)
    got = infonce_loss([e, e], 1.0, "exclusive").item()
    record(4, abs(got + 4) <= 1e-9, f"loss = {got!r} (want -4 +- 1e-9)")
    assert abs(got + 4) <= 1e-9


# 5 ------------------------------------------------------------------------------

def test_criterion_05_lambda_defaults(demo_setup):
    model, scene, beta = demo_setup
    demo = Demonstration.create(None, model, scene, beta)
    moved = beta.copy()
    moved[:3] += [0.0, 0.0, -0.012]
    moved[9:] = [1.8, 1.7, 1.7, 1.75, 1.9, 1.65]
    r = total_energy(None, demo, scene, moved)
    recomputed = r.e_feat + 1e-1 * r.e_pen + 1e-2 * r.e_spen + 1e-2 * r.e_pose
    cfg = EnergyConfig()
    ok = (abs(r.total - recomputed) <= 1e-12 * max(1.0, r.total) and min(r.e_pen, r.e_spen, r.e_pose) > 0
          and (cfg.lambda_pen, cfg.lambda_spen, cfg.lambda_pose) == (1e-1, 1e-2, 1e-2))
    record(5, ok, f"total {r.total:.6f} = E_feat + 0.1 E_pen + 0.01 E_spen + 0.01 E_pose")
    assert ok


# 6 ------------------------------------------------------------------------------

def test_criterion_06_self_transfer(demo_setup, trained):
    model, scene, beta = demo_setup
    t0 = time.time()
    lines, ok = [], True
    for name, params in (("attention", trained.params), ("idw", None)):
        demo = Demonstration.create(params, model, scene, beta)
        exact = total_energy(params, demo, scene, beta).e_feat == 0.0
        wins = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            init = beta.copy()
            d = rng.standard_normal(3)
            init[:3] += 0.01 * d / np.linalg.norm(d)
            init[9:] += 0.05 * rng.choice([-1.0, 1.0], model.n_joints)
            e0 = total_energy(params, demo, scene, init).e_feat
            res = optimize_pose(params, demo, scene, EnergyConfig(restarts=1), inits=[init])
            wins += res.report.e_feat < 0.05 * e0
        ok &= exact and wins >= 9
        lines.append(f"{name}: E_feat(beta_hat)==0 {exact}, {wins}/10 below 5%")
    elapsed = time.time() - t0
    ok &= elapsed < 300
    record(6, ok, "; ".join(lines) + f"; {elapsed:.0f} s (< 300 s)")
    assert ok


# 7 ------------------------------------------------------------------------------

def test_criterion_07_training_efficacy(trained):
    l0, l1 = trained.losses[0], trained.losses[-1]
    reduction = (l0 - l1) / abs(l0)
    base = generate_scene(SynthSceneSpec(placement("critter"), sigma=0.0, seed=77), VOCAB)
    rng = np.random.default_rng(5)
    rot = rotation_z(1.0)
    a = FeaturedCloud(base.points, base.features + 0.05 * rng.standard_normal(base.features.shape))
    b = FeaturedCloud(base.points @ rot.T + 0.1, base.features + 0.05 * rng.standard_normal(base.features.shape))
    raw = retrieval_accuracy(a.features, b.features)
    fd = retrieval_accuracy(self_attention_features(trained.params, a).numpy(),
                            self_attention_features(trained.params, b).numpy())
    ok = len(trained.losses) == 100 and reduction >= 0.5 and fd >= raw
    record(7, ok, f"loss {l0:.1f} -> {l1:.1f} ({100 * reduction:.0f}% reduction, >= 50%); "
                  f"held-out retrieval F_D {fd:.3f} >= raw {raw:.3f}")
    assert ok


# 8 ------------------------------------------------------------------------------

def test_criterion_08_distractor_trend(trained):
    base = SuiteSpec()
    fitted = {"attention": trained.params, "idw": None}
    counts = {}
    for kind, obj in (("distractor", "critter"), ("cross-object", "critter_long")):
        rows = benchmark(replace(base, name=kind, kind=kind, test_object=obj), fitted=fitted)
        counts[kind] = success_counts(rows)
    ge = all(c.get("attention", 0) >= c.get("idw", 0) for c in counts.values())
    gt = any(c.get("attention", 0) > c.get("idw", 0) for c in counts.values())

    model = default_hand()
    source = generate_scene(demo_spec(base), VOCAB)
    beta = demo_grasp(CATALOG[base.demo_object], base.demo_part, model=model)
    demo = Demonstration.create(trained.params, model, source, beta)
    inside = 0
    for seed in base.seeds:
        target = generate_scene(make_test_spec(base, seed), VOCAB)
        u, v, e = energy_slice(trained.params, demo, target, float(beta[2]), 24)
        i, j = np.unravel_index(np.argmin(e), e.shape)
        hull = Delaunay(target.points[target.labels < REGION_STRIDE][:, :2])
        inside += int(hull.find_simplex([u[i], v[j]]) >= 0)
    slice_ok = inside == len(base.seeds)
    ok = ge and gt and slice_ok
    summary = ", ".join(f"{k} attention {c.get('attention', 0)}/10 vs idw {c.get('idw', 0)}/10"
                        for k, c in counts.items())
    record(8, ok, f"{summary}; slice argmin inside target footprint {inside}/{len(base.seeds)}")
    assert ge and gt, counts
    assert slice_ok


# 9 ------------------------------------------------------------------------------

def test_criterion_09_cli_determinism(tmp_path):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        run_pipeline(d)
        (d / "spec.json").write_text(json.dumps({"target": {"object": "critter"}, "seed": 3}))
        assert main(["synth", "gen", "--spec", str(d / "spec.json"), "--out", str(d / "one.nafc")]) == 0
        (d / "bench.json").write_text(json.dumps({"kind": "distractor", "seeds": [0], "pretrain_scenes": 2,
                                                  "training.iterations": 3, "energy.steps": 4,
                                                  "energy.restarts": 2}))
        assert main(["synth", "bench", "--suite", str(d / "bench.json"), "--out", str(d / "bench.csv")]) == 0
        outs.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    same = outs[0].keys() == outs[1].keys() and all(outs[0][k] == outs[1][k] for k in outs[0])
    record(9, same, f"{len(outs[0])} output files from gen, pretrain, transfer, eval, energy-slice, bench "
                    f"byte-identical across two runs")
    assert same


# 10 -----------------------------------------------------------------------------

def test_criterion_10_round_trips(tmp_path, demo_setup):
    model, scene, beta = demo_setup
    save_scene(tmp_path / "s.nafc", scene)
    back = load_scene(tmp_path / "s.nafc")
    scene_ok = (back.points.tobytes() == scene.points.tobytes()
                and back.features.tobytes() == scene.features.tobytes() and np.array_equal(back.labels, scene.labels))
    model.save(tmp_path / "hand.json")
    DemoFile("hand.json", "s.nafc", beta).save(tmp_path / "demo.json")
    _, _, b2 = load_demo(tmp_path / "demo.json")
    demo_ok = b2.tobytes() == beta.tobytes()
    p = init_params(8, seed=4, mode="random")
    params_ok = DecoderParams.from_bytes(p.to_bytes()).to_bytes() == p.to_bytes()
    (tmp_path / "p.nafp").write_bytes(p.to_bytes())

    blob = (tmp_path / "s.nafc").read_bytes()
    (tmp_path / "magic.nafc").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "version.nafc").write_bytes(blob[:4] + bytes([9]) + blob[5:])
    pblob = p.to_bytes()
    (tmp_path / "magic.nafp").write_bytes(b"XXXX" + pblob[4:])
    (tmp_path / "version.nafp").write_bytes(pblob[:4] + bytes([9]) + pblob[5:])
    demo_json = json.loads((tmp_path / "demo.json").read_text())
    demo_json["version"] = 9
    (tmp_path / "version_demo.json").write_text(json.dumps(demo_json))

    def transfer(demo, target, params):
        return main(["transfer", "--demo", str(tmp_path / demo), "--target", str(tmp_path / target),
                     "--params", str(tmp_path / params), "--steps", "1", "--restarts", "1",
                     "--out", str(tmp_path / "out.json")])

    codes = [transfer("demo.json", "magic.nafc", "p.nafp"), transfer("demo.json", "version.nafc", "p.nafp"),
             transfer("demo.json", "s.nafc", "magic.nafp"), transfer("demo.json", "s.nafc", "version.nafp"),
             transfer("version_demo.json", "s.nafc", "p.nafp")]
    ok = scene_ok and demo_ok and params_ok and codes == [2] * 5
    record(10, ok, f"scene/demo/params bit-exact: {scene_ok}/{demo_ok}/{params_ok}; "
                   f"corrupted magic/version exit codes {codes}")
    assert ok
