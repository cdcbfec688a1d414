import math

import numpy as np
import pytest
import torch

from conftest import random_cloud
from nafield.attention import init_params, query_feature
from nafield.keypoints import EmptyKeypointsError, KeypointCorrespondence
from nafield.numerics import finite_diff_check
from nafield.scene import FeaturedCloud, idw_feature
from nafield.training import (TrainingConfig, infonce_loss, keypoint_features, retrieval_accuracy,
                              train, write_loss_csv)


def naive_infonce(featsets, tau, mode):
    """Triple loop over ordered pairs, anchors and negatives."""
    fs = [np.asarray(f, dtype=np.float64) for f in featsets]
    total = 0.0
    k = fs[0].shape[0]
    for i in range(len(fs)):
        for j in range(len(fs)):
            if i == j:
                continue
            for a in range(k):
                fa = fs[i][a] / np.linalg.norm(fs[i][a])

                def sim(b):
                    fb = fs[j][b] / np.linalg.norm(fs[j][b])
                    return float(fa @ fb) / tau

                den = sum(math.exp(sim(b)) for b in range(k) if mode == "standard" or b != a)
                total += -math.log(math.exp(sim(a)) / den)
    return total


@pytest.mark.parametrize("mode", ["exclusive", "standard"])
def test_infonce_matches_naive_loop(rng, mode):
    sets = [rng.standard_normal((5, 3)) for _ in range(3)]
    got = infonce_loss(sets, 0.3, mode).item()
    assert abs(got - naive_infonce(sets, 0.3, mode)) < 1e-10


def test_infonce_hand_value_orthonormal():
    e = np.eye(2)
    assert abs(infonce_loss([e, e], 1.0, "exclusive").item() - (-4.0)) < 1e-9


def test_infonce_constant_similarity_k2_is_zero():
    a = np.ones((2, 3))
    assert abs(infonce_loss([a, a], 0.1).item()) < 1e-12


def test_infonce_constant_similarity_general_k():
    a = np.ones((4, 3))
    # every term is log(K-1), two ordered pairs
    assert abs(infonce_loss([a, a], 0.1).item() - 2 * 4 * math.log(3)) < 1e-10


def test_standard_mode_nonnegative(rng):
    for _ in range(20):
        sets = [rng.standard_normal((6, 4)) for _ in range(3)]
        assert infonce_loss(sets, 0.05, "standard").item() >= 0.0


def test_infonce_rejects_zero_rows_and_bad_inputs():
    with pytest.raises(ValueError, match="zero-norm"):
        infonce_loss([np.zeros((2, 3)), np.ones((2, 3))])
    with pytest.raises(ValueError):
        infonce_loss([np.ones((2, 3)), np.ones((3, 3))])
    with pytest.raises(ValueError):
        infonce_loss([np.ones((1, 3)), np.ones((1, 3))])
    with pytest.raises(ValueError):
        infonce_loss([np.eye(2), np.eye(2)], tau=0.0)


def _pair(rng, n=12, c=3):
    a = random_cloud(rng, n, c)
    rot = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    b = FeaturedCloud(a.points @ rot.T + 0.05, a.features + 0.05 * rng.standard_normal(a.features.shape))
    return a, b


def test_keypoint_features_zero_logit_is_idw(rng):
    a, b = _pair(rng)
    corr = KeypointCorrespondence(np.array([[0, 0], [3, 3], [7, 7]]), (0, 1))
    params = init_params(3)
    feats = keypoint_features(params, [a, b], corr)
    for i, cloud in enumerate((a, b)):
        for r, idx in enumerate(corr.indices[:, i]):
            want = idw_feature(cloud, cloud.points[idx], params.epsilon).numpy()
            assert np.allclose(feats[i][r].detach().numpy(), want, atol=1e-12)


def test_keypoint_features_seeded_params_match_per_point(rng):
    a, b = _pair(rng)
    corr = KeypointCorrespondence(np.array([[1, 2], [5, 4]]), (0, 1))
    params = init_params(3, 2, 4, seed=3, mode="random")
    feats = keypoint_features(params, [a, b], corr)
    for i, cloud in enumerate((a, b)):
        for r, idx in enumerate(corr.indices[:, i]):
            f, _ = query_feature(params, cloud, cloud.points[idx])
            assert np.allclose(feats[i][r].detach().numpy(), f.detach().numpy(), atol=1e-12)


def test_identical_scenes_give_identical_rows(rng):
    a = random_cloud(rng, 10, 3)
    corr = KeypointCorrespondence(np.array([[0, 0], [4, 4], [9, 9]]), (0, 1))
    f = keypoint_features(init_params(3, seed=1, mode="random"), [a, a], corr)
    assert torch.equal(f[0], f[1])


def test_loss_gradient_finite_differences(rng):
    a, b = _pair(rng, 10, 3)
    corr = KeypointCorrespondence(np.array([[0, 0], [2, 2], [5, 5], [8, 8]]), (0, 1))
    base = init_params(3, 2, 3, seed=5, mode="random")
    tensors = base.tensors()
    for slot in range(len(tensors)):
        def loss_of(w, slot=slot):
            ts = list(tensors)
            ts[slot] = w
            return infonce_loss(keypoint_features(base.with_tensors(ts), [a, b], corr), 0.5)
        report = finite_diff_check(loss_of, [tensors[slot].numpy()], tolerance=1e-4)
        assert report.passed, (slot, str(report))


def _scenes(seed=0, n=4, sigma=0.05):
    from nafield.synth import SuiteSpec, Vocabulary, generate_scene, pretrain_specs
    suite = SuiteSpec(sigma=sigma, pretrain_scenes=n, pretrain_distractors=0, vocab_seed=seed)
    vocab = Vocabulary.build(8, seed)
    return [generate_scene(s, vocab) for s in pretrain_specs(suite)]


def test_training_deterministic():
    clouds = _scenes()[:2]
    cfg = TrainingConfig(iterations=3)
    r1 = train(clouds, cfg, keep_trajectory=True)
    r2 = train(clouds, cfg, keep_trajectory=True)
    assert r1.losses == r2.losses
    for p1, p2 in zip(r1.trajectory, r2.trajectory):
        assert p1.to_bytes() == p2.to_bytes()


def test_rigid_copies_keep_perfect_retrieval(rng):
    a = random_cloud(rng, 60, 4)
    rot = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    clouds = [a, FeaturedCloud(a.points @ rot.T + 0.3, a.features), FeaturedCloud(a.points - 0.2, a.features)]
    res = train(clouds, TrainingConfig(iterations=5))
    feats = keypoint_features(res.params, clouds, res.keypoints)
    for i in range(1, 3):
        assert retrieval_accuracy(feats[0].numpy(), feats[i].numpy()) == 1.0


def test_train_rejects_single_scene_and_empty_keypoints(rng):
    a = random_cloud(rng, 8, 3)
    with pytest.raises(ValueError):
        train([a], TrainingConfig(iterations=1))
    # three two-point scenes whose features cannot close a cycle of mutual neighbours
    s = [FeaturedCloud(np.array([[0.0, 0, 0], [1, 0, 0]]), np.array(f, dtype=float))
         for f in ([[7.0], [6.0]], [[3.0], [2.0]], [[9.0], [0.0]])]
    with pytest.raises(EmptyKeypointsError):
        train(s, TrainingConfig(iterations=1, k_nn=1))


def test_loss_csv(tmp_path):
    write_loss_csv(tmp_path / "l.csv", [1.5, -0.25])
    assert (tmp_path / "l.csv").read_text() == "iteration,loss\n0,1.5\n1,-0.25\n"


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(tau=0)
    with pytest.raises(ValueError):
        TrainingConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainingConfig(mode="other")
