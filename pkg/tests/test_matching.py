# test_matching.py
import math

import numpy as np
import pandas as pd
import pytest

from p1_config import ConfigError, ContractError, OptimizerConfig, RunConfig, ShapeError
from p2_tensor_core import Tensor, gradient_check
from p5_codec import CSTFModel
from p6_matching import (
    Match,
    MatchSet,
    descriptors,
    dual_softmax,
    matching_loss,
    mutual_nn,
    recovery_rate,
    similarity_matrix,
    token_keypoints,
    write_matches,
)
from p10_experiments import run_matching


def test_identical_descriptors_match_on_the_diagonal():
    scores = similarity_matrix(np.eye(4), np.eye(4), temperature=0.1)
    confidence = dual_softmax(scores).numpy()
    assert np.array_equal(np.argmax(confidence, axis=1), np.arange(4))
    assert mutual_nn(confidence, 0.2).pairs() == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_similarity_scales_by_temperature(rng):
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    scores = similarity_matrix(a, b, temperature=0.5)
    np.testing.assert_allclose(scores.scores.numpy(), a @ b.T / 0.5)
    assert scores.shape == (3, 4)


def test_similarity_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ConfigError):
        similarity_matrix(np.ones((2, 3)), np.ones((2, 3)), temperature=0.0)


def test_dual_softmax_is_bounded(rng):
    confidence = dual_softmax(similarity_matrix(rng.normal(size=(5, 4)), rng.normal(size=(7, 4)))).numpy()
    assert confidence.shape == (5, 7)
    assert np.all((confidence >= 0) & (confidence <= 1))
    assert np.all(confidence.sum(axis=1) <= 1 + 1e-12)


def test_dual_softmax_ignores_matched_scaling_of_descriptors_and_temperature(rng):
    for _ in range(20):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        scale = float(rng.uniform(0.2, 5.0))
        base = dual_softmax(similarity_matrix(a, b, 0.3)).numpy()
        one_side = dual_softmax(similarity_matrix(scale * a, b, 0.3 * scale)).numpy()
        both_sides = dual_softmax(similarity_matrix(scale * a, scale * b, 0.3 * scale**2)).numpy()
        np.testing.assert_allclose(one_side, base, atol=1e-12)
        np.testing.assert_allclose(both_sides, base, atol=1e-12)


def test_uniform_confidence_keeps_only_the_first_pair():
    matches = mutual_nn(np.full((4, 4), 1 / 16), threshold=0.0)
    assert matches.pairs() == [(0, 0)]


def test_mutual_nn_respects_threshold():
    p = np.array([[0.9, 0.05], [0.05, 0.15]])
    assert mutual_nn(p, 0.1).pairs() == [(0, 0), (1, 1)]
    assert mutual_nn(p, 0.2).pairs() == [(0, 0)]
    with pytest.raises(ConfigError):
        mutual_nn(p, 1.0)


def test_mutual_nn_is_one_to_one(rng):
    for _ in range(20):
        p = rng.uniform(size=(6, 8))
        matches = mutual_nn(p, 0.0)
        rows = [m.index_a for m in matches.matches]
        cols = [m.index_b for m in matches.matches]
        assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
        for m in matches.matches:
            assert p[m.index_a].argmax() == m.index_b and p[:, m.index_b].argmax() == m.index_a


def test_match_set_rejects_reused_indices():
    with pytest.raises(ContractError):
        MatchSet(3, 3, 0.2, 0.1, [Match(0, 1, 0.5), Match(2, 1, 0.4)])


def test_matching_loss_values():
    confidence = np.full((3, 3), 0.1)
    confidence[0, 2] = confidence[1, 0] = math.exp(-1)
    assert matching_loss(confidence, [(0, 2), (1, 0)]).item() == pytest.approx(1.0)


def test_matching_loss_falls_as_ground_truth_confidence_rises(rng):
    gt = [(0, 2), (1, 0), (3, 1)]
    for _ in range(20):
        confidence = rng.uniform(0.05, 0.9, size=(4, 3))
        loss = matching_loss(confidence, gt).item()
        assert loss >= 0
        for a, b in gt:
            raised = confidence.copy()
            raised[a, b] += 0.05
            assert matching_loss(raised, gt).item() < loss


def test_matching_loss_score_path_equals_confidence_path(rng):
    scores = similarity_matrix(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), temperature=0.5)
    gt = [(0, 1), (2, 0), (3, 4)]
    direct = matching_loss(scores, gt).item()
    via_confidence = matching_loss(dual_softmax(scores), gt).item()
    assert direct == pytest.approx(via_confidence, rel=1e-10)


def test_matching_loss_stays_finite_when_saturated():
    scores = similarity_matrix(np.eye(3), -np.eye(3), temperature=1e-3)
    assert np.isfinite(matching_loss(scores, [(0, 0)]).item())


def test_matching_loss_ground_truth_checks():
    confidence = np.full((3, 3), 0.1)
    with pytest.raises(ContractError):
        matching_loss(confidence, [])
    with pytest.raises(ShapeError):
        matching_loss(confidence, [(0, 3)])
    with pytest.raises(ContractError):
        matching_loss(confidence, [(0, 1), (2, 1)])


def test_matching_loss_gradient(rng):
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    gt = [(0, 1), (2, 0)]
    errors = gradient_check(lambda: matching_loss(similarity_matrix(a, b, 0.5), gt), {"a": a, "b": b})
    assert max(errors.values()) < 1e-6


def test_descriptors_are_unit_stage_one_tokens(small_cfg, rng):
    desc = descriptors(CSTFModel(small_cfg), rng.normal(size=(2, 1, 16, 16)))
    assert desc.shape == (2, 4, 3)
    np.testing.assert_allclose(np.linalg.norm(desc.numpy(), axis=-1), 1.0)


def test_token_keypoints_are_cell_centers():
    points = token_keypoints(2, 16, 8)
    assert points.tolist() == [[2.0, 4.0], [6.0, 4.0], [2.0, 12.0], [6.0, 12.0]]


def test_recovery_rate():
    matches = MatchSet(4, 4, 0.2, 0.1, [Match(0, 1, 0.9), Match(1, 0, 0.8)])
    assert recovery_rate(matches, [(0, 1), (1, 2)]) == 0.5
    with pytest.raises(ContractError):
        recovery_rate(matches, [])


def test_match_file_layout(tmp_path):
    matches = MatchSet(16, 16, 0.2, 0.1, [Match(0, 6, 0.91), Match(3, 5, 0.42)])
    path = write_matches(matches, str(tmp_path / "out" / "matches.csv"))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# A=16,B=16,threshold=0.2,temperature=0.1"
    assert lines[1] == "index_a,index_b,confidence"
    rows = pd.read_csv(path, skiprows=1)
    assert list(zip(rows["index_a"], rows["index_b"])) == matches.pairs()
    np.testing.assert_allclose(rows["confidence"], [0.91, 0.42])


@pytest.mark.slow
def test_planted_shift_is_recovered():
    cfg = RunConfig(seed=7, optimizer=OptimizerConfig(steps=300, log_every=100))
    report = run_matching(cfg)
    assert report.training.final_loss < report.training.losses["loss"].iloc[0]
    assert report.recovery >= 0.9
