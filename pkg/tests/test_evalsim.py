import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from voxgrasp.datagen import DatagenConfig
from voxgrasp.errors import DomainError
from voxgrasp.evalsim import (
    GRASPABLE_KINDS,
    GRASPABLE_SCALE,
    EpisodeResult,
    EvalConfig,
    GraspChoice,
    OraclePlanner,
    Termination,
    eval_scenes,
    evaluate,
    format_metrics,
    grasp_mask,
    grasp_skeleton_off,
    metrics,
    run_episode,
    select_grasp,
    write_episode_csv,
)
from voxgrasp.geometry import Pose, UnitQuaternion
from voxgrasp.network import GraspPrediction
from voxgrasp.volume import TsdfGrid

FUSION = DatagenConfig(resolution=24, image_size=48)


def prediction(q):
    q = np.asarray(q, dtype=np.float64)
    rot = np.zeros((4,) + q.shape)
    rot[3] = 1.0
    return GraspPrediction(q, rot, np.full(q.shape, 0.04), 0.1)


def test_metrics_examples():
    eps = [EpisodeResult(206, 186, 200, 10, Termination.CLEARED)]
    m = metrics(eps)
    assert round(100 * m["sr"], 1) == 90.3 and round(100 * m["dr"], 1) == 95.0
    assert format_metrics(m) == "SR 90.3% (186/206)  DR 95.0% (190/200)"
    none = metrics([EpisodeResult(0, 0, 1, 1, Termination.NO_PREDICTION)])
    assert none["sr"] is None and none["dr"] == 0.0
    with pytest.raises(DomainError):
        metrics([])
    with pytest.raises(DomainError):
        EpisodeResult(1, 2, 1, 0, Termination.CLEARED)


def test_failure_limits():
    assert EvalConfig().failure_limit == 1
    assert EvalConfig(mode="multi").failure_limit == 2
    with pytest.raises(DomainError):
        EvalConfig(mode="packed").failure_limit


def test_select_grasp_picks_argmax():
    q = np.zeros((4, 4, 4))
    q[1, 2, 3] = 0.8
    q[3, 0, 0] = 0.8  # tie: lower linear index wins
    c = select_grasp(prediction(q))
    assert c.voxel == np.ravel_multi_index((1, 2, 3), q.shape)
    assert c.pose.translation == pytest.approx((0.15, 0.25, 0.35))
    mask = np.ones_like(q, dtype=bool)
    mask[1, 2, 3] = False
    assert select_grasp(prediction(q), mask).voxel == np.ravel_multi_index((3, 0, 0), q.shape)
    assert select_grasp(prediction(np.zeros((4, 4, 4)))) is None
    assert select_grasp(prediction(q), q_min=0.9) is None


@given(arrays(np.int64, (3, 3, 3), elements=st.integers(0, 1000)))
def test_select_grasp_invariant_to_monotone_transform(k):
    # a coarse grid keeps distinct values distinct after the transform
    q = k / 1000.0
    a = select_grasp(prediction(q), q_min=0.0)
    b = select_grasp(prediction(np.exp(3 * q) - 1), q_min=0.0)
    assert a.voxel == b.voxel


def test_all_zero_quality_gives_no_prediction():
    scene = eval_scenes(1)[0]

    def planner(scene, grid, key):
        return select_grasp(prediction(np.zeros(grid.values.shape)))

    ep = run_episode(scene, planner, fusion=FUSION)
    assert ep.termination == Termination.NO_PREDICTION and ep.attempted == 0


def miss_planner(scene, grid, key):
    """Closes on empty air above the workspace center."""
    pose = Pose(UnitQuaternion(1.0, 0.0, 0.0, 0.0), (0.2, 0.2, 0.38))
    return GraspChoice(0, pose, 0.08, 1.0)


@pytest.mark.parametrize("mode,limit", [("single", 1), ("multi", 2)])
def test_consecutive_failures_end_episode(mode, limit):
    scene = eval_scenes(1, mode=mode, objects=2)[0]
    ep = run_episode(scene, miss_planner, EvalConfig(mode=mode), FUSION)
    assert ep.termination == Termination.CONSECUTIVE_FAILURES
    assert ep.attempted == limit and ep.successes == 0
    assert all(a.reason != "ok" for a in ep.attempts)


def test_oracle_planner_clears_single_scene():
    scene = eval_scenes(1, kinds=GRASPABLE_KINDS, scale_range=GRASPABLE_SCALE, seed=3)[0]
    ep = run_episode(scene, OraclePlanner(), fusion=FUSION)
    assert ep.termination == Termination.CLEARED
    assert (ep.attempted, ep.successes, ep.remaining) == (1, 1, 0)


def test_csv_identical_across_threads(tmp_path):
    scenes = eval_scenes(3, kinds=GRASPABLE_KINDS, scale_range=GRASPABLE_SCALE, seed=9)
    for threads in (1, 3):
        write_episode_csv(evaluate(scenes, OraclePlanner(), fusion=FUSION, threads=threads),
                          tmp_path / f"t{threads}.csv")
    a, b = (tmp_path / "t1.csv").read_bytes(), (tmp_path / "t3.csv").read_bytes()
    assert a == b and a.count(b"\n") == 4


def test_grasp_mask():
    vals = np.ones((4, 4, 4))
    vals[:, :, 1:] = 0.1
    grid = TsdfGrid(vals, np.ones((4, 4, 4)), 0.1, 0.04)
    m = grasp_mask(grid, band=0.8, min_height=0.2)
    assert not m[:, :, :2].any() and m[:, :, 2:].all()
    grid.weights[0] = 0
    assert not grasp_mask(grid)[0].any()


def test_skeleton_off():
    c = GraspChoice(0, Pose(UnitQuaternion.identity(), (0.1, 0.1, 0.1)), 0.5, 1.0)
    lines = grasp_skeleton_off([c, c]).splitlines()
    assert lines[:2] == ["OFF", "10 10 0"]
    assert lines[-1] == "2 7 9"
