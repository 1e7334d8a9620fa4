from __future__ import annotations

import io
import json

import numpy as np
import pytest

import adatool.trainer as trainer_mod
from adatool.atgrpo import ShapingConfig, sequence_log_ratio
from adatool.benefit import StochasticOracle, annotate_dataset
from adatool.core import CropImg, Kind, Observation, Thought, Trajectory, tool_count
from adatool.policy import DIM, weight_index, zeros
from adatool.toolenv import GenSpec, execute, generate_tasks, reset
from adatool.trainer import (
    METRICS_COLUMNS,
    MetricsRow,
    TrainConfig,
    collect_group,
    emit_metrics,
    evaluate,
    executed_tool_count,
    format_metrics,
    make_group,
    read_metrics,
    score_rollout,
    train,
)
from helpers import answer_step, make_traj, mc_task, tool_step

QUADRANTS = [(0, 0, 1, 1), (0, 2, 1, 3), (2, 0, 3, 1), (2, 2, 3, 3)]


def crop_then_answer(task, n_tools: int, answer: str) -> Trajectory:
    """A well-formed trajectory that executes ``n_tools`` quadrant crops and answers."""
    state = reset(task, n_max=4, step_limit=100)
    steps = []
    for bbox in QUADRANTS[:n_tools]:
        state, obs = execute(state, CropImg(bbox))
        steps += [Thought("look"), tool_step(bbox), obs]
    steps += [Thought("answer"), answer_step(answer)]
    return make_traj(steps, answer, task_id=task.id)


@pytest.fixture(scope="module")
def small_dataset():
    tasks = generate_tasks(GenSpec({Kind.NEEDLE_IMAGE: 6, Kind.GLOBAL_IMAGE: 6}, seed=3))
    solver = StochasticOracle({Kind.NEEDLE_IMAGE: (0.95, 0.2), Kind.GLOBAL_IMAGE: (0.7, 0.95)})
    return annotate_dataset(tasks, solver, k=8, seed=0)[0]


def small_config(**kw) -> TrainConfig:
    base = dict(group_size=4, batch_tasks=4, iterations=6, learning_rate=0.2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestGroup:
    def test_hand_built_golden_table(self):
        task = mc_task(gold="A").with_benefit(1.0, 0.5, 0.5)
        trajs = [
            crop_then_answer(task, 0, "A"),
            crop_then_answer(task, 1, "A"),
            crop_then_answer(task, 2, "B"),
            crop_then_answer(task, 4, "A"),
        ]
        assert [tool_count(t) for t in trajs] == [0, 1, 2, 4]
        group = make_group(task, trajs, TrainConfig())
        bases = [r.base for r in group.rewards]
        assert np.allclose(bases, [1.1, 1.1, 0.1, 1.1], atol=1e-12)
        tools = [r.tool for r in group.rewards]
        totals = [r.total for r in group.rewards]
        assert np.allclose(tools, [0.067667642, 0.162326234, 0.30326533, 0.5], atol=1e-9)
        assert np.allclose(totals, [1.140600585, 1.19739574, 0.281959198, 1.4], atol=1e-9)
        assert np.allclose(group.advantages, [0.316530131, 0.449095222, -1.687617464, 0.921992111], atol=1e-9)

    def test_identical_rewards_give_zero_advantages(self):
        task = mc_task().with_benefit(1.0, 0.5, 0.5)
        group = make_group(task, [crop_then_answer(task, 1, "A")] * 2, TrainConfig())
        assert group.advantages == (0.0, 0.0)

    def test_rejected_calls_are_not_counted(self):
        task = mc_task().with_benefit(1.0, 0.5, 0.5)
        traj = make_traj(
            [Thought("x"), tool_step(), Observation("tool budget exhausted"), Thought("y"), answer_step()],
            task_id=task.id,
        )
        assert tool_count(traj) == 1 and executed_tool_count(traj) == 0

    def test_collect_group_shape_and_seeds(self, small_dataset):
        cfg = small_config(group_size=5)
        task = small_dataset[0]
        theta = np.random.default_rng(0).normal(size=DIM)
        group = collect_group(task, theta, cfg, seed=9)
        assert group.group_size == len(group.rewards) == len(group.advantages) == 5
        assert group == collect_group(task, theta, cfg, seed=9)
        assert group != collect_group(task, theta, cfg, seed=10)

    def test_unannotated_task(self):
        task = mc_task()
        with pytest.raises(ValueError, match="benefit"):
            score_rollout(crop_then_answer(task, 0, "A"), task, TrainConfig())

    def test_audit_replay(self, small_dataset):
        """Stored trajectories alone reproduce every reward after a serialization round trip."""
        cfg = small_config()
        theta = np.random.default_rng(1).normal(size=DIM)
        for i, task in enumerate(small_dataset):
            group = collect_group(task, theta, cfg, seed=i)
            for traj, reward in zip(group.trajectories, group.rewards):
                stored = Trajectory.from_dict(json.loads(json.dumps(traj.to_dict())))
                assert score_rollout(stored, task, cfg) == reward


class TestTrainConfig:
    def test_inner_epochs_need_clipping(self):
        with pytest.raises(ValueError):
            TrainConfig(inner_epochs=2)
        TrainConfig(inner_epochs=2, shaping=ShapingConfig(clip_epsilon=0.2))

    @pytest.mark.parametrize("kw", [dict(group_size=1), dict(batch_tasks=0), dict(iterations=-1), dict(n_max=0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrain:
    def test_zero_iterations(self, small_dataset):
        theta0 = np.random.default_rng(2).normal(size=DIM)
        theta, history = train(small_dataset, theta0, small_config(iterations=0))
        assert np.array_equal(theta, theta0) and history == []

    def test_deterministic_metrics(self, small_dataset):
        runs = [format_metrics(train(small_dataset, zeros(), small_config())[1]) for _ in range(2)]
        assert runs[0] == runs[1]
        assert len(runs[0].splitlines()) == 7

    def test_seed_matters(self, small_dataset):
        a = train(small_dataset, zeros(), small_config())[0]
        b = train(small_dataset, zeros(), small_config(seed=2))[0]
        assert not np.array_equal(a, b)

    def test_ratios_are_one_at_update_time(self, small_dataset, monkeypatch):
        seen = []
        real = trainer_mod.objective_and_gradient

        def spy(groups, theta, theta_old, theta_ref, cfg, evaluator):
            seen.append(
                [sequence_log_ratio(t, theta, theta_old, evaluator) for g in groups for t in g.trajectories]
            )
            return real(groups, theta, theta_old, theta_ref, cfg, evaluator)

        monkeypatch.setattr(trainer_mod, "objective_and_gradient", spy)
        train(small_dataset, zeros(), small_config())
        assert len(seen) == 6
        assert all(r == 0.0 for ratios in seen for r in ratios)

    def test_kl_starts_at_zero_and_stays_non_negative(self, small_dataset):
        _, history = train(small_dataset, np.random.default_rng(3).normal(size=DIM), small_config())
        assert history[0].mean_kl == 0.0
        assert all(row.mean_kl >= 0 for row in history)
        assert all(np.all(np.isfinite(row.values())) for row in history)

    def test_clipped_inner_epochs_run(self, small_dataset):
        cfg = small_config(inner_epochs=3, shaping=ShapingConfig(clip_epsilon=0.2), iterations=2)
        theta, history = train(small_dataset, zeros(), cfg)
        assert len(history) == 2 and np.all(np.isfinite(theta))

    def test_needs_annotation(self):
        with pytest.raises(ValueError):
            train(generate_tasks(GenSpec({Kind.GLOBAL_IMAGE: 2})), zeros(), small_config())
        with pytest.raises(ValueError):
            train([], zeros(), small_config())

    def test_divergence_is_reported(self, small_dataset):
        with np.errstate(all="ignore"), pytest.raises(trainer_mod.TrainingDiverged, match="non-finite objective at iteration 2"):
            train(small_dataset, zeros(), small_config(learning_rate=float("inf")))

    def test_periodic_eval_log(self, small_dataset):
        log = io.StringIO()
        train(small_dataset, zeros(), small_config(iterations=4, eval_every=2), log=log)
        assert [line.split(":")[0] for line in log.getvalue().splitlines()] == ["iter 2", "iter 4"]


class TestEvaluate:
    def test_empty(self):
        with pytest.raises(ValueError, match="empty evaluation set"):
            evaluate(zeros(), [], TrainConfig())

    def test_answer_biased_uses_no_tools(self, small_dataset):
        theta = zeros()
        theta[weight_index("answer", 0)] = 10.0
        free = [t for t in small_dataset if not t.tool_required]
        summary = evaluate(theta, free, TrainConfig())
        assert summary.tool_rate_free == 0.0 and summary.mean_tool_calls == 0.0

    def test_greedy_ignores_seed(self, small_dataset):
        theta = np.random.default_rng(4).normal(size=DIM)
        assert evaluate(theta, small_dataset, TrainConfig(), seed=0) == evaluate(theta, small_dataset, TrainConfig(), seed=5)

    def test_sampled_mode(self, small_dataset):
        theta = np.random.default_rng(5).normal(size=DIM)
        a = evaluate(theta, small_dataset, TrainConfig(), greedy=False, samples=3)
        assert a == evaluate(theta, small_dataset, TrainConfig(), greedy=False, samples=3)
        assert a.n_tasks == len(small_dataset)
        with pytest.raises(ValueError):
            evaluate(theta, small_dataset, TrainConfig(), greedy=False, samples=0)

    def test_split_by_requirement(self, small_dataset):
        theta = zeros()
        theta[weight_index("answer", 0)] = -20.0
        summary = evaluate(theta, small_dataset, TrainConfig())
        assert summary.tool_rate_required == 1.0 and summary.tool_rate_free == 1.0
        assert 0 <= summary.accuracy_required <= 1 and 0 <= summary.accuracy_free <= 1


def one_row() -> MetricsRow:
    return MetricsRow(1, 1.5, 0.75, 1.25, 4.0, 0.0, -0.125, 1.0, 0.5)


class TestMetrics:
    def test_header(self):
        assert ",".join(METRICS_COLUMNS) == (
            "iter,mean_total_reward,mean_accuracy,mean_tool_calls,mean_traj_length,"
            "mean_kl,objective,tool_rate_required,tool_rate_free"
        )

    def test_one_row(self, tmp_path):
        path = tmp_path / "m.csv"
        emit_metrics([one_row()], path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[1] == "1,1.500000,0.750000,1.250000,4.000000,0.000000,-0.125000,1.000000,0.500000"

    def test_re_emit_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_metrics([one_row()] * 3, a)
        emit_metrics([one_row()] * 3, b)
        assert a.read_bytes() == b.read_bytes()

    def test_read_back(self, tmp_path):
        path = tmp_path / "m.csv"
        emit_metrics([one_row()], path)
        assert read_metrics(path) == [one_row()]

    def test_stream_destination(self):
        buf = io.StringIO()
        emit_metrics([one_row()], buf)
        assert buf.getvalue() == format_metrics([one_row()])

    def test_empty_history(self):
        with pytest.raises(ValueError):
            format_metrics([])

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_metrics([one_row()], tmp_path / "missing" / "m.csv")
