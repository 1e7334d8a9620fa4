from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from adatool.cli import reference_config
from adatool.core import Action, CropImg, FinalAnswer, Grid, Kind, Observation, Termination, tool_count
from adatool.policy import (
    ANSWER_BLOCK,
    BLOCK_INDEX,
    BLOCKS,
    DIM,
    N_FEATURES,
    SCHEMA_VERSION,
    DecisionContext,
    DecisionTable,
    ReplayError,
    SchemaMismatchError,
    action_distribution,
    admissible_actions,
    block_view,
    decision_context,
    demo_log_likelihood,
    demo_table,
    features,
    gold_text,
    grad_log_prob,
    load_checkpoint,
    log_prob,
    replay,
    rollout,
    sample_trajectory,
    save_checkpoint,
    scripted_expert,
    sft_fit,
    weight_index,
    zeros,
)
from adatool.toolenv import EnvConfig, execute, generate_tasks, reset, tool_templates
from adatool.trainer import evaluate
from helpers import mc_task


def answer_biased(bias: float = 10.0) -> np.ndarray:
    theta = zeros()
    theta[weight_index("answer", 0)] = bias
    return theta


def decisions(traj):
    return [s for s in traj.steps if isinstance(s, (Action, FinalAnswer))]


def random_states(tasks, rng, n):
    """Reachable non-terminal states from random template prefixes."""
    out = []
    while len(out) < n:
        task = tasks[int(rng.integers(len(tasks)))]
        state = reset(task)
        calls = [c for _, c in tool_templates(task)]
        for idx in rng.permutation(len(calls))[: int(rng.integers(0, 4))]:
            state, _ = execute(state, calls[idx])
        if not state.done:
            out.append(state)
    return out


class TestActionDistribution:
    def test_zero_theta_is_uniform(self, mixed_tasks):
        for task in mixed_tasks:
            probs = action_distribution(zeros(), reset(task))
            assert np.allclose(probs, 1.0 / len(probs), rtol=0, atol=1e-15)

    def test_answer_bias_two_options_one_tool(self):
        f = np.zeros(N_FEATURES)
        f[0] = 1.0
        ctx = DecisionContext(f, np.array([BLOCK_INDEX["crop_q0"], ANSWER_BLOCK, ANSWER_BLOCK]), (None, "A", "B"), 2)
        probs = np.exp(DecisionTable.build([(ctx, 1)]).log_probs(answer_biased())[0])
        # two answers at score 10 against one tool at score 0
        expected = 2 * math.exp(10) / (2 * math.exp(10) + 1)
        assert abs(probs[1] + probs[2] - expected) < 1e-12
        assert probs[1] + probs[2] > 0.99

    def test_positive_and_normalized(self, mixed_tasks):
        rng = np.random.default_rng(0)
        for state in random_states(mixed_tasks, rng, 200):
            probs = action_distribution(rng.normal(scale=3.0, size=DIM), state)
            assert np.all(probs > 0)
            assert abs(probs.sum() - 1) < 1e-12

    def test_stable_for_large_scores(self, mixed_tasks):
        probs = action_distribution(np.full(DIM, 500.0), reset(mixed_tasks[0]))
        assert np.all(np.isfinite(probs)) and abs(probs.sum() - 1) < 1e-12

    def test_finished_state_rejected(self):
        from adatool.toolenv import finish

        with pytest.raises(ValueError):
            action_distribution(zeros(), finish(reset(mc_task())))

    def test_admissible_actions(self):
        state = reset(mc_task())
        moves = admissible_actions(state)
        assert moves[-1] == "A" and sum(isinstance(m, CropImg) for m in moves) == 4
        state, _ = execute(state, moves[0])
        assert moves[0] not in admissible_actions(state)
        exhausted = reset(mc_task(), n_max=1)
        exhausted, _ = execute(exhausted, moves[0])
        assert admissible_actions(exhausted) == ("A",)


class TestFeatures:
    def test_components(self):
        state = reset(mc_task())
        f = features(state)
        assert f.tolist() == [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5]
        state, _ = execute(state, CropImg((0, 0, 1, 1)))
        assert features(state)[2] == 0.25

    def test_unit_range(self, mixed_tasks):
        for state in random_states(mixed_tasks, np.random.default_rng(1), 200):
            f = features(state)
            assert np.all((0 <= f) & (f <= 1)) and f[0] == 1.0

    def test_depends_only_on_features_and_actions(self):
        rng = np.random.default_rng(2)
        a = reset(mc_task("a"))
        b = reset(dataclasses.replace(mc_task("b"), scene=Grid(4, 4, (0,) * 15 + (1,))))
        ca, cb = decision_context(a), decision_context(b)
        assert np.array_equal(ca.features, cb.features) and ca.moves == cb.moves
        for _ in range(20):
            theta = rng.normal(size=DIM)
            assert np.array_equal(action_distribution(theta, a), action_distribution(theta, b))

    def test_hidden_fields_do_not_leak(self, mixed_tasks):
        theta = np.random.default_rng(3).normal(size=DIM)
        for task in mixed_tasks:
            flipped = dataclasses.replace(task, tool_required=not task.tool_required)
            assert np.array_equal(action_distribution(theta, reset(task)), action_distribution(theta, reset(flipped)))


class TestSampling:
    def test_step_limit_one(self):
        traj = sample_trajectory(zeros(), mc_task(), EnvConfig(step_limit=1), seed=0)
        assert traj.terminated_by is Termination.LENGTH_LIMIT
        assert traj.final_answer == "" and not decisions(traj)

    def test_turn_limit(self, mixed_tasks):
        theta = zeros()
        theta[weight_index("answer", 0)] = -20.0
        task = next(t for t in mixed_tasks if t.kind is Kind.NEEDLE_IMAGE)
        traj = sample_trajectory(theta, task, EnvConfig(turn_limit=1), seed=0)
        assert traj.terminated_by is Termination.TURN_LIMIT and tool_count(traj) == 1

    def test_deterministic(self, mixed_tasks):
        theta = np.random.default_rng(4).normal(size=DIM)
        for task in mixed_tasks:
            assert sample_trajectory(theta, task, seed=11) == sample_trajectory(theta, task, seed=11)

    def test_answer_biased_answers_directly(self, mixed_tasks):
        for i, task in enumerate(mixed_tasks):
            traj = sample_trajectory(answer_biased(), task, seed=i)
            assert tool_count(traj) == 0 and traj.terminated_by is Termination.ANSWER
            # the first decision puts almost all mass on answering, whichever option is drawn
            probs = action_distribution(answer_biased(), reset(task))
            answers = [isinstance(m, str) for m in admissible_actions(reset(task))]
            assert probs[answers].sum() > 0.99

    def test_records_distributions(self, mixed_tasks):
        theta = np.random.default_rng(5).normal(size=DIM)
        for i, task in enumerate(mixed_tasks):
            traj = sample_trajectory(theta, task, seed=i)
            for step in decisions(traj):
                assert step.step_logprob == math.log(step.step_dist[step.choice])

    def test_greedy_takes_argmax(self, mixed_tasks):
        theta = np.random.default_rng(6).normal(size=DIM)
        for task in mixed_tasks:
            traj, _ = rollout(theta, task, greedy=True)
            for step in decisions(traj):
                assert step.choice == int(np.argmax(step.step_dist))


class TestLogProb:
    def test_replay_integrity(self, mixed_tasks):
        rng = np.random.default_rng(7)
        for i, task in enumerate(mixed_tasks * 5):
            theta = rng.normal(scale=2.0, size=DIM)
            traj = sample_trajectory(theta, task, seed=i)
            recorded = math.fsum(s.step_logprob for s in decisions(traj))
            assert abs(log_prob(theta, traj, task) - recorded) <= 1e-12

    def test_uniform_two_decisions_among_four(self):
        f = np.zeros(N_FEATURES)
        f[0] = 1.0
        blocks = np.array([BLOCK_INDEX["crop_q0"], BLOCK_INDEX["crop_q1"], BLOCK_INDEX["crop_q2"], ANSWER_BLOCK])
        ctx = DecisionContext(f, blocks, (None,) * 4, 1)
        table = DecisionTable.build([(ctx, 0), (ctx, 3)])
        assert abs(table.taken_log_probs(zeros()).sum() - math.log(1 / 16)) < 1e-12

    def test_uniform_counts_admissible_actions(self, mixed_tasks):
        for i, task in enumerate(mixed_tasks):
            traj = sample_trajectory(zeros(), task, seed=i)
            expected = -sum(math.log(len(s.step_dist)) for s in decisions(traj))
            assert abs(log_prob(zeros(), traj, task) - expected) < 1e-12

    def test_global_image_crop_then_answer(self):
        task = mc_task()
        traj = next(
            t for t in (sample_trajectory(zeros(), task, seed=s) for s in range(50)) if tool_count(t) == 1
        )
        # five actions at reset (four crops and one answer), four after one crop
        assert abs(log_prob(zeros(), traj, task) - math.log(1 / 20)) < 1e-12

    def test_non_positive(self, mixed_tasks):
        rng = np.random.default_rng(8)
        for i, task in enumerate(mixed_tasks):
            traj = sample_trajectory(rng.normal(size=DIM), task, seed=i)
            assert log_prob(rng.normal(scale=5.0, size=DIM), traj, task) <= 0.0

    def test_observation_divergence(self, mixed_tasks):
        task = next(t for t in mixed_tasks if t.kind is Kind.NEEDLE_IMAGE)
        theta = zeros()
        theta[weight_index("answer", 0)] = -20.0
        traj = sample_trajectory(theta, task, seed=0)
        i = next(k for k, s in enumerate(traj.steps) if isinstance(s, Observation))
        tampered = dataclasses.replace(
            traj, steps=traj.steps[:i] + (Observation("tampered"),) + traj.steps[i + 1 :]
        )
        with pytest.raises(ReplayError):
            log_prob(zeros(), tampered, task)

    def test_decision_divergence(self, mixed_tasks):
        task, other = mixed_tasks[0], mixed_tasks[1]
        traj = sample_trajectory(zeros(), task, seed=0)
        with pytest.raises(ReplayError):
            replay(other, traj)
        with pytest.raises(ReplayError):
            replay(dataclasses.replace(other, id=task.id), traj)


class TestGradLogProb:
    def test_finite_differences(self, mixed_tasks):
        rng = np.random.default_rng(9)
        h = 1e-6
        worst = 0.0
        for case in range(100):
            task = mixed_tasks[case % len(mixed_tasks)]
            theta = rng.normal(size=DIM)
            traj, table = rollout(rng.normal(size=DIM), task, seed=case)
            grad = grad_log_prob(theta, traj, task)
            assert np.array_equal(grad, table.grad_log_prob(theta))
            fd = np.empty(DIM)
            for i in range(DIM):
                e = np.zeros(DIM)
                e[i] = h
                fd[i] = (table.taken_log_probs(theta + e).sum() - table.taken_log_probs(theta - e).sum()) / (2 * h)
            scale = max(np.max(np.abs(grad)), 1e-8)
            worst = max(worst, float(np.max(np.abs(fd - grad)) / scale))
        assert worst < 1e-6

    def test_score_identity(self, mixed_tasks):
        rng = np.random.default_rng(10)
        for state in random_states(mixed_tasks, rng, 50):
            theta = rng.normal(size=DIM)
            ctx = decision_context(state)
            probs = action_distribution(theta, state)
            total = sum(p * DecisionTable.build([(ctx, k)]).grad_log_prob(theta) for k, p in enumerate(probs))
            assert np.max(np.abs(total)) < 1e-12

    def test_deterministic_step_vanishes(self):
        ctx = decision_context(reset(mc_task()))
        table = DecisionTable.build([(ctx, len(ctx.moves) - 1)])
        assert np.max(np.abs(table.grad_log_prob(answer_biased(60.0)))) < 1e-20

    def test_block_layout(self):
        ctx = decision_context(reset(mc_task()))
        grad = block_view(DecisionTable.build([(ctx, 0)]).grad_log_prob(zeros()))
        # taken crop: (1 - 1/5) f, other crops and the answer: -1/5 f
        assert np.allclose(grad[BLOCK_INDEX[BLOCKS[ctx.blocks[0]]]], 0.8 * ctx.features, atol=1e-15)
        assert np.allclose(grad[ANSWER_BLOCK], -0.2 * ctx.features, atol=1e-15)


class TestScriptedExpert:
    def test_needle_image(self, mixed_tasks):
        for task in (t for t in mixed_tasks if t.kind is Kind.NEEDLE_IMAGE):
            demo = scripted_expert(task, 0.5, seed=0)
            assert len(demo.calls) == 1 and demo.answer == gold_text(task) and demo.redundant_tools == 0

    def test_global_image_redundancy(self, mixed_tasks):
        for task in (t for t in mixed_tasks if t.kind is Kind.GLOBAL_IMAGE):
            assert scripted_expert(task, 0.0, seed=0).calls == ()
            forced = scripted_expert(task, 1.0, seed=0)
            assert len(forced.calls) == 1 and forced.redundant_tools == 1
            assert forced.answer == gold_text(task)

    def test_demonstrations_replay(self, mixed_tasks):
        for task in mixed_tasks:
            demo = scripted_expert(task, 1.0, seed=1)
            table = demo_table(task, demo)
            assert len(table) == len(demo.calls) + 1

    def test_rate_validation(self):
        with pytest.raises(ValueError):
            scripted_expert(mc_task(), 1.5, seed=0)


class TestSft:
    def test_zero_epochs(self, mixed_tasks):
        demos = [scripted_expert(t, 0.5, seed=0) for t in mixed_tasks]
        theta0 = np.random.default_rng(11).normal(size=DIM)
        out = sft_fit(demos, {t.id: t for t in mixed_tasks}, theta0, 0.1, 0)
        assert np.array_equal(out, theta0)

    def test_likelihood_rises(self, mixed_tasks):
        demos = [scripted_expert(t, 0.5, seed=0) for t in mixed_tasks]
        tables = [demo_table(t, d) for t, d in zip(mixed_tasks, demos)]
        by_id = {t.id: t for t in mixed_tasks}
        theta = zeros()
        before = demo_log_likelihood(theta, tables)
        for _ in range(5):
            theta = sft_fit(demos, by_id, theta, 0.05, 4)
            after = demo_log_likelihood(theta, tables)
            assert after >= before
            before = after

    def test_deterministic(self, mixed_tasks):
        demos = [scripted_expert(t, 0.5, seed=0) for t in mixed_tasks]
        by_id = {t.id: t for t in mixed_tasks}
        assert np.array_equal(sft_fit(demos, by_id, zeros(), 0.5, 10), sft_fit(demos, by_id, zeros(), 0.5, 10))

    def test_empty(self):
        with pytest.raises(ValueError):
            sft_fit([], {}, zeros(), 0.1, 1)

    def test_non_finite(self, mixed_tasks):
        demos = [scripted_expert(t, 0.5, seed=0) for t in mixed_tasks]
        with pytest.raises(FloatingPointError):
            sft_fit(demos, {t.id: t for t in mixed_tasks}, np.full(DIM, np.inf), 0.1, 1)

    def test_redundancy_survives_cold_start(self):
        """Regression baseline: sampled tool rate on tool-free tasks after SFT at redundancy 0.5."""
        cfg = reference_config()
        tasks = generate_tasks(cfg.gen_spec())
        env = cfg.train_config().env
        demos = [scripted_expert(t, cfg.redundancy_rate, cfg.seed, env) for t in tasks]
        theta = sft_fit(demos, {t.id: t for t in tasks}, zeros(), cfg.sft_learning_rate, cfg.sft_epochs, env)
        free = [t for t in tasks if not t.tool_required]
        rate = evaluate(theta, free, cfg.train_config(), greedy=False, samples=4).tool_rate_free
        assert 0.3 <= rate <= 0.7
        assert rate == pytest.approx(0.33625, abs=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        theta = np.random.default_rng(12).normal(size=DIM) * 1e3
        path = tmp_path / "ckpt.txt"
        save_checkpoint(theta, path)
        assert np.array_equal(load_checkpoint(path), theta)
        lines = path.read_text().splitlines()
        assert lines[0] == f"# schema {SCHEMA_VERSION}" and len(lines) == DIM + 1
        assert lines[1].split()[:2] == [BLOCKS[0], "0"]

    def test_schema_mismatch(self, tmp_path):
        path = tmp_path / "ckpt.txt"
        save_checkpoint(zeros(), path)
        path.write_text(path.read_text().replace(SCHEMA_VERSION, "other-v0"))
        with pytest.raises(SchemaMismatchError):
            load_checkpoint(path)

    def test_missing_weights(self, tmp_path):
        path = tmp_path / "ckpt.txt"
        save_checkpoint(zeros(), path)
        path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
        with pytest.raises(SchemaMismatchError):
            load_checkpoint(path)

    def test_unknown_block(self, tmp_path):
        path = tmp_path / "ckpt.txt"
        path.write_text(f"# schema {SCHEMA_VERSION}\nlaser 0 1.0\n")
        with pytest.raises(SchemaMismatchError):
            load_checkpoint(path)
