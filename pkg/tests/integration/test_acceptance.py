"""
Acceptance runs on the full-size default synthetic scene.

These generate thousands of poses at dim 1024 and are marked slow;
run them with `pytest -m slow`.
"""

import time

import numpy as np
import pytest

from hrapr.evalharness import (
    DEFAULT_GAMMA_GRID,
    benchmark_uncertainty,
    convergence_curves,
    converged_by,
    error_gap,
    median_errors,
    median_errors_by_label,
    score_error_correlation,
    threshold_sweep,
)
from hrapr.feature_store import FeatureEmbedding, build_database
from hrapr.geometry import Pose
from hrapr.refinement import scheduled_refine_batch, synthetic_refiner_factory
from hrapr.replay import QueryRecord
from hrapr.synthbench import FAR, NEAR, SceneSpec, generate_scene, query_records, scene_database
from hrapr.uncertainty import GatingPolicy, reliable_fraction, score_batch

MIN_RETENTION = 0.1
PREMISE_SECONDS = 10.0
SWEEP_SECONDS = 30.0
REFINE_SECONDS = 120.0


@pytest.fixture(scope="module")
def default_scored(default_scene, default_db, run_config):
    """The default scene's queries scored under the selected preset"""
    return score_batch(default_db, query_records(default_scene), run_config.policy(), run_config.d_th, threads=4)


@pytest.fixture(scope="module")
def noise_free_scene(seed):
    """The default scene without feature noise"""
    return generate_scene(SceneSpec(seed=seed, feature_noise=0.0))


class TestPremise:
    """Regressor errors grow away from the training set"""

    @pytest.mark.slow
    @pytest.mark.integration
    def test_far_queries_at_least_twice_as_wrong(self, seed, logger):
        """Median far errors exceed near errors by 2x or more, generation included in the time"""
        started = time.perf_counter()
        scene = generate_scene(SceneSpec(seed=seed))
        by_label = median_errors_by_label([(q.label, q.predicted, q.gt) for q in scene.queries])
        gap_t, gap_r = error_gap(by_label, FAR, NEAR)
        elapsed = time.perf_counter() - started
        logger.info(f"far/near gap: translation {gap_t:.2f}x, rotation {gap_r:.2f}x in {elapsed:.2f} s")
        assert len(scene.queries) == 2000
        assert gap_t >= 2.0, f"Translation gap only {gap_t:.2f}x"
        assert gap_r >= 2.0, f"Rotation gap only {gap_r:.2f}x"
        assert elapsed < PREMISE_SECONDS, f"Generation and gap took {elapsed:.2f} s"


class TestScoreErrorCorrelation:
    """Threshold sweep on the default scene"""

    @pytest.mark.slow
    @pytest.mark.integration
    def test_retention_non_increasing(self, default_scored):
        """Raising gamma never retains more queries"""
        points = threshold_sweep(default_scored, DEFAULT_GAMMA_GRID)
        ratios = [p.retained_ratio for p in points]
        assert all(b <= a for a, b in zip(ratios, ratios[1:])), f"Retention increased: {ratios}"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_high_threshold_reduces_errors(self, default_scored, logger):
        """At the largest gamma keeping 10% of queries, mean errors drop by a quarter or more"""
        points = threshold_sweep(default_scored, DEFAULT_GAMMA_GRID)
        usable = [p for p in points if p.retained_ratio >= MIN_RETENTION]
        assert usable, "No threshold retains 10% of the queries"
        point = usable[-1]
        logger.info(f"gamma={point.gamma}: retained {point.retained_ratio:.3f}, "
                    f"norm_terr {point.norm_terr:.3f}, norm_rerr {point.norm_rerr:.3f}")
        assert point.norm_terr <= 0.75, f"norm_terr {point.norm_terr:.3f} at gamma={point.gamma}"
        assert point.norm_rerr <= 0.75, f"norm_rerr {point.norm_rerr:.3f} at gamma={point.gamma}"

    @pytest.mark.slow
    @pytest.mark.integration
    def test_score_anticorrelates_with_error(self, default_scored):
        """Spearman correlation of score and translation error is -0.5 or lower"""
        rho = score_error_correlation(default_scored)
        assert rho <= -0.5, f"Spearman correlation {rho:.3f}"

    @pytest.mark.slow
    @pytest.mark.performance
    def test_score_and_sweep_runtime(self, default_scene, default_db, run_config, logger):
        """Scoring every default query and sweeping the grid stays under 30 s"""
        queries = query_records(default_scene)
        started = time.perf_counter()
        scored = score_batch(default_db, queries, run_config.policy(), run_config.d_th, threads=4)
        points = threshold_sweep(scored, DEFAULT_GAMMA_GRID)
        elapsed = time.perf_counter() - started
        logger.info(f"scored {len(scored)} queries and swept {len(points)} thresholds in {elapsed:.2f} s")
        assert len(scored) == len(queries)
        assert elapsed < SWEEP_SECONDS, f"Score and sweep took {elapsed:.2f} s"


class TestScheduledRefinementRun:
    """hs10/ls50 refinement on a noise-free field"""

    @pytest.mark.slow
    @pytest.mark.integration
    def test_refinement_run(self, noise_free_scene, logger):
        """Losses never rise, median error halves and the schedule saves steps"""
        db = scene_database(noise_free_scene, cell_size=0.5)
        queries = query_records(noise_free_scene)
        assert len(queries) == 2000
        policy = GatingPolicy(gamma=0.95, hs_steps=10, ls_steps=50)
        targets = {q.id: q.embedding for q in queries}

        started = time.perf_counter()
        scored = score_batch(db, queries, policy, 0.2, threads=4)
        result = scheduled_refine_batch(scored, synthetic_refiner_factory(noise_free_scene, targets), policy,
                                        threads=4)
        elapsed = time.perf_counter() - started
        logger.info(f"refined {len(result.traces)} queries in {elapsed:.2f} s")
        assert not result.failures, f"Failures: {result.failures[:3]}"

        for trace in result.traces:
            losses = trace.losses()
            assert all(b <= a for a, b in zip(losses, losses[1:])), f"Loss of {trace.id} increased"

        gt = {q.id: q.gt for q in queries}
        pre = median_errors([(t.initial, gt[t.id]) for t in result.traces])
        post = median_errors([(t.final, gt[t.id]) for t in result.traces])
        logger.info(f"median errors pre {pre.format(4)} -> post {post.format(4)}")
        assert post.trans_m < 0.5 * pre.trans_m, f"Median translation error {pre.trans_m:.4f} -> {post.trans_m:.4f}"

        r = reliable_fraction(scored)
        assert result.avg_steps == pytest.approx(50 - 40 * r)
        assert result.avg_steps < 50

        classes = {s.id: "hs" if s.reliable else "ls" for s in scored}
        curves = convergence_curves(result.traces, classes)
        assert "hs" in curves, "No query was scored reliable"
        assert converged_by(curves["hs"].mean_terr, 10), f"hs curve {curves['hs'].mean_terr[:12]}"
        assert elapsed < REFINE_SECONDS, f"Scheduled refinement took {elapsed:.2f} s"


class TestPerformanceBudget:
    """Timing and storage at 7000 x 1024"""

    @pytest.mark.slow
    @pytest.mark.performance
    def test_scoring_under_ten_ms(self):
        """Retrieval plus similarity scoring takes under 10 ms per query"""
        rng = np.random.default_rng(1)
        positions = rng.uniform(0.0, 4.0, size=(7000, 3))
        matrix = rng.normal(size=(7000, 1024))
        db = build_database([(f"train-{i:05d}", Pose(t=positions[i]), matrix[i]) for i in range(7000)], cell_size=0.5)
        queries = [
            QueryRecord(f"q{i}", Pose(t=rng.uniform(0.0, 4.0, size=3)), FeatureEmbedding.from_vector(rng.normal(size=1024)))
            for i in range(100)
        ]
        result = benchmark_uncertainty(db, queries, 0.2, repetitions=1000)
        assert result.bytes_per_entry == 4096
        assert result.total_ms < 10.0, f"Median scoring took {result.total_ms:.3f} ms"
