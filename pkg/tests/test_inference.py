import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.cone import enumerate_stable
from src.exceptions import ConfigError, DimensionMismatch, EmptyPool
from src.inference import (
    BootstrapConfig,
    FrequencyVector,
    block_sizes_for,
    bootstrap_p_value,
    bootstrap_test,
    classify_households,
    estimate_frequencies,
    resample_frequencies,
    run_stability_test,
    tightening,
)
from src.models import HouseholdKind
from src.solver import ConeProjector, SolverConfig
from tests.factories import make_dataset, make_path, small_dataset, spread_columns


class TestTightening(unittest.TestCase):
    def test_default_tightening(self):
        self.assertAlmostEqual(tightening(2996, 500), 3.7212e-5, delta=5e-9)

    def test_override_is_used(self):
        self.assertEqual(tightening(2996, 500, tau_override=1e-5), 1e-5)

    def test_override_must_leave_mass(self):
        with self.assertRaises(ConfigError):
            tightening(100, 500, tau_override=0.01)

    def test_needs_two_households(self):
        with self.assertRaises(ConfigError):
            tightening(100, 1)


class TestFrequencies(unittest.TestCase):
    def test_blocks_sum_to_one(self):
        counts = np.zeros(640, dtype=int)
        counts[[0, 5, 5]] = 1
        counts[5] = 2
        counts[512 + 3] = 4
        counts[576 + 7] = 1
        frequencies = FrequencyVector.from_counts(counts, block_sizes_for(3))
        for block in frequencies.blocks():
            self.assertAlmostEqual(block.sum(), 1.0)
        self.assertEqual(frequencies.pool_sizes, (3, 4, 1))
        self.assertEqual(frequencies.n, 8)
        self.assertEqual(frequencies.n_min, 1)

    def test_empty_pool(self):
        counts = np.zeros(640, dtype=int)
        counts[0] = 1
        counts[512] = 1
        with self.assertRaises(EmptyPool):
            FrequencyVector.from_counts(counts, block_sizes_for(3))

    def test_wrong_length(self):
        with self.assertRaises(DimensionMismatch):
            FrequencyVector.from_counts(np.ones(10, dtype=int), block_sizes_for(3))

    def test_small_dataset_frequencies(self):
        frequencies = estimate_frequencies(small_dataset())
        values = frequencies.values
        self.assertAlmostEqual(values[309], 0.5)
        self.assertAlmostEqual(values[0], 0.25)
        self.assertAlmostEqual(values[36], 0.25)
        self.assertAlmostEqual(values[512 + 16], 0.5)
        self.assertAlmostEqual(values[512], 0.5)
        self.assertAlmostEqual(values[576 + 36], 0.5)
        self.assertAlmostEqual(values[576], 0.5)
        self.assertEqual(frequencies.pool_sizes, (4, 2, 2))

    def test_classification_table(self):
        table = classify_households(small_dataset()).set_index("household_id")
        self.assertEqual(table.loc["c1", "type_code"], 309)
        self.assertEqual(table.loc["f1", "row"], 512 + 16)
        self.assertEqual(table.loc["m1", "row"], 576 + 36)
        self.assertTrue(table["rational"].all())

    def test_dropping_irrational_households(self):
        irrational = make_path(
            "m3", HouseholdKind.SINGLE_MALE, [[0.0, 0.3, 0.0], [0.3, 0.0, 0.0], [0.0, 0.0, 1.0]]
        )
        dataset = make_dataset(list(small_dataset().households) + [irrational])
        kept = estimate_frequencies(dataset, drop_irrational=True)
        everything = estimate_frequencies(dataset)
        self.assertEqual(kept.pool_sizes, (4, 2, 2))
        self.assertEqual(everything.pool_sizes, (4, 2, 3))
        self.assertEqual(everything.rational_counts, (4, 2, 2))
        self.assertEqual(kept.total_counts, (4, 2, 3))
        self.assertEqual(kept.rational_counts, (4, 2, 2))


class TestResampling(unittest.TestCase):
    def test_resample_keeps_support_and_block_mass(self):
        frequencies = estimate_frequencies(small_dataset())
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(4)))
        for _ in range(20):
            draw = resample_frequencies(frequencies, rng)
            offsets = frequencies.offsets
            for lo, hi in zip(offsets[:-1], offsets[1:]):
                self.assertAlmostEqual(draw[lo:hi].sum(), 1.0)
            self.assertTrue(np.all(draw[frequencies.type_counts == 0] == 0))

    def test_p_value_counts_ties(self):
        self.assertEqual(bootstrap_p_value(1.0, [0.5, 1.0, 2.0, 0.1]), 0.5)
        self.assertEqual(bootstrap_p_value(0.0, [0.0, 0.0]), 1.0)


class TestBootstrap(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cone = spread_columns(enumerate_stable(3), 200)
        cls.config = BootstrapConfig(bootstrap_reps=19, seed=11, solver=SolverConfig(max_iter=500_000))
        cls.projector = ConeProjector(cls.cone, cls.config.weights, cls.config.solver)
        cls.dataset = small_dataset()

    def test_p_value_is_a_multiple_of_one_over_b(self):
        result = run_stability_test(self.dataset, self.cone, self.config, projector=self.projector)
        self.assertAlmostEqual(result.p_value * 19, round(result.p_value * 19))
        self.assertTrue(0.0 <= result.p_value <= 1.0)
        self.assertEqual(result.bootstrap_stats.shape, (19,))

    def test_same_seed_same_result(self):
        first = run_stability_test(self.dataset, self.cone, self.config, projector=self.projector)
        second = run_stability_test(self.dataset, self.cone, self.config, projector=self.projector)
        np.testing.assert_array_equal(first.bootstrap_stats, second.bootstrap_stats)
        self.assertEqual(first.j_observed, second.j_observed)

    def test_parallel_workers_do_not_change_result(self):
        serial = run_stability_test(self.dataset, self.cone, self.config, projector=self.projector)
        parallel_config = BootstrapConfig(
            bootstrap_reps=19, seed=11, solver=SolverConfig(max_iter=500_000), n_jobs=2
        )
        parallel = run_stability_test(self.dataset, self.cone, parallel_config)
        np.testing.assert_array_equal(serial.bootstrap_stats, parallel.bootstrap_stats)
        self.assertEqual(serial.p_value, parallel.p_value)

    def test_scaling_budgets_leaves_result_unchanged(self):
        scaled = make_dataset(
            [
                make_path(h.household_id, h.kind, h.quantities_matrix(), prices=h.prices_matrix() * 3.0, scale=2.0)
                for h in self.dataset.households
            ]
        )
        base = run_stability_test(self.dataset, self.cone, self.config, projector=self.projector)
        other = run_stability_test(scaled, self.cone, self.config, projector=self.projector)
        self.assertEqual(base.p_value, other.p_value)
        self.assertAlmostEqual(base.j_observed, other.j_observed, places=12)

    def test_rejection_uses_upper_quantile(self):
        result = run_stability_test(self.dataset, self.cone, self.config, projector=self.projector)
        critical = np.quantile(result.bootstrap_stats, 0.95, method="inverted_cdf")
        self.assertEqual(result.rejects(), result.j_observed > critical)

    def test_frequencies_from_the_cone_are_not_rejected(self):
        rng = np.random.default_rng(3)
        tau = tightening(self.cone.cols, 2000)
        nu = tau + rng.dirichlet(np.ones(self.cone.cols)) * (1 - tau * self.cone.cols)
        gamma = self.cone.to_sparse() @ nu
        counts = np.round(gamma * 2000).astype(np.int64)
        frequencies = FrequencyVector.from_counts(counts, self.cone.block_sizes)
        result = bootstrap_test(self.cone, frequencies, self.config, self.projector)
        self.assertGreater(result.p_value, 0.05)

    def test_result_json(self):
        result = run_stability_test(self.dataset, self.cone, self.config, projector=self.projector)
        with tempfile.TemporaryDirectory() as directory:
            path = result.write_json(Path(directory) / "result.json")
            record = json.loads(path.read_text())
        self.assertEqual(record["B"], 19)
        self.assertEqual(len(record["bootstrap_stats"]), 19)
        self.assertEqual(record["n_c"], 4)
        self.assertEqual(record["rational_counts"], {"n_c": 4, "n_m": 2, "n_f": 2})
        self.assertEqual(record["convention"], "fixed_closure")

    def test_dropped_households_still_count_in_pool_totals(self):
        irrational = make_path(
            "m3", HouseholdKind.SINGLE_MALE, [[0.0, 0.3, 0.0], [0.3, 0.0, 0.0], [0.0, 0.0, 1.0]]
        )
        dataset = make_dataset(list(self.dataset.households) + [irrational])
        result = run_stability_test(
            dataset, self.cone, self.config, drop_irrational=True, projector=self.projector
        )
        self.assertEqual(result.pool_sizes, (4, 2, 2))
        record = result.to_record()
        self.assertEqual(record["n_m"], 3)
        self.assertEqual(record["estimation_counts"]["n_m"], 2)
        row = result.table_row("1-2-3")
        self.assertEqual(row["n_singles"], 5)
        self.assertEqual(row["n_singles_rational"], 4)
        self.assertEqual(row["n_couples"], 4)

    def test_mismatched_periods(self):
        with self.assertRaises(DimensionMismatch):
            bootstrap_test(self.cone, FrequencyVector.from_counts(np.ones(12, dtype=int), (4, 4, 4)))


if __name__ == "__main__":
    unittest.main()
