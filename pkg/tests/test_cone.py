import dataclasses
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.cone import (
    ConeCounts,
    ConfigurationType,
    StabilityConvention,
    enumerate_configurations,
    is_preference_stable,
)
from src.cone_cache import cone_digest, load_cone, save_cone
from src.exceptions import ChecksumMismatch, ReferenceCountMismatch, VersionMismatch
from src.relations import CollectiveType, IndividualType, RelationBits
from tests.factories import SLOW


def _example_configuration():
    couple = CollectiveType(3, RelationBits.from_edges(3, [(0, 2)]).code, 0b101)
    male = IndividualType(3, RelationBits.from_edges(3, [(1, 0), (2, 1)]).code)
    female = IndividualType(3, RelationBits.from_edges(3, [(2, 0)]).code)
    return ConfigurationType(couple, male, female)


class TestStability(unittest.TestCase):
    def test_example_configuration_is_not_stable(self):
        theta = _example_configuration()
        for convention in StabilityConvention:
            self.assertFalse(is_preference_stable(theta, convention))

    def test_empty_configuration_is_stable(self):
        theta = ConfigurationType(CollectiveType(3, 0, 0), IndividualType(3, 0), IndividualType(3, 0))
        for convention in StabilityConvention:
            self.assertTrue(is_preference_stable(theta, convention))

    def test_irrational_single_is_never_stable(self):
        theta = ConfigurationType(CollectiveType(3, 0, 0), IndividualType(3, 0b101), IndividualType(3, 0))
        for convention in StabilityConvention:
            self.assertFalse(is_preference_stable(theta, convention))


class TestConeMatrix(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.split = enumerate_configurations(3, StabilityConvention.FIXED_CLOSURE)
        cls.cone = cls.split.stable

    def test_dimensions(self):
        self.assertEqual(self.cone.rows, 640)
        self.assertEqual(self.cone.block_sizes, (512, 64, 64))
        self.assertEqual(self.cone.counts.configurations, 2_097_152)
        self.assertEqual(self.cone.counts.rational_individual_types, 25)

    def test_every_column_has_one_entry_per_block(self):
        A = self.cone.to_sparse().toarray()
        self.assertEqual(A.shape, (640, self.cone.cols))
        np.testing.assert_array_equal(A[:512].sum(axis=0), 1)
        np.testing.assert_array_equal(A[512:576].sum(axis=0), 1)
        np.testing.assert_array_equal(A[576:].sum(axis=0), 1)

    def test_columns_are_stable_configurations(self):
        for j in range(0, self.cone.cols, max(1, self.cone.cols // 200)):
            self.assertTrue(is_preference_stable(self.cone.column(j), StabilityConvention.FIXED_CLOSURE))

    def test_unstable_split_is_disjoint_and_complete(self):
        stable = {tuple(row) for row in self.cone.keys().tolist()}
        unstable = {tuple(row) for row in self.split.unstable.tolist()}
        self.assertFalse(stable & unstable)
        self.assertEqual(len(stable) + len(unstable), self.cone.counts.scanned_configurations)

    def test_columns_are_sorted(self):
        keys = self.cone.keys()
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        np.testing.assert_array_equal(order, np.arange(self.cone.cols))

    def test_configuration_totals(self):
        counts = self.cone.counts
        self.assertEqual(counts.consistent_collective_types, 449)
        self.assertEqual(counts.consistent_configurations, 449 * 64 * 64)
        self.assertEqual(counts.scanned_configurations, 449 * 25 * 25)
        self.assertEqual(counts.stable_configurations, 30_992)
        self.assertEqual(counts.as_dict()["consistent_configurations"], 1_839_104)

    def test_columns_with_empty_male_relation(self):
        self.assertEqual(int(np.sum(self.cone.male_code == 0)), 320)

    def test_columns_with_one_male_edge(self):
        self.assertEqual(int(np.sum(self.cone.male_code == 1)), 520)

    def test_fixed_closure_columns_are_augmentable_stable(self):
        for j in range(0, self.cone.cols, max(1, self.cone.cols // 150)):
            self.assertTrue(is_preference_stable(self.cone.column(j), StabilityConvention.AUGMENTABLE))

    def test_random_configurations_agree_with_membership(self):
        stable = {tuple(row) for row in self.cone.keys().tolist()}
        rng = np.random.default_rng(5)
        for _ in range(500):
            key = (int(rng.integers(512)), int(rng.integers(64)), int(rng.integers(64)))
            theta = ConfigurationType(
                CollectiveType.from_index(3, key[0]), IndividualType(3, key[1]), IndividualType(3, key[2])
            )
            self.assertEqual(is_preference_stable(theta), key in stable, msg=f"{key}")


class TestReferenceCounts(unittest.TestCase):
    def _counts(self, consistent, stable):
        return ConeCounts(
            T=3,
            individual_types=64,
            rational_individual_types=25,
            collective_types=512,
            consistent_collective_types=consistent,
            stable_configurations=stable,
        )

    def test_published_counts_pass(self):
        counts = self._counts(116, 2996)
        self.assertEqual(counts.consistent_configurations, 475_136)
        self.assertTrue(counts.check_reference(strict=True))

    def test_mismatch_warns_by_default(self):
        self.assertFalse(self._counts(449, 30_992).check_reference())

    def test_mismatch_fails_when_strict(self):
        with self.assertRaises(ReferenceCountMismatch):
            self._counts(449, 30_992).check_reference(strict=True)

    def test_other_period_counts_are_not_checked(self):
        counts = dataclasses.replace(self._counts(1, 1), T=4)
        self.assertTrue(counts.check_reference(strict=True))


@unittest.skipUnless(SLOW, "set PREFSTAB_SLOW=1 to enumerate the augmentable cone")
class TestAugmentableCone(unittest.TestCase):
    def test_augmentable_cone_contains_fixed_closure_cone(self):
        augmentable = enumerate_configurations(3, StabilityConvention.AUGMENTABLE).stable
        self.assertEqual(augmentable.cols, 126_977)
        fixed = enumerate_configurations(3, StabilityConvention.FIXED_CLOSURE).stable
        self.assertTrue({tuple(k) for k in fixed.keys().tolist()} <= {tuple(k) for k in augmentable.keys().tolist()})


class TestConeCache(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cone = enumerate_configurations(3).stable

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = Path(self.directory.name) / "cone.bin"
        save_cone(self.cone, self.path)

    def tearDown(self):
        self.directory.cleanup()

    def test_load_returns_same_columns(self):
        loaded = load_cone(self.path, expected_T=3, expected_convention="fixed_closure")
        np.testing.assert_array_equal(loaded.keys(), self.cone.keys())
        self.assertEqual(loaded.counts, self.cone.counts)
        self.assertEqual(loaded.rows, 640)

    def test_saving_twice_gives_identical_bytes(self):
        again = Path(self.directory.name) / "again.bin"
        save_cone(load_cone(self.path), again)
        self.assertEqual(again.read_bytes(), self.path.read_bytes())

    def test_corrupted_record_fails_checksum(self):
        data = bytearray(self.path.read_bytes())
        data[-2] ^= 0xFF
        self.path.write_bytes(bytes(data))
        with self.assertRaises(ChecksumMismatch):
            load_cone(self.path)

    def test_truncated_file_fails(self):
        self.path.write_bytes(self.path.read_bytes()[:-5])
        with self.assertRaises(ChecksumMismatch):
            load_cone(self.path)

    def test_other_convention_is_refused(self):
        with self.assertRaises(VersionMismatch):
            load_cone(self.path, expected_convention=StabilityConvention.AUGMENTABLE)

    def test_other_period_count_is_refused(self):
        with self.assertRaises(VersionMismatch):
            load_cone(self.path, expected_T=4)

    def test_digest_ignores_column_order(self):
        reordered = self.cone.take(np.arange(self.cone.cols)[::-1])
        self.assertEqual(cone_digest(reordered), cone_digest(self.cone))
        self.assertNotEqual(cone_digest(self.cone.take(np.arange(10))), cone_digest(self.cone))

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_cone(Path(self.directory.name) / "missing.bin")


if __name__ == "__main__":
    unittest.main()
