import unittest

import numpy as np
import pandas as pd

from src.exceptions import ConfigError, EmptyPool, MissingIncome
from src.models import HouseholdKind
from src.subsample import (
    Condition,
    control_function_ranks,
    control_function_windows,
    expenditure_classes,
    filter_subsample,
    kernel_ranks,
    parse_condition,
    silverman_bandwidth,
)
from tests.factories import APART_BUNDLES, make_dataset, make_path, small_dataset


class TestConditions(unittest.TestCase):
    def test_parse(self):
        self.assertEqual(parse_condition("college=1,age=2"), Condition(college=1, age_class=2))
        self.assertEqual(parse_condition(" expenditure = 0 "), Condition(expenditure=0))
        self.assertEqual(parse_condition(""), Condition())

    def test_parse_rejects_unknown_keys_and_values(self):
        for text in ("height=2", "college=yes", "college=2", "age=3"):
            with self.assertRaises(ConfigError, msg=text):
                parse_condition(text)

    def test_describe(self):
        self.assertEqual(Condition(college=1, age_class=0).describe(), "college=1,age_class=0")
        self.assertEqual(Condition().describe(), "all")


class TestFilter(unittest.TestCase):
    def test_couples_need_both_spouses_to_match(self):
        subset = filter_subsample(small_dataset(), Condition(college=1))
        self.assertEqual([h.household_id for h in subset.pool(HouseholdKind.COUPLE)], ["c1", "c4"])
        self.assertEqual([h.household_id for h in subset.pool(HouseholdKind.SINGLE_MALE)], ["m1"])
        self.assertEqual(len(subset.pool(HouseholdKind.SINGLE_FEMALE)), 2)

    def test_empty_pool_is_an_error(self):
        with self.assertRaises(EmptyPool):
            filter_subsample(small_dataset(), Condition(college=0))

    def test_callable_predicate(self):
        def not_c3(household):
            return household.household_id != "c3"

        subset = filter_subsample(small_dataset(), not_c3)
        self.assertEqual(len(subset.households), 7)

    def test_expenditure_terciles(self):
        households = [
            make_path(f"m{i}", HouseholdKind.SINGLE_MALE, APART_BUNDLES, scale=i + 1.0) for i in range(6)
        ]
        classes = expenditure_classes(make_dataset(households))
        self.assertEqual([classes[f"m{i}"] for i in range(6)], [0, 0, 1, 1, 2, 2])

    def test_couples_are_compared_per_adult(self):
        households = [
            make_path("c", HouseholdKind.COUPLE, APART_BUNDLES, scale=2.0),
            make_path("m", HouseholdKind.SINGLE_MALE, APART_BUNDLES, scale=1.0),
            make_path("f", HouseholdKind.SINGLE_FEMALE, APART_BUNDLES, scale=5.0),
        ]
        classes = expenditure_classes(make_dataset(households))
        self.assertEqual(classes["c"], classes["m"])
        self.assertLess(classes["m"], classes["f"])


class TestControlFunction(unittest.TestCase):
    def test_equal_incomes_give_plain_ranks(self):
        ranks = kernel_ranks([1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 10.0])
        np.testing.assert_allclose(ranks, [0.25, 0.5, 0.75, 1.0])

    def test_far_incomes_rank_alone(self):
        ranks = kernel_ranks([4.0, 1.0], [0.0, 1000.0], bandwidth=1.0)
        np.testing.assert_allclose(ranks, [1.0, 1.0])

    def test_bandwidth(self):
        self.assertEqual(silverman_bandwidth([3.0, 3.0, 3.0]), 1.0)
        values = np.arange(32, dtype=float)
        self.assertAlmostEqual(silverman_bandwidth(values), 1.06 * np.std(values, ddof=1) / 2.0)

    def test_non_positive_bandwidth(self):
        with self.assertRaises(ConfigError):
            kernel_ranks([1.0], [1.0], bandwidth=0.0)

    def test_ranks_within_each_kind(self):
        households = []
        for i in range(3):
            households.append(make_path(f"c{i}", HouseholdKind.COUPLE, APART_BUNDLES, income=5.0, scale=i + 1.0))
            households.append(make_path(f"m{i}", HouseholdKind.SINGLE_MALE, APART_BUNDLES, income=5.0, scale=10.0 * (i + 1)))
        ranks = control_function_ranks(make_dataset(households))
        self.assertAlmostEqual(ranks["c0"], 1 / 3)
        self.assertAlmostEqual(ranks["m0"], 1 / 3)
        self.assertAlmostEqual(ranks["c2"], 1.0)

    def test_missing_income(self):
        with self.assertRaises(MissingIncome):
            control_function_ranks(small_dataset())

    def test_windows(self):
        ranks = pd.Series({"a": 0.1, "b": 0.5, "c": 0.52, "d": 0.9})
        windows = control_function_windows(ranks, [0.1, 0.5], 0.05)
        self.assertEqual(windows[0.1], ["a"])
        self.assertEqual(windows[0.5], ["b", "c"])


if __name__ == "__main__":
    unittest.main()
