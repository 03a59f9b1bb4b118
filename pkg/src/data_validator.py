import re

import pandas as pd
from loguru import logger

from src.exceptions import NegativeExpenditure, SchemaError
from src.models import HouseholdKind

HOUSEHOLD_COLUMNS = ["household_id", "kind", "period"]
PRICE_COLUMNS = ["period"]
OPTIONAL_COLUMNS = ["income", "college_m", "college_f", "age_m", "age_f"]

EXPENDITURE_PATTERN = re.compile(r"^e_(\d+)$")
PRICE_PATTERN = re.compile(r"^p_(\d+)$")


def indexed_columns(columns, pattern) -> dict:
    """Map good index to column name for columns such as ``e_1`` or ``p_3``."""
    found = {}
    for column in columns:
        match = pattern.match(str(column))
        if match:
            found[int(match.group(1))] = column
    return dict(sorted(found.items()))


class DataValidator:
    """Schema checks for one panel table (households or prices)."""

    def __init__(
        self,
        data: pd.DataFrame,
        filename: str,
        required_columns: list = HOUSEHOLD_COLUMNS,
        good_pattern=EXPENDITURE_PATTERN,
        key_columns: list = None,
    ):
        self.data = data
        self.filename = filename
        self.required_columns = required_columns
        self.good_pattern = good_pattern
        self.key_columns = key_columns or ["household_id", "period"]

    def validate(self):
        self.check_all_columns()
        self.check_good_columns()
        self.check_null_values()
        self.check_duplicated_rows()
        self.check_non_negative()
        if "kind" in self.data.columns:
            self.check_kinds()
        return self.data

    def check_all_columns(self):
        logger.info(f"Checking all columns in {self.filename}")
        missing_columns = set(self.required_columns) - set(self.data.columns)
        if missing_columns:
            logger.error(f"Missing columns: {missing_columns}")
            raise SchemaError(f"Missing columns in {self.filename}: {missing_columns}")
        logger.info("All columns present")

    def check_good_columns(self):
        goods = indexed_columns(self.data.columns, self.good_pattern)
        if not goods:
            logger.error(f"No {self.good_pattern.pattern} columns in {self.filename}")
            raise SchemaError(f"No {self.good_pattern.pattern} columns in {self.filename}")
        expected = list(range(1, len(goods) + 1))
        if list(goods) != expected:
            logger.error(f"Good columns are not numbered 1..L: {list(goods)}")
            raise SchemaError(f"Good columns in {self.filename} are not numbered 1..L")

    def check_null_values(self):
        logger.info(f"Checking for null values in {self.filename}")
        columns = [c for c in self.data.columns if c not in OPTIONAL_COLUMNS]
        if self.data[columns].isnull().values.any():
            logger.error("Null values found")
            raise SchemaError(f"Null values found in {self.filename}")
        logger.info("No null values found")

    def check_duplicated_rows(self):
        logger.info(f"Checking for duplicated rows in {self.filename}")
        keys = [c for c in self.key_columns if c in self.data.columns]
        if self.data.duplicated(subset=keys).any():
            logger.error(f"Duplicated {keys} rows found")
            raise SchemaError(f"Duplicated {keys} rows found in {self.filename}")
        logger.info("No duplicated rows found")

    def check_non_negative(self):
        columns = list(indexed_columns(self.data.columns, self.good_pattern).values())
        values = self.data[columns].apply(pd.to_numeric, errors="coerce")
        if values.isnull().values.any():
            logger.error(f"Non-numeric values in {columns}")
            raise SchemaError(f"Non-numeric values in {self.filename}")
        if (values < 0).values.any():
            logger.error(f"Negative values found in {self.filename}")
            raise NegativeExpenditure(f"Negative values found in {self.filename}")

    def check_kinds(self):
        allowed = {kind.value for kind in HouseholdKind}
        unknown = set(self.data["kind"].astype(str)) - allowed
        if unknown:
            logger.error(f"Unknown household kinds: {unknown}")
            raise SchemaError(f"Unknown household kinds in {self.filename}: {unknown}")
        inconsistent = self.data.groupby("household_id")["kind"].nunique()
        if (inconsistent > 1).any():
            ids = inconsistent[inconsistent > 1].index.tolist()
            logger.error(f"Households with more than one kind: {ids}")
            raise SchemaError(f"Households with more than one kind: {ids}")
