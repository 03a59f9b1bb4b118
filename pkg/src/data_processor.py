import dataclasses
import itertools
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from src.budget import barten_transform, normalize
from src.data_validator import (
    EXPENDITURE_PATTERN,
    HOUSEHOLD_COLUMNS,
    PRICE_COLUMNS,
    PRICE_PATTERN,
    DataValidator,
    indexed_columns,
)
from src.exceptions import MissingPeriodPrice, SchemaError
from src.models import (
    AgeClass,
    BartenTechnology,
    ChoicePath,
    Demographics,
    HouseholdKind,
    PanelDataset,
)


@dataclasses.dataclass(frozen=True)
class PanelSchema:
    """Which periods and goods of the raw files make up the panel.

    ``periods`` are labels from the ``period`` column, kept in the given
    order. ``goods`` are 1-based good indices. ``None`` selects everything.
    """

    periods: Optional[Tuple[str, ...]] = None
    goods: Optional[Tuple[int, ...]] = None
    barten: Optional[BartenTechnology] = None


def _period_sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


class DataProcessor:
    """Loads household expenditures and period prices into a ``PanelDataset``."""

    def __init__(self, household_file, price_file):
        self.household_file = Path(household_file)
        self.price_file = Path(price_file)

    def load_data(self, file_path: Path) -> pd.DataFrame:
        logger.info(f"Loading data from {file_path}")
        if file_path.exists():
            logger.info(f"File found at {file_path}")
            return pd.read_csv(file_path, dtype={"period": str, "household_id": str})
        else:
            logger.error(f"No file found at {file_path}")
            raise FileNotFoundError(f"No file found at {file_path}")

    def load_prices(self) -> pd.DataFrame:
        prices = self.load_data(self.price_file)
        DataValidator(
            prices,
            filename=self.price_file.name,
            required_columns=PRICE_COLUMNS,
            good_pattern=PRICE_PATTERN,
            key_columns=["period"],
        ).validate()
        columns = list(indexed_columns(prices.columns, PRICE_PATTERN).values())
        if (prices[columns].astype(float) <= 0).values.any():
            logger.error(f"Non-positive prices in {self.price_file.name}")
            raise SchemaError(f"Non-positive prices in {self.price_file.name}")
        return prices.set_index("period")

    def load_households(self) -> pd.DataFrame:
        households = self.load_data(self.household_file)
        return DataValidator(
            households,
            filename=self.household_file.name,
            required_columns=HOUSEHOLD_COLUMNS,
        ).validate()

    def process_data(self, schema: PanelSchema = PanelSchema()) -> PanelDataset:
        households = self.load_households()
        prices = self.load_prices()

        expenditure_columns = indexed_columns(households.columns, EXPENDITURE_PATTERN)
        price_columns = indexed_columns(prices.columns, PRICE_PATTERN)
        if list(expenditure_columns) != list(price_columns):
            logger.error(
                f"Goods differ: expenditures {list(expenditure_columns)}, "
                f"prices {list(price_columns)}"
            )
            raise SchemaError("Expenditure and price files cover different goods")

        goods = list(schema.goods) if schema.goods else list(expenditure_columns)
        unknown_goods = set(goods) - set(expenditure_columns)
        if unknown_goods:
            logger.error(f"Unknown goods selected: {sorted(unknown_goods)}")
            raise SchemaError(f"Unknown goods selected: {sorted(unknown_goods)}")

        if schema.periods:
            periods = [str(p) for p in schema.periods]
        else:
            periods = sorted(households["period"].unique(), key=_period_sort_key)
        missing = [p for p in periods if p not in prices.index]
        if missing:
            logger.error(f"No prices for periods {missing}")
            raise MissingPeriodPrice(f"No prices for periods {missing}")

        price_matrix = prices.loc[periods, [price_columns[g] for g in goods]].to_numpy(float)
        selected = households[households["period"].isin(periods)]
        logger.info(
            f"Building panel over periods {periods} and goods {goods} "
            f"from {households['household_id'].nunique()} households"
        )

        paths, dropped = [], 0
        for household_id, rows in sorted(selected.groupby("household_id"), key=lambda g: g[0]):
            path = self._build_path(
                str(household_id), rows, periods, goods, expenditure_columns, price_matrix
            )
            if path is None:
                dropped += 1
                continue
            kind = path.kind
            if kind == HouseholdKind.COUPLE and schema.barten is not None:
                path = barten_transform(path, schema.barten)
            paths.append(path)

        not_selected = households["household_id"].nunique() - selected["household_id"].nunique()
        if dropped or not_selected:
            logger.warning(
                f"Dropped {dropped + not_selected} households with incomplete "
                f"or zero-expenditure observations"
            )
        dataset = PanelDataset(
            households=tuple(paths),
            periods=len(periods),
            goods=len(goods),
            period_labels=tuple(periods),
            good_labels=tuple(f"good_{g}" for g in goods),
        )
        logger.info(f"Panel built: {dataset.counts()}")
        return dataset

    def _build_path(self, household_id, rows, periods, goods, expenditure_columns, price_matrix):
        rows = rows.set_index("period")
        if any(p not in rows.index for p in periods):
            return None
        expenditures = rows.loc[periods, [expenditure_columns[g] for g in goods]].to_numpy(float)
        totals = expenditures.sum(axis=1)
        if np.any(totals <= 0):
            return None
        observations = tuple(
            normalize(price_matrix[t], expenditures[t] / price_matrix[t], period=t + 1)
            for t in range(len(periods))
        )
        first = rows.iloc[0]
        income = None
        if "income" in rows.columns and rows["income"].notnull().all():
            income = float(rows.loc[periods, "income"].astype(float).mean())
        return ChoicePath(
            household_id=household_id,
            kind=HouseholdKind(str(first["kind"])),
            observations=observations,
            demographics=_demographics(first),
            income=income,
            raw_expenditure=tuple(float(t) for t in totals),
        )

    def save_data(self, data: pd.DataFrame, file_path):
        try:
            logger.info(f"Saving data to {file_path}")
            data.to_csv(file_path, index=False)
            logger.info(f"Data saved to {file_path}")
        except Exception as e:
            logger.error(f"Error saving file: {e}")
            raise e


def _age_class(value) -> Optional[AgeClass]:
    if value is None or pd.isnull(value):
        return None
    value = float(value)
    # class codes 0/1/2 are accepted as-is; anything larger is an age in years
    if value in (0.0, 1.0, 2.0):
        return AgeClass(int(value))
    return AgeClass.from_age(value)


def _college(value) -> Optional[int]:
    if value is None or pd.isnull(value):
        return None
    return int(float(value) > 0)


def _demographics(row) -> Optional[Demographics]:
    fields = ("college_m", "college_f", "age_m", "age_f")
    if not any(f in row.index and not pd.isnull(row[f]) for f in fields):
        return None
    return Demographics(
        college_m=_college(row.get("college_m")),
        college_f=_college(row.get("college_f")),
        age_m=_age_class(row.get("age_m")),
        age_f=_age_class(row.get("age_f")),
    )


def load_panel(household_file, price_file, schema: PanelSchema = PanelSchema()) -> PanelDataset:
    return DataProcessor(household_file, price_file).process_data(schema)


def rank_period_combinations(
    household_file, price_file, periods: int = 3, top: Optional[int] = None
) -> pd.DataFrame:
    """Count, for every combination of ``periods`` price periods, the households
    of each kind observed in all of them. Sorted by the smallest of the three
    pools, then couples, then singles."""
    processor = DataProcessor(household_file, price_file)
    households = processor.load_households()
    available = set(processor.load_prices().index)
    observed = households[households["period"].isin(available)]
    seen = observed.groupby("household_id")["period"].apply(set)
    kinds = observed.groupby("household_id")["kind"].first()

    records = []
    labels = sorted(observed["period"].unique(), key=_period_sort_key)
    for combination in itertools.combinations(labels, periods):
        wanted = set(combination)
        complete = seen.apply(wanted.issubset)
        counts = kinds[complete[complete].index].value_counts()
        records.append(
            {
                "periods": " ".join(combination),
                "n_couples": int(counts.get(HouseholdKind.COUPLE.value, 0)),
                "n_single_m": int(counts.get(HouseholdKind.SINGLE_MALE.value, 0)),
                "n_single_f": int(counts.get(HouseholdKind.SINGLE_FEMALE.value, 0)),
            }
        )
    ranking = pd.DataFrame.from_records(
        records, columns=["periods", "n_couples", "n_single_m", "n_single_f"]
    )
    ranking["n_singles"] = ranking["n_single_m"] + ranking["n_single_f"]
    ranking["n_min"] = ranking[["n_couples", "n_single_m", "n_single_f"]].min(axis=1)
    ranking = ranking.sort_values(
        ["n_min", "n_couples", "n_singles"], ascending=False, kind="stable"
    ).reset_index(drop=True)
    return ranking if top is None else ranking.head(top)


def write_panel_csv(dataset: PanelDataset, prices, household_file, price_file) -> None:
    """Write a panel back to the two-file CSV layout ``load_panel`` reads.

    ``prices`` is the ``periods x goods`` matrix of raw prices shared by every
    household; observations keep raw quantities, so ``e = p * x``.
    """
    prices = np.asarray(prices, dtype=float)
    labels = dataset.period_labels or tuple(str(t + 1) for t in range(dataset.periods))
    price_rows = pd.DataFrame(prices, columns=[f"p_{g + 1}" for g in range(dataset.goods)])
    price_rows.insert(0, "period", list(labels))

    rows = []
    for household in dataset.households:
        for t, choice in enumerate(household.observations):
            row = {
                "household_id": household.household_id,
                "kind": household.kind.value,
                "period": labels[t],
            }
            spent = prices[t] * choice.quantities
            row.update({f"e_{g + 1}": float(spent[g]) for g in range(dataset.goods)})
            if household.income is not None:
                row["income"] = household.income
            rows.append(row)
    processor = DataProcessor(household_file, price_file)
    processor.save_data(pd.DataFrame(rows), household_file)
    processor.save_data(price_rows, price_file)
