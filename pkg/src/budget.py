import numpy as np
from loguru import logger

from src.exceptions import DimensionMismatch, ZeroExpenditure
from src.models import BUDGET_TOLERANCE, BartenTechnology, ChoicePath, PricedChoice


def normalize(prices, quantities, period: int = 1) -> PricedChoice:
    """Rescale prices so the observed bundle costs exactly one unit.

    Already normalised observations are returned unchanged, which keeps the
    operation idempotent in value.
    """
    prices = np.asarray(prices, dtype=float)
    quantities = np.asarray(quantities, dtype=float)
    if prices.shape != quantities.shape:
        logger.error(f"Prices {prices.shape} and quantities {quantities.shape} differ")
        raise DimensionMismatch(
            f"Prices {prices.shape} and quantities {quantities.shape} differ"
        )
    expenditure = float(prices @ quantities)
    if expenditure <= 0:
        logger.error(f"Non-positive expenditure {expenditure} in period {period}")
        raise ZeroExpenditure(f"Non-positive expenditure {expenditure} in period {period}")
    if abs(expenditure - 1.0) <= BUDGET_TOLERANCE:
        return PricedChoice(period, prices, quantities)
    return PricedChoice(period, prices / expenditure, quantities)


def barten_transform(path: ChoicePath, technology: BartenTechnology) -> ChoicePath:
    """Move a couple's bundles into the internal (Barten-scaled) consumption space.

    Internal prices are ``d * p`` and internal quantities ``x / d``, so the
    observed expenditure is unchanged and the result is re-normalised.
    """
    scales = technology.scales
    if scales.shape[0] != path.goods:
        logger.error(f"{scales.shape[0]} Barten scales for {path.goods} goods")
        raise DimensionMismatch(f"{scales.shape[0]} Barten scales for {path.goods} goods")
    if technology.is_identity():
        return path
    observations = tuple(
        normalize(choice.prices * scales, choice.quantities / scales, choice.period)
        for choice in path.observations
    )
    return ChoicePath(
        household_id=path.household_id,
        kind=path.kind,
        observations=observations,
        demographics=path.demographics,
        income=path.income,
        raw_expenditure=path.raw_expenditure,
    )
