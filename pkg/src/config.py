"""Run configuration.

A config file is a flat list of ``key = value`` lines. Values are numbers,
bare words, quoted strings or bracketed lists of those; ``#`` starts a
comment. Command-line flags override file values, which override the
defaults below.
"""

import dataclasses
from pathlib import Path
from typing import Optional, Tuple

import pyparsing as pp
from loguru import logger

from src.exceptions import ConfigError

DEFAULT_EPSILON = 1e-9
DEFAULT_SIZE_CAP = 1 << 24
DEFAULT_GRID = tuple(round(0.05 + 0.1 * k, 2) for k in range(10))
DEFAULT_WINDOW = 1 / 20


@dataclasses.dataclass(frozen=True)
class RunConfig:
    periods: Optional[Tuple[str, ...]] = None
    goods: Optional[Tuple[int, ...]] = None
    barten: Optional[Tuple[float, ...]] = None
    epsilon: float = DEFAULT_EPSILON
    convention: str = "fixed_closure"
    omega: str = "identity"
    bootstrap: int = 500
    alpha: float = 0.05
    seed: int = 0
    tau: Optional[float] = None
    drop_irrational: bool = False
    solver_tol: float = 1e-10
    solver_max_iter: int = 200_000
    solver_step: str = "row_sum"
    solver_sweep: str = "gauss_seidel"
    bandwidth: Optional[float] = None
    grid: Tuple[float, ...] = DEFAULT_GRID
    window: float = DEFAULT_WINDOW
    threads: int = -1
    size_cap: int = DEFAULT_SIZE_CAP

    def __post_init__(self):
        if self.bootstrap < 1:
            raise ConfigError(f"bootstrap must be at least 1, got {self.bootstrap}")
        if not 0 < self.alpha < 0.5:
            raise ConfigError(f"alpha must lie in (0, 0.5), got {self.alpha}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.tau is not None and self.tau < 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if self.threads == 0:
            raise ConfigError("threads must be non-zero")
        if self.window <= 0:
            raise ConfigError(f"window must be positive, got {self.window}")

    def merged(self, **overrides) -> "RunConfig":
        """Return a copy with every non-``None`` override applied."""
        unknown = set(overrides) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")
        changes = {k: v for k, v in overrides.items() if v is not None}
        try:
            return dataclasses.replace(self, **_coerce(changes))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def _grammar():
    key = pp.Word(pp.alphas + "_", pp.alphanums + "_")
    number = pp.pyparsing_common.number
    word = pp.Word(pp.alphanums + "_.-")
    quoted = pp.QuotedString('"') | pp.QuotedString("'")
    # "2009a" is a word, not the number 2009 followed by junk
    scalar = quoted | number + pp.FollowedBy(pp.Literal(",") | "]" | pp.StringEnd()) | word
    items = pp.Group(
        pp.Suppress("[") + pp.Optional(pp.delimited_list(scalar)) + pp.Suppress("]")
    )
    return key("key") + pp.Suppress("=") + (items | scalar)("value")


_LINE = _grammar()

_TUPLE_KEYS = {"periods": str, "goods": int, "barten": float, "grid": float}
_SCALAR_KEYS = {
    "epsilon": float,
    "convention": str,
    "omega": str,
    "bootstrap": int,
    "alpha": float,
    "seed": int,
    "tau": float,
    "drop_irrational": bool,
    "solver_tol": float,
    "solver_max_iter": int,
    "solver_step": str,
    "solver_sweep": str,
    "bandwidth": float,
    "window": float,
    "threads": int,
    "size_cap": int,
}


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Not a boolean: {value!r}")


def _as_label(value) -> str:
    return value if isinstance(value, str) else str(value)


def _coerce(values: dict) -> dict:
    coerced = {}
    for key, value in values.items():
        if key == "barten" and value in ("identity", ["identity"], ("identity",)):
            coerced[key] = None
        elif key in _TUPLE_KEYS:
            cast = _as_label if _TUPLE_KEYS[key] is str else _TUPLE_KEYS[key]
            if isinstance(value, (str, int, float)):
                value = [value]
            coerced[key] = tuple(cast(v) for v in value)
        elif _SCALAR_KEYS.get(key) is bool:
            coerced[key] = _as_bool(value)
        elif key in _SCALAR_KEYS:
            coerced[key] = _SCALAR_KEYS[key](value)
        else:
            coerced[key] = value
    return coerced


def parse_config(text: str, source: str = "<string>") -> dict:
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        try:
            parsed = _LINE.parse_string(stripped, parse_all=True)
        except pp.ParseException as e:
            logger.error(f"{source}:{number}: cannot parse {raw!r}")
            raise ConfigError(f"{source}:{number}: cannot parse {raw!r}: {e}") from e
        key = parsed["key"]
        if key not in _TUPLE_KEYS and key not in _SCALAR_KEYS:
            logger.error(f"{source}:{number}: unknown key {key!r}")
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        value = parsed["value"]
        if isinstance(value, pp.ParseResults):
            value = value.as_list()
            if key in _SCALAR_KEYS and len(value) == 1:
                value = value[0]
        values[key] = value
    return values


def load_config(path=None, **overrides) -> RunConfig:
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            logger.error(f"No config file found at {path}")
            raise FileNotFoundError(f"No config file found at {path}")
        logger.info(f"Loading configuration from {path}")
        config = config.merged(**parse_config(path.read_text(), source=str(path)))
    return config.merged(**overrides)
