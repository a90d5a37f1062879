"""Crash-record schema, DHA recoding, record filtering and a seeded synthetic generator.

One ``CrashRecord`` is one driver's row of a two-vehicle crash.  The 18
descriptive fields are grouped as crash context (6), driver (5), road (5)
and environment (2).  Real MTCF extracts are not available, so
:func:`generate_pairs` produces paired records whose fields are drawn from
class-conditional tables; the resulting corpus carries a learnable signal.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .labels import (
    HAZARDOUS_GROUPS,
    LABEL_ORDER,
    DhaCode,
    DhaGroup,
    NarrativeLabel,
)

# --------------------------------------------------------------------------
# recoding

RECODE_TABLE: dict[DhaCode, DhaGroup] = {
    DhaCode.UNABLE_TO_STOP: DhaGroup.SSV,
    DhaCode.SPEED_TOO_FAST: DhaGroup.SSV,
    DhaCode.SPEED_TOO_SLOW: DhaGroup.SSV,
    DhaCode.FAILED_TO_YIELD: DhaGroup.RWTCV,
    DhaCode.DISREGARD_TRAFFIC_CONTROL: DhaGroup.RWTCV,
    DhaCode.IMPROPER_LANE_USE: DhaGroup.LDV,
    DhaCode.DROVE_LEFT_OF_CENTER: DhaGroup.LDV,
    DhaCode.IMPROPER_PASSING: DhaGroup.LDV,
    DhaCode.DROVE_WRONG_WAY: DhaGroup.LDV,
    DhaCode.IMPROPER_TURN: DhaGroup.MSE,
    DhaCode.IMPROPER_BACKING: DhaGroup.MSE,
    DhaCode.IMPROPER_NO_SIGNAL: DhaGroup.MSE,
    DhaCode.CARELESS_NEGLIGENT: DhaGroup.GUD,
    DhaCode.RECKLESS: DhaGroup.GUD,
    DhaCode.NONE: DhaGroup.NONE,
}

# Published per-code record counts, used as within-group sampling weights.
CODE_RECORD_COUNTS: dict[DhaCode, int] = {
    DhaCode.UNABLE_TO_STOP: 216_022,
    DhaCode.SPEED_TOO_FAST: 25_286,
    DhaCode.SPEED_TOO_SLOW: 339,
    DhaCode.FAILED_TO_YIELD: 183_069,
    DhaCode.DISREGARD_TRAFFIC_CONTROL: 39_007,
    DhaCode.IMPROPER_LANE_USE: 43_250,
    DhaCode.DROVE_LEFT_OF_CENTER: 6_369,
    DhaCode.IMPROPER_PASSING: 9_676,
    DhaCode.DROVE_WRONG_WAY: 1_106,
    DhaCode.IMPROPER_TURN: 19_763,
    DhaCode.IMPROPER_BACKING: 15_651,
    DhaCode.IMPROPER_NO_SIGNAL: 1_705,
    DhaCode.CARELESS_NEGLIGENT: 14_846,
    DhaCode.RECKLESS: 3_183,
    DhaCode.NONE: 585_342,
}


def recode_dha(code: DhaCode) -> DhaGroup:
    return RECODE_TABLE[DhaCode(code)]


def codes_in_group(group: DhaGroup) -> tuple[DhaCode, ...]:
    return tuple(c for c in DhaCode if RECODE_TABLE[c] is group)


# --------------------------------------------------------------------------
# schema

CRASH_FIELDS = ("crash_type", "month", "weekday", "hour", "intersection", "hit_and_run")
DRIVER_FIELDS = ("age", "sex", "distracted", "maneuver", "vehicle")
ROAD_FIELDS = ("speed_limit", "road_condition", "lanes", "trafficway", "surface")
ENV_FIELDS = ("weather", "lighting")
SHARED_FIELDS = CRASH_FIELDS + ROAD_FIELDS + ENV_FIELDS
DESCRIPTIVE_FIELDS = CRASH_FIELDS + DRIVER_FIELDS + ROAD_FIELDS + ENV_FIELDS
RECORD_COLUMNS = ("crash_id", "driver_index") + DESCRIPTIVE_FIELDS + ("dha",)

MIN_AGE = 14
MAX_AGE = 110
SPEED_LIMIT_RANGE = (5, 85)
TEEN_AGES = (16, 17)

LEVELS: dict[str, tuple[str, ...]] = {
    "crash_type": (
        "rear_end", "angle", "head_on", "sideswipe_same", "sideswipe_opposite",
        "left_turn", "backing", "other",
    ),
    "month": ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"),
    "weekday": ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"),
    "hour": ("h00_06", "h06_10", "h10_15", "h15_19", "h19_24"),
    "intersection": ("intersection", "intersection_related", "driveway", "non_junction"),
    "hit_and_run": ("no", "yes"),
    "sex": ("male", "female", "unknown"),
    "distracted": ("false", "true"),
    "maneuver": (
        "straight", "slowing_stopping", "stopped", "turning_left", "turning_right",
        "changing_lanes", "passing", "backing", "other",
    ),
    "vehicle": ("passenger_car", "suv", "pickup", "van", "truck", "motorcycle"),
    "speed_limit": ("25", "30", "35", "40", "45", "55", "65", "70"),
    "road_condition": ("dry", "wet", "icy", "snowy", "other"),
    "lanes": ("1", "2", "3", "4", "5plus"),
    "trafficway": ("TW", "DHWB", "DHNB", "TWLTL", "OWT"),
    "surface": ("asphalt", "concrete", "gravel", "other"),
    "weather": ("clear", "cloudy", "rain", "snow", "fog_smoke", "other"),
    "lighting": ("daylight", "dark_lighted", "dark_unlighted", "dawn_dusk"),
}
# age and speed_limit are integers; speed_limit's LEVELS entry is the generator's
# support, while validation accepts any integer in SPEED_LIMIT_RANGE.
INTEGER_FIELDS = ("age", "speed_limit")


def schema_document() -> dict[str, Any]:
    """JSON-serialisable description of every field and its level set."""
    doc: dict[str, Any] = {"version": 1, "groups": {
        "crash": list(CRASH_FIELDS), "driver": list(DRIVER_FIELDS),
        "road": list(ROAD_FIELDS), "environment": list(ENV_FIELDS),
    }, "fields": {}}
    for name in DESCRIPTIVE_FIELDS:
        if name == "age":
            doc["fields"][name] = {"type": "integer", "min": MIN_AGE, "max": MAX_AGE}
        elif name == "speed_limit":
            doc["fields"][name] = {"type": "integer", "min": SPEED_LIMIT_RANGE[0],
                                   "max": SPEED_LIMIT_RANGE[1]}
        elif name == "distracted":
            doc["fields"][name] = {"type": "boolean"}
        else:
            doc["fields"][name] = {"type": "categorical", "levels": list(LEVELS[name])}
    doc["fields"]["dha"] = {"type": "categorical", "levels": [c.value for c in DhaCode],
                            "recode": {c.value: RECODE_TABLE[c].value for c in DhaCode}}
    return doc


@dataclass(frozen=True)
class CrashRecord:
    crash_id: str
    driver_index: int
    # crash context
    crash_type: str
    month: str
    weekday: str
    hour: str
    intersection: str
    hit_and_run: str
    # driver
    age: int
    sex: str
    distracted: bool
    maneuver: str
    vehicle: str
    # road
    speed_limit: int
    road_condition: str
    lanes: str
    trafficway: str
    surface: str
    # environment
    weather: str
    lighting: str
    dha: DhaCode

    @property
    def group(self) -> DhaGroup:
        return recode_dha(self.dha)

    def shared_context(self) -> tuple:
        return tuple(getattr(self, f) for f in SHARED_FIELDS)

    def to_row(self) -> dict[str, str]:
        """Flat string map, the CSV form."""
        row = {}
        for name in RECORD_COLUMNS:
            row[name] = format_value(name, getattr(self, name))
        return row

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out["dha"] = self.dha.value
        return out


def format_value(name: str, value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    return str(value)


# --------------------------------------------------------------------------
# filtering

class RejectReason(str, Enum):
    DHA_OTHER_UNKNOWN = "DHA_OTHER_UNKNOWN"
    FIELD_INVALID = "FIELD_INVALID"
    LEVEL_OUT_OF_SCHEMA = "LEVEL_OUT_OF_SCHEMA"


@dataclass(frozen=True)
class Rejection:
    crash_id: str
    driver_index: str
    reason: RejectReason
    detail: str = ""


class MalformedRecordError(ValueError):
    """The raw map is missing required keys and cannot be judged at all."""


_DHA_DROPPED = {"other", "unknown"}


def _parse_int(value: Any) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    try:
        text = str(value).strip()
        return int(text)
    except ValueError:
        return None


def _parse_bool(value: Any) -> bool | None:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    return None


def filter_record(raw: Mapping[str, Any]) -> CrashRecord | Rejection:
    """Validate one raw driver row.

    Returns the parsed record, or a :class:`Rejection` naming why the row is
    excluded.  Checks run in order: dropped DHA codes, explicit ``invalid``
    values, then level-set membership.
    """
    missing = [k for k in RECORD_COLUMNS if k not in raw]
    if missing:
        raise MalformedRecordError(f"missing fields: {', '.join(missing)}")

    crash_id = str(raw["crash_id"])
    driver_index = str(raw["driver_index"])

    def reject(reason: RejectReason, detail: str) -> Rejection:
        return Rejection(crash_id, driver_index, reason, detail)

    dha_text = format_value("dha", raw["dha"]).strip()
    if dha_text.lower() in _DHA_DROPPED:
        return reject(RejectReason.DHA_OTHER_UNKNOWN, dha_text)

    for name in DESCRIPTIVE_FIELDS:
        value = raw[name]
        if isinstance(value, str) and value.strip().lower() == "invalid":
            return reject(RejectReason.FIELD_INVALID, name)

    try:
        dha = DhaCode.parse(dha_text)
    except ValueError:
        return reject(RejectReason.LEVEL_OUT_OF_SCHEMA, f"dha={dha_text}")

    index = _parse_int(raw["driver_index"])
    if index not in (1, 2):
        return reject(RejectReason.LEVEL_OUT_OF_SCHEMA, f"driver_index={driver_index}")

    values: dict[str, Any] = {}
    for name in DESCRIPTIVE_FIELDS:
        value = raw[name]
        if name == "age":
            age = _parse_int(value)
            if age is None or not MIN_AGE <= age <= MAX_AGE:
                return reject(RejectReason.LEVEL_OUT_OF_SCHEMA, f"age={value}")
            values[name] = age
        elif name == "speed_limit":
            limit = _parse_int(value)
            if limit is None or not SPEED_LIMIT_RANGE[0] <= limit <= SPEED_LIMIT_RANGE[1]:
                return reject(RejectReason.LEVEL_OUT_OF_SCHEMA, f"speed_limit={value}")
            values[name] = limit
        elif name == "distracted":
            flag = _parse_bool(value)
            if flag is None:
                return reject(RejectReason.LEVEL_OUT_OF_SCHEMA, f"distracted={value}")
            values[name] = flag
        else:
            text = str(value)
            if text not in LEVELS[name]:
                return reject(RejectReason.LEVEL_OUT_OF_SCHEMA, f"{name}={text}")
            values[name] = text

    return CrashRecord(crash_id=crash_id, driver_index=index, dha=dha, **values)


# --------------------------------------------------------------------------
# synthetic generator

# Published test-set class supports (SSV, RWTCV, LDV, MSE, GUD, NHA, BDTHA); they sum to 87,347.
CLASS_SUPPORTS = (35118, 32273, 8426, 5355, 2515, 2120, 1540)
DEFAULT_CLASS_PROBABILITIES: tuple[float, ...] = tuple(
    s / sum(CLASS_SUPPORTS) for s in CLASS_SUPPORTS
)

BASE_MARGINALS: dict[str, dict[str, float]] = {
    "crash_type": {"rear_end": .35, "angle": .25, "head_on": .04, "sideswipe_same": .12,
                   "sideswipe_opposite": .03, "left_turn": .10, "backing": .06, "other": .05},
    "month": {m: 1 / 12 for m in LEVELS["month"]},
    "weekday": {"Mon": .14, "Tue": .15, "Wed": .15, "Thu": .15, "Fri": .17, "Sat": .13, "Sun": .11},
    "hour": {"h00_06": .08, "h06_10": .18, "h10_15": .32, "h15_19": .30, "h19_24": .12},
    "intersection": {"intersection": .35, "intersection_related": .15, "driveway": .10,
                     "non_junction": .40},
    "hit_and_run": {"no": .95, "yes": .05},
    "sex": {"male": .53, "female": .45, "unknown": .02},
    "maneuver": {"straight": .45, "slowing_stopping": .12, "stopped": .15, "turning_left": .10,
                 "turning_right": .06, "changing_lanes": .05, "passing": .01, "backing": .04,
                 "other": .02},
    "vehicle": {"passenger_car": .55, "suv": .22, "pickup": .12, "van": .05, "truck": .04,
                "motorcycle": .02},
    "speed_limit": {"25": .15, "30": .08, "35": .15, "40": .10, "45": .22, "55": .18, "65": .07,
                    "70": .05},
    "road_condition": {"dry": .72, "wet": .16, "icy": .04, "snowy": .06, "other": .02},
    "lanes": {"1": .15, "2": .45, "3": .15, "4": .15, "5plus": .10},
    "trafficway": {"TW": .55, "DHWB": .10, "DHNB": .10, "TWLTL": .15, "OWT": .10},
    "surface": {"asphalt": .70, "concrete": .25, "gravel": .03, "other": .02},
    "weather": {"clear": .62, "cloudy": .22, "rain": .09, "snow": .05, "fog_smoke": .01,
                "other": .01},
    "lighting": {"daylight": .72, "dark_lighted": .12, "dark_unlighted": .10, "dawn_dusk": .06},
}

# Class-characteristic levels that receive the configured signal mass.
SHARED_SIGNAL_LEVELS: dict[str, dict[NarrativeLabel, str]] = {
    "crash_type": {
        NarrativeLabel.SSV: "rear_end", NarrativeLabel.RWTCV: "angle",
        NarrativeLabel.LDV: "sideswipe_same", NarrativeLabel.MSE: "backing",
        NarrativeLabel.GUD: "head_on", NarrativeLabel.NHA: "other",
        NarrativeLabel.BDTHA: "angle",
    },
}
DRIVER_SIGNAL_LEVELS: dict[str, dict[DhaGroup, str]] = {
    "maneuver": {
        DhaGroup.SSV: "straight", DhaGroup.RWTCV: "turning_left",
        DhaGroup.LDV: "changing_lanes", DhaGroup.MSE: "backing",
        DhaGroup.GUD: "passing", DhaGroup.NONE: "stopped",
    },
}
# Relative propensities per driver group; rescaled so the marginal rate equals the base rate.
DISTRACTION_WEIGHTS: dict[DhaGroup, float] = {
    DhaGroup.SSV: 2.0, DhaGroup.RWTCV: 1.5, DhaGroup.LDV: 2.5, DhaGroup.MSE: 1.0,
    DhaGroup.GUD: 5.0, DhaGroup.NONE: 0.4,
}
TEEN_WEIGHTS: dict[DhaGroup, float] = {
    DhaGroup.SSV: 1.8, DhaGroup.RWTCV: 1.6, DhaGroup.LDV: 1.5, DhaGroup.MSE: 1.2,
    DhaGroup.GUD: 3.0, DhaGroup.NONE: 0.5,
}


class ConfigError(ValueError):
    """Raised for invalid generator or pipeline configuration."""


Table = dict[str, dict[str, dict[str, float]]]


def sharpen(base: Mapping[str, float], level: str, mass: float) -> dict[str, float]:
    """Put ``mass`` on ``level`` and spread the rest proportionally to ``base``."""
    rest = sum(p for k, p in base.items() if k != level)
    out = {k: (1.0 - mass) * p / rest for k, p in base.items() if k != level}
    out[level] = mass
    return {k: out[k] for k in base}


def default_tables(signal: float = 0.7) -> tuple[Table, Table]:
    """Default (crash-level, driver-level) conditional tables at the given sharpness."""
    crash_tables: Table = {lab.value: {} for lab in LABEL_ORDER}
    for name, by_label in SHARED_SIGNAL_LEVELS.items():
        for lab, level in by_label.items():
            crash_tables[lab.value][name] = sharpen(BASE_MARGINALS[name], level, signal)
    driver_tables: Table = {g.value: {} for g in DhaGroup}
    for name, by_group in DRIVER_SIGNAL_LEVELS.items():
        for g, level in by_group.items():
            driver_tables[g.value][name] = sharpen(BASE_MARGINALS[name], level, signal)
    return crash_tables, driver_tables


def _default_crash_tables() -> Table:
    return default_tables()[0]


def _default_driver_tables() -> Table:
    return default_tables()[1]


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_pairs: int = 5000
    class_probabilities: tuple[float, ...] = DEFAULT_CLASS_PROBABILITIES
    # crash-level fields conditioned on the narrative label: {label: {field: {level: p}}}
    crash_tables: Table = field(default_factory=_default_crash_tables)
    # driver-level fields conditioned on the driver's recoded group: {group: {field: {level: p}}}
    driver_tables: Table = field(default_factory=_default_driver_tables)
    distraction_base_rate: float = 0.04
    teen_base_rate: float = 0.04

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if isinstance(self.n_pairs, bool) or not isinstance(self.n_pairs, int) or self.n_pairs < 0:
            raise ConfigError(f"n_pairs must be a non-negative integer, got {self.n_pairs!r}")
        probs = tuple(self.class_probabilities)
        if len(probs) != len(LABEL_ORDER) or any(p < 0 for p in probs):
            raise ConfigError("class_probabilities must be 7 non-negative numbers")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"class_probabilities must sum to 1, got {sum(probs)!r}")
        for rate_name in ("distraction_base_rate", "teen_base_rate"):
            rate = getattr(self, rate_name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{rate_name} must lie in [0, 1]")
        self._check_tables("crash_tables", self.crash_tables, [l.value for l in LABEL_ORDER],
                           SHARED_FIELDS)
        self._check_tables("driver_tables", self.driver_tables, [g.value for g in DhaGroup],
                           ("sex", "maneuver", "vehicle"))
        if max(self.distraction_rates().values()) > 1.0 or max(self.teen_rates().values()) > 1.0:
            raise ConfigError("base rate too high for the per-group propensity weights")

    @staticmethod
    def _check_tables(name: str, tables: Table, keys: Sequence[str], allowed: Sequence[str]) -> None:
        for key, per_field in tables.items():
            if key not in keys:
                raise ConfigError(f"{name}: unknown class {key!r}")
            for fname, dist in per_field.items():
                if fname not in allowed:
                    raise ConfigError(f"{name}[{key}]: field {fname!r} cannot be conditioned")
                if set(dist) - set(LEVELS[fname]):
                    raise ConfigError(f"{name}[{key}][{fname}]: unknown levels")
                if any(p < 0 for p in dist.values()) or abs(sum(dist.values()) - 1.0) > 1e-9:
                    raise ConfigError(f"{name}[{key}][{fname}]: probabilities must sum to 1")

    def group_mix(self) -> dict[DhaGroup, float]:
        """Marginal share of drivers in each recoded group implied by the class prior."""
        probs = dict(zip(LABEL_ORDER, self.class_probabilities))
        hazard = hazardous_group_prior(self.class_probabilities)
        both = probs[NarrativeLabel.BDTHA]
        mix = {}
        for g in HAZARDOUS_GROUPS:
            mix[g] = (probs[NarrativeLabel(g.value)] + 2 * both * hazard[g]) / 2
        one_ha = sum(probs[NarrativeLabel(g.value)] for g in HAZARDOUS_GROUPS)
        mix[DhaGroup.NONE] = (one_ha + 2 * probs[NarrativeLabel.NHA]) / 2
        return mix

    def _rates(self, base: float, weights: Mapping[DhaGroup, float]) -> dict[DhaGroup, float]:
        mix = self.group_mix()
        mean_w = sum(mix[g] * weights[g] for g in DhaGroup)
        return {g: base * weights[g] / mean_w for g in DhaGroup}

    def distraction_rates(self) -> dict[DhaGroup, float]:
        return self._rates(self.distraction_base_rate, DISTRACTION_WEIGHTS)

    def teen_rates(self) -> dict[DhaGroup, float]:
        return self._rates(self.teen_base_rate, TEEN_WEIGHTS)

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out["class_probabilities"] = list(self.class_probabilities)
        return out

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        kwargs = dict(data)
        if "class_probabilities" in kwargs:
            kwargs["class_probabilities"] = tuple(kwargs["class_probabilities"])
        return cls(**kwargs)


def hazardous_group_prior(class_probabilities: Sequence[float]) -> dict[DhaGroup, float]:
    """Group distribution used for each driver of a both-hazardous crash."""
    head = [float(p) for p in class_probabilities[: len(HAZARDOUS_GROUPS)]]
    total = sum(head)
    return {g: p / total for g, p in zip(HAZARDOUS_GROUPS, head)}


def _within_group_weights(group: DhaGroup) -> tuple[tuple[DhaCode, ...], np.ndarray]:
    codes = codes_in_group(group)
    w = np.array([CODE_RECORD_COUNTS[c] for c in codes], dtype=float)
    return codes, w / w.sum()


def _pair_rng(seed: int, index: int) -> np.random.Generator:
    # one independent stream per pair: any index range can be produced alone
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


class _Sampler:
    def __init__(self, config: GeneratorConfig):
        self.config = config
        self.class_p = np.asarray(config.class_probabilities, dtype=float)
        self.hazard = hazardous_group_prior(config.class_probabilities)
        self.hazard_p = np.array([self.hazard[g] for g in HAZARDOUS_GROUPS])
        self.codes = {g: _within_group_weights(g) for g in DhaGroup}
        self.distraction = config.distraction_rates()
        self.teen = config.teen_rates()

    def categorical(self, rng: np.random.Generator, dist: Mapping[str, float]) -> str:
        levels = list(dist)
        p = np.array([dist[k] for k in levels], dtype=float)
        return levels[int(rng.choice(len(levels), p=p / p.sum()))]

    def shared_dist(self, label: NarrativeLabel, name: str) -> Mapping[str, float]:
        return self.config.crash_tables.get(label.value, {}).get(name, BASE_MARGINALS[name])

    def driver_dist(self, group: DhaGroup, name: str) -> Mapping[str, float]:
        return self.config.driver_tables.get(group.value, {}).get(name, BASE_MARGINALS[name])

    def age(self, rng: np.random.Generator, group: DhaGroup) -> int:
        if rng.random() < self.teen[group]:
            return int(TEEN_AGES[int(rng.integers(2))])
        # adults: 18 plus a gamma tail, mean age around 42
        return int(min(18 + math.floor(rng.gamma(2.2, 11.0)), 95))

    def pair(self, index: int) -> tuple[CrashRecord, CrashRecord, NarrativeLabel]:
        rng = _pair_rng(self.config.seed, index)
        label = LABEL_ORDER[int(rng.choice(len(LABEL_ORDER), p=self.class_p))]
        if label is NarrativeLabel.NHA:
            groups = [DhaGroup.NONE, DhaGroup.NONE]
        elif label is NarrativeLabel.BDTHA:
            groups = [HAZARDOUS_GROUPS[int(rng.choice(len(HAZARDOUS_GROUPS), p=self.hazard_p))]
                      for _ in range(2)]
        else:
            groups = [DhaGroup(label.value), DhaGroup.NONE]
            if rng.random() < 0.5:
                groups.reverse()
        shared = {name: self.categorical(rng, self.shared_dist(label, name)) for name in SHARED_FIELDS}
        shared["speed_limit"] = int(shared["speed_limit"])
        crash_id = f"C{self.config.seed:x}-{index:07d}"
        records = []
        for driver_index, group in enumerate(groups, start=1):
            codes, weights = self.codes[group]
            dha = codes[int(rng.choice(len(codes), p=weights))]
            records.append(CrashRecord(
                crash_id=crash_id,
                driver_index=driver_index,
                age=self.age(rng, group),
                sex=self.categorical(rng, self.driver_dist(group, "sex")),
                distracted=bool(rng.random() < self.distraction[group]),
                maneuver=self.categorical(rng, self.driver_dist(group, "maneuver")),
                vehicle=self.categorical(rng, self.driver_dist(group, "vehicle")),
                dha=dha,
                **shared,
            ))
        return records[0], records[1], label


def generate_pairs(
    config: GeneratorConfig, start: int = 0, stop: int | None = None
) -> list[tuple[CrashRecord, CrashRecord, NarrativeLabel]]:
    """Generate paired driver records with their intended narrative label.

    ``start``/``stop`` select a slice of pair indices; because every pair has
    its own random stream, concatenating slices reproduces the full output.
    """
    config.validate()
    stop = config.n_pairs if stop is None else min(stop, config.n_pairs)
    sampler = _Sampler(config)
    return [sampler.pair(i) for i in range(start, stop)]


# --------------------------------------------------------------------------
# serialisation

def records_to_csv(records: Iterable[CrashRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(RECORD_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(rec.to_row())
    return buf.getvalue()


def records_to_jsonl(records: Iterable[CrashRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)


def read_raw_csv(path: str | Path) -> Iterator[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        yield from csv.DictReader(fh)


def read_records_csv(path: str | Path) -> tuple[list[CrashRecord], list[Rejection]]:
    kept: list[CrashRecord] = []
    dropped: list[Rejection] = []
    for raw in read_raw_csv(path):
        result = filter_record(raw)
        (kept if isinstance(result, CrashRecord) else dropped).append(result)
    return kept, dropped


def rejections_to_csv(rejections: Iterable[Rejection]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["crash_id", "driver_index", "reason"])
    for rej in rejections:
        writer.writerow([rej.crash_id, rej.driver_index, rej.reason.value])
    return buf.getvalue()


def with_fields(record: CrashRecord, **changes: Any) -> CrashRecord:
    return replace(record, **changes)
