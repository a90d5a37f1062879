"""Two-vehicle narratives: pairing, labelling, prompt rendering and splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .crashdata import CrashRecord, format_value, recode_dha
from .labels import LABEL_ORDER, DhaGroup, NarrativeLabel

__all__ = [
    "NarrativeLabel", "TwoVehicleNarrative", "PromptTriple", "SplitManifest", "PairingError",
    "derive_label", "pair_records", "render_prompt", "split", "SYSTEM_PROMPT",
]

SYSTEM_PROMPT = (
    "You are a traffic crash analyst. Read the two-vehicle crash description and answer "
    "with exactly one class token: " + " ".join(lab.token for lab in LABEL_ORDER) + "."
)

# (prompt key, record attribute) per rendered line
_CRASH_LINE = (("type", "crash_type"), ("month", "month"), ("weekday", "weekday"),
               ("hour", "hour"), ("intersection", "intersection"), ("hit_and_run", "hit_and_run"))
_DRIVER_LINE = (("age", "age"), ("sex", "sex"), ("distracted", "distracted"),
                ("maneuver", "maneuver"), ("vehicle", "vehicle"))
_ROAD_LINE = (("speed_limit", "speed_limit"), ("condition", "road_condition"), ("lanes", "lanes"),
              ("trafficway", "trafficway"), ("surface", "surface"))
_ENV_LINE = (("weather", "weather"), ("lighting", "lighting"))


class PairingError(ValueError):
    pass


def derive_label(g1: DhaGroup, g2: DhaGroup) -> NarrativeLabel:
    g1, g2 = DhaGroup(g1), DhaGroup(g2)
    if g1.hazardous and g2.hazardous:
        return NarrativeLabel.BDTHA
    if g1.hazardous:
        return NarrativeLabel(g1.value)
    if g2.hazardous:
        return NarrativeLabel(g2.value)
    return NarrativeLabel.NHA


@dataclass(frozen=True)
class TwoVehicleNarrative:
    crash_id: str
    drivers: tuple[CrashRecord, CrashRecord]
    label: NarrativeLabel

    @property
    def hazardous_driver_index(self) -> int | str:
        flags = [d.group.hazardous for d in self.drivers]
        if all(flags):
            return "both"
        if not any(flags):
            return "none"
        return 1 if flags[0] else 2

    @property
    def context(self) -> CrashRecord:
        return self.drivers[0]

    def with_drivers(self, d1: CrashRecord, d2: CrashRecord) -> "TwoVehicleNarrative":
        return TwoVehicleNarrative(self.crash_id, (d1, d2), self.label)


def pair_records(r1: CrashRecord, r2: CrashRecord) -> TwoVehicleNarrative:
    if r1.crash_id != r2.crash_id:
        raise PairingError(f"crash ids differ: {r1.crash_id!r} vs {r2.crash_id!r}")
    if {r1.driver_index, r2.driver_index} != {1, 2}:
        raise PairingError(
            f"crash {r1.crash_id}: driver indices must be 1 and 2, "
            f"got {r1.driver_index} and {r2.driver_index}")
    if r1.shared_context() != r2.shared_context():
        raise PairingError(f"crash {r1.crash_id}: driver rows disagree on shared crash fields")
    d1, d2 = sorted((r1, r2), key=lambda r: r.driver_index)
    label = derive_label(recode_dha(d1.dha), recode_dha(d2.dha))
    return TwoVehicleNarrative(d1.crash_id, (d1, d2), label)


@dataclass(frozen=True)
class PromptTriple:
    system: str
    user: str
    assistant_target: str


def escape_value(text: str) -> str:
    return (text.replace("\\", "\\\\").replace(";", "\\;").replace("=", "\\=")
            .replace("\n", "\\n"))


def _line(head: str, record: CrashRecord, keys) -> str:
    parts = [f"{key}={escape_value(format_value(attr, getattr(record, attr)))}"
             for key, attr in keys]
    return f"{head}: " + "; ".join(parts)


def render_user(n: TwoVehicleNarrative) -> str:
    ctx = n.context
    return "\n".join([
        _line("CRASH", ctx, _CRASH_LINE),
        _line("DRIVER1", n.drivers[0], _DRIVER_LINE),
        _line("DRIVER2", n.drivers[1], _DRIVER_LINE),
        _line("ROAD", ctx, _ROAD_LINE),
        _line("ENV", ctx, _ENV_LINE),
    ])


def render_prompt(n: TwoVehicleNarrative) -> PromptTriple:
    return PromptTriple(SYSTEM_PROMPT, render_user(n), n.label.token)


def format_prompt(triple: PromptTriple) -> str:
    """Plain-text rendering of a triple, as stored in golden files and prompt dumps."""
    return f"system: {triple.system}\nuser: {triple.user}\nassistant: {triple.assistant_target}\n"


@dataclass(frozen=True)
class SplitManifest:
    seed: int
    train: tuple
    eval: tuple
    test: tuple

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": list(self.train), "eval": list(self.eval),
                "test": list(self.test)}

    @classmethod
    def from_json(cls, data: dict) -> "SplitManifest":
        return cls(int(data["seed"]), tuple(data["train"]), tuple(data["eval"]),
                   tuple(data["test"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def split_sizes(n: int) -> tuple[int, int, int]:
    # integer arithmetic so e.g. 0.70 * n never rounds below an exact product
    train = n * 70 // 100
    evaluation = n * 15 // 100
    return train, evaluation, n - train - evaluation


def split(ids: Sequence[Hashable], seed: int) -> SplitManifest:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("split ids must be distinct")
    n_train, n_eval, _ = split_sizes(len(ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitManifest(seed, tuple(shuffled[:n_train]),
                         tuple(shuffled[n_train:n_train + n_eval]),
                         tuple(shuffled[n_train + n_eval:]))


def narratives_from_records(records: Sequence[CrashRecord]) -> tuple[list[TwoVehicleNarrative], list[str]]:
    """Group rows by crash id and pair them; returns (narratives, unpaired crash ids)."""
    by_id: dict[str, list[CrashRecord]] = {}
    for rec in records:
        by_id.setdefault(rec.crash_id, []).append(rec)
    narratives, unpaired = [], []
    for crash_id, rows in by_id.items():
        if len(rows) != 2:
            unpaired.append(crash_id)
            continue
        narratives.append(pair_records(*rows))
    return narratives, unpaired


def label_frequencies(narratives: Sequence[TwoVehicleNarrative]) -> dict[str, int]:
    counts = {lab.value: 0 for lab in LABEL_ORDER}
    for n in narratives:
        counts[n.label.value] += 1
    return counts

