"""Counterfactual scenarios and median / IQR probability-shift metrics.

A scenario rewrites driver attributes on every test narrative (distraction
flags or ages) while leaving everything else untouched.  The model's
class probabilities on the perturbed set are compared to the baseline set
class by class through the relative change of the median and of the
interquartile range::

    delta_med = (med_scenario - med_baseline) / med_baseline * 100
    delta_iqr = (iqr_scenario - iqr_baseline) / iqr_baseline * 100
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np
import torch

from .labels import LABEL_ORDER, N_CLASSES, NarrativeLabel
from .narrative import TwoVehicleNarrative, render_prompt
from .tokenizer import PAD, Vocab, encode_prompt

EPSILON_GUARD = 1e-9


class StatsError(ValueError):
    pass


class ScenarioKind(str, Enum):
    SINGLE_DRIVER_DISTRACTION = "SingleDriverDistraction"
    BOTH_DRIVER_DISTRACTION = "BothDriverDistraction"
    TEEN_DRIVERS = "TeenDrivers"


@dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind
    seed: int = 0

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "seed": self.seed}


def _coin(seed: int, *parts) -> int:
    """Order-independent fair bit keyed on (seed, parts)."""
    key = ":".join(str(p) for p in (seed,) + parts).encode("utf-8")
    return hashlib.sha256(key).digest()[0] & 1


def perturb_one(n: TwoVehicleNarrative, scenario: Scenario) -> TwoVehicleNarrative:
    d1, d2 = n.drivers
    kind = ScenarioKind(scenario.kind)
    if kind is ScenarioKind.SINGLE_DRIVER_DISTRACTION:
        first = _coin(scenario.seed, n.crash_id) == 0
        return n.with_drivers(replace(d1, distracted=first), replace(d2, distracted=not first))
    if kind is ScenarioKind.BOTH_DRIVER_DISTRACTION:
        return n.with_drivers(replace(d1, distracted=True), replace(d2, distracted=True))
    ages = [16 + _coin(scenario.seed, n.crash_id, d.driver_index) for d in (d1, d2)]
    return n.with_drivers(replace(d1, age=ages[0]), replace(d2, age=ages[1]))


def perturb(narratives: Sequence[TwoVehicleNarrative], scenario: Scenario) -> list[TwoVehicleNarrative]:
    return [perturb_one(n, scenario) for n in narratives]


# -- probabilities --------------------------------------------------------

@dataclass(frozen=True)
class ProbabilitySample:
    ids: tuple[str, ...]
    probs: np.ndarray  # (n_narratives, 7), float64, NarrativeLabel column order

    def column(self, label: NarrativeLabel) -> np.ndarray:
        return self.probs[:, NarrativeLabel(label).index]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["narrative_id"] + [f"p_{lab.value}" for lab in LABEL_ORDER])
        for nid, row in zip(self.ids, self.probs):
            w.writerow([nid] + [repr(float(v)) for v in row])
        return buf.getvalue()


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), n), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return ids, torch.tensor([len(s) for s in seqs], dtype=torch.long)


def collect_probabilities(model, narratives: Sequence[TwoVehicleNarrative], vocab: Vocab,
                          batch_size: int = 128) -> ProbabilitySample:
    """Class distribution at the answer position for each narrative (prompt without target)."""
    seqs = []
    for n in narratives:
        p = render_prompt(n)
        seqs.append(encode_prompt(p.system, p.user, vocab))
    rows = []
    model.eval()
    for start in range(0, len(seqs), batch_size):
        ids, lengths = pad_batch(seqs[start:start + batch_size])
        rows.append(model.class_distribution(ids, lengths))
    probs = np.concatenate(rows) if rows else np.zeros((0, N_CLASSES))
    return ProbabilitySample(tuple(n.crash_id for n in narratives), probs)


# -- quartiles and deltas -------------------------------------------------

def quantile(sorted_values: Sequence[float], q: float) -> float:
    """Linear interpolation between closest ranks at position (n - 1) * q."""
    n = len(sorted_values)
    h = (n - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    return float(sorted_values[lo] + (h - lo) * (sorted_values[hi] - sorted_values[lo]))


@dataclass(frozen=True)
class QuartileSummary:
    median: float
    q1: float
    q3: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def quartiles(values: Sequence[float]) -> QuartileSummary:
    v = sorted(float(x) for x in values)
    if not v:
        raise StatsError("quartiles of an empty vector")
    return QuartileSummary(median=quantile(v, 0.5), q1=quantile(v, 0.25), q3=quantile(v, 0.75))


def summarize(sample: ProbabilitySample) -> tuple[QuartileSummary, ...]:
    return tuple(quartiles(sample.probs[:, k]) for k in range(N_CLASSES))


@dataclass(frozen=True)
class ShiftEntry:
    label: NarrativeLabel
    delta_med: float | None
    delta_iqr: float | None

    @property
    def defined(self) -> bool:
        return self.delta_med is not None and self.delta_iqr is not None


@dataclass(frozen=True)
class ShiftReport:
    scenario: str
    baseline: str
    entries: tuple[ShiftEntry, ...]

    def entry(self, label: NarrativeLabel) -> ShiftEntry:
        return self.entries[NarrativeLabel(label).index]


def _relative_change(new: float, old: float) -> float | None:
    if abs(old) < EPSILON_GUARD:
        return None
    return (new - old) / old * 100.0


def delta_metrics(baseline: Sequence[QuartileSummary], scenario: Sequence[QuartileSummary],
                  scenario_id: str = "scenario", baseline_id: str = "baseline") -> ShiftReport:
    if len(baseline) != N_CLASSES or len(scenario) != N_CLASSES:
        raise ValueError(f"expected {N_CLASSES} class summaries, got {len(baseline)} and {len(scenario)}")
    entries = tuple(
        ShiftEntry(label, _relative_change(s.median, b.median), _relative_change(s.iqr, b.iqr))
        for label, b, s in zip(LABEL_ORDER, baseline, scenario)
    )
    return ShiftReport(scenario_id, baseline_id, entries)


def per_narrative_shift(baseline: ProbabilitySample, scenario: ProbabilitySample) -> np.ndarray:
    """Signed probability change per narrative and class; rows sum to ~0."""
    if baseline.ids != scenario.ids:
        raise ValueError("baseline and scenario samples cover different narratives")
    return scenario.probs - baseline.probs


# -- report emission ------------------------------------------------------

def _pct(v: float | None) -> str:
    if v is None:
        return ""
    text = f"{v:.2f}"
    return "0.00" if text == "-0.00" else text


def report_to_csv(report: ShiftReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "delta_med_pct", "delta_iqr_pct", "defined"])
    for e in report.entries:
        w.writerow([e.label.value, _pct(e.delta_med), _pct(e.delta_iqr),
                    "true" if e.defined else "false"])
    return buf.getvalue()


def format_change(v: float | None) -> str:
    """Signed percent string, e.g. ``+45.89 %``; ``n/a`` when undefined."""
    return "n/a" if v is None else f"{v:+.2f} %"


def _arc_path(cx: float, cy: float, r_in: float, r_out: float, a0: float, a1: float) -> str:
    def pt(r, a):
        return f"{cx + r * math.sin(a):.3f},{cy - r * math.cos(a):.3f}"

    large = 1 if a1 - a0 > math.pi else 0
    return (f"M{pt(r_out, a0)} A{r_out:.3f},{r_out:.3f} 0 {large} 1 {pt(r_out, a1)} "
            f"L{pt(r_in, a1)} A{r_in:.3f},{r_in:.3f} 0 {large} 0 {pt(r_in, a0)} Z")


def report_to_svg(report: ShiftReport, scale_pct: float = 100.0) -> str:
    """Dual-ring chart: inner ring IQR change, outer ring median change, one sector per class.

    Each ring has a reference radius; a bar grows outward for increases and
    inward for decreases, ``band`` pixels per ``scale_pct`` percent.
    """
    cx = cy = 200.0
    band = 30.0
    rings = (("delta_iqr", 80.0, "#4c72b0"), ("delta_med", 150.0, "#dd8452"))
    sector = 2 * math.pi / N_CLASSES
    gap = sector * 0.08
    out = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="400" height="420" viewBox="0 0 400 420">',
        f'<title>{report.scenario} vs {report.baseline}</title>',
    ]
    for attr, r0, colour in rings:
        out.append(f'<circle cx="{cx}" cy="{cy}" r="{r0}" fill="none" stroke="#999" '
                   'stroke-dasharray="3,3"/>')
        for k, e in enumerate(report.entries):
            value = getattr(e, attr)
            a0, a1 = k * sector + gap, (k + 1) * sector - gap
            if value is None:
                continue
            delta = max(-band, min(band, value / scale_pct * band))
            r_in, r_out = sorted((r0, r0 + delta))
            out.append(f'<path d="{_arc_path(cx, cy, r_in, r_out, a0, a1)}" fill="{colour}" '
                       f'data-class="{e.label.value}" data-ring="{attr}" '
                       f'data-value="{value:.2f}"/>')
    for k, e in enumerate(report.entries):
        a = (k + 0.5) * sector
        x, y = cx + 190 * math.sin(a), cy - 190 * math.cos(a)
        out.append(f'<text x="{x:.1f}" y="{y:.1f}" font-size="11" text-anchor="middle">'
                   f'{e.label.value}</text>')
    out.append('<text x="200" y="412" font-size="10" text-anchor="middle">'
               'Inner: IQR change proportion; outer: median change proportion</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
