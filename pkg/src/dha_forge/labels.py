"""Label enumerations shared by the record and narrative layers.

``DhaCode`` holds the fifteen UD-10 hazardous-action levels kept after
filtering, ``DhaGroup`` the six recoded driver-level groups, and
``NarrativeLabel`` the seven crash-level classes.  The order of
``NarrativeLabel`` is the vector order used everywhere downstream
(probability columns, confusion-matrix rows, class-token ids).
"""

from __future__ import annotations

from enum import Enum


class DhaCode(str, Enum):
    UNABLE_TO_STOP = "Unable to Stop in Assured Clear Distance"
    SPEED_TOO_FAST = "Speed Too Fast"
    SPEED_TOO_SLOW = "Speed Too Slow"
    FAILED_TO_YIELD = "Failed to Yield"
    DISREGARD_TRAFFIC_CONTROL = "Disregard Traffic Control"
    IMPROPER_LANE_USE = "Improper Lane Use"
    DROVE_LEFT_OF_CENTER = "Drove Left of Center"
    IMPROPER_PASSING = "Improper Passing"
    DROVE_WRONG_WAY = "Drove Wrong Way"
    IMPROPER_TURN = "Improper Turn"
    IMPROPER_BACKING = "Improper Backing"
    IMPROPER_NO_SIGNAL = "Improper/No Signal"
    CARELESS_NEGLIGENT = "Careless/Negligent Driving"
    RECKLESS = "Reckless Driving"
    NONE = "None"

    @classmethod
    def parse(cls, text: str) -> "DhaCode":
        """Strict lookup by the UD-10 label text; unknown strings raise ``ValueError``."""
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown DHA code: {text!r}") from None


class DhaGroup(str, Enum):
    SSV = "SSV"
    RWTCV = "RWTCV"
    LDV = "LDV"
    MSE = "MSE"
    GUD = "GUD"
    NONE = "None"

    @property
    def hazardous(self) -> bool:
        return self is not DhaGroup.NONE


class NarrativeLabel(str, Enum):
    SSV = "SSV"
    RWTCV = "RWTCV"
    LDV = "LDV"
    MSE = "MSE"
    GUD = "GUD"
    NHA = "NHA"
    BDTHA = "BDTHA"

    @property
    def index(self) -> int:
        return LABEL_ORDER.index(self)

    @property
    def token(self) -> str:
        return f"<{self.value}>"


LABEL_ORDER: tuple[NarrativeLabel, ...] = tuple(NarrativeLabel)
N_CLASSES = len(LABEL_ORDER)
HAZARDOUS_GROUPS: tuple[DhaGroup, ...] = tuple(g for g in DhaGroup if g.hazardous)
