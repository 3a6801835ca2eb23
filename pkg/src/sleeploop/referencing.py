"""Referencing schemes that turn CMS-referenced channels into derivations."""

from __future__ import annotations

from enum import Enum
from typing import Mapping

import numpy as np

from .core import EXG_CHANNELS, EpochView
from .errors import MissingChannel, ValidationError

LEFT = ("FH_L", "OTE_L", "BE_L")
RIGHT = ("FH_R", "OTE_R", "BE_R")


class ReferencingScheme(Enum):
    DYNAMIC = "dynamic"
    CONTRALATERAL_BE = "contralateral"
    CMS_ONLY = "cms"

    @classmethod
    def parse(cls, value) -> "ReferencingScheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown referencing scheme {value!r}") from None


def _opposite_be(name: str) -> str:
    return "BE_R" if name.endswith("_L") else "BE_L"


def derivation_plan(mask: Mapping[str, bool], scheme) -> list[tuple[str, str, str | None]]:
    """(derivation name, source, reference) triples; reference None means CMS.

    Output order follows :data:`EXG_CHANNELS`.
    """
    scheme = ReferencingScheme.parse(scheme)
    missing = [c for c in EXG_CHANNELS if c not in mask]
    if missing:
        raise MissingChannel(f"mask lacks channels {missing}")
    plan = []
    for c in EXG_CHANNELS:
        if not mask[c]:
            continue
        ref = _opposite_be(c)
        if scheme is ReferencingScheme.CMS_ONLY:
            plan.append((f"{c}-CMS", c, None))
        elif scheme is ReferencingScheme.CONTRALATERAL_BE:
            if mask[ref]:
                plan.append((f"{c}-{ref}", c, ref))
        else:  # dynamic: a scorable opposite BE becomes the reference
            if mask[ref]:
                plan.append((f"{c}-{ref}", c, ref))
            else:
                plan.append((f"{c}-CMS", c, None))
    return plan


def apply_scheme(channels: EpochView | Mapping[str, np.ndarray], mask: Mapping[str, bool],
                 scheme) -> dict[str, np.ndarray]:
    """Referenced derivation series keyed by names like ``"FH_R-BE_L"``."""
    if isinstance(channels, EpochView):
        channels = channels.channels()
    missing = [c for c in EXG_CHANNELS if c not in channels]
    if missing:
        raise MissingChannel(f"epoch lacks channels {missing}")
    out = {}
    for name, src, ref in derivation_plan(mask, scheme):
        x = np.asarray(channels[src], dtype=float)
        out[name] = x if ref is None else x - np.asarray(channels[ref], dtype=float)
    return out
