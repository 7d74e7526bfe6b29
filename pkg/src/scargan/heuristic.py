"""Initial intensity-level scar simulation: paint the simulated shape with a
low-percentile blood-pool intensity.

Scar tissue is hyperintense like the LV blood pool, so a value near the dim
end of the blood-pool distribution is a credible first approximation. The
painted region is deliberately uniform; adding texture is the refiner's job.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class HeuristicParams:
    """Nearest-rank percentile of the LV endo intensities used as paint value."""

    percentile: float = 0.10

    def validate(self) -> None:
        if not 0.0 < self.percentile < 1.0:
            raise ValueError(f"percentile must lie strictly in (0, 1), got {self.percentile}")


def nearest_rank(values: np.ndarray, percentile: float) -> int | float:
    """Nearest-rank percentile: the ceil(p*n)-th smallest element.

    Exact rational arithmetic for the rank so that float noise in ``p*n``
    cannot push the rank across an integer boundary.
    """
    values = np.sort(np.asarray(values).ravel())
    n = values.size
    if n == 0:
        raise ValueError("cannot take a percentile of an empty set")
    p = Fraction(percentile).limit_denominator(10**9)
    rank = max(1, math.ceil(p * n))
    return values[rank - 1]


def paint_scar(
    image: np.ndarray,
    scar_mask: np.ndarray,
    lv_endo_mask: np.ndarray,
    params: HeuristicParams | None = None,
) -> np.ndarray:
    """Replace scar pixels with the low-percentile LV endo intensity.

    Pixels outside ``scar_mask`` are returned bit-identical; the painted
    region is constant and its value is a member of the LV endo multiset.
    """
    params = params or HeuristicParams()
    params.validate()
    image = np.asarray(image)
    scar_mask = np.asarray(scar_mask, dtype=bool)
    lv_endo_mask = np.asarray(lv_endo_mask, dtype=bool)
    if image.shape != scar_mask.shape or image.shape != lv_endo_mask.shape:
        raise ValueError("image and masks must share dimensions")
    out = image.copy()
    if not scar_mask.any():
        return out
    if not lv_endo_mask.any():
        raise ValueError("no LV endo pixels to take the reference intensity from")
    out[scar_mask] = nearest_rank(image[lv_endo_mask], params.percentile)
    return out
