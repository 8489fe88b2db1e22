"""Calibrated dimensional constants for the maximal-function estimates.

The weak-type, L log L, and two-point difference constants of the local
maximal operator are not explicit; they are calibrated empirically per
dimension on frozen random catalogs and frozen here at 1.5x the observed
maximum. C_D must serve two roles (superlevel-set bound and pointwise
difference bound); the pointwise role dominates empirically, so C_D is 1.5x
the larger of the two observed maxima. C_LOG is the separate L log L ratio
(integral of the maximal function over a ball divided by ball volume plus
the L log L mass over the inflated ball).

Provenance (rerun via `roughflow calibrate`, which reports stability
against these values):
  d=2: 20 piecewise-constant + 20 kinked-Lipschitz functions, 129^2 grid on
       the box of radius 2, query ball 1, maximal radius 1, 16 radii;
       seeds 2024 (primary) / 7777 (disjoint check).
       observed: weak-type 0.294 / 0.234, pointwise 0.7052 / 0.7047,
       LlogL 0.320 / 0.328.
  d=1: same catalogs on a 513-node grid; observed weak-type 0.695 / 0.647,
       pointwise 1.118 / 0.932, LlogL 0.507 / 0.565.

The overlap ratio is exact geometry: the volume of a ball divided by the
volume of its intersection with an equal ball centered one radius away.
"""

import math

# weak-type / pointwise-difference constant per dimension (1.5x observed max)
C_D = {
    1: 1.68,
    2: 1.06,
}

# L log L constant per dimension (1.5x observed max)
C_LOG = {
    1: 0.76,
    2: 0.48,
}


def overlap_ratio(d: int) -> float:
    """vol(B(r)) / vol(B(x,r) cap B(y,r)) at |x-y| = r; dimension-only."""
    if d == 1:
        return 2.0
    if d == 2:
        # lens area of two unit disks with centers one radius apart
        lens = 2.0 * math.pi / 3.0 - math.sqrt(3.0) / 2.0
        return math.pi / lens
    raise NotImplementedError("overlap ratio tabulated for d <= 2")


C_TILDE = {1: overlap_ratio(1), 2: overlap_ratio(2)}
