"""Gaussian-splatting occupancy fields trained from 2D labels, with adjacent-frame ray compensation."""

import os

# the bundled TBB is too old for numba; the workqueue layer is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
