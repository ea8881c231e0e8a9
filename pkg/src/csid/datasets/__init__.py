"""Small synthetic tables shipped with the package."""

from __future__ import annotations

from importlib import resources

import numpy as np

BUNDLED = {"sign_product": ("sign_product.csv", "sign_product.schema")}


def sign_table(kind: str, modes: int, fraction: float = 1.0, seed=0):
    """Rows of ``{-1, +1}^modes`` and their product (or sum) of signs.

    ``fraction`` of the grid cells is drawn without replacement; the rows come
    back in grid order.
    """
    if kind not in ("sign-product", "sign-sum"):
        raise ValueError(f"unknown table {kind!r}")
    total = 2**modes
    count = max(1, int(round(fraction * total)))
    cells = np.sort(np.random.default_rng(seed).choice(total, size=count, replace=False))
    bits = (cells[:, None] >> np.arange(modes - 1, -1, -1)) & 1
    x = 2 * bits - 1
    y = np.prod(x, axis=1) if kind == "sign-product" else np.sum(x, axis=1)
    return x, y.astype(float)


def bundled(name: str = "sign_product"):
    """Paths ``(csv, schema)`` of a bundled table."""
    csv_name, schema_name = BUNDLED[name]
    root = resources.files(__name__)
    return root / csv_name, root / schema_name
