"""Synthetic infrared/visible pairs for smoke tests and toy runs.

The infrared image is a bright Gaussian blob on a dark background; the
visible image is a high-frequency sinusoidal texture.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class ToyPair:
    identifier: str
    ir: np.ndarray
    vis: np.ndarray
    blob: np.ndarray  # boolean mask where the blob exceeds half its peak


def toy_pair(rng: np.random.Generator, size: int = 64, identifier: str = "toy") -> ToyPair:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
    radius = rng.uniform(0.08, 0.15) * size
    bump = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * radius ** 2))
    ir = 25.0 + 205.0 * bump

    vis = np.full((size, size), 110.0)
    for _ in range(2):
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        vis += 35.0 * np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period + phase)

    to8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)  # noqa: E731
    return ToyPair(identifier, to8(ir), to8(vis), bump > 0.5)


def toy_pairs(n: int = 64, size: int = 64, seed: int = 0) -> list[ToyPair]:
    rng = np.random.default_rng(seed)
    return [toy_pair(rng, size, f"toy{i:03d}") for i in range(n)]


def write_toy_dataset(directory, n: int = 64, size: int = 64, seed: int = 0) -> list[ToyPair]:
    """Write ``<id>_ir.png`` / ``<id>_vis.png`` files and return the pairs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = toy_pairs(n, size, seed)
    for p in pairs:
        Image.fromarray(p.ir).save(directory / f"{p.identifier}_ir.png")
        Image.fromarray(p.vis).save(directory / f"{p.identifier}_vis.png")
    return pairs
