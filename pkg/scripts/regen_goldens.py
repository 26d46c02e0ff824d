#!/usr/bin/env python3
"""Regenerate the committed test fixtures under tests/fixtures/.

Reruns must be byte-identical to what is in the repository; a drift
means either an intended contract change (commit the new goldens and
say why) or a regression (fix the code). The enhancement golden is
produced by the naive per-pixel reference in tests/_reference.py, NOT
by the production code, so the comparison stays two-sided.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "tests"))

from _reference import naive_clahe  # noqa: E402
from conftest import small_phantom_config  # noqa: E402

from bpseg.experiments import render_overlay  # noqa: E402
from bpseg.io import load_gray, save_gray, save_rgb  # noqa: E402
from bpseg.synthetic import generate_phantom_dataset  # noqa: E402

FIXTURES = REPO / "tests" / "fixtures"


def clahe_pair() -> None:
    rng = np.random.default_rng(7)
    yy, xx = np.mgrid[0:75, 0:90]
    base = 40.0 + 50.0 * np.exp(-(((yy - 30) / 18.0) ** 2 + ((xx - 55) / 25.0) ** 2))
    speckle = rng.rayleigh(scale=np.sqrt(2.0 / np.pi), size=base.shape)
    image = np.clip(np.floor(base * speckle + 0.5), 0, 255).astype(np.uint8)
    save_gray(FIXTURES / "clahe_input.png", image)
    golden = np.array(naive_clahe(image), dtype=np.uint8)
    save_gray(FIXTURES / "clahe_golden.png", golden)
    print("clahe_input.png / clahe_golden.png")


def overlay_golden() -> None:
    sample = generate_phantom_dataset(small_phantom_config())[0]
    pred = np.roll(sample.consensus, 2, axis=1)
    save_rgb(FIXTURES / "overlay_golden.png", render_overlay(sample.image, pred, sample.consensus))
    print("overlay_golden.png")


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    before = {
        p.name: p.read_bytes() for p in sorted(FIXTURES.glob("*.png")) if p.exists()
    }
    clahe_pair()
    overlay_golden()
    changed = [
        p.name
        for p in sorted(FIXTURES.glob("*.png"))
        if before.get(p.name) not in (None, p.read_bytes())
    ]
    if changed:
        print(f"CHANGED: {', '.join(changed)}", file=sys.stderr)
        return 1
    print("all fixtures byte-identical")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
