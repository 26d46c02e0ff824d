"""Independently coded reference implementations used as test oracles.

Deliberately naive: per-pixel Python loops and lists, no vectorisation,
no shared helpers with the package. A bug in the production code is
unlikely to be reproduced by accident here.
"""

from __future__ import annotations

import math


def naive_clahe(image, clip_limit=1.0, tiles_x=8, tiles_y=8, bins=256):
    """Reference CLAHE mirroring the pinned contract, scalar style.

    ``image`` is any 2-D sequence of ints in [0, 255]; returns a list of
    lists of ints. Contract: edge-replication pad on the right/bottom to
    a multiple of the tile grid; per-tile histogram clipped at
    max(1, floor(clip_limit * area / bins)) with the excess spread
    uniformly (remainder one count per bin starting at bin 0); LUT is
    the CDF scaled to [0, 255] rounded half-up; output bilinearly
    interpolates the four nearest tile-centre LUTs with the fraction
    clamped to zero outside the centre span.
    """
    h = len(image)
    w = len(image[0])
    th = math.ceil(h / tiles_y)
    tw = math.ceil(w / tiles_x)

    def px(y, x):
        return int(image[min(y, h - 1)][min(x, w - 1)])

    area = th * tw
    clip = max(1, int(clip_limit * area / bins))

    luts = [[None] * tiles_x for _ in range(tiles_y)]
    for ti in range(tiles_y):
        for tj in range(tiles_x):
            hist = [0] * bins
            for y in range(ti * th, (ti + 1) * th):
                for x in range(tj * tw, (tj + 1) * tw):
                    hist[px(y, x)] += 1
            excess = sum(c - clip for c in hist if c > clip)
            hist = [min(c, clip) for c in hist]
            for b in range(bins):
                hist[b] += excess // bins
            for b in range(excess % bins):
                hist[b] += 1
            lut = []
            running = 0
            for b in range(bins):
                running += hist[b]
                lut.append(int(math.floor(running * 255.0 / area + 0.5)))
            luts[ti][tj] = lut

    out = [[0] * w for _ in range(h)]
    for y in range(h):
        ty = (y + 0.5) / th - 0.5
        ly = math.floor(ty)
        fy = ty - ly
        if ly < 0 or ly >= tiles_y - 1:
            fy = 0.0
        y0 = min(max(ly, 0), tiles_y - 1)
        y1 = min(max(ly + 1, 0), tiles_y - 1)
        for x in range(w):
            tx = (x + 0.5) / tw - 0.5
            lx = math.floor(tx)
            fx = tx - lx
            if lx < 0 or lx >= tiles_x - 1:
                fx = 0.0
            x0 = min(max(lx, 0), tiles_x - 1)
            x1 = min(max(lx + 1, 0), tiles_x - 1)
            v = int(image[y][x])
            top = luts[y0][x0][v] * (1 - fx) + luts[y0][x1][v] * fx
            bottom = luts[y1][x0][v] * (1 - fx) + luts[y1][x1][v] * fx
            blended = top * (1 - fy) + bottom * fy
            out[y][x] = int(min(max(math.floor(blended + 0.5), 0), 255))
    return out
