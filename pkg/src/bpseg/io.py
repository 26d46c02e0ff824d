"""Dataset directory ingest and emission.

Layout: ``<root>/<DEVICE>/<id>/`` holding ``image.png``,
``consensus.png``, optional ``rater_<x>.png`` / ``rater_<x>_second.png``
and optional ``annotation.json`` (a list of labeled polygons; labels
beginning with "BP" are trunk outlines). Masks on disk may use 0/255 or
0/1 encoding; both normalize to {0,1} on load. When ``consensus.png``
is absent the consensus is rasterized from the annotation polygons.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .data_model import AnnotatedSample, Device
from .preprocess import rasterize_polygons

_RATER_RE = re.compile(r"^rater_(?P<rater>.+?)(?P<second>_second)?\.png$")


def load_gray(path) -> np.ndarray:
    """Load a PNG as 8-bit grayscale (color inputs go through luminance)."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def load_mask(path) -> np.ndarray:
    """Load a mask PNG, normalizing foreground 255 (or 1) to 1."""
    raw = load_gray(path)
    values = set(np.unique(raw).tolist())
    if not values <= {0, 1, 255}:
        raise ValueError(f"{path}: mask values {sorted(values)} are not binary")
    return (raw > 0).astype(np.uint8)


def save_gray(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(path)


def save_mask(path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as a 0/255 PNG (viewable in any image tool)."""
    save_gray(path, np.asarray(mask, dtype=np.uint8) * 255)


def save_rgb(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def trunk_polygons(annotation_path) -> list[list[tuple[float, float]]]:
    """Extract trunk polygons (labels starting with "BP") from a
    Labelme-style annotation file."""
    entries = json.loads(Path(annotation_path).read_text(encoding="utf-8"))
    polys = []
    for entry in entries:
        if str(entry["label"]).startswith("BP"):
            polys.append([(float(x), float(y)) for x, y in entry["points"]])
    return polys


def write_sample(root, sample: AnnotatedSample) -> Path:
    """Write one sample into the dataset layout; returns its directory."""
    sample_dir = Path(root) / sample.device.value / sample.id
    sample_dir.mkdir(parents=True, exist_ok=True)
    save_gray(sample_dir / "image.png", sample.image)
    save_mask(sample_dir / "consensus.png", sample.consensus)
    for rater, mask in sample.rater_masks.items():
        save_mask(sample_dir / f"rater_{rater}.png", mask)
    for rater, mask in sample.second_pass_masks.items():
        save_mask(sample_dir / f"rater_{rater}_second.png", mask)
    return sample_dir


def load_sample(sample_dir) -> AnnotatedSample:
    sample_dir = Path(sample_dir)
    device = Device(sample_dir.parent.name)
    image = load_gray(sample_dir / "image.png")

    consensus_path = sample_dir / "consensus.png"
    if consensus_path.exists():
        consensus = load_mask(consensus_path)
    else:
        polys = trunk_polygons(sample_dir / "annotation.json")
        consensus = rasterize_polygons(polys, image.shape[1], image.shape[0])

    raters: dict[str, np.ndarray] = {}
    seconds: dict[str, np.ndarray] = {}
    for path in sorted(sample_dir.glob("rater_*.png")):
        m = _RATER_RE.match(path.name)
        if m is None:
            continue
        target = seconds if m.group("second") else raters
        target[m.group("rater")] = load_mask(path)

    return AnnotatedSample(
        id=sample_dir.name,
        device=device,
        image=image,
        consensus=consensus,
        rater_masks=raters,
        second_pass_masks=seconds,
    )


def load_dataset(root, devices=None) -> list[AnnotatedSample]:
    """Load every sample under the root, sorted by id; ids must be
    unique across device directories."""
    root = Path(root)
    wanted = None if devices is None else {Device(d) for d in devices}
    samples = []
    for device_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        device = Device(device_dir.name)
        if wanted is not None and device not in wanted:
            continue
        for sample_dir in sorted(p for p in device_dir.iterdir() if p.is_dir()):
            samples.append(load_sample(sample_dir))
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate sample ids across devices: {dupes}")
    samples.sort(key=lambda s: s.id)
    return samples
