"""Samples (node set + label raster) and the on-disk dataset directory layout.

A dataset directory holds ``<name>.csv`` (or ``.jsonl``) node files, each
paired with a ``<name>.label.txt`` (or ``.label.cfg1``) label raster.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .circuit_io import gen_synthetic, load_grid, parse_nodes, save_grid, write_nodes
from .errors import ValidationError

NODE_SUFFIXES = (".csv", ".jsonl")
LABEL_SUFFIXES = (".label.txt", ".label.cfg1")


@dataclass
class Sample:
    name: str
    nodes: object  # NodeSet
    label: object  # LabelGrid


def synthetic_dataset(n_samples, seed=0, n_nodes=1000, resolution=(64, 64), n_clusters=(2, 6)):
    """``n_samples`` seeded synthetic circuits; sample ``i`` uses seed ``seed * 100003 + i``."""
    lo, hi = n_clusters
    out = []
    for i in range(n_samples):
        s = seed * 100003 + i
        clusters = lo + s % (hi - lo + 1)
        nodes, label = gen_synthetic(s, n_nodes, clusters, base_resolution=resolution)
        out.append(Sample(f"syn{i:04d}", nodes, label))
    return out


def save_dataset(directory, samples):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_nodes(directory / f"{s.name}.csv", s.nodes)
        save_grid(directory / f"{s.name}.label.txt", s.label)


def load_dataset(directory):
    """Load every node file that has a matching label file, sorted by name.

    Raises ``ValidationError`` when the directory has no complete pair.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory} is not a directory")
    samples = []
    for path in sorted(directory.iterdir()):
        if path.suffix not in NODE_SUFFIXES or path.name.endswith(LABEL_SUFFIXES):
            continue
        name = path.name[: -len(path.suffix)]
        label_path = next((directory / (name + s) for s in LABEL_SUFFIXES
                           if (directory / (name + s)).exists()), None)
        if label_path is None:
            continue
        samples.append(Sample(name, parse_nodes(path), load_grid(label_path)))
    if not samples:
        raise ValidationError(f"{directory}: no node files with matching labels")
    return samples
