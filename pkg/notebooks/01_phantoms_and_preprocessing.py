"""Phantom echo views and the preprocessing pipeline.

Walks through the synthetic view generator, study-level splitting,
normalization, augmentation and raster ingestion. Writes a few PGM
previews into ./notebook_out/.

    python notebooks/01_phantoms_and_preprocessing.py
"""
from pathlib import Path

import numpy as np

from echoview.data import (AugmentParams, augment, ingest_frame, leakage, normalize, split_dataset,
                           write_pgm)
from echoview.phantoms import box_mask, generate_phantoms, template
from echoview.views import ALL_VIEWS

out = Path("notebook_out")
out.mkdir(exist_ok=True)

# %% One template per view. Each view is a fixed arrangement of chambers and
# bright walls inside a 24x32 box; everything outside is haze and speckle.
for view in ALL_VIEWS:
    write_pgm(out / f"template_{view.value}.pgm", template(view))
print("templates written for", len(ALL_VIEWS), "views")

# %% A small dataset: 6 studies, 3 frames per clip.
ds = generate_phantoms(seed=0, studies=6, frames_per_clip=3)
print(len(ds), "images;", np.bincount(ds.labels), "per class")
rec = ds.records[0]
print("first record:", rec)
print("signal box covers", f"{box_mask(rec.signal_box).mean():.1%}", "of the frame")

# %% Splits are drawn per study so that no patient lands in two splits.
ds = split_dataset(ds, seed=0)
print("split counts", ds.manifest.counts(), "leakage", leakage(ds.manifest))

# %% Normalization subtracts the per-pixel mean of the training split.
norm = normalize(ds)
print("max |training mean| after normalization:", float(np.abs(norm.split("train").images.mean(axis=0)).max()))

# %% Augmentation works in the raw [0, 1] domain.
rng = np.random.default_rng(1)
img = ds.images[0]
for k in range(4):
    write_pgm(out / f"augmented_{k}.pgm", augment(img, AugmentParams(), rng))

# %% Ingestion: a 300x400 8-bit frame with a burned-in label strip.
frame = np.random.default_rng(2).integers(0, 256, (300, 400), dtype=np.uint8)
small = ingest_frame(frame, mask=[(0, 0, 20, 400)])
print("ingested", frame.shape, "->", small.shape, f"({frame.size // small.size}x fewer pixels)")
