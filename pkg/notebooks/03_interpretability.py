"""Occlusion, saliency and t-SNE on a trained phantom model.

Expects notebook_out/model.echv from 02_train_and_evaluate.py.

    python notebooks/03_interpretability.py
"""
from pathlib import Path

import numpy as np

from echoview.data import normalize, split_dataset
from echoview.interpretability import (OcclusionSpec, extract_features, guided_backprop_saliency, knn_purity,
                                       occlusion_experiment, tsne, write_embedding)
from echoview.model import load_weights
from echoview.phantoms import box_mask, generate_phantoms

out = Path("notebook_out")
model = load_weights(out / "model.echv")
ds = normalize(split_dataset(generate_phantoms(seed=0, studies=20, frames_per_clip=10, jitter=0.5), seed=0))
test = ds.split("test")

# %% Masking the heart region hurts far more than masking a corner.
res = occlusion_experiment(model, test, OcclusionSpec.default())
res.to_csv(out / "occlusion.csv")
for name, acc in res.accuracy.items():
    print(f"{name:20s} {acc:.3f} ({res.delta(name):+.3f})")

# %% Guided backprop: where does the gradient mass sit?
fractions = []
for i in range(0, len(test), 15):
    s = guided_backprop_saliency(model, test.images[i], int(test.labels[i]))
    fractions.append(s.mass_fraction(box_mask(test.records[i].signal_box)))
    if i < 60:
        s.save(out / f"saliency_{i:03d}.pgm")
print("median saliency mass inside the signal box:", f"{np.median(fractions):.2f}")

# %% t-SNE of raw pixels vs last hidden layer.
idx = np.random.default_rng(0).choice(len(ds), 300, replace=False)
sub = ds.take(np.sort(idx))
labels = [r.view_label for r in sub.records]
for name, x in (("pixels", sub.raw_images().reshape(len(sub), -1)), ("features", extract_features(model, sub.images))):
    emb = tsne(x, perplexity=30, iterations=500, seed=0).embedding
    write_embedding(out / f"tsne_{name}.csv", emb, labels, [str(i) for i in idx])
    print(name, "5-NN purity", f"{knn_purity(emb, sub.labels, 5):.3f}")
