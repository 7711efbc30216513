"""Train the view classifier on phantoms and evaluate it.

Defaults are sized for a few minutes on one CPU core; pass a larger epoch
count as the first argument for a longer run.

    python notebooks/02_train_and_evaluate.py [epochs]
"""
import logging
import sys
from pathlib import Path

import numpy as np

from echoview.data import normalize, split_dataset
from echoview.evaluation import binomial_majority_error, evaluate_stills, evaluate_videos, topk_and_confidence
from echoview.model import build_model, save_weights
from echoview.phantoms import generate_phantoms
from echoview.training import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 2
out = Path("notebook_out")
out.mkdir(exist_ok=True)

# %% 20 studies x 10 frames gives 200 images per class.
ds = normalize(split_dataset(generate_phantoms(seed=0, studies=20, frames_per_clip=10, jitter=0.5), seed=0))
print(ds.manifest.counts())

# %% RMSprop, lr 1e-3 decayed by 0.95 per epoch, best validation epoch kept.
model, log = train(build_model(15, seed=0), ds.split("train"), ds.split("val"), TrainConfig(epochs=epochs))
log.to_csv(out / "convergence.csv")
save_weights(model, out / "model.echv")
print("selected epoch", log.epochs[log.selected].epoch, "val acc", log.best_val_acc)

# %% Still-image report on the held-out studies.
test = ds.split("test")
rep = evaluate_stills(model, test)
rep.write(out / "eval")
print(f"still accuracy {rep.overall_accuracy:.3f}, mean F {rep.f_mean:.3f}, top-2 {rep.top2:.3f}")

topk = topk_and_confidence(model, test)
print("second guess right for", f"{topk.second_guess_recovery:.2f}", "of top-1 misses")

# %% Voting over the frames of a clip.
vid = evaluate_videos(model, test)
print(f"clip accuracy {vid.overall_accuracy:.3f} over {vid.extra['n_clips']} clips")
for n in (1, 3, 5, 11):
    print(f"  per-frame error 0.1, {n:2d} frames -> majority wrong with p = {binomial_majority_error(0.1, n):.2e}")
