"""
Learning to count groups
========================

Graphs made of 1 to 4 dense groups are labelled with their group count.
A small model is trained for a few epochs, then the effective number of
clusters in its learned grouping matrices is inspected.

The settings here are reduced so the script finishes in about a minute;
``tests/test_acceptance.py`` runs the full-size version.
"""

# %%
import numpy as np

from gmpool.analysis import cluster_report, histogram
from gmpool.graph_data import SyntheticSpec, generate_synthetic
from gmpool.model import ModelConfig
from gmpool.training import TrainConfig, train

data = generate_synthetic(SyntheticSpec(group_count=4, min_group_count=1, count=100, seed=7, feature_noise=0.0))
print(len(data), "graphs; labels:", np.bincount(data.labels.astype(int)))

# %%
# One fold, a narrow encoder, fifty epochs.
cfg = TrainConfig(lr=1e-4, epochs=50, fold_limit=1, model=ModelConfig(hidden=16))
fold = train(data, cfg).folds[0]
trace = fold.trace
print(f"train MSE: epoch 0 {trace[0]['train_loss']:.3f}, last {trace[-1]['train_loss']:.3f}")
print("best epoch by validation loss:", fold.best_epoch, "validation RMSE:", fold.valid_metric)

# %%
# How many clusters does the model see in fresh three-group graphs?
probe = generate_synthetic(SyntheticSpec(group_count=3, count=30, seed=11, feature_noise=0.0))
hist = histogram(probe, fold.model, [0.5, 1.0])
for t in hist.thresholds:
    print(f"threshold {t}: counts {hist.bins[t]}, mode {hist.mode(t)}")

# %%
# The same numbers relative to graph size.
report = cluster_report(probe, fold.model, [1.0])
print("mean nodes per graph:", report["mean_nodes"])
print("clusters per node at threshold 1:", round(report["thresholds"]["1"]["ratio_to_mean_nodes"], 3))
