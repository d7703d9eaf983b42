"""
The numeric building blocks on toy data
=======================================

Four small experiments, each a few lines: an autoencoder recovering a
linear manifold, k-means with silhouette and bootstrap stability, the
earth mover's distance between cluster signatures, and why a greedy tree
fails on XOR.
"""

import numpy as np

from darkscope.autoencoder import MlpConfig, embed, train
from darkscope.changedetect import Signature, emd
from darkscope.clustering import StabilityConfig, k_sweep, kmeans, silhouette, stability
from darkscope.trees import fit_tree_exact, fit_tree_greedy

rng = np.random.default_rng(0)

# %%
# 1. 20-dimensional points that really live on a 3-dimensional plane.
X = rng.normal(size=(1000, 3)) @ rng.normal(size=(3, 20))
model, report = train(X, MlpConfig(input_dim=20, latent_dim=3, seed=0))
print("autoencoder: validation loss %.4f -> %.6f after %d epochs"
      % (report.initial_val_loss, report.val_loss[-1], len(report.val_loss)))
print("latent shape", embed(model, X).shape)

# %%
# 2. Four well separated groups: the knee of the inertia curve finds them,
#    and bootstrap stability is high; uniform noise is less stable.
centres = np.array([[0, 0], [12, 0], [0, 12], [12, 12]])
P = np.vstack([c + rng.normal(size=(250, 2)) for c in centres])
truth = np.repeat(np.arange(4), 250)
rows, knee = k_sweep(P, [2, 3, 4, 5, 6, 7], truth, seed=1)
for r in rows:
    print(f"k={r['k']}  inertia={r['inertia']:9.1f}  silhouette={r['silhouette']:.3f}  jaccard={r['jaccard']:.3f}")
print("knee at k =", knee)
cl = kmeans(P, 4, seed=0, n_init=5)
print("silhouette %.3f" % silhouette(P, cl.labels))
cfg = StabilityConfig(rounds=10, seed=0)
print("stability: groups %.3f, uniform noise %.3f"
      % (stability(P, 4, cfg), stability(rng.uniform(size=P.shape), 4, cfg)))

# %%
# 3. A signature is a set of centroids with weights; moving half of the
#    mass by 3 units costs 1.5.
a = Signature([[0.0, 0.0], [10.0, 0.0]], [0.5, 0.5], [0, 1])
b = Signature([[0.0, 0.0], [10.0, 3.0]], [0.5, 0.5], [0, 1])
value, plan = emd(a, b, return_plan=True)
print("\nEMD", value)
print(plan.flow)

# %%
# 4. Labels are the XOR of tags a and b; tag d agrees with the label 75% of
#    the time.  Greedy splitting takes d first and then finds no gain.
rows = []
for ta in (0, 1):
    for tb in (0, 1):
        for r in range(40):
            y = ta ^ tb
            rows.append((ta, tb, y if r < 30 else 1 - y, y))
D = np.array(rows, dtype=float)
Xt, yt = D[:, :3], D[:, 3].astype(int)
names, tags = ["a", "b", "d"], [True] * 3
exact = fit_tree_exact(Xt, yt, names, tags, 2, min_leaf=1)
greedy = fit_tree_greedy(Xt, yt, names, tags, 2, min_leaf=1)
print("\nexact accuracy %.2f" % exact.accuracy(Xt, yt))
print(exact.render())
print("greedy accuracy %.2f" % greedy.accuracy(Xt, yt))
print(greedy.render())
