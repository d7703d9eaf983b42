"""
Explaining a surge of SSH scanners with a decision tree
=======================================================

A CWMP-capable SSH scanning population grows tenfold on day 2.  After
clustering, an exact depth-3 tree over interpretable features (raw counts
plus grouping tags) is fitted to the cluster labels; the path shared by the
surge clusters tells us what they have in common.
"""

import csv
import sys
import tempfile
from pathlib import Path

import numpy as np

from darkscope.features import interpret_rows, read_profiles
from darkscope.pipeline import read_labels_csv, run_pipeline, scenario_config
from darkscope.scenario import generate, ssh_surge_spec
from darkscope.trees import dnf_for_cluster, fit_tree_exact, fit_tree_greedy, shared_path

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="ssh-"))

files = generate(ssh_surge_spec(seed=1), out / "scenario")
run_pipeline(scenario_config(files.root, out / "run", k=10, u=20, n_init=30, deterministic=True))

day = "2021-09-02"
ddir = out / "run" / "days" / day
ids, labels = read_labels_csv(ddir / "labels.csv")
profiles = read_profiles(ddir / "profiles.jsonl")

# %%
# Which clusters are made of the injected scanners?
with open(files.truth, newline="") as fh:
    injected = {r["src_ip"]: int(r["injected"]) for r in csv.DictReader(fh) if r["day"] == day}
flags = np.array([injected[i] for i in ids])
surge = [int(c) for c in np.unique(labels) if flags[labels == c].mean() > 0.5]
print("surge clusters:", surge)

# %%
# Exact search minimises training errors; greedy CART is shown for contrast.
X, cols, is_tag = interpret_rows(profiles)
exact = fit_tree_exact(X, labels, cols, is_tag, 3)
greedy = fit_tree_greedy(X, labels, cols, is_tag, 3)
print(f"training accuracy: exact {exact.accuracy(X, labels):.3f}, greedy {greedy.accuracy(X, labels):.3f}\n")
print(exact.render())

for c in surge:
    print(dnf_for_cluster(exact, c, X, labels))

sp = shared_path(exact, X, labels, surge)
print("\nshared path:", " & ".join(map(str, sp.literals)) or "(root)")
for c, v in sp.coverage.items():
    n = int(np.sum(labels == c))
    print(f"  cluster {c}: {round(v * n)}/{n} rows on the path")
