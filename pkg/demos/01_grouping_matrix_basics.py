"""
From a grouping matrix to a pooling operator
============================================

A grouping matrix holds, for every pair of nodes, the probability that the
two nodes belong to the same cluster.  This walk-through builds an ideal one
by hand and shows what the eigen-based pooling operator does with it.

Run with ``python demos/01_grouping_matrix_basics.py``.
"""

# %%
# An ideal grouping matrix: three groups of sizes 3, 2 and 1.
import numpy as np

from gmpool.linalg import sym_eig
from gmpool.pooling import effective_clusters, gmpool_coarsen, gmpool_decompose, significant_rows

np.set_printoptions(precision=3, suppress=True)

sizes = (3, 2, 1)
n = sum(sizes)
m = np.zeros((n, n))
lo = 0
for k in sizes:
    m[lo : lo + k, lo : lo + k] = 1.0
    lo += k
print("M =\n", m)

# %%
# Each all-ones block of size k contributes one eigenvalue equal to k.
eig = sym_eig(m)
print("eigenvalues:", eig.values)

# %%
# The number of eigenvalues above a threshold is the effective number of
# clusters.  The threshold decides how small a group may be and still count.
for t in (0.5, 1.0, 2.5):
    print(f"threshold {t}: {effective_clusters(m, t)} clusters")

# %%
# The pooling operator S has one row per eigenvalue.  Rows tied to a zero
# eigenvalue vanish; every other row sums the nodes of exactly one group.
op, d = gmpool_decompose(m)
s = op.S.values
print("S =\n", s)
print("significant rows:", significant_rows(op))
print("S'S reproduces M:", np.allclose(s.T @ s, m))
print("SS' is diagonal, D =", np.diag(d))

# %%
# Coarsening a graph: node features of a group are summed into one row.
rng = np.random.default_rng(0)
x = rng.normal(size=(n, 2))
a = np.ones((n, n)) - np.eye(n)
e = np.zeros((n, n, 1))
coarse = gmpool_coarsen(x, e, a, op)
print("pooled features (first three rows):\n", coarse.x.values[:3])
print("group sums:\n", np.array([x[:3].sum(0), x[3:5].sum(0), x[5:].sum(0)]))
print("aggregation weights S1:", coarse.ones.values)
