"""
Two ways to factor a grouping matrix
====================================

The eigen scheme gives an exact square root of the PSD part of M.  The
iterative scheme fits a non-negative W with W'W close to M, at a rank you
choose.  This script compares them on a noisy block matrix.
"""

# %%
import numpy as np

from gmpool.pooling import gmpool_decompose, iterative_decompose, psd_clamp

np.set_printoptions(precision=3, suppress=True)
rng = np.random.default_rng(3)

# Two groups of three nodes, softened by symmetric noise.
m = np.kron(np.eye(2), np.ones((3, 3)))
noise = rng.uniform(0, 0.1, m.shape)
m = np.clip(m + 0.5 * (noise + noise.T) * np.where(m > 0, -1, 1), 0, 1)
print("M =\n", m)

# %%
# Eigen scheme: exact up to the clamped negative eigenvalues.
op, _ = gmpool_decompose(m)
s = op.S.values
print("eigenvalues:", op.eig.values)
print("eigen |S'S - M|:", np.linalg.norm(s.T @ s - m))
print("eigen |S'S - PSD(M)|:", np.linalg.norm(s.T @ s - psd_clamp(m)))

# %%
# Iterative scheme at rank 2: every entry of W stays non-negative, so each
# row reads directly as a soft group membership.
res = iterative_decompose(m, rank=2, iters=2000, seed=0)
print("iterations:", len(res.loss_trace) - 1)
print("iterative |W'W - M|:", res.reconstruction_error)
print("memberships (columns sum to 1):\n", res.W)

# %%
# The loss never goes up along the way.
trace = np.array(res.loss_trace)
print("loss non-increasing:", bool(np.all(np.diff(trace) <= 0)))
print("loss at 0, 10, 100 and the end:", trace[[0, 10, 100, -1]])
