"""Frozen oracle values shared by the tests.

PSI1_EXACT is the exact dynamic-programming value of E(Y_k^{a0=1, c=0})
under the simulation model, cross-checked against brute-force enumeration
of all 2^(5*5) binary histories (agreement to 1e-15)."""

import numpy as np

PSI1_EXACT = np.array([0.726287063411, 0.607254833086, 0.520226175922, 0.450108905171, 0.392460221973])
