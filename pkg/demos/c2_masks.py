"""
Common and different attention masks
====================================

Two feature maps stand in for the appearance and motion branches, each
with a bright blob the other lacks, plus one blob they share.  The
attention maps decide per position which branch dominates.  The common
mask is high wherever neither branch dominates and low where one does, so
it routes balanced evidence to the common stream and leaves the
branch-specific evidence to the two refined branches.
"""

import numpy as np

from gaitfusion.fusion import C2Module
from gaitfusion.tensor import Tensor

np.set_printoptions(precision=2, suppress=True, linewidth=120)

H, W = 6, 8
shared = np.zeros((H, W))
shared[2:4, 3:5] = 3.0
own_ap = np.zeros((H, W))
own_ap[0:2, 0:2] = 3.0
own_mo = np.zeros((H, W))
own_mo[4:6, 6:8] = 3.0

# one sequence, two channels, a little noise so no two positions tie
rng = np.random.default_rng(0)
f_ap = Tensor((shared + own_ap)[None, None].repeat(2, axis=1) + 0.01 * rng.standard_normal((1, 2, H, W)))
f_mo = Tensor((shared + own_mo)[None, None].repeat(2, axis=1) + 0.01 * rng.standard_normal((1, 2, H, W)))

c2 = C2Module(channels=2, reduction=1, rng=np.random.default_rng(1))
masks = c2.masks(f_ap, f_mo)

# m_ap and m_mo split every position between the two branches
print("m_ap (channel 0)\n", masks.m_ap.data[0, 0])
print("m_ap + m_mo is 1 everywhere:", np.allclose(masks.m_ap.data + masks.m_mo.data, 1))

# min(m_ap, m_mo) is large only where the split is even; rescaled per map
print("\nm_co (channel 0)\n", masks.m_co.data[0, 0])
print("m_di = 1 - m_co (channel 0)\n", masks.m_di.data[0, 0])

ap, mo, co = c2(f_ap, f_mo)
print("\ncommon stream: the averaged features wherever the split is even\n", co.data[0, 0])
print("appearance stream: only where appearance dominates\n", ap.data[0, 0])

# turning the masks off leaves plain averaging and plain reweighting
plain = C2Module(2, reduction=1, use_m_co=False, use_m_di=False, rng=np.random.default_rng(1))
_, _, co_plain = plain(f_ap, f_mo)
print("\nwithout m_co the common stream is just the branch average:",
      np.allclose(co_plain.data, (f_ap.data + f_mo.data) / 2))
