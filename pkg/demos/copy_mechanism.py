"""
How the pointing gate mixes generating and copying
==================================================

A four-word vocabulary where words 2 and 3 are object words.  No training
happens here; we build the two distributions by hand and slide the gate.
"""

import numpy as np

from lstmp.autodiff import Tape, Tensor
from lstmp.model import fuse_step

tape = Tape(record=False)

# the language model is indifferent between all four words
gen_scores = Tensor(np.zeros((1, 4)))
# the detector is fairly sure it saw the first object (slot 0 -> word 2)
copy_scores = Tensor(np.array([[2.0, 0.0]]))

for p in (0.0, 0.25, 0.5, 0.75, 1.0):
    out = fuse_step(tape, gen_scores, copy_scores, p, [2, 3])
    print(f"p_t={p:4.2f}  fused={np.round(out.fused.values[0], 4)}  sum={out.fused.values.sum():.12f}")

# at p_t=1 only object words can be emitted; at p_t=0 the copy path is invisible
# the textbook case: uniform generation, uniform copy, p_t=0.5
out = fuse_step(tape, Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 2))), 0.5, [2, 3])
print("uniform case:", out.fused.values[0])  # [0.125 0.125 0.375 0.375]
