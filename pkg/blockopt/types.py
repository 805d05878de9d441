import typing

import numpy as np

# Dense float vector (one block or the full stacked vector)
Vector = np.ndarray

# Sorted, duplicate-free array of 0-based block indices
IndexSet = np.ndarray

# Anything a sampler or caller may hand in as a set of blocks
BlockSelection = typing.Union[IndexSet, typing.Sequence[int]]
