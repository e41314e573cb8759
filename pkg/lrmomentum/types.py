from __future__ import annotations

from typing import Callable, Mapping, Tuple

import numpy as np
import numpy.typing as npt
from typing_extensions import TypeAlias

# 2-D float64 array; the universal numeric carrier
Matrix: TypeAlias = npt.NDArray[np.float64]

# 1-D float64 array, e.g. singular values
Vector: TypeAlias = npt.NDArray[np.float64]

# 1-D integer array of class labels
Labels: TypeAlias = npt.NDArray[np.int64]

# (W) -> (loss, dL/dW)
LossAndGrad: TypeAlias = Callable[[Matrix], Tuple[float, Matrix]]

# field name -> message
BadFieldsDict: TypeAlias = Mapping[str, str]
