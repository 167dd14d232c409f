"""Per-block gradient averages for the gradient-conflict diagnostic."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from .model import as_hooked, block_param_names, value_and_grad


def layer_avg_gradients(model, dataset, batch_size: int = 50, sign: float = -1.0) -> list[np.ndarray]:
    """Mean over batches of each block's flattened parameter gradient.

    ``sign=-1`` differentiates ``-L`` (the unlearning direction); a block's vector
    concatenates all of its attention and MLP parameters in a fixed order.
    """
    from ..taskgen import to_batch

    examples = list(dataset)
    if not examples:
        raise InvalidInputError("dataset is empty")
    model = as_hooked(model)
    n_blocks = model.config.n_blocks
    sums = [None] * n_blocks
    n_batches = 0
    for s in range(0, len(examples), batch_size):
        _, _, g = value_and_grad(model, to_batch(examples[s:s + batch_size]), "base", scale=sign)
        for i in range(n_blocks):
            flat = np.concatenate([g[name].ravel() for name in block_param_names(i)])
            sums[i] = flat if sums[i] is None else sums[i] + flat
        n_batches += 1
    return [v / n_batches for v in sums]
