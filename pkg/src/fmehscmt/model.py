"""Config + parameters bundled into one callable network."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Tuple

import numpy as np

from .backbone import ModelConfig, ModelOutput, forward, init_model
from .params import ParamStore
from .tensor import Tape


class HSCMTNet:
    """The two-stream network: configuration plus its parameter store."""

    def __init__(self, config: ModelConfig, store: Optional[ParamStore] = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.store = store if store is not None else init_model(config, seed, dtype)

    @property
    def dtype(self):
        return self.store.dtype

    def __call__(self, images, tape: Optional[Tape] = None, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> ModelOutput:
        return forward(images, self.config, self.store, tape, training, rng)

    def infer(self, images: np.ndarray, batch_size: int = 32,
              threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode (probs, penultimate) for a stack of images.

        With ``threads > 1`` independent batches run concurrently against the
        read-only parameters; the result is identical to the serial run.
        """
        images = np.asarray(images, dtype=self.dtype)
        chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]

        def run(chunk):
            out = self(chunk)
            return out.probs.data, out.penultimate.data

        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run, chunks))
        else:
            results = [run(c) for c in chunks]
        if not results:
            width = self.config.fused_channels
            return (np.zeros((0, self.config.num_classes), self.dtype),
                    np.zeros((0, width), self.dtype))
        return (np.concatenate([r[0] for r in results]),
                np.concatenate([r[1] for r in results]))
