from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .engine import forward_encoder
from .params import ParamStore, init_params, param_count
from .serialize import load_model, model_size_bytes, save_model
from .spec import VaeSpec, preset


@dataclass
class Model:
    """A VAE spec bundled with its parameters."""

    spec: VaeSpec
    params: ParamStore

    @classmethod
    def from_preset(cls, name: str, seed: int = 0) -> "Model":
        spec = preset(name)
        return cls(spec, init_params(spec, seed))

    @classmethod
    def load(cls, path) -> "Model":
        return cls(*load_model(path))

    def save(self, path) -> int:
        return save_model(self.spec, self.params, path)

    def copy(self) -> "Model":
        return Model(self.spec, self.params.copy())

    def encode(self, x: np.ndarray, batch_size: int = 256, quant: Optional[str] = None
               ) -> Tuple[np.ndarray, np.ndarray]:
        """Latent mean and log-variance in eval mode, processed in batches."""
        mus, lvs = [], []
        for i in range(0, len(x), batch_size):
            out = forward_encoder(self.spec, self.params, x[i:i + batch_size], quant=quant)
            mus.append(out.mu)
            lvs.append(out.logvar)
        return np.concatenate(mus), np.concatenate(lvs)

    @property
    def param_count(self) -> int:
        return param_count(self.spec)

    @property
    def size_bytes(self) -> int:
        return model_size_bytes(self.spec, self.params)
