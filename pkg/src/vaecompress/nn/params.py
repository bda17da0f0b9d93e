"""Parameter storage with pruning masks and per-tensor quantization params."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..tensor import QuantParams, Tensor
from .layers import ConvTranspose2d, LeakyReLU
from .spec import VaeSpec

_KIND = {np.float32: "fp32", np.float64: "fp32", np.float16: "fp16", np.int8: "qint8"}


@dataclass
class ParamStore:
    """Named tensors keyed ``"<layer>.<field>"``.

    ``masks`` holds boolean keep-masks for pruned tensors; masked entries are
    kept exactly zero in ``tensors``. ``qparams`` holds weight quantization
    parameters (key = tensor name) and activation parameters (key
    ``"act:<layer>[.mu|.logvar]"``) for static quantization.
    """

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    qparams: Dict[str, QuantParams] = field(default_factory=dict)
    dtype: str = "fp32"
    quant_mode: Optional[str] = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def get(self, layer: str, fieldname: str):
        return self.tensors.get(f"{layer}.{fieldname}")

    def tensor(self, name: str) -> Tensor:
        arr = self.tensors[name]
        kind = _KIND[arr.dtype.type]
        return Tensor(arr, kind, self.qparams.get(name) if kind == "qint8" else None)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()},
                          {k: v.copy() for k, v in self.masks.items()},
                          dict(self.qparams), self.dtype, self.quant_mode)

    def apply_masks(self) -> None:
        for name, keep in self.masks.items():
            self.tensors[name][~keep] = 0

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self.tensors if n.startswith(prefix)]


def is_learnable(name: str) -> bool:
    return not name.endswith(("running_mean", "running_var"))


def _kaiming_uniform(rng, shape, fan_in, slope):
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _fan_in(layer, shape) -> int:
    if isinstance(layer, ConvTranspose2d):
        return shape[1] * shape[2] * shape[3]
    return math.prod(shape[1:])


def init_params(spec: VaeSpec, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Kaiming-uniform conv/linear weights, biases U(+-1/sqrt(fan_in)),
    unit BN gain and zero BN shift.

    Each tensor draws from its own stream keyed by its name so adding or
    removing a layer does not perturb the initialisation of the others.
    """
    store = ParamStore()
    layers = spec.layers()
    for i, layer in enumerate(layers):
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        slope = nxt.slope if isinstance(nxt, LeakyReLU) else 0.0
        shapes = layer.param_shapes()
        for fname, shape in shapes.items():
            key = f"{layer.name}.{fname}"
            rng = np.random.default_rng([seed, *key.encode()])
            if fname == "gamma":
                arr = np.ones(shape)
            elif fname == "beta":
                arr = np.zeros(shape)
            elif fname.endswith("bias"):
                fan_in = _fan_in(layer, shapes[fname[:-4] + "weight"])
                bound = 1.0 / math.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            else:
                arr = _kaiming_uniform(rng, shape, _fan_in(layer, shape), slope)
            store.tensors[key] = arr.astype(dtype)
        for fname, shape in layer.buffer_shapes().items():
            fill = np.ones if fname == "running_var" else np.zeros
            store.tensors[f"{layer.name}.{fname}"] = fill(shape, dtype=dtype)
    return store


def param_count(spec: VaeSpec, part: str = "all") -> int:
    """Learnable scalars in the whole VAE (``part="all"``) or the encoder."""
    layers = spec.encoder if part == "encoder" else spec.layers()
    return sum(math.prod(s) for l in layers for s in l.param_shapes().values())


def nonzero_count(params: ParamStore, prefix: str = "") -> int:
    return sum(int(np.count_nonzero(v)) for k, v in params.tensors.items()
               if k.startswith(prefix) and is_learnable(k))
