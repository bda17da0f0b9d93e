"""VAE layer graphs: shape inference, decoder mirroring and presets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .layers import (
    ACTIVATIONS, PARAMETRIC, BatchNorm2d, Conv2d, ConvTranspose2d, Flatten, LatentHead,
    Layer, LeakyReLU, Linear, MaxPool2d, MaxUnpool2d, ReLU, Shape, ShapeError, Unflatten,
    conv_transpose_extent, layer_from_dict,
)


@dataclass
class VaeSpec:
    encoder: List[Layer]
    decoder: List[Layer]
    latent_dim: int
    beta: float
    input_shape: Tuple[int, int, int]
    name: str = "custom"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "latent_dim": self.latent_dim,
            "beta": self.beta,
            "input_shape": list(self.input_shape),
            "encoder": [l.to_dict() for l in self.encoder],
            "decoder": [l.to_dict() for l in self.decoder],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VaeSpec":
        return cls(
            encoder=[layer_from_dict(l) for l in d["encoder"]],
            decoder=[layer_from_dict(l) for l in d["decoder"]],
            latent_dim=int(d["latent_dim"]),
            beta=float(d["beta"]),
            input_shape=tuple(d["input_shape"]),
            name=d.get("name", "custom"),
        )

    @property
    def spec_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def layer(self, name: str) -> Layer:
        for l in self.encoder + self.decoder:
            if l.name == name:
                return l
        raise KeyError(name)

    def layers(self):
        return self.encoder + self.decoder


def _chain(layers: Sequence[Layer], shape: Shape) -> List[Shape]:
    out = []
    for layer in layers:
        shape = layer.output_shape(tuple(shape))
        out.append(shape)
    return out


def infer_shapes(spec: VaeSpec) -> Dict[str, List[Shape]]:
    """Per-layer output shapes (batch axis excluded) for encoder and decoder.

    Raises ShapeError naming the first layer whose input does not fit.
    """
    if not spec.encoder or not isinstance(spec.encoder[-1], LatentHead):
        raise ShapeError("encoder must end with a LatentHead")
    if spec.encoder[-1].latent_dim != spec.latent_dim:
        raise ShapeError("LatentHead latent_dim disagrees with spec.latent_dim")
    enc = _chain(spec.encoder, spec.input_shape)
    enc_in = [tuple(spec.input_shape)] + enc[:-1]
    pool_in = {l.name: s for l, s in zip(spec.encoder, enc_in) if isinstance(l, MaxPool2d)}
    dec = []
    shape: Shape = (spec.latent_dim,)
    for layer in spec.decoder:
        if isinstance(layer, MaxUnpool2d):
            if layer.pool not in pool_in:
                raise ShapeError(f"layer {layer.name}: no encoder pool named {layer.pool!r}")
            target = pool_in[layer.pool]
            shape = layer.output_shape(shape)
            if shape != target:
                raise ShapeError(f"layer {layer.name}: unpools to {shape}, pool input was {target}")
        else:
            shape = layer.output_shape(shape)
        dec.append(shape)
    if dec and dec[-1] != tuple(spec.input_shape):
        raise ShapeError(f"decoder output {dec[-1]} != input shape {tuple(spec.input_shape)}")
    return {"encoder": enc, "decoder": dec}


def _suffix(name: str) -> str:
    return name.split(".", 1)[-1]


def attachments(layers: Sequence[Layer], i: int) -> List[Layer]:
    """BatchNorm/activation layers directly following ``layers[i]``."""
    out = []
    for layer in layers[i + 1:]:
        if isinstance(layer, (BatchNorm2d,) + ACTIVATIONS):
            out.append(layer)
        else:
            break
    return out


def mirror_decoder(encoder: Sequence[Layer], input_shape: Shape) -> List[Layer]:
    """Build a decoder that inverts ``encoder`` layer by layer.

    Every mirrored conv/linear is followed by copies of the normalisation and
    activation layers that fed the original, so the decoder reproduces the
    kind of features the encoder consumed. The layer mirroring the first conv
    outputs raw values.
    """
    shapes_in = [tuple(input_shape)] + _chain(encoder, input_shape)[:-1]
    attached = set()
    for i, layer in enumerate(encoder):
        if isinstance(layer, PARAMETRIC):
            attached.update(id(a) for a in attachments(encoder, i))

    def post_for(i: int, conv: bool) -> List[Layer]:
        for j in range(i - 1, -1, -1):
            if isinstance(encoder[j], PARAMETRIC):
                out = []
                for a in attachments(encoder, j):
                    if isinstance(a, BatchNorm2d) and not conv:
                        continue
                    out.append(replace(a, name="dec." + _suffix(a.name)))
                return out
        return []

    dec: List[Layer] = []
    for i in range(len(encoder) - 1, -1, -1):
        layer, s_in = encoder[i], shapes_in[i]
        if id(layer) in attached:
            continue
        name = "dec." + _suffix(layer.name)
        if isinstance(layer, LatentHead):
            dec.append(Linear(name=name, in_features=layer.latent_dim, out_features=layer.in_features))
            dec.extend(post_for(i, conv=False))
        elif isinstance(layer, Linear):
            dec.append(Linear(name=name, in_features=layer.out_features, out_features=layer.in_features))
            dec.extend(post_for(i, conv=False))
        elif isinstance(layer, Flatten):
            dec.append(Unflatten(name=name, shape=tuple(s_in)))
        elif isinstance(layer, MaxPool2d):
            dec.append(MaxUnpool2d(name=name, kernel=layer.kernel, stride=layer.stride,
                                   pool=layer.name, out_hw=tuple(s_in[1:])))
        elif isinstance(layer, Conv2d):
            _, ho, _ = layer.output_shape(s_in)
            base = conv_transpose_extent(ho, layer.kernel, layer.stride, layer.dilation, layer.padding)
            post = post_for(i, conv=True)
            dec.append(ConvTranspose2d(
                name=name, in_ch=layer.out_ch, out_ch=layer.in_ch, kernel=layer.kernel,
                stride=layer.stride, dilation=layer.dilation, padding=layer.padding,
                output_padding=s_in[1] - base,
                bias=not any(isinstance(p, BatchNorm2d) for p in post)))
            dec.extend(post)
        else:
            raise ShapeError(f"cannot mirror layer {layer.name} ({layer.kind})")
    return dec


def build_vae(encoder: List[Layer], input_shape, beta: float, name: str = "custom") -> VaeSpec:
    head = encoder[-1]
    if not isinstance(head, LatentHead):
        raise ShapeError("encoder must end with a LatentHead")
    spec = VaeSpec(encoder=list(encoder), decoder=mirror_decoder(encoder, input_shape),
                   latent_dim=head.latent_dim, beta=beta, input_shape=tuple(input_shape), name=name)
    infer_shapes(spec)
    return spec


def _conv_blocks(in_ch, widths, kernel, stride, padding, act, pool):
    layers: List[Layer] = []
    for i, out_ch in enumerate(widths, start=1):
        layers.append(Conv2d(name=f"enc.conv{i}", in_ch=in_ch, out_ch=out_ch, kernel=kernel,
                             stride=stride, padding=padding, bias=False))
        layers.append(BatchNorm2d(name=f"enc.bn{i}", ch=out_ch))
        layers.append(act(f"enc.act{i}"))
        if pool:
            layers.append(MaxPool2d(name=f"enc.pool{i}", kernel=2, stride=2))
        in_ch = out_ch
    return layers


def beta_vae_encoder(input_shape, widths, fc, latent_dim) -> List[Layer]:
    """Conv -> BN -> LeakyReLU -> MaxPool blocks, then a LeakyReLU FC trunk."""
    leaky = lambda n: LeakyReLU(name=n, slope=0.01)
    layers = _conv_blocks(input_shape[0], widths, 3, 1, 1, leaky, pool=True)
    layers.append(Flatten(name="enc.flatten"))
    flat = _chain(layers, input_shape)[-1][0]
    for i, width in enumerate(fc, start=1):
        layers.append(Linear(name=f"enc.fc{i}", in_features=flat, out_features=width))
        layers.append(LeakyReLU(name=f"enc.fcact{i}", slope=0.01))
        flat = width
    layers.append(LatentHead(name="enc.head", in_features=flat, latent_dim=latent_dim))
    return layers


def of_encoder(input_shape, widths, padding, fc_width, latent_dim) -> List[Layer]:
    """Stride-3 kernel-5 Conv -> BN -> ReLU stack, one linear FC, latent head."""
    layers = _conv_blocks(input_shape[0], widths, 5, 3, padding, lambda n: ReLU(name=n), pool=False)
    layers.append(Flatten(name="enc.flatten"))
    flat = _chain(layers, input_shape)[-1][0]
    layers.append(Linear(name="enc.fc1", in_features=flat, out_features=fc_width))
    layers.append(LatentHead(name="enc.head", in_features=fc_width, latent_dim=latent_dim))
    return layers


PRESETS = {
    "paper-beta-vae": dict(kind="beta", input_shape=(3, 224, 224), widths=(32, 64, 128, 256),
                           fc=(160, 128, 64, 32), latent_dim=30, beta=1.4),
    "desk-beta-vae": dict(kind="beta", input_shape=(3, 32, 32), widths=(8, 16, 32, 64),
                          fc=(128, 64, 48, 32), latent_dim=30, beta=1.4),
    "paper-of": dict(kind="of", input_shape=(6, 224, 224), widths=(32, 64, 128, 256),
                     padding=0, fc_width=128, latent_dim=12, beta=1.0),
    "desk-of": dict(kind="of", input_shape=(6, 32, 32), widths=(8, 16, 32, 64),
                    padding=2, fc_width=32, latent_dim=12, beta=1.0),
}


def preset(name: str) -> VaeSpec:
    try:
        p = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if p["kind"] == "beta":
        enc = beta_vae_encoder(p["input_shape"], p["widths"], p["fc"], p["latent_dim"])
    else:
        enc = of_encoder(p["input_shape"], p["widths"], p["padding"], p["fc_width"], p["latent_dim"])
    return build_vae(enc, p["input_shape"], p["beta"], name=name)
