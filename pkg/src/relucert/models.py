"""Network constructors and the architecture mini-language for the CLI."""
from __future__ import annotations

import numpy as np

from .linops import Conv2dLayer, DenseLayer, Network
from .seeds import substream


def dense_init(rng, n_out, n_in, bias_kind="zero"):
    w = rng.normal(scale=1.0 / np.sqrt(n_in), size=(n_out, n_in))
    b = rng.normal(size=n_out) if bias_kind == "normal" else np.zeros(n_out)
    return DenseLayer(w, b)


def build_mlp(dims, seed=0, init="default") -> Network:
    """Fully connected net; weights N(0, 1/sqrt(n_in)).  init="paper" also
    draws N(0,1) biases (the random-network study preset), "default" uses
    zero biases."""
    bias_kind = "normal" if init == "paper" else "zero"
    rng = substream(seed, "init")
    return Network([dense_init(rng, dims[j + 1], dims[j], bias_kind)
                    for j in range(len(dims) - 1)])


def build_conv_net(in_side, in_ch, conv_specs, fc_dims, seed=0) -> Network:
    """conv_specs: list of (out_ch, kernel, stride, pad); fc_dims appended
    after flattening.  Weights N(0, 1/sqrt(fan_in)), zero biases."""
    rng = substream(seed, "init")
    layers = []
    side, ch = in_side, in_ch
    for out_ch, k, stride, pad in conv_specs:
        fan_in = ch * k * k
        kern = rng.normal(scale=1.0 / np.sqrt(fan_in),
                          size=(out_ch, ch, k, k))
        layers.append(Conv2dLayer(kern, np.zeros(out_ch), stride, pad,
                                  side, side))
        side = (side + 2 * pad - k) // stride + 1
        ch = out_ch
    width = ch * side * side
    for n_out in fc_dims:
        layers.append(dense_init(rng, n_out, width))
        width = n_out
    return Network(layers)


def build_mnist_conv(seed=0, channels=(16, 32), kernel=4, fc=100,
                     in_side=28, classes=10) -> Network:
    """Two stride-2 conv layers (16 and 32 channels) then FC down to 100
    and the class count.  Kernel size / padding default to 4 and 1, which
    halves the resolution each conv."""
    pad = (kernel - 2) // 2 if kernel % 2 == 0 else (kernel - 1) // 2
    specs = [(channels[0], kernel, 2, pad), (channels[1], kernel, 2, pad)]
    return build_conv_net(in_side, 1, specs, [fc, classes], seed=seed)


def parse_arch(spec: str, seed: int = 0, init: str = "default") -> Network:
    """"dense:d0,d1,..." or "mnist-conv[:ch1,ch2,fc]"."""
    if spec.startswith("dense:"):
        dims = [int(v) for v in spec.split(":", 1)[1].split(",")]
        if len(dims) < 2:
            raise ValueError("dense arch needs at least in,out dims")
        return build_mlp(dims, seed=seed, init=init)
    if spec.startswith("mnist-conv"):
        parts = spec.split(":", 1)
        if len(parts) == 2 and parts[1]:
            ch1, ch2, fc = (int(v) for v in parts[1].split(","))
        else:
            ch1, ch2, fc = 16, 32, 100
        return build_mnist_conv(seed=seed, channels=(ch1, ch2), fc=fc)
    raise ValueError(f"cannot parse architecture {spec!r}")
