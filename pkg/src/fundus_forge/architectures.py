"""U-Net, FC-DenseNet and ENet builders.

All three map ``(batch, 3, H, W)`` images to ``(batch, 1, H, W)`` sigmoid maps.
H and W must be divisible by the model's total downsampling factor.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

from .graph import ModelGraph
from .layers import ConvSpec

ARCHITECTURES = ("unet", "fcdn56", "fcdn67", "fcdn103", "enet")

# growth rate, layers per block on the down path, bottleneck layers
FC_DENSENET_VARIANTS = {
    56: (12, [4, 4, 4, 4, 4], 4),
    67: (16, [5, 5, 5, 5, 5], 5),
    103: (16, [4, 5, 7, 10, 12], 15),
}
FC_DENSENET_STEM = 48


def build_unet(base_channels: int = 64, depth: int = 4) -> ModelGraph:
    if base_channels < 1 or depth < 1:
        raise ValueError(f"U-Net needs base_channels >= 1 and depth >= 1, got {base_channels}, {depth}")
    g = ModelGraph("unet", {"base_channels": base_channels, "depth": depth})
    g.downsampling = 2**depth

    def block(prefix, x, cin, cout):
        x = g.conv(f"{prefix}.conv1", x, ConvSpec(cin, cout, 3, padding=1))
        x = g.relu(f"{prefix}.relu1", x)
        x = g.conv(f"{prefix}.conv2", x, ConvSpec(cout, cout, 3, padding=1))
        return g.relu(f"{prefix}.relu2", x)

    x, cin = "input", 3
    skips = []
    for level in range(depth):
        width = base_channels * 2**level
        x = block(f"enc{level}", x, cin, width)
        skips.append((x, width))
        x = g.maxpool(f"enc{level}.pool", x)
        cin = width
    width = base_channels * 2**depth
    x = block("bottleneck", x, cin, width)
    cin = width
    for level in reversed(range(depth)):
        skip, sw = skips[level]
        x = g.tconv(f"dec{level}.up", x, ConvSpec(cin, sw, 2, stride=2))
        x = g.concat(f"dec{level}.cat", x, skip)
        x = block(f"dec{level}", x, 2 * sw, sw)
        cin = sw
    x = g.conv("head", x, ConvSpec(cin, 1, 1))
    g.sigmoid("output", x)
    return g


def encoder_widths(model: ModelGraph) -> List[int]:
    """Output channels of each U-Net encoder level."""
    return [
        n.attrs["spec"].out_channels
        for n in model.nodes
        if n.op == "conv" and n.name.startswith("enc") and n.name.endswith("conv2")
    ]


def build_fc_densenet(variant: int = 103) -> ModelGraph:
    if variant not in FC_DENSENET_VARIANTS:
        raise ValueError(f"unknown FC-DenseNet variant {variant!r}; choose from {sorted(FC_DENSENET_VARIANTS)}")
    growth, down, n_bottleneck = FC_DENSENET_VARIANTS[variant]
    up = list(reversed(down))
    g = ModelGraph(f"fcdn{variant}", {"variant": variant, "growth_rate": growth})
    g.downsampling = 2 ** len(down)

    def dense_block(prefix, x, c, n_layers, keep_input) -> Tuple[str, int]:
        new: List[str] = []
        for i in range(n_layers):
            y = g.bn(f"{prefix}.l{i}.bn", x, c)
            y = g.relu(f"{prefix}.l{i}.relu", y)
            y = g.conv(f"{prefix}.l{i}.conv", y, ConvSpec(c, growth, 3, padding=1))
            new.append(y)
            x = g.concat(f"{prefix}.l{i}.cat", x, y)
            c += growth
        if keep_input:
            return x, c
        out = new[0]
        for i, y in enumerate(new[1:], start=1):
            out = g.concat(f"{prefix}.new{i}", out, y)
        return out, growth * n_layers

    x = g.conv("stem", "input", ConvSpec(3, FC_DENSENET_STEM, 3, padding=1))
    c = FC_DENSENET_STEM
    skips = []
    for b, n in enumerate(down):
        x, c = dense_block(f"down{b}", x, c, n, keep_input=True)
        skips.append((x, c))
        x = g.bn(f"td{b}.bn", x, c)
        x = g.relu(f"td{b}.relu", x)
        x = g.conv(f"td{b}.conv", x, ConvSpec(c, c, 1))
        x = g.maxpool(f"td{b}.pool", x)
    x, c = dense_block("bottleneck", x, c, n_bottleneck, keep_input=False)
    for b, n in enumerate(up):
        skip, cs = skips[-1 - b]
        x = g.tconv(f"tu{b}", x, ConvSpec(c, c, 3, stride=2, padding=1, output_padding=1))
        x = g.concat(f"tu{b}.cat", x, skip)
        last = b == len(up) - 1
        x, c = dense_block(f"up{b}", x, c + cs, n, keep_input=last)
    x = g.conv("head", x, ConvSpec(c, 1, 1))
    g.sigmoid("output", x)
    return g


# (kind, dilation) of the blocks following the stage-2 downsampling, reused by stage 3
ENET_STAGE2 = [("regular", 1), ("dilated", 2), ("asymmetric", 1), ("dilated", 4),
               ("regular", 1), ("dilated", 8), ("asymmetric", 1), ("dilated", 16)]


def build_enet(width: int = 16) -> ModelGraph:
    """ENet with stage widths ``width``, ``4 * width`` and ``8 * width``.

    Stages: 0 initial block, 1-3 contracting bottlenecks, 4-5 unpooling
    bottlenecks, 6 final transposed convolution.
    """
    if width < 4:
        raise ValueError("ENet width must be at least 4")
    g = ModelGraph("enet", {"width": width})
    g.downsampling = 8

    def cbp(prefix, x, spec, stage, transposed=False):
        x = (g.tconv if transposed else g.conv)(f"{prefix}.conv", x, spec, stage)
        x = g.bn(f"{prefix}.bn", x, spec.out_channels, stage)
        return g.prelu(f"{prefix}.act", x, spec.out_channels, stage)

    def regular(prefix, x, c, kind, dilation, stage):
        inner = c // 4
        y = cbp(f"{prefix}.reduce", x, ConvSpec(c, inner, 1, bias=False), stage)
        if kind == "asymmetric":
            y = cbp(f"{prefix}.asym1", y, ConvSpec(inner, inner, (5, 1), padding=(2, 0), bias=False), stage)
            y = cbp(f"{prefix}.asym2", y, ConvSpec(inner, inner, (1, 5), padding=(0, 2), bias=False), stage)
        else:
            spec = ConvSpec(inner, inner, 3, padding=dilation, dilation=dilation, bias=False)
            y = cbp(f"{prefix}.spatial", y, spec, stage)
        y = cbp(f"{prefix}.expand", y, ConvSpec(inner, c, 1, bias=False), stage)
        s = g.add(f"{prefix}.sum", x, y, stage)
        return g.prelu(f"{prefix}.out", s, c, stage)

    def downsample(prefix, x, cin, cout, stage):
        inner = cin // 4
        pool = g.maxpool(f"{prefix}.pool", x, stage=stage)
        main = g.pad_channels(f"{prefix}.padc", pool, cout - cin, stage)
        y = cbp(f"{prefix}.reduce", x, ConvSpec(cin, inner, 2, stride=2, bias=False), stage)
        y = cbp(f"{prefix}.spatial", y, ConvSpec(inner, inner, 3, padding=1, bias=False), stage)
        y = cbp(f"{prefix}.expand", y, ConvSpec(inner, cout, 1, bias=False), stage)
        s = g.add(f"{prefix}.sum", main, y, stage)
        return g.prelu(f"{prefix}.out", s, cout, stage), pool

    def upsample(prefix, x, cin, cout, pool, stage):
        inner = cin // 4
        main = g.conv(f"{prefix}.main.conv", x, ConvSpec(cin, cout, 1, bias=False), stage)
        main = g.bn(f"{prefix}.main.bn", main, cout, stage)
        main = g.unpool(f"{prefix}.unpool", main, pool, stage)
        y = cbp(f"{prefix}.reduce", x, ConvSpec(cin, inner, 1, bias=False), stage)
        spec = ConvSpec(inner, inner, 3, stride=2, padding=1, output_padding=1, bias=False)
        y = cbp(f"{prefix}.spatial", y, spec, stage, transposed=True)
        y = cbp(f"{prefix}.expand", y, ConvSpec(inner, cout, 1, bias=False), stage)
        s = g.add(f"{prefix}.sum", main, y, stage)
        return g.prelu(f"{prefix}.out", s, cout, stage)

    w1, w2 = 4 * width, 8 * width
    # stage 0: strided convolution alongside max pooling of the raw image
    conv = g.conv("initial.conv", "input", ConvSpec(3, width - 3, 3, stride=2, padding=1, bias=False), 0)
    pool = g.maxpool("initial.pool", "input", stage=0)
    x = g.concat("initial.cat", conv, pool, 0)
    x = g.bn("initial.bn", x, width, 0)
    x = g.prelu("initial.act", x, width, 0)

    x, pool1 = downsample("s1.b0", x, width, w1, 1)
    for i in range(1, 5):
        x = regular(f"s1.b{i}", x, w1, "regular", 1, 1)

    x, pool2 = downsample("s2.b0", x, w1, w2, 2)
    for i, (kind, d) in enumerate(ENET_STAGE2, start=1):
        x = regular(f"s2.b{i}", x, w2, kind, d, 2)
    for i, (kind, d) in enumerate(ENET_STAGE2, start=1):
        x = regular(f"s3.b{i}", x, w2, kind, d, 3)

    x = upsample("s4.b0", x, w2, w1, pool2, 4)
    for i in range(1, 3):
        x = regular(f"s4.b{i}", x, w1, "regular", 1, 4)
    x = upsample("s5.b0", x, w1, width, pool1, 5)
    x = regular("s5.b1", x, width, "regular", 1, 5)

    x = g.tconv("final", x, ConvSpec(width, 1, 3, stride=2, padding=1, output_padding=1), 6)
    g.sigmoid("output", x, 6)
    return g


def build(arch: str, **hyper) -> ModelGraph:
    """Build a model from its short tag (``unet``, ``fcdn56``, ``fcdn67``, ``fcdn103``, ``enet``)."""
    if arch == "unet":
        return build_unet(int(hyper.get("base_channels", 64)), int(hyper.get("depth", 4)))
    if arch.startswith("fcdn") and arch[4:].isdigit():
        return build_fc_densenet(int(arch[4:]))
    if arch == "enet":
        return build_enet(int(hyper.get("width", 16)))
    raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")


def bottleneck_names(model: ModelGraph) -> Sequence[str]:
    """Prefixes of the ENet residual bottlenecks that keep their resolution."""
    return sorted({n.name.rsplit(".", 1)[0] for n in model.nodes if n.name.endswith(".sum") and ".b0" not in n.name})
