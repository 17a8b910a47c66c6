#!/usr/bin/env python3
"""Export a PyTorch CNN backbone to the FLGR graph format.

The module is traced with torch.fx. Supported: Conv2d (zero padding, no
dilation), BatchNorm2d (folded into the preceding conv, otherwise exported
as a per-channel 1x1 conv), ReLU, Hardswish, Hardsigmoid, MaxPool2d,
AvgPool2d, AdaptiveAvgPool2d(1), GroupNorm, add, mul, Identity and Dropout.
Only the nodes the chosen output depends on are exported.

Examples:
    python tools/export_graph.py --model torchvision:mobilenet_v3_small \\
        --weights mnv3.pth --output features_12 --size 224 --out mnv3
    python tools/export_graph.py --fixture crates/core/tests/fixtures/tiny

Writes <out>.flgr and the adapter descriptor <out>.json.
"""

import argparse
import importlib
import json
import operator
import struct
from pathlib import Path

import numpy as np
import torch
import torch.fx as fx
import torch.nn as nn
import torch.nn.functional as F

MAGIC = b"FLGR"
VERSION = 1
IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]


def pair(v):
    return [int(v), int(v)] if isinstance(v, int) else [int(v[0]), int(v[1])]


class Exporter:
    def __init__(self, gm):
        self.gm = gm
        self.modules = dict(gm.named_modules())
        self.nodes = []
        self.weights = {}
        self.alias = {}
        self.input = None

    def name(self, arg):
        if not isinstance(arg, fx.Node):
            raise ValueError(f"constant operand {arg!r} is not supported")
        return self.alias.get(arg.name, arg.name)

    def tensor(self, key, value):
        self.weights[key] = value.detach().to(torch.float32).contiguous().numpy()
        return key

    def emit(self, node, op, inputs, **fields):
        self.nodes.append({"name": node.name, "inputs": [self.name(a) for a in inputs], "op": op, **fields})

    def conv(self, node, conv, x, scale=None, shift=None):
        if conv.padding_mode != "zeros" or pair(conv.dilation) != [1, 1]:
            raise ValueError(f"{node.name}: only zero-padded, undilated convolutions are supported")
        if isinstance(conv.padding, str):
            raise ValueError(f"{node.name}: string padding is not supported")
        w = conv.weight.detach().double()
        b = conv.bias.detach().double() if conv.bias is not None else torch.zeros(w.shape[0], dtype=torch.float64)
        if scale is not None:
            w = w * scale.view(-1, 1, 1, 1)
            b = b * scale + shift
        self.emit(
            node,
            "conv2d",
            [x],
            weight=self.tensor(f"{node.name}.weight", w),
            bias=self.tensor(f"{node.name}.bias", b),
            stride=pair(conv.stride),
            padding=pair(conv.padding),
            groups=int(conv.groups),
        )

    @staticmethod
    def bn_affine(bn):
        scale = bn.weight.detach().double() / torch.sqrt(bn.running_var.double() + bn.eps)
        shift = bn.bias.detach().double() - bn.running_mean.double() * scale
        return scale, shift

    def run(self, output):
        graph = self.gm.graph
        by_name = {n.name: n for n in graph.nodes}
        if output not in by_name:
            raise ValueError(f"no node named {output!r}; nodes: {', '.join(by_name)}")
        keep = set()
        stack = [by_name[output]]
        while stack:
            n = stack.pop()
            if n.name in keep:
                continue
            keep.add(n.name)
            stack.extend(a for a in n.all_input_nodes)
        folded = set()
        for node in graph.nodes:
            if node.name not in keep or node.name in folded:
                continue
            if node.op == "placeholder":
                self.input = node.name
                continue
            target = node.target
            mod = self.modules.get(target) if node.op == "call_module" else None
            args = node.args
            if isinstance(mod, nn.Conv2d):
                users = list(node.users)
                nxt = users[0] if len(users) == 1 else None
                bn = self.modules.get(nxt.target) if nxt is not None and nxt.op == "call_module" else None
                if isinstance(bn, nn.BatchNorm2d) and nxt.name in keep:
                    scale, shift = self.bn_affine(bn)
                    self.conv(node, mod, args[0], scale, shift)
                    self.alias[nxt.name] = node.name
                    folded.add(nxt.name)
                else:
                    self.conv(node, mod, args[0])
            elif isinstance(mod, nn.BatchNorm2d):
                c = mod.num_features
                scale, shift = self.bn_affine(mod)
                self.emit(
                    node,
                    "conv2d",
                    [args[0]],
                    weight=self.tensor(f"{node.name}.weight", scale.view(c, 1, 1, 1)),
                    bias=self.tensor(f"{node.name}.bias", shift),
                    stride=[1, 1],
                    padding=[0, 0],
                    groups=c,
                )
            elif isinstance(mod, nn.ReLU) or target in (F.relu, torch.relu):
                self.emit(node, "relu", [args[0]])
            elif isinstance(mod, nn.Hardswish) or target is F.hardswish:
                self.emit(node, "hardswish", [args[0]])
            elif isinstance(mod, nn.Hardsigmoid) or target is F.hardsigmoid:
                self.emit(node, "hardsigmoid", [args[0]])
            elif isinstance(mod, nn.MaxPool2d):
                if pair(mod.dilation) != [1, 1] or mod.ceil_mode:
                    raise ValueError(f"{node.name}: dilated or ceil-mode max pooling is not supported")
                stride = mod.stride if mod.stride is not None else mod.kernel_size
                self.emit(node, "max_pool2d", [args[0]], kernel=pair(mod.kernel_size), stride=pair(stride), padding=pair(mod.padding))
            elif isinstance(mod, nn.AvgPool2d):
                if mod.ceil_mode or mod.divisor_override is not None:
                    raise ValueError(f"{node.name}: ceil mode and divisor override are not supported")
                stride = mod.stride if mod.stride is not None else mod.kernel_size
                self.emit(
                    node,
                    "avg_pool2d",
                    [args[0]],
                    kernel=pair(mod.kernel_size),
                    stride=pair(stride),
                    padding=pair(mod.padding),
                    count_include_pad=bool(mod.count_include_pad),
                )
            elif isinstance(mod, nn.AdaptiveAvgPool2d) or target is F.adaptive_avg_pool2d:
                size = mod.output_size if mod is not None else args[1]
                if pair(size) != [1, 1]:
                    raise ValueError(f"{node.name}: only adaptive pooling to 1x1 is supported")
                self.emit(node, "global_avg_pool", [args[0]])
            elif isinstance(mod, nn.GroupNorm):
                fields = {"groups": int(mod.num_groups), "eps": float(mod.eps)}
                if mod.affine:
                    fields["weight"] = self.tensor(f"{node.name}.weight", mod.weight)
                    fields["bias"] = self.tensor(f"{node.name}.bias", mod.bias)
                self.emit(node, "group_norm", [args[0]], **fields)
            elif target in (operator.add, torch.add):
                self.emit(node, "add", list(args[:2]))
            elif target in (operator.mul, torch.mul):
                self.emit(node, "mul", list(args[:2]))
            elif isinstance(mod, (nn.Identity, nn.Dropout)):
                self.alias[node.name] = self.name(args[0])
            elif node.op == "output":
                continue
            else:
                raise ValueError(f"unsupported node {node.name}: {node.op} {target}")
        if self.input is None:
            raise ValueError("graph has no input")
        return self.alias.get(output, output)


def encode(spec, weights):
    header = json.dumps(spec, separators=(",", ":")).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(header))
    out += header
    for key in sorted(weights):
        w = weights[key]
        name = key.encode()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", w.ndim)
        for d in w.shape:
            out += struct.pack("<I", d)
        out += w.astype("<f4").tobytes()
    return bytes(out)


def truncate(gm, output):
    """Copy of the traced module that returns the activations of `output`."""
    graph = fx.Graph()
    env = {}
    for node in gm.graph.nodes:
        if node.op == "output":
            continue
        env[node] = graph.node_copy(node, lambda n: env[n])
        if node.name == output:
            graph.output(env[node])
            break
    return fx.GraphModule(gm, graph).eval()


def export(model, size, output, out):
    model = model.eval()
    gm = fx.symbolic_trace(model)
    ex = Exporter(gm)
    out_name = ex.run(output)
    spec = {"input": "input", "input_shape": [size, size, 3], "output": out_name, "nodes": ex.nodes}
    for n in spec["nodes"]:
        n["inputs"] = ["input" if i == ex.input else i for i in n["inputs"]]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    graph_path = out.with_name(out.name + ".flgr")
    graph_path.write_bytes(encode(spec, ex.weights))
    descriptor = {
        "kind": "graph",
        "graph": graph_path.name,
        "input": "input",
        "output": out_name,
        "mean": IMAGENET_MEAN,
        "std": IMAGENET_STD,
    }
    out.with_name(out.name + ".json").write_text(json.dumps(descriptor, indent=2) + "\n")
    return truncate(gm, output), out_name


def load_model(ref, seed):
    torch.manual_seed(seed)
    if ref.startswith("torchvision:"):
        import torchvision.models as tvm

        return getattr(tvm, ref.split(":", 1)[1])(weights=None)
    module, _, attr = ref.partition(":")
    return getattr(importlib.import_module(module), attr)()


class TinyNet(nn.Module):
    """Covers every exported op: folded and standalone batch norm, grouped
    conv, squeeze-excitation, residual add, both pools and group norm."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(3, 8, 3, stride=2, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(8)
        self.dw = nn.Conv2d(8, 8, 3, padding=1, groups=8)
        self.act = nn.Hardswish()
        self.se_pool = nn.AdaptiveAvgPool2d(1)
        self.se_fc1 = nn.Conv2d(8, 4, 1)
        self.se_fc2 = nn.Conv2d(4, 8, 1)
        self.gate = nn.Hardsigmoid()
        self.pw = nn.Conv2d(8, 8, 1)
        self.bn2 = nn.BatchNorm2d(8)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.avg = nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
        self.norm = nn.GroupNorm(2, 8)
        self.drop = nn.Dropout(0.5)

    def forward(self, x):
        x = F.relu(self.bn(self.stem(x)))
        y = self.act(self.dw(x))
        s = self.gate(self.se_fc2(F.relu(self.se_fc1(self.se_pool(y)))))
        y = y * s
        y = self.bn2(y) + self.pw(y)
        x = x + y
        x = self.pool(x)
        x = self.norm(self.avg(x))
        return self.drop(x)


def randomize_batchnorm(model, gen):
    for m in model.modules():
        if isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            with torch.no_grad():
                m.weight.uniform_(0.5, 1.5, generator=gen)
                m.bias.uniform_(-0.3, 0.3, generator=gen)
                if isinstance(m, nn.BatchNorm2d):
                    m.running_mean.uniform_(-0.2, 0.2, generator=gen)
                    m.running_var.uniform_(0.5, 2.0, generator=gen)


def write_cache(path, feats):
    count, dim = feats.shape
    out = bytearray(b"FCH1") + struct.pack("<HIIB", 1, count, dim, 0)
    out += feats.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def features(gm, images, size):
    """Reference pipeline: bilinear resize (half-pixel centres, no
    antialias), ImageNet normalization, backbone, 2x2 pooling, HWC flatten."""
    mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
    out = {"avg": [], "max": []}
    for img in images:
        x = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
        x = (x / 255.0 - mean) / std
        with torch.no_grad():
            act = gm(x)
        for kind, pool in (("avg", F.avg_pool2d), ("max", F.max_pool2d)):
            p = pool(act, 2)
            out[kind].append(p[0].permute(1, 2, 0).reshape(-1).numpy())
    return {k: np.stack(v) for k, v in out.items()}


def make_fixture(directory):
    from PIL import Image

    directory = Path(directory)
    torch.manual_seed(7)
    gen = torch.Generator().manual_seed(11)
    model = TinyNet()
    randomize_batchnorm(model, gen)
    size = 32
    gm, _ = export(model, size, "drop", directory / "tiny")
    rng = np.random.default_rng(5)
    images = []
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, (h, w) in enumerate([(40, 52), (32, 32), (27, 19)]):
        img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        Image.fromarray(img, "RGB").save(img_dir / f"{i}.png")
        images.append(img)
    feats = features(gm.eval(), images, size)
    for kind, f in feats.items():
        write_cache(directory / f"expected_{kind}.fch", f)
    print(f"fixture written to {directory}: {feats['avg'].shape[1]} features per image")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--model", help="torchvision:<name> or <module>:<factory>")
    p.add_argument("--weights", help="state_dict file to load (never downloaded)")
    p.add_argument("--output", help="fx node whose activations are the features")
    p.add_argument("--size", type=int, default=224, help="square input size")
    p.add_argument("--seed", type=int, default=0, help="init seed when no weights are given")
    p.add_argument("--out", help="output prefix")
    p.add_argument("--fixture", help="write the test fixture into this directory instead")
    a = p.parse_args()
    if a.fixture:
        make_fixture(a.fixture)
        return
    if not (a.model and a.output and a.out):
        p.error("--model, --output and --out are required")
    model = load_model(a.model, a.seed)
    if a.weights:
        model.load_state_dict(torch.load(a.weights, map_location="cpu"))
    _, name = export(model, a.size, a.output, a.out)
    print(f"exported {a.model} up to {name}")


if __name__ == "__main__":
    main()
