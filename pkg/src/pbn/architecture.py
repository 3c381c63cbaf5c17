"""Line-oriented architecture files.

Grammar (one statement per line, ``#`` starts a comment, keys are
``key=value`` pairs in any order)::

    input   H W            | input C H W | input N
    conv    kernels=K size=KHxKW [stride=SRxSC] [act=ACT] [prior=PRIOR]
    dense   units=M [act=ACT] [prior=PRIOR]
    head    units=K [kind=sigmoid|softmax]
    group   KIND FIRST-LAST

``ACT`` is ``linear``, ``tg`` or ``sigmoid``.  ``PRIOR`` defaults to the
family matching the previous layer's activation (Gaussian after linear,
truncated Gaussian after TG, truncated exponential after sigmoid) and to
Gaussian for the first layer.  ``KIND`` is ``glg``, ``onetoone`` or ``ecg``;
layer numbers are 1-based and inclusive.  ``head`` is the discriminative
classifier layer; it is not part of the generative chain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .linops import ConvMap, DenseMap, conv_output_extent
from .maxent import GAUSSIAN, TRUNCATED_EXPONENTIAL, TRUNCATED_GAUSSIAN, get_prior
from .network import LayerSpec, NetworkSpec, get_activation

_DEFAULT_PRIOR = {"linear": GAUSSIAN, "tg": TRUNCATED_GAUSSIAN, "sigmoid": TRUNCATED_EXPONENTIAL}

PAPER_ARCHITECTURE = """\
# seven-layer spectrogram network; the first five layers form a GLG
input 126 193
conv  kernels=6  size=9x10 stride=3x3 act=linear
conv  kernels=36 size=7x8  stride=3x3 act=linear
conv  kernels=96 size=8x7  stride=2x3 act=linear
dense units=512 act=linear
dense units=256 act=tg
dense units=128 act=tg
head  units=6
group glg 1-5
"""


@dataclass
class LayerDesc:
    kind: str                 # "conv" or "dense"
    units: int = 0            # dense output size / conv kernel count
    size: tuple = (1, 1)      # conv kernel extent
    stride: tuple = (1, 1)
    act: str = "linear"
    prior: str | None = None


@dataclass
class Architecture:
    input_shape: tuple
    layers: list = field(default_factory=list)
    groups: list = field(default_factory=list)   # (kind, start, stop) 0-based, stop exclusive
    head_units: int = 0
    head_kind: str = "sigmoid"

    def shapes(self):
        """Per-layer output shapes (tuples for conv maps, (M,) for dense)."""
        shape = tuple(self.input_shape)
        out = []
        for d in self.layers:
            if d.kind == "conv":
                if len(shape) == 2:
                    shape = (1,) + shape
                if len(shape) != 3:
                    raise ConfigError("conv layer needs a 2-D or 3-D input map")
                c, h, w = shape
                if d.size[0] > h or d.size[1] > w:
                    raise ConfigError(f"kernel {d.size} larger than input map {shape[1:]}")
                shape = (d.units, conv_output_extent(h, d.size[0], d.stride[0]),
                         conv_output_extent(w, d.size[1], d.stride[1]))
            else:
                shape = (d.units,)
            out.append(shape)
        return out

    def dims(self):
        return [math.prod(s) for s in self.shapes()]


def _pair(text, key):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"{key} must look like AxB, got {text!r}") from None


def parse_architecture(text):
    arch = None
    layers, groups = [], []
    head_units, head_kind = 0, "sigmoid"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        cmd, args = words[0].lower(), words[1:]
        kv = {}
        pos = []
        for a in args:
            if "=" in a:
                k, v = a.split("=", 1)
                kv[k.lower()] = v
            else:
                pos.append(a)
        try:
            if cmd == "input":
                arch = tuple(int(p) for p in pos)
                if not 1 <= len(arch) <= 3:
                    raise ConfigError("input takes 1 to 3 extents")
            elif cmd == "conv":
                layers.append(LayerDesc("conv", int(kv["kernels"]), _pair(kv["size"], "size"),
                                        _pair(kv.get("stride", "1x1"), "stride"),
                                        kv.get("act", "linear").lower(), kv.get("prior")))
            elif cmd == "dense":
                layers.append(LayerDesc("dense", int(kv["units"]), act=kv.get("act", "linear").lower(),
                                        prior=kv.get("prior")))
            elif cmd == "head":
                head_units = int(kv["units"])
                head_kind = kv.get("kind", "sigmoid").lower()
                if head_kind not in ("sigmoid", "softmax"):
                    raise ConfigError(f"unknown head kind {head_kind!r}")
            elif cmd == "group":
                kind = pos[0].lower()
                first, last = (int(v) for v in pos[1].split("-"))
                groups.append((kind, first - 1, last))
            else:
                raise ConfigError(f"unknown statement {cmd!r}")
        except (KeyError, IndexError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise ConfigError(f"line {lineno}: {exc}") from None
            raise ConfigError(f"line {lineno}: malformed {cmd!r} statement ({raw.strip()})") from None
    if arch is None:
        raise ConfigError("architecture has no input statement")
    if not layers:
        raise ConfigError("architecture has no layers")
    for d in layers:
        try:
            get_activation(d.act)
            if d.prior:
                get_prior(d.prior)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return Architecture(arch, layers, groups, head_units, head_kind)


def load_architecture(path):
    return parse_architecture(Path(path).read_text())


def format_architecture(arch):
    lines = ["input " + " ".join(str(s) for s in arch.input_shape)]
    for d in arch.layers:
        extra = f" prior={d.prior}" if d.prior else ""
        if d.kind == "conv":
            lines.append(f"conv kernels={d.units} size={d.size[0]}x{d.size[1]} "
                         f"stride={d.stride[0]}x{d.stride[1]} act={d.act}{extra}")
        else:
            lines.append(f"dense units={d.units} act={d.act}{extra}")
    if arch.head_units:
        lines.append(f"head units={arch.head_units} kind={arch.head_kind}")
    for kind, start, stop in arch.groups:
        lines.append(f"group {kind} {start + 1}-{stop}")
    return "\n".join(lines) + "\n"


def orthonormal_columns(rng, n, m):
    """Random N x M matrix with orthonormal columns (rows when M > N)."""
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


@dataclass
class Head:
    """Classifier layer on the terminal activations: logits ``a W + b``."""
    weight: np.ndarray
    bias: np.ndarray
    kind: str = "sigmoid"

    @property
    def units(self):
        return self.weight.shape[1]

    def logits(self, a):
        return a @ self.weight + self.bias

    def params(self):
        return {"w": self.weight.copy(), "b": self.bias.copy()}

    def with_params(self, p):
        return Head(np.array(p["w"]), np.array(p["b"]), self.kind)


def build_network(arch, seed=0, correction=True):
    """Instantiate a network (and head, or None) with orthonormal initial maps."""
    rng = np.random.default_rng(seed)
    shapes = arch.shapes()
    prev_shape = tuple(arch.input_shape)
    prev_act = None
    layers = []
    for d, shape in zip(arch.layers, shapes):
        n = math.prod(prev_shape)
        if d.kind == "conv":
            in_shape = prev_shape if len(prev_shape) == 3 else (1,) + prev_shape
            fan = in_shape[0] * d.size[0] * d.size[1]
            k = orthonormal_columns(rng, fan, d.units).T.reshape(d.units, in_shape[0], *d.size)
            lmap = ConvMap(k, in_shape, d.stride)
        else:
            lmap = DenseMap(orthonormal_columns(rng, n, d.units))
        if d.prior:
            prior = get_prior(d.prior)
        else:
            prior = GAUSSIAN if prev_act is None else _DEFAULT_PRIOR[prev_act]
        layers.append(LayerSpec(lmap, prior=prior, activation=get_activation(d.act)))
        prev_shape, prev_act = shape, d.act
    net = NetworkSpec(layers, [tuple(g) for g in arch.groups], correction=correction)
    head = None
    if arch.head_units:
        width = math.prod(prev_shape)
        head = Head(0.1 * orthonormal_columns(rng, width, arch.head_units),
                    np.zeros(arch.head_units), arch.head_kind)
    return net, head
