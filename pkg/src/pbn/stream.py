"""Spectrogram features and seamless streaming.

A stack of valid-mode convolutions with kernel sizes ``k_i`` and
downsampling ``s_i`` along time has receptive field
``R = 1 + sum (k_i - 1) * prod_{j<i} s_j`` and total stride
``S = prod s_i``: output row ``p`` depends on input rows ``[p*S, p*S + R)``.
Cutting the input into windows that overlap by ``R - S`` rows and whose
starts are multiples of ``S`` therefore yields output blocks that simply
concatenate to the whole-input output; no padding, no cross-fading.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LengthError, PlanError
from .linops import ConvMap

WINDOW = 384
HOP = 128
FLOOR = 1e-12


def frame_count(length, window=WINDOW, hop=HOP, framing="strict"):
    if length < window:
        raise LengthError(f"signal of {length} samples is shorter than the {window}-sample window")
    if framing == "strict":
        return (length - window) // hop + 1
    if framing == "tail":
        return -(-length // hop)
    raise ValueError(f"unknown framing {framing!r}; use 'strict' or 'tail'")


def spectrogram(signal, window=WINDOW, hop=HOP, framing="strict", floor=FLOOR):
    """Log magnitude-squared spectrum of rectangular frames, shape (frames, window//2 + 1).

    ``framing='strict'`` keeps only frames that lie inside the signal;
    ``'tail'`` continues to ``ceil(T/hop)`` frames, extending the signal by
    repeating its last sample.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    n = frame_count(len(x), window, hop, framing)
    need = (n - 1) * hop + window
    if need > len(x):
        x = np.pad(x, (0, need - len(x)), mode="edge")
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n]
    spec = np.fft.rfft(frames, axis=1)
    return np.log(spec.real ** 2 + spec.imag ** 2 + floor)


def read_pcm16(source):
    """16-bit little-endian PCM (path or bytes) scaled to [-1, 1)."""
    buf = Path(source).read_bytes() if isinstance(source, (str, Path)) else bytes(source)
    if len(buf) % 2:
        raise LengthError("PCM data has an odd number of bytes")
    return np.frombuffer(buf, dtype="<i2").astype(np.float64) / 32768.0


def write_pcm16(path, signal):
    data = np.clip(np.round(np.asarray(signal) * 32768.0), -32768, 32767).astype("<i2")
    Path(path).write_bytes(data.tobytes())


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class ReceptiveField:
    size: int      # R
    stride: int    # S

    @property
    def context(self):
        return self.size - self.stride

    def output_length(self, n):
        return 0 if n < self.size else (n - self.size) // self.stride + 1


def receptive_field(kernels, strides):
    """Receptive field and total stride of a valid-mode stack along one axis."""
    size, jump = 1, 1
    for k, s in zip(kernels, strides):
        if k < 1 or s < 1:
            raise PlanError("kernel sizes and strides must be positive")
        size += (k - 1) * jump
        jump *= s
    return ReceptiveField(size, jump)


def conv_field(maps, axis=0):
    """Receptive field of a chain of ConvMaps along a spatial axis (0 rows, 1 columns)."""
    return receptive_field([m.kernel.shape[2 + axis] for m in maps], [m.stride[axis] for m in maps])


@dataclass(frozen=True)
class StreamSegment:
    index: int
    in_start: int
    in_stop: int
    out_start: int
    out_stop: int


@dataclass(frozen=True)
class StreamPlan:
    total_len: int
    window: int
    hop: int
    field: ReceptiveField
    segments: tuple

    @property
    def segment_count(self):
        return len(self.segments)

    @property
    def context(self):
        return self.field.context

    @property
    def output_length(self):
        return self.field.output_length(self.total_len)

    def coverage(self):
        return {s.index: (s.in_start, s.in_stop) for s in self.segments}


def plan_stream(total_len, window, hop=None, conv_context=0):
    """Cut ``total_len`` input rows into windows whose outputs tile the whole output.

    ``conv_context`` is a :class:`ReceptiveField` or, for stride-1 stacks, the
    integer margin ``R - 1``.  Consecutive windows overlap by exactly the
    context; ``hop`` is derived from it and, if given, must agree.
    """
    rf = conv_context if isinstance(conv_context, ReceptiveField) else ReceptiveField(int(conv_context) + 1, 1)
    if window < rf.size:
        raise PlanError(f"window {window} is smaller than the receptive field {rf.size}")
    if (window - rf.size) % rf.stride:
        raise PlanError(f"window - receptive field ({window - rf.size}) must be a multiple of the "
                        f"total stride {rf.stride}")
    step = window - rf.context
    if hop is not None and hop != step:
        raise PlanError(f"hop must be window - context = {step}, got {hop}")
    if total_len < rf.size:
        raise PlanError(f"input of length {total_len} is shorter than the receptive field {rf.size}")
    per = (window - rf.size) // rf.stride + 1
    total_out = rf.output_length(total_len)
    segs = []
    for i, o0 in enumerate(range(0, total_out, per)):
        o1 = min(total_out, o0 + per)
        segs.append(StreamSegment(i, o0 * rf.stride, (o1 - 1) * rf.stride + rf.size, o0, o1))
    return StreamPlan(total_len, window, step, rf, tuple(segs))


def split(plan, x, axis=0):
    """Input slices for every segment of the plan."""
    x = np.asarray(x)
    if x.shape[axis] != plan.total_len:
        raise PlanError(f"input has length {x.shape[axis]} along axis {axis}, plan expects {plan.total_len}")
    return [np.take(x, np.arange(s.in_start, s.in_stop), axis=axis) for s in plan.segments]


def reassemble(plan, outputs, axis=0):
    """Concatenate per-segment outputs along ``axis``.

    ``outputs`` is a sequence in segment order or of ``(index, array)`` pairs
    in any order.
    """
    outputs = list(outputs)
    if outputs and isinstance(outputs[0], tuple):
        keyed = dict(outputs)
        if sorted(keyed) != list(range(plan.segment_count)):
            raise PlanError("segment indices do not match the plan")
        outputs = [keyed[i] for i in range(plan.segment_count)]
    if len(outputs) != plan.segment_count:
        raise PlanError(f"got {len(outputs)} segment outputs, plan has {plan.segment_count}")
    for seg, out in zip(plan.segments, outputs):
        n = np.shape(out)[axis]
        if n != seg.out_stop - seg.out_start:
            raise PlanError(f"segment {seg.index} produced {n} rows, expected "
                            f"{seg.out_stop - seg.out_start}")
    return np.concatenate(outputs, axis=axis)


# ---------------------------------------------------------------------------
# convolution stacks on arbitrary-length inputs


def conv_stack(maps, x, biases=None, activations=None):
    """Apply a chain of conv maps to a (C, H, W) map of any height.

    The maps only provide kernels and strides; input shapes follow ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    for i, m in enumerate(maps):
        cm = ConvMap(m.kernel, x.shape, m.stride)
        y = cm.forward(x.ravel())
        if biases is not None and biases[i] is not None:
            y = y + cm.expand_bias(biases[i])
        if activations is not None and activations[i] is not None:
            y = activations[i](y)
        x = y.reshape(cm.out_shape)
    return x


def streamed_conv_stack(maps, x, window, biases=None, activations=None):
    """Streamed evaluation of :func:`conv_stack` along the row axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    plan = plan_stream(x.shape[1], window, conv_context=conv_field(maps, 0))
    outs = [conv_stack(maps, piece, biases, activations) for piece in split(plan, x, axis=1)]
    return reassemble(plan, outs, axis=1), plan


def streamed_log_likelihood(loglik, x, plan, axis=0):
    """Sum of per-segment log-likelihoods (segments treated as independent)."""
    return float(sum(loglik(piece) for piece in split(plan, x, axis)))


def paper_time_field():
    """Receptive field along time of the reference three-conv stack."""
    return receptive_field([9, 7, 8], [3, 3, 2])


def total_frames(length, window=WINDOW, hop=HOP, framing="strict"):
    return frame_count(length, window, hop, framing)

