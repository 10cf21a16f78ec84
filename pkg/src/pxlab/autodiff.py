"""Reverse-mode differentiation over networks, with three forward modes.

The tape is layer-structured: one entry per layer application, each storing
the value snapshots its adjoint needs. ``backward`` walks entries in strict
reverse order and returns gradients with respect to whatever flat weight
vector the forward consumed — so differentiating a network evaluated at
squared parameters gives d/d(theta^2) directly, no chain-rule rewrite.

Forward modes:

* ``STANDARD``       ReLUs behave normally; their 0/1 indicators are
                     recorded (z = 0 counts as closed).
* ``Forced(record)`` each ReLU multiplies its pre-activation by the supplied
                     record instead of its own indicator. Because forcing is
                     a plain multiplication, the adjoint is the same
                     multiplication.
* ``PASSTHROUGH``    every ReLU acts as identity; an all-ones record is
                     returned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor
from .model import AvgPool, Conv2D, Dense, Flatten, Network, ReLU


class Standard:
    pass


class PassThrough:
    pass


@dataclass
class Forced:
    record: list[np.ndarray]


STANDARD = Standard()
PASSTHROUGH = PassThrough()

Mode = Standard | Forced | PassThrough

# ActivationRecord: one {0,1} array per ReLU site, shaped like its pre-activation.
ActivationRecord = list


class NonFiniteForwardError(tensor.NonFiniteError):
    """A layer produced NaN/Inf; carries the index of the first offender."""

    def __init__(self, layer_index: int, message: str):
        super().__init__(message)
        self.layer_index = layer_index


@dataclass
class _Entry:
    layer_index: int
    kind: str
    saved: tuple


@dataclass
class Tape:
    """Recorded forward pass; reusable for any number of backward calls."""

    net: Network
    params_used: np.ndarray
    entries: list[_Entry]
    output_shape: tuple[int, ...]


class ForwardResult(NamedTuple):
    output: np.ndarray
    record: list[np.ndarray]
    tape: Tape | None


def _augment_ones(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def forward(net: Network, x: np.ndarray, mode: Mode = STANDARD,
            params: np.ndarray | None = None, tape: bool = True) -> ForwardResult:
    """Run the network on a batch, returning (output, record, tape).

    ``params`` substitutes the flat weight vector (already masked by the
    caller); the default is the net's own masked parameters. With
    ``tape=False`` no entries are written (a detached pass).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise tensor.ShapeError(f"input shape {x.shape[1:]} != network input {net.input_shape}")
    if params is None:
        params = net.masked_params()
    elif params.shape != (net.m,):
        raise tensor.ShapeError(f"params length {params.size} != parameter count {net.m}")

    relu_sites = [i for i, s in enumerate(net.layers) if isinstance(s, ReLU)]
    if isinstance(mode, Forced):
        if len(mode.record) != len(relu_sites):
            raise tensor.ShapeError(
                f"forced record has {len(mode.record)} entries, net has {len(relu_sites)} ReLU sites")

    entries: list[_Entry] = [] if tape else None
    record: list[np.ndarray] = []
    cur = x
    relu_no = 0
    for idx, spec in enumerate(net.layers):
        try:
            if isinstance(spec, Dense):
                w = net.layer_params(idx, params).reshape(
                    spec.out_features, spec.in_features + (1 if spec.bias else 0))
                xin = _augment_ones(cur) if spec.bias else cur
                out = tensor.matmul(xin, w.T)
                if tape:
                    entries.append(_Entry(idx, "dense", (xin, w)))
            elif isinstance(spec, Conv2D):
                block = net.layer_params(idx, params)
                ksz = spec.out_channels * spec.in_channels * spec.kh * spec.kw
                kernel = block[:ksz].reshape(spec.out_channels, spec.in_channels, spec.kh, spec.kw)
                out = tensor.conv2d(cur, kernel, spec.stride, spec.padding)
                if spec.bias:
                    out = out + block[ksz:][None, :, None, None]
                    tensor.check_finite(out, "conv bias")
                if tape:
                    entries.append(_Entry(idx, "conv", (cur, kernel)))
            elif isinstance(spec, ReLU):
                if isinstance(mode, Standard):
                    mult = (cur > 0.0).astype(np.float64)
                elif isinstance(mode, PassThrough):
                    mult = np.ones_like(cur)
                else:
                    mult = np.asarray(mode.record[relu_no], dtype=np.float64)
                    if mult.shape != cur.shape:
                        raise tensor.ShapeError(
                            f"forced record {relu_no} has shape {mult.shape}, "
                            f"pre-activation is {cur.shape}")
                record.append(mult)
                relu_no += 1
                out = cur * mult
                if tape:
                    entries.append(_Entry(idx, "relu", (mult,)))
            elif isinstance(spec, AvgPool):
                out = tensor.avg_pool2d(cur, spec.k, spec.stride)
                if tape:
                    entries.append(_Entry(idx, "avgpool", (cur.shape,)))
            elif isinstance(spec, Flatten):
                out = cur.reshape(cur.shape[0], -1)
                if tape:
                    entries.append(_Entry(idx, "flatten", (cur.shape,)))
            else:
                raise TypeError(f"unknown layer spec {spec!r}")
            tensor.check_finite(out, f"layer {idx}")
        except tensor.NonFiniteError as exc:
            raise NonFiniteForwardError(idx, f"non-finite output at layer {idx}: {exc}") from exc
        cur = out

    result_tape = Tape(net, params, entries, cur.shape) if tape else None
    return ForwardResult(cur, record, result_tape)


def backward(tape: Tape, seed_grad: np.ndarray) -> np.ndarray:
    """Gradient of (seed_grad . output) w.r.t. the weight vector the forward used.

    Parameters on no used path get exactly 0. The tape may be reused.
    """
    seed_grad = np.asarray(seed_grad, dtype=np.float64)
    if seed_grad.shape != tape.output_shape:
        raise tensor.ShapeError(f"seed shape {seed_grad.shape} != output shape {tape.output_shape}")
    net = tape.net
    grads = np.zeros(net.m, dtype=np.float64)
    g = seed_grad
    for entry in reversed(tape.entries):
        spec = net.layers[entry.layer_index]
        if entry.kind == "dense":
            xin, w = entry.saved
            off, ext = net.layout[entry.layer_index]
            grads[off:off + ext] += (g.T @ xin).ravel()
            g = (g @ w)[:, :spec.in_features]
        elif entry.kind == "conv":
            xin, kernel = entry.saved
            off, _ = net.layout[entry.layer_index]
            dk, dx = _conv_backward(xin, kernel, g, spec.stride, spec.padding)
            ksz = kernel.size
            grads[off:off + ksz] += dk.ravel()
            if spec.bias:
                grads[off + ksz:off + ksz + spec.out_channels] += g.sum(axis=(0, 2, 3))
            g = dx
        elif entry.kind == "relu":
            (mult,) = entry.saved
            g = g * mult
        elif entry.kind == "avgpool":
            (in_shape,) = entry.saved
            g = _avgpool_backward(in_shape, g, spec.k, spec.stride)
        elif entry.kind == "flatten":
            (in_shape,) = entry.saved
            g = g.reshape(in_shape)
    tensor.check_finite(grads, "backward grads")
    return grads


def _conv_backward(x, kernel, dy, stride, padding):
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    _, _, oh, ow = dy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    dk = np.einsum("nohw,nchwab->ocab", dy, win)
    dxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += np.einsum(
                "nohw,oc->nchw", dy, kernel[:, :, a, b])
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return dk, dx


def _avgpool_backward(in_shape, dy, k, stride):
    _, _, oh, ow = dy.shape
    dx = np.zeros(in_shape, dtype=np.float64)
    share = dy / (k * k)
    for a in range(k):
        for b in range(k):
            dx[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += share
    return dx


def grad_check(net: Network, x: np.ndarray, scalar_head="sum", eps: float = 1e-5,
               return_details: bool = False):
    """Max floored-relative error between backward and central differences.

    The scalar head is sum(output) or, given an array, sum(head * output).
    Coordinates whose perturbation flips any ReLU indicator are skipped
    (central differences straddle a kink there); the skip count is available
    via ``return_details``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    out, base_record, tp = forward(net, x, STANDARD)
    if isinstance(scalar_head, str):
        if scalar_head != "sum":
            raise ValueError(f"unknown scalar head {scalar_head!r}")
        head = np.ones_like(out)
    else:
        head = np.asarray(scalar_head, dtype=np.float64)
        if head.shape != out.shape:
            raise tensor.ShapeError(f"head shape {head.shape} != output shape {out.shape}")
    analytic = backward(tp, head) * net.mask

    def value_at(theta):
        probe = net.with_mask(net.mask)
        out_p, rec_p, _ = forward(probe, x, STANDARD, params=theta * net.mask, tape=False)
        return float(np.sum(head * out_p)), rec_p

    theta0 = net.params
    max_err = 0.0
    skipped = []
    for j in range(net.m):
        if net.mask[j] == 0.0:
            continue
        theta = theta0.copy()
        theta[j] = theta0[j] + eps
        f_plus, rec_plus = value_at(theta)
        theta[j] = theta0[j] - eps
        f_minus, rec_minus = value_at(theta)
        if _records_differ(base_record, rec_plus) or _records_differ(base_record, rec_minus):
            skipped.append(j)
            continue
        fd = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(analytic[j]), abs(fd), 1e-3)
        max_err = max(max_err, abs(analytic[j] - fd) / denom)
    if return_details:
        return max_err, skipped
    return max_err


def _records_differ(a, b) -> bool:
    return any(not np.array_equal(ra, rb) for ra, rb in zip(a, b))
