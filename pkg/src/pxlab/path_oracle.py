"""Ground truth by exhaustive path enumeration on small bias-free MLPs.

Every input->output path of a Dense/ReLU chain is materialized explicitly,
so the quantities the fast modules compute through forward/backward passes
(output values, the two Frobenius bound terms, the PX scores) can be
re-derived as literal sums over paths and compared.

Leave-one-out weight products are computed as products excluding one
factor, never as a division, so zero weights (pruned positions, zero
initializations) are well-defined.

The oracle is deliberately restricted: biases and conv layers are rejected.
A path here holds exactly one weight per dense layer, which is only true
without the appended-constant bias inputs, and convolutional weight sharing
makes enumeration explode combinatorially.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .model import Dense, Network, ReLU


class CapExceededError(ValueError):
    """Path count exceeds the configured enumeration cap."""


class UnsupportedLayerError(TypeError):
    """The network contains a layer outside the Dense/ReLU path formalism."""


@dataclass(frozen=True)
class Path:
    input_node: int
    output_node: int
    weight_ids: tuple[int, ...]
    # (record index, neuron index) for each ReLU the path traverses
    relu_sites: tuple[tuple[int, int], ...]


@dataclass
class PathSet:
    paths: list[Path]
    total: int
    # column q of weight_ids holds the q-th dense layer's flat parameter id
    weight_ids: np.ndarray
    input_nodes: np.ndarray
    output_nodes: np.ndarray


def _mlp_structure(net: Network):
    """(dims, dense layer indices, relu record index after each dense)."""
    dims = [net.input_shape[0]] if len(net.input_shape) == 1 else None
    if dims is None:
        raise UnsupportedLayerError(f"oracle expects flat inputs, got {net.input_shape}")
    dense_idx: list[int] = []
    relu_after: list[int | None] = []
    record_no = 0
    for idx, spec in enumerate(net.layers):
        if isinstance(spec, Dense):
            if spec.bias:
                raise UnsupportedLayerError("oracle paths require bias-free Dense layers")
            dense_idx.append(idx)
            relu_after.append(None)
            dims.append(spec.out_features)
        elif isinstance(spec, ReLU):
            if not dense_idx:
                raise UnsupportedLayerError("ReLU before any Dense layer")
            if relu_after[-1] is not None:
                raise UnsupportedLayerError("consecutive ReLU layers")
            relu_after[-1] = record_no
            record_no += 1
        else:
            raise UnsupportedLayerError(f"oracle cannot enumerate through {type(spec).__name__}")
    if not dense_idx:
        raise UnsupportedLayerError("no Dense layers")
    return dims, dense_idx, relu_after


def enumerate_paths(net: Network, cap: int = 100_000) -> PathSet:
    """Every structurally valid input->output path, exactly once."""
    dims, dense_idx, relu_after = _mlp_structure(net)
    total = int(np.prod(dims))
    if total > cap:
        raise CapExceededError(f"{total} paths exceed cap {cap}")
    depth = len(dense_idx)
    paths = []
    for nodes in itertools.product(*(range(d) for d in dims)):
        wids = []
        sites = []
        for q, lidx in enumerate(dense_idx):
            off, _ = net.layout[lidx]
            in_dim = dims[q]
            wids.append(off + nodes[q + 1] * in_dim + nodes[q])
            if relu_after[q] is not None:
                sites.append((relu_after[q], nodes[q + 1]))
        paths.append(Path(nodes[0], nodes[-1], tuple(wids), tuple(sites)))
    wid_mat = np.array([p.weight_ids for p in paths], dtype=np.int64).reshape(total, depth)
    in_nodes = np.array([p.input_node for p in paths], dtype=np.int64)
    out_nodes = np.array([p.output_node for p in paths], dtype=np.int64)
    return PathSet(paths, total, wid_mat, in_nodes, out_nodes)


def path_value(path: Path, theta: np.ndarray) -> float:
    """Product of the path's weights."""
    return float(np.prod(theta[list(path.weight_ids)]))


def path_activation(path: Path, x: np.ndarray, net: Network,
                    record: list[np.ndarray] | None = None) -> float:
    """Product of the ReLU indicators of the neurons the path traverses.

    Pre-activations come from a Standard forward of the masked net.
    """
    if record is None:
        _, record, _ = autodiff.forward(net, np.asarray(x, dtype=np.float64)[None, :],
                                        autodiff.STANDARD, tape=False)
    bit = 1.0
    for rec_idx, neuron in path.relu_sites:
        bit *= float(record[rec_idx][0, neuron])
    return bit


def _activation_matrix(net: Network, X: np.ndarray, ps: PathSet) -> np.ndarray:
    """(N, P) path activation statuses for a batch."""
    _, record, _ = autodiff.forward(net, X, autodiff.STANDARD, tape=False)
    act = np.ones((X.shape[0], ps.total), dtype=np.float64)
    for p_idx, path in enumerate(ps.paths):
        for rec_idx, neuron in path.relu_sites:
            act[:, p_idx] *= record[rec_idx][:, neuron]
    return act


def _path_products(ps: PathSet, w: np.ndarray) -> np.ndarray:
    """(P,) products of w over each path's weights."""
    return np.prod(w[ps.weight_ids], axis=1)


def _leave_one_out(ps: PathSet, w: np.ndarray) -> np.ndarray:
    """(P, depth) products of w over each path excluding one position."""
    vals = w[ps.weight_ids]
    p, depth = vals.shape
    prefix = np.ones((p, depth))
    suffix = np.ones((p, depth))
    for q in range(1, depth):
        prefix[:, q] = prefix[:, q - 1] * vals[:, q - 1]
        suffix[:, depth - 1 - q] = suffix[:, depth - q] * vals[:, depth - q]
    return prefix * suffix


def output_via_paths(net: Network, x: np.ndarray, ps: PathSet | None = None) -> np.ndarray:
    """Network outputs assembled as sums of v_p * a_p * x_s over all paths."""
    x = np.asarray(x, dtype=np.float64)
    if ps is None:
        ps = enumerate_paths(net)
    act = _activation_matrix(net, x[None, :], ps)[0]
    vals = _path_products(ps, net.masked_params())
    k = net.output_dim
    out = np.zeros(k)
    np.add.at(out, ps.output_nodes, vals * act * x[ps.input_nodes])
    return out


def frob_jvf(net: Network, X: np.ndarray, ps: PathSet | None = None) -> float:
    """Data term of the trace bound: sum over examples and active paths of
    the squared input feeding each path (masked paths contribute nothing)."""
    X = np.asarray(X, dtype=np.float64)
    if ps is None:
        ps = enumerate_paths(net)
    act = _activation_matrix(net, X, ps)
    alive = _path_products(ps, net.mask)
    contrib = act * (X[:, ps.input_nodes] ** 2) * alive[None, :]
    return float(contrib.sum())


def frob_jtv(net: Network, ps: PathSet | None = None) -> float:
    """Path-kernel term: sum over paths and on-path weights of the squared
    leave-one-out product (zero at masked positions)."""
    if ps is None:
        ps = enumerate_paths(net)
    w = net.masked_params()
    loo = _leave_one_out(ps, w)
    gate = net.mask[ps.weight_ids]
    return float((gate * loo**2).sum())


def verify_bound(net: Network, X: np.ndarray, ps: PathSet | None = None) -> dict:
    """Exact NTK trace vs the product-of-Frobenius-norms upper bound."""
    from . import ntk

    if ps is None:
        ps = enumerate_paths(net)
    j = ntk.jacobian(net, X)
    trace = float(np.sum(j * j))
    bound = frob_jvf(net, X, ps) * frob_jtv(net, ps)
    return {"trace": trace, "bound": bound, "holds": trace <= bound * (1.0 + 1e-8)}


def px_saliency_via_paths(net: Network, batches: list[np.ndarray],
                          ps: PathSet | None = None) -> np.ndarray:
    """PX scores assembled as explicit path sums.

    Per batch: z_g[n, k] sums the active squared inputs over paths into k,
    z_h[k] sums squared-weight path products into k, and the gradient of
    sum(z_g * z_h) w.r.t. each squared weight is a leave-one-out path sum
    weighted by the matching z_g column totals. Scores multiply by theta^2.
    """
    if ps is None:
        ps = enumerate_paths(net)
    theta, mask = net.params, net.mask
    w2 = theta**2 * mask
    vals2 = _path_products(ps, w2)
    loo2 = _leave_one_out(ps, w2)
    gate = mask[ps.weight_ids]
    alive = _path_products(ps, mask)
    k = net.output_dim
    z_h = np.zeros(k)
    np.add.at(z_h, ps.output_nodes, vals2)

    grad = np.zeros(net.m)
    for x in batches:
        x = np.asarray(x, dtype=np.float64)
        act = _activation_matrix(net, x, ps)
        z_g = np.zeros((x.shape[0], k))
        contrib = act * (x[:, ps.input_nodes] ** 2) * alive[None, :]
        np.add.at(z_g.T, ps.output_nodes, contrib.T)
        col = z_g.sum(axis=0)
        weight = col[ps.output_nodes][:, None] * gate * loo2
        np.add.at(grad, ps.weight_ids.ravel(), weight.ravel())
    return grad * theta**2


def synflow_saliency_via_paths(net: Network, ps: PathSet | None = None) -> np.ndarray:
    """SynFlow scores as path sums: |theta_j| times the absolute-weight
    leave-one-out products over every path containing j."""
    if ps is None:
        ps = enumerate_paths(net)
    wa = np.abs(net.params) * net.mask
    loo = _leave_one_out(ps, wa)
    gate = net.mask[ps.weight_ids]
    grad = np.zeros(net.m)
    np.add.at(grad, ps.weight_ids.ravel(), (gate * loo).ravel())
    return grad * np.abs(net.params)


def synflow_l2_saliency_via_paths(net: Network, ps: PathSet | None = None) -> np.ndarray:
    """SynFlow-L2 scores as path sums over squared weights."""
    if ps is None:
        ps = enumerate_paths(net)
    w2 = net.params**2 * net.mask
    loo2 = _leave_one_out(ps, w2)
    gate = net.mask[ps.weight_ids]
    grad = np.zeros(net.m)
    np.add.at(grad, ps.weight_ids.ravel(), (gate * loo2).ravel())
    return grad * net.params**2
