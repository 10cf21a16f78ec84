"""Foresight pruning: the PX saliency, baselines, schedule, and driver.

PX scores each parameter by how much it contributes to the upper bound on
the NTK trace. Per mini-batch it runs three passes over the same
architecture:

1. a detached standard forward at the masked weights, recording the 0/1
   activation pattern;
2. a detached forced forward on the squared inputs with all-ones masked
   weights and the recorded activations (the data term);
3. a taped pass-through forward on all-ones inputs with squared masked
   weights (the path-kernel term).

The score function is the sum of the elementwise product of the last two
outputs; its gradient w.r.t. the squared weights, times the squared
weights, is the per-parameter saliency. All factors are nonnegative, so the
scores are nonnegative, which together with iterative pruning rounds rules
out layer collapse.

Deep products of squared weights can overflow. When that happens the
pass-through pass is retried with every weight scaled by a single constant
c, which multiplies all scores by c^(L-1): a positive global factor, so the
ranking (the only thing pruning consumes) is unchanged. The retry restarts
the whole batch accumulation so every batch sees the same factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff, tensor
from .model import Network
from .tensor import Rng

METHODS = ("px", "snip", "grasp", "synflow", "synflow_l2", "magnitude", "random", "imp")
SINGLE_SHOT = ("snip", "grasp", "magnitude", "random")
ITERATIVE = ("px", "synflow", "synflow_l2")

_RESCALE_STEP = 2.0**-64
_RESCALE_ATTEMPTS = 16


class DegenerateGradientError(ValueError):
    """The pruning-set loss gradient vanished (nothing to probe)."""


class MaskBudgetError(ValueError):
    """keep_fraction asks for more survivors than the previous mask has."""


@dataclass
class PruneConfig:
    method: str
    final_density: float
    rounds: int = 1
    examples_per_class: int = 10
    seed: int = 0
    grasp_fd_eps: float = 1e-6

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0.0 < self.final_density <= 1.0:
            raise ValueError(f"final_density must be in (0, 1], got {self.final_density}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.examples_per_class < 1:
            raise ValueError(f"examples_per_class must be >= 1, got {self.examples_per_class}")


def schedule_density(k: float, t: int, T: int) -> float:
    """Fraction of parameters kept after round t of T: k ** (t / T)."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"k must be in (0, 1], got {k}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 1 <= t <= T:
        raise ValueError(f"round {t} outside 1..{T}")
    return float(k ** (t / T))


def global_topk_mask(scores: np.ndarray, keep_fraction: float,
                     prev_mask: np.ndarray) -> np.ndarray:
    """Keep exactly ceil(keep_fraction * m) highest-scoring survivors.

    Ranking is global across all layers, restricted to prev_mask's
    survivors (a pruned position is never revived). Ties break toward the
    lower flat index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if not np.all(np.isfinite(scores)):
        raise tensor.NonFiniteError("saliency scores must be finite")
    m = scores.size
    # exact ceil of the real product, immune to float rounding near integers
    n_keep = math.ceil(Fraction(keep_fraction) * m)
    n_prev = int(np.count_nonzero(prev_mask))
    if n_keep > n_prev:
        raise MaskBudgetError(f"keep_fraction {keep_fraction} needs {n_keep} survivors, "
                              f"previous mask has {n_prev}")
    ranked = np.where(prev_mask > 0, scores, -np.inf)
    order = np.argsort(-ranked, kind="stable")
    mask = np.zeros(m, dtype=np.float64)
    mask[order[:n_keep]] = 1.0
    return mask


def _scaled_passthrough(net: Network, x_shape: tuple[int, ...], weights: np.ndarray,
                        scale: float) -> tuple[np.ndarray, autodiff.Tape]:
    ones = np.ones(x_shape)
    out, _, tape = autodiff.forward(net, ones, autodiff.PASSTHROUGH, params=weights * scale)
    return out, tape


def px_gradient(net: Network, batches: list[np.ndarray]) -> np.ndarray:
    """d(score function)/d(theta^2), summed over batches (mask applied).

    The raw gradient, before the theta^2 product of the saliency; exposed
    so the product structure of its total can be checked independently.
    """
    if not batches:
        raise ValueError("PX needs at least one pruning batch")
    theta, mask = net.params, net.mask
    w_f = theta * mask
    w_g = mask.copy()
    w_h = theta**2 * mask

    # the data passes are scale-independent; run them once
    data_terms = []
    for x in batches:
        x = np.asarray(x, dtype=np.float64)
        _, record, _ = autodiff.forward(net, x, autodiff.STANDARD, params=w_f, tape=False)
        z_g, _, _ = autodiff.forward(net, x**2, autodiff.Forced(record), params=w_g, tape=False)
        data_terms.append((x.shape, z_g))

    scale = 1.0
    for _ in range(_RESCALE_ATTEMPTS):
        try:
            grad = np.zeros(net.m)
            for x_shape, z_g in data_terms:
                z_h, tape = _scaled_passthrough(net, x_shape, w_h, scale)
                tensor.check_finite(np.asarray(np.sum(z_g * z_h)), "PX score function")
                grad += autodiff.backward(tape, z_g) * mask
            return grad
        except tensor.NonFiniteError:
            scale *= _RESCALE_STEP
    raise tensor.NonFiniteError("PX score overflow persisted after rescaling")


def px_saliency(net: Network, batches: list[np.ndarray]) -> np.ndarray:
    """PX scores: gradient w.r.t. squared weights times squared weights."""
    return px_gradient(net, batches) * net.params**2


def synflow_saliency(net: Network) -> np.ndarray:
    """One pass-through forward at |theta| (masked) on an all-ones input;
    scores are the gradient of the summed outputs times |theta|."""
    theta, mask = net.params, net.mask
    w = np.abs(theta) * mask
    scale = 1.0
    for _ in range(_RESCALE_ATTEMPTS):
        try:
            out, tape = _scaled_passthrough(net, (1,) + net.input_shape, w, scale)
            grad = autodiff.backward(tape, np.ones_like(out)) * mask
            return grad * np.abs(theta)
        except tensor.NonFiniteError:
            scale *= _RESCALE_STEP
    raise tensor.NonFiniteError("SynFlow score overflow persisted after rescaling")


def synflow_l2_saliency(net: Network) -> np.ndarray:
    """PX without the data term: pass-through on squared masked weights,
    gradient of the summed outputs times theta^2."""
    theta, mask = net.params, net.mask
    w = theta**2 * mask
    scale = 1.0
    for _ in range(_RESCALE_ATTEMPTS):
        try:
            out, tape = _scaled_passthrough(net, (1,) + net.input_shape, w, scale)
            grad = autodiff.backward(tape, np.ones_like(out)) * mask
            return grad * theta**2
        except tensor.NonFiniteError:
            scale *= _RESCALE_STEP
    raise tensor.NonFiniteError("SynFlow-L2 score overflow persisted after rescaling")


def _loss_gradient(net: Network, params: np.ndarray,
                   batches: list[np.ndarray], labels: list[np.ndarray]) -> np.ndarray:
    from .train import cross_entropy

    grad = np.zeros(net.m)
    for x, y in zip(batches, labels):
        out, _, tape = autodiff.forward(net, np.asarray(x, dtype=np.float64), params=params)
        _, g_logits = cross_entropy(out, y)
        grad += autodiff.backward(tape, g_logits) * net.mask
    return grad


def snip_saliency(net: Network, batches: list[np.ndarray],
                  labels: list[np.ndarray]) -> np.ndarray:
    """|dL/dtheta * theta| accumulated over the pruning batches."""
    from .train import cross_entropy

    theta, mask = net.params, net.mask
    w = theta * mask
    scores = np.zeros(net.m)
    for x, y in zip(batches, labels):
        out, _, tape = autodiff.forward(net, np.asarray(x, dtype=np.float64), params=w)
        _, g_logits = cross_entropy(out, y)
        grad = autodiff.backward(tape, g_logits) * mask
        scores += np.abs(grad * theta)
    return scores


def fd_hessian_vector(grad_fn, theta: np.ndarray, direction: np.ndarray,
                      eps: float) -> np.ndarray:
    """Central-difference Hessian-vector product along an unnormalized
    direction: (grad(theta + eps*d) - grad(theta - eps*d)) / (2 eps)."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    gp = grad_fn(theta + eps * direction)
    gm = grad_fn(theta - eps * direction)
    return (gp - gm) / (2.0 * eps)


def grasp_saliency(net: Network, batches: list[np.ndarray], labels: list[np.ndarray],
                   fd_eps: float = 1e-6) -> np.ndarray:
    """-theta * Hg with Hg from central finite differences along the loss
    gradient. Scores may be negative; the driver negates them before
    ranking so the parameters most preserving gradient flow survive."""
    if fd_eps <= 0:
        raise ValueError(f"fd_eps must be > 0, got {fd_eps}")
    theta, mask = net.params, net.mask
    w = theta * mask

    def grad_at(p):
        return _loss_gradient(net, p * mask, batches, labels)

    g0 = grad_at(theta)
    g_norm = float(np.linalg.norm(g0))
    if g_norm == 0.0:
        raise DegenerateGradientError("pruning-set loss gradient is exactly zero")
    eps = fd_eps * float(np.linalg.norm(w)) / g_norm
    hg = fd_hessian_vector(grad_at, theta, g0, eps)
    return -theta * hg * mask


def static_saliency(net: Network, kind: str, rng: Rng | None = None) -> np.ndarray:
    if kind == "magnitude":
        return np.abs(net.params)
    if kind == "random":
        if rng is None:
            raise ValueError("random saliency needs an rng")
        return rng.uniform(net.m)
    raise ValueError(f"unknown static saliency {kind!r}")


def _method_scores(net: Network, method: str, batches, labels, cfg: PruneConfig,
                   rng: Rng) -> np.ndarray:
    if method == "px":
        return px_saliency(net, batches)
    if method == "synflow":
        return synflow_saliency(net)
    if method == "synflow_l2":
        return synflow_l2_saliency(net)
    if method == "snip":
        return snip_saliency(net, batches, labels)
    if method == "grasp":
        # lowest -theta*Hg survives, i.e. rank by the negated scores
        return -grasp_saliency(net, batches, labels, cfg.grasp_fd_eps)
    if method == "magnitude":
        return static_saliency(net, "magnitude")
    if method == "random":
        return static_saliency(net, "random", rng)
    raise ValueError(f"method {method!r} has no per-round saliency")


def prune(net: Network, cfg: PruneConfig, pruning_set: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Run the pruning loop and return the final mask.

    Iterative methods use cfg.rounds with the exponential keep schedule;
    single-shot methods are forced to one round. The final mask has exactly
    ceil(final_density * m) survivors. Loss of connectivity is a measured
    outcome, not an error.
    """
    if cfg.method == "imp":
        raise ValueError("IMP needs training; call imp() directly")
    batches = [x for x, _ in pruning_set]
    labels = [y for _, y in pruning_set]
    rounds = 1 if cfg.method in SINGLE_SHOT else cfg.rounds
    rng = Rng(cfg.seed)
    mask = net.mask.copy()
    for t in range(1, rounds + 1):
        current = net.with_mask(mask)
        scores = _method_scores(current, cfg.method, batches, labels, cfg, rng)
        mask = global_topk_mask(scores, schedule_density(cfg.final_density, t, rounds), mask)
    return mask


def imp(net: Network, train_cfg, rounds: int, per_round_keep: float,
        dataset) -> np.ndarray:
    """Iterative magnitude pruning: train, magnitude-prune, rewind, repeat.

    Returns the final mask; the network's parameters are restored to their
    initial values so the caller trains the ticket from scratch.
    """
    from .train import train

    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if not 0.0 < per_round_keep <= 1.0:
        raise ValueError(f"per_round_keep must be in (0, 1], got {per_round_keep}")
    theta0 = net.params.copy()
    mask = net.mask.copy()
    for r in range(1, rounds + 1):
        net.params[:] = theta0
        train(net, mask, dataset, train_cfg)
        mask = global_topk_mask(np.abs(net.params), per_round_keep**r, mask)
    net.params[:] = theta0
    return mask


def save_mask_txt(mask: np.ndarray, path) -> None:
    """Flat 0/1 text export, density printed to 4 decimals in the header."""
    density = float(np.count_nonzero(mask)) / mask.size
    with open(path, "w") as fh:
        fh.write(f"# density {density:.4f}\n")
        for bit in mask:
            fh.write(f"{int(bit)}\n")


def load_mask_txt(path) -> np.ndarray:
    bits = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            bits.append(float(int(line)))
    return np.array(bits, dtype=np.float64)
