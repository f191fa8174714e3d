"""Loss terms, manual gradients, Fisher estimation, and the Adam optimizer.

The total training loss for one task is

    total = task + ewc + consistency + orthogonality

with
    task           = lambda * mean over action steps of -log p(action)
                     (lambda = 1 - lam1 - lam2 - lam3)
    ewc            = lam1 * sum over shared blocks of ||F (.) (theta - theta')||_F^2
                     (the Fisher weighting sits inside the squared norm)
    consistency    = lam2 * sum over revisited expert slices of ||e - e'||^2
    orthogonality  = lam3 * sum over novel expert hierarchies of
                     ||row_normalize(U) row_normalize(U)^T - I||_F^2
                     (rows under the norm guard are excluded from the Gram)

All gradients are analytic and exact; the finite-difference checker below is
the reference every configuration is validated against. Gradients of frozen
expert slices are structurally zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterBase, Selection
from .tasks import SyntheticEpisode, ToyBackbone
from .tensor_ops import EPS_NORM, row_normalize


@dataclass
class Hyper:
    """Loss and optimizer hyperparameters (defaults follow the reference setup)."""

    lam1: float = 0.2
    lam2: float = 0.2
    lam3: float = 0.1
    omega: float = 0.95
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 2
    fisher_fraction: float = 0.1

    def __post_init__(self):
        if self.lam1 + self.lam2 + self.lam3 >= 1.0:
            raise ValueError("lam1 + lam2 + lam3 must be < 1 so the task "
                             "loss keeps positive weight")

    @property
    def lam_task(self) -> float:
        return 1.0 - (self.lam1 + self.lam2 + self.lam3)


# ---------------------------------------------------------------------------
# Individual loss terms
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def action_nll(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood of the target actions."""
    logits = np.atleast_2d(logits)
    if len(targets) == 0:
        raise ValueError("empty batch")
    z = logits - np.max(logits, axis=1, keepdims=True)
    log_p = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return float(-np.mean(log_p[np.arange(len(targets)), targets]))


def ewc_loss(current: dict[str, np.ndarray], snapshot: dict[str, np.ndarray],
             fisher: dict[str, np.ndarray], lam1: float,
             names: tuple[str, ...]) -> float:
    total = 0.0
    for name in names:
        weighted = fisher[name] * (current[name] - snapshot[name])
        total += float(np.sum(weighted * weighted))
    return lam1 * total


def consistency_loss(u3_row, u3_prev, u4_row, u4_prev, alpha: int, beta: int,
                     lam2: float) -> float:
    d3 = np.asarray(u3_row) - np.asarray(u3_prev)
    d4 = np.asarray(u4_row) - np.asarray(u4_prev)
    return lam2 * (alpha * float(np.sum(d3 * d3)) + beta * float(np.sum(d4 * d4)))


def gram_penalty(mat: np.ndarray) -> float:
    """||U_hat U_hat^T - I||_F^2 over rows with norm >= EPS_NORM."""
    mat = np.atleast_2d(mat)
    norms = np.linalg.norm(mat, axis=1)
    kept = mat[norms >= EPS_NORM]
    if kept.shape[0] == 0:
        return 0.0
    unit = row_normalize(kept)
    gram = unit @ unit.T
    err = gram - np.eye(kept.shape[0])
    return float(np.sum(err * err))


def gram_penalty_row_grad(mat: np.ndarray, row: int) -> np.ndarray:
    """Gradient of gram_penalty w.r.t. one (unnormalized) row of ``mat``."""
    mat = np.atleast_2d(mat)
    norms = np.linalg.norm(mat, axis=1)
    keep = norms >= EPS_NORM
    if not keep[row]:
        return np.zeros(mat.shape[1])
    kept = mat[keep]
    unit = row_normalize(kept)
    err = unit @ unit.T - np.eye(kept.shape[0])
    j = int(np.sum(keep[:row]))  # position of `row` among kept rows
    g_unit = 4.0 * (err @ unit)[j]
    v_hat = unit[j]
    return (g_unit - (g_unit @ v_hat) * v_hat) / norms[row]


def orthogonality_loss(u3: np.ndarray, u4: np.ndarray, alpha: int, beta: int,
                       lam3: float) -> float:
    return lam3 * ((1 - alpha) * gram_penalty(u3) + (1 - beta) * gram_penalty(u4))


def fisher_ema(prev: dict[str, np.ndarray], new: dict[str, np.ndarray],
               omega: float) -> dict[str, np.ndarray]:
    """F = omega * prev + (1 - omega) * new, elementwise per block."""
    out = {}
    for name, p in prev.items():
        n = new[name]
        if p.shape != n.shape:
            raise ValueError(f"fisher block {name!r} shape mismatch: "
                             f"{p.shape} vs {n.shape}")
        out[name] = omega * p + (1.0 - omega) * n
    return out


# ---------------------------------------------------------------------------
# Network pass: lambda-scaled action loss and gradients through the deltas
# ---------------------------------------------------------------------------

def batch_arrays(episodes: list[SyntheticEpisode]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten episodes into per-step (inputs, target-action) arrays."""
    xs = [ep.model_inputs() for ep in episodes]
    ys = [ep.actions for ep in episodes]
    return np.vstack(xs), np.concatenate(ys)


def _network_pass(backbone: ToyBackbone, adapters: list[AdapterBase],
                  sel: Selection, x: np.ndarray, y: np.ndarray,
                  scale: float, mean_reduce: bool):
    """NLL (optionally mean-reduced) and gradients of ``scale * nll``.

    Returns (nll, per-layer dict of block gradients). The backbone itself is
    frozen; only adapter blocks receive gradients.
    """
    n_layers = len(backbone.weights)
    deltas = [ad.delta(sel) for ad in adapters]
    acts = [np.atleast_2d(x)]
    for l in range(n_layers):
        z = acts[-1] @ (backbone.weights[l] + deltas[l]).T + backbone.biases[l]
        acts.append(np.tanh(z) if l < n_layers - 1 else z)
    logits = acts[-1]
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    probs = softmax(logits)
    nll = action_nll(logits, y)
    if not mean_reduce:
        nll *= n

    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g *= scale / n if mean_reduce else scale
    grads: list[dict[str, np.ndarray]] = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        d_w = g.T @ acts[l]
        grads[l] = adapters[l].delta_backward(sel, d_w)
        if l > 0:
            g = (g @ (backbone.weights[l] + deltas[l])) * (1.0 - acts[l] ** 2)
    return nll, grads


def task_loss_and_grads(backbone, adapters, sel, x, y, lam_task):
    """lambda-scaled mean action NLL and its adapter gradients."""
    nll, grads = _network_pass(backbone, adapters, sel, x, y,
                               scale=lam_task, mean_reduce=True)
    return lam_task * nll, grads


def fisher_estimate(backbone, adapters, sel: Selection,
                    episodes: list[SyntheticEpisode],
                    fraction: float) -> list[dict[str, np.ndarray]]:
    """Mean squared per-episode log-likelihood gradient for shared blocks.

    Uses the leading ``fraction`` of the episode list (at least one episode);
    the gradient is of the summed log-likelihood of each episode's action
    sequence, so doubling the dataset leaves the estimate unchanged.
    """
    if not episodes:
        raise ValueError("fisher_estimate needs at least one episode")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    subset = episodes[:max(1, int(round(fraction * len(episodes))))]
    fisher = [{name: np.zeros_like(ad.blocks()[name]) for name in ad.shared_names}
              for ad in adapters]
    for ep in subset:
        x, y = ep.model_inputs(), ep.actions
        # d(log p)/d theta = -d(summed NLL)/d theta
        _, grads = _network_pass(backbone, adapters, sel, x, y,
                                 scale=-1.0, mean_reduce=False)
        for layer, acc in zip(grads, fisher):
            for name in acc:
                acc[name] += layer[name] ** 2
    for acc in fisher:
        for name in acc:
            acc[name] /= len(subset)
    return fisher


# ---------------------------------------------------------------------------
# Regularizer terms per adapter (EWC + consistency + orthogonality)
# ---------------------------------------------------------------------------

def regularizer_terms(adapter: AdapterBase, sel: Selection,
                      snapshot: dict[str, np.ndarray] | None,
                      fisher: dict[str, np.ndarray] | None,
                      flags: dict[str, int], hyper: Hyper):
    """Losses and gradients of the three consolidation terms for one adapter.

    ``flags`` maps expert axis name ('scene', 'env', ...) to 1 when that
    expert was learned by a previous task. Gradients touch only blocks the
    current selection trains.
    """
    sel = adapter.resolve(sel)
    blocks = adapter.blocks()
    losses = {"ewc": 0.0, "consistency": 0.0, "orthogonality": 0.0}
    grads = {name: np.zeros_like(arr) for name, arr in blocks.items()}

    if snapshot is not None and fisher is not None and hyper.lam1 != 0.0:
        losses["ewc"] = ewc_loss(blocks, snapshot, fisher, hyper.lam1,
                                 adapter.shared_names)
        for name in adapter.shared_names:
            fw = fisher[name]
            grads[name] += (2.0 * hyper.lam1 * fw * fw
                            * (blocks[name] - snapshot[name]))

    if snapshot is not None and hyper.lam2 != 0.0:
        for name, axis in adapter.expert_axes.items():
            if not flags.get(axis, 0):
                continue
            idx = adapter.expert_index(name, sel)
            diff = blocks[name][idx] - snapshot[name][idx]
            losses["consistency"] += hyper.lam2 * float(np.sum(diff * diff))
            grads[name][idx] += 2.0 * hyper.lam2 * diff

    if hyper.lam3 != 0.0:
        for name in adapter.ortho_names:
            axis = adapter.expert_axes[name]
            coeff = hyper.lam3 * (1 - flags.get(axis, 0))
            if coeff == 0.0:
                continue
            mat = blocks[name].reshape(blocks[name].shape[0], -1)
            losses["orthogonality"] += coeff * gram_penalty(mat)
            idx = adapter.expert_index(name, sel)
            row_grad = coeff * gram_penalty_row_grad(mat, idx)
            grads[name].reshape(mat.shape)[idx] += row_grad

    return losses, grads


def total_loss_and_grads(backbone, adapters, sel, x, y,
                         snapshots, fishers, flags, hyper: Hyper):
    """Full training objective for one minibatch across all layers.

    Returns (terms dict, per-layer masked gradient dicts).
    """
    task, net_grads = task_loss_and_grads(backbone, adapters, sel, x, y,
                                          hyper.lam_task)
    terms = {"task": task, "ewc": 0.0, "consistency": 0.0, "orthogonality": 0.0}
    all_grads = []
    for l, ad in enumerate(adapters):
        snap = None if snapshots is None else snapshots[l]
        fish = None if fishers is None else fishers[l]
        reg_losses, reg_grads = regularizer_terms(ad, sel, snap, fish, flags, hyper)
        for k in ("ewc", "consistency", "orthogonality"):
            terms[k] += reg_losses[k]
        mask = ad.trainable_mask(sel)
        merged = {}
        for name in reg_grads:
            merged[name] = (net_grads[l].get(name, 0.0) + reg_grads[name]) * mask[name]
        all_grads.append(merged)
    terms["total"] = sum(terms.values())
    return terms, all_grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected first/second moment accumulators, keyed like the params."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> None:
    """One in-place Adam update across all parameter arrays."""
    state.step += 1
    t = state.step
    for key, g in grads.items():
        p = params[key]
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch for {key!r}: "
                             f"{p.shape} vs {g.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        state.m[key] = state.beta1 * state.m[key] + (1 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1 - state.beta2) * g * g
        m_hat = state.m[key] / (1 - state.beta1 ** t)
        v_hat = state.v[key] / (1 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Finite-difference gradient checker
# ---------------------------------------------------------------------------

def finite_difference_check(loss_fn, arrays: dict[str, np.ndarray],
                            analytic: dict[str, np.ndarray],
                            mask: dict[str, np.ndarray] | None = None,
                            h: float = 1e-5, floor: float = 1e-8) -> dict[str, float]:
    """Max relative error per block between analytic and central differences.

    Entries where both gradients are below ``floor`` are skipped, as are
    entries outside the trainable ``mask``. ``loss_fn`` must read the live
    arrays so in-place perturbations take effect.
    """
    errors = {}
    for name, arr in arrays.items():
        worst = 0.0
        flat = arr.reshape(-1)
        ana = analytic[name].reshape(-1)
        m = None if mask is None else mask[name].reshape(-1)
        for i in range(flat.size):
            if m is not None and m[i] == 0.0:
                continue
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            if abs(num) < floor and abs(ana[i]) < floor:
                continue
            worst = max(worst, abs(num - ana[i]) / max(abs(num), abs(ana[i])))
        errors[name] = worst
    return errors
