"""Nonlinear release game: encoder-decoder holder vs. classifier attacker.

Small fully-connected networks in plain numpy (double precision, manual
backprop, per-minibatch batch normalization with running averages). The
holder minimizes the negated attacker loss plus a quadratic penalty
beta (dist - gamma)^2 and a hinge penalty rho max(0, dist - gamma) on the mean
squared per-sample distortion, stepping with Armijo backtracking; the attacker
retrains between holder updates. Penalty weights grow over rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import SplitBatches
from .errors import ValidationError

BN_EPS = 1e-6
BN_MOMENTUM = 0.9
LEAKY_SLOPE = 0.01
ACTIVATIONS = ("relu", "leaky_relu", "linear", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    """Widths plus per-weight-layer activation tags and batch-norm flags."""

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    batch_norm: tuple[bool, ...]

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValidationError("need at least input and output dims")
        n_layers = len(self.layer_dims) - 1
        if len(self.activations) != n_layers or len(self.batch_norm) != n_layers:
            raise ValidationError("activations/batch_norm must have one entry per weight layer")
        for i, act in enumerate(self.activations):
            if act not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {act!r}")
            if act == "softmax" and i != n_layers - 1:
                raise ValidationError("softmax is only allowed on the final layer")


@dataclass
class LayerParams:
    w: np.ndarray
    b: np.ndarray
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None
    run_mean: np.ndarray | None = None
    run_var: np.ndarray | None = None


@dataclass
class MlpParams:
    spec: MlpSpec
    layers: list[LayerParams] = field(default_factory=list)


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    layers = []
    for i in range(len(spec.layer_dims) - 1):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        b = np.zeros(fan_out)
        if spec.batch_norm[i]:
            layers.append(LayerParams(w=w, b=b,
                                      bn_scale=np.ones(fan_out), bn_shift=np.zeros(fan_out),
                                      run_mean=np.zeros(fan_out), run_var=np.ones(fan_out)))
        else:
            layers.append(LayerParams(w=w, b=b))
    return MlpParams(spec=spec, layers=layers)


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if act == "linear":
        return z
    # softmax
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mlp_forward(
    params: MlpParams,
    x: np.ndarray,
    training: bool,
) -> tuple[np.ndarray, list[dict], list[tuple[np.ndarray, np.ndarray] | None]]:
    """Pure forward pass.

    Returns (output, per-layer caches for backprop, per-layer updated running
    stats or None). Running stats are never mutated here; callers commit them
    with :func:`commit_running_stats` when an update is accepted.
    """
    x = np.asarray(x, dtype=float)
    a = x
    caches: list[dict] = []
    run_updates: list[tuple[np.ndarray, np.ndarray] | None] = []
    for layer, act, has_bn in zip(params.layers, params.spec.activations, params.spec.batch_norm):
        z = a @ layer.w + layer.b
        cache = {"a_in": a, "act": act, "has_bn": has_bn}
        if has_bn:
            if training:
                if z.shape[0] < 2:
                    raise ValidationError("batch normalization needs batch size >= 2 in training mode")
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                new_mean = BN_MOMENTUM * layer.run_mean + (1 - BN_MOMENTUM) * mu
                new_var = BN_MOMENTUM * layer.run_var + (1 - BN_MOMENTUM) * var
                run_updates.append((new_mean, new_var))
            else:
                mu = layer.run_mean
                var = layer.run_var
                run_updates.append(None)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            z_out = layer.bn_scale * xhat + layer.bn_shift
            cache.update({"xhat": xhat, "inv_std": inv_std, "bn_training": training})
        else:
            z_out = z
            run_updates.append(None)
        cache["z_out"] = z_out
        a = _activate(z_out, act)
        cache["a_out"] = a
        caches.append(cache)
    return a, caches, run_updates


def commit_running_stats(params: MlpParams, run_updates) -> MlpParams:
    layers = []
    for layer, upd in zip(params.layers, run_updates):
        if upd is None:
            layers.append(layer)
        else:
            layers.append(replace(layer, run_mean=upd[0], run_var=upd[1]))
    return MlpParams(spec=params.spec, layers=layers)


def _activation_backward(d_a: np.ndarray, cache: dict) -> np.ndarray:
    act = cache["act"]
    if act == "relu":
        return d_a * (cache["z_out"] > 0)
    if act == "leaky_relu":
        return d_a * np.where(cache["z_out"] > 0, 1.0, LEAKY_SLOPE)
    if act == "linear":
        return d_a
    p = cache["a_out"]  # softmax probabilities
    return p * (d_a - np.sum(d_a * p, axis=1, keepdims=True))


def mlp_backward(
    params: MlpParams,
    caches: list[dict],
    d_out: np.ndarray,
    skip_last_activation: bool = False,
) -> tuple[MlpParams, np.ndarray]:
    """Backpropagate d_out; returns (gradients shaped like params, d_input).

    ``skip_last_activation`` treats ``d_out`` as the gradient at the final
    pre-activation (used by the fused softmax cross-entropy path).
    """
    grads: list[LayerParams] = [None] * len(params.layers)  # type: ignore[list-item]
    d_a = d_out
    for i in range(len(params.layers) - 1, -1, -1):
        layer, cache = params.layers[i], caches[i]
        if skip_last_activation and i == len(params.layers) - 1:
            d_z_out = d_a
        else:
            d_z_out = _activation_backward(d_a, cache)
        if cache["has_bn"]:
            xhat, inv_std = cache["xhat"], cache["inv_std"]
            d_scale = np.sum(d_z_out * xhat, axis=0)
            d_shift = np.sum(d_z_out, axis=0)
            d_xhat = d_z_out * layer.bn_scale
            if cache["bn_training"]:
                batch = d_z_out.shape[0]
                d_z = (inv_std / batch) * (
                    batch * d_xhat
                    - d_xhat.sum(axis=0)
                    - xhat * np.sum(d_xhat * xhat, axis=0)
                )
            else:
                d_z = d_xhat * inv_std
            g = LayerParams(
                w=cache["a_in"].T @ d_z, b=d_z.sum(axis=0),
                bn_scale=d_scale, bn_shift=d_shift,
            )
        else:
            d_z = d_z_out
            g = LayerParams(w=cache["a_in"].T @ d_z, b=d_z.sum(axis=0))
        grads[i] = g
        d_a = d_z @ layer.w.T
    return MlpParams(spec=params.spec, layers=grads), d_a


def mlp_forward_backward(
    params: MlpParams,
    batch: np.ndarray,
    upstream,
    training: bool = True,
) -> tuple[np.ndarray, MlpParams]:
    """Forward plus backward in one call.

    ``upstream`` is either an explicit gradient matrix dL/d(output) or a
    callable mapping the output to (loss, dL/d(output)).
    """
    out, caches, _ = mlp_forward(params, batch, training)
    if callable(upstream):
        _, d_out = upstream(out)
    else:
        d_out = np.asarray(upstream, dtype=float)
        if d_out.shape != out.shape:
            raise ValidationError("upstream gradient shape does not match the output")
    grads, _ = mlp_backward(params, caches, d_out)
    return out, grads


# ---------------------------------------------------------------------------
# parameter-tree helpers

_GRAD_FIELDS = ("w", "b", "bn_scale", "bn_shift")


def tree_axpy(params: MlpParams, grads: MlpParams, alpha: float) -> MlpParams:
    """params + alpha * grads on trainable fields; running stats carried over."""
    layers = []
    for layer, g in zip(params.layers, grads.layers):
        updates = {}
        for name in _GRAD_FIELDS:
            val, gval = getattr(layer, name), getattr(g, name)
            if val is not None and gval is not None:
                updates[name] = val + alpha * gval
        layers.append(replace(layer, **updates))
    return MlpParams(spec=params.spec, layers=layers)


def grad_sqnorm(grads: MlpParams) -> float:
    total = 0.0
    for g in grads.layers:
        for name in _GRAD_FIELDS:
            val = getattr(g, name)
            if val is not None:
                total += float(np.sum(val * val))
    return total


# ---------------------------------------------------------------------------
# attacker

def labels_to_onehot(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y).ravel()
    if not np.all(np.isin(y, (-1, 1))):
        raise ValidationError("labels must take values in {-1, +1}")
    onehot = np.zeros((len(y), 2))
    onehot[np.arange(len(y)), ((y + 1) // 2).astype(int)] = 1.0
    return onehot


def softmax_xent(probs: np.ndarray, onehot: np.ndarray) -> float:
    picked = np.sum(probs * onehot, axis=1)
    return float(-np.mean(np.log(np.clip(picked, 1e-300, None))))


def attacker_loss(h_params: MlpParams, x: np.ndarray, y: np.ndarray, training: bool) -> float:
    probs, _, _ = mlp_forward(h_params, x, training)
    return softmax_xent(probs, labels_to_onehot(y))


def train_attacker(
    h_params: MlpParams,
    x_tilde: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr0: float = 0.5,
) -> MlpParams:
    """Full-batch gradient descent with step halving; loss never increases."""
    if epochs == 0:
        return h_params
    onehot = labels_to_onehot(y)
    x_tilde = np.asarray(x_tilde, dtype=float)

    def loss_and_updates(p: MlpParams):
        probs, _, run_upd = mlp_forward(p, x_tilde, training=True)
        return softmax_xent(probs, onehot), run_upd

    h = h_params
    current, _ = loss_and_updates(h)
    lr = lr0
    for _ in range(epochs):
        probs, caches, _ = mlp_forward(h, x_tilde, training=True)
        d_logits = (probs - onehot) / len(onehot)
        grads, _ = mlp_backward(h, caches, d_logits, skip_last_activation=True)
        accepted = False
        trial = lr
        for _ in range(30):
            cand = tree_axpy(h, grads, -trial)
            cand_loss, cand_run = loss_and_updates(cand)
            if cand_loss <= current:
                accepted = True
                break
            trial /= 2.0
        if not accepted:
            break
        h = commit_running_stats(cand, cand_run)
        current = cand_loss
        lr = min(trial * 1.5, lr0 * 8.0)
    return h


def attacker_accuracy(h_params: MlpParams, x: np.ndarray, y: np.ndarray) -> float:
    probs, _, _ = mlp_forward(h_params, x, training=False)
    pred = np.where(probs[:, 1] >= probs[:, 0], 1, -1)
    return float(np.mean(pred == np.asarray(y).ravel()))


# ---------------------------------------------------------------------------
# holder

@dataclass(frozen=True)
class ArmijoParams:
    c: float = 1e-4
    shrink: float = 0.5
    alpha0: float = 0.1
    max_halvings: int = 30


@dataclass
class NnGameConfig:
    gamma: float
    T: int = 60
    minibatch: int = 128
    attacker_epochs: int = 50
    beta0: float = 5.0
    rho0: float = 5.0
    beta_schedule: tuple[float, ...] | None = None
    rho_schedule: tuple[float, ...] | None = None
    armijo: ArmijoParams = field(default_factory=ArmijoParams)
    pretrain_rounds: int = 0  # reconstruction-only warm start before the game
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValidationError("gamma must be nonnegative")
        for sched in (self.beta_schedule, self.rho_schedule):
            if sched is not None and any(nxt < cur for cur, nxt in zip(sched, sched[1:])):
                raise ValidationError("penalty schedules must be nondecreasing")

    def beta_at(self, t: int) -> float:
        if self.beta_schedule is not None:
            return self.beta_schedule[min(t, len(self.beta_schedule) - 1)]
        return self.beta0 * (1.0 + t / 10.0)

    def rho_at(self, t: int) -> float:
        if self.rho_schedule is not None:
            return self.rho_schedule[min(t, len(self.rho_schedule) - 1)]
        return self.rho0 * (1.0 + t / 10.0)


def holder_inputs(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """The holder sees the label as one extra input coordinate."""
    return np.column_stack([np.asarray(x, dtype=float), np.asarray(y, dtype=float).ravel()])


def mean_sq_distortion(x_tilde: np.ndarray, x: np.ndarray) -> float:
    diff = np.asarray(x_tilde, dtype=float) - np.asarray(x, dtype=float)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def holder_objective(
    g_params: MlpParams,
    h_params: MlpParams,
    x_batch: np.ndarray,
    y_batch: np.ndarray,
    beta: float,
    rho: float,
    gamma: float,
) -> float:
    x_tilde, _, _ = mlp_forward(g_params, holder_inputs(x_batch, y_batch), training=True)
    att = attacker_loss(h_params, x_tilde, y_batch, training=False)
    viol = mean_sq_distortion(x_tilde, x_batch) - gamma
    return -att + beta * viol * viol + rho * max(0.0, viol)


def holder_objective_and_grad(
    g_params: MlpParams,
    h_params: MlpParams,
    x_batch: np.ndarray,
    y_batch: np.ndarray,
    beta: float,
    rho: float,
    gamma: float,
) -> tuple[float, MlpParams]:
    """Exact value and gradient of the penalized holder loss w.r.t. g."""
    x_batch = np.asarray(x_batch, dtype=float)
    onehot = labels_to_onehot(y_batch)
    n = x_batch.shape[0]

    gx = holder_inputs(x_batch, y_batch)
    x_tilde, g_caches, _ = mlp_forward(g_params, gx, training=True)
    probs, h_caches, _ = mlp_forward(h_params, x_tilde, training=False)
    att = softmax_xent(probs, onehot)
    dist = mean_sq_distortion(x_tilde, x_batch)
    viol = dist - gamma
    objective = -att + beta * viol * viol + rho * max(0.0, viol)

    d_logits = (probs - onehot) / n
    _, d_att_dxt = mlp_backward(h_params, h_caches, d_logits, skip_last_activation=True)
    penalty_coeff = 2.0 * beta * viol + (rho if viol > 0 else 0.0)
    d_xt = -d_att_dxt + penalty_coeff * (2.0 / n) * (x_tilde - x_batch)
    grads, _ = mlp_backward(g_params, g_caches, d_xt)
    return objective, grads


def backtracking_update(
    g_params: MlpParams,
    grads: MlpParams,
    evaluator,
    armijo: ArmijoParams,
) -> tuple[MlpParams, float]:
    """Armijo line search along the negative gradient of the holder loss."""
    base = evaluator(g_params)
    sqnorm = grad_sqnorm(grads)
    alpha = armijo.alpha0
    for _ in range(armijo.max_halvings + 1):
        cand = tree_axpy(g_params, grads, -alpha)
        if evaluator(cand) <= base - armijo.c * alpha * sqnorm:
            return cand, alpha
        alpha *= armijo.shrink
    return g_params, 0.0


def default_holder_spec(
    p: int,
    rate: float = 0.5,
    batch_norm: bool = True,
    output_activation: str = "linear",
) -> MlpSpec:
    """Encoder-decoder p+1 -> round(rate*p) -> p (label is the extra input)."""
    k = max(1, int(round(rate * p)))
    return MlpSpec(
        layer_dims=(p + 1, k, p),
        activations=("relu", output_activation),
        batch_norm=(batch_norm, False),
    )


def identity_holder(p: int) -> tuple[MlpSpec, MlpParams]:
    """Full-width ReLU holder initialized to the exact identity on [0,1] data.

    relu(x) = x for nonnegative inputs, so W1 = [I; 0] and W2 = I reproduce
    the input exactly; the game then starts feasible for any budget and bends
    the map only where hiding pays.
    """
    spec = MlpSpec(layer_dims=(p + 1, p, p), activations=("relu", "linear"),
                   batch_norm=(False, False))
    layers = [
        LayerParams(w=np.vstack([np.eye(p), np.zeros((1, p))]), b=np.zeros(p)),
        LayerParams(w=np.eye(p), b=np.zeros(p)),
    ]
    return spec, MlpParams(spec=spec, layers=layers)


def default_attacker_spec(p: int, batch_norm: bool = True) -> MlpSpec:
    return MlpSpec(
        layer_dims=(p, 2 * p, 2),
        activations=("leaky_relu", "softmax"),
        batch_norm=(batch_norm, False),
    )


CONVERGENCE_REL = 1e-5
CONVERGENCE_ROUNDS = 5


def run_nn_game(
    x: np.ndarray,
    y: np.ndarray,
    g_spec: MlpSpec,
    h_spec: MlpSpec,
    cfg: NnGameConfig,
    g_init: MlpParams | None = None,
) -> tuple[MlpParams, np.ndarray, list[dict]]:
    """Alternating min-max training; returns (g params, release X~, trace).

    Keeps the best feasible holder seen (largest attacker loss with distortion
    within 5% of budget), falling back to the final round's parameters.
    ``g_init`` overrides the random holder start (e.g. :func:`identity_holder`).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y).ravel()
    n = x.shape[0]
    rng = np.random.default_rng(cfg.seed)
    if g_init is None:
        g = init_mlp(g_spec, rng)
        # The label enters as the last input coordinate; it starts disconnected
        # so the holder only wires it in when the adversarial gradient pays.
        g.layers[0].w[-1, :] = 0.0
    else:
        g = g_init
    h = init_mlp(h_spec, rng)

    # Reconstruction-only warm start: the game budget is meaningless while the
    # holder still distorts at random-init levels, so fit x̃ ≈ x first.
    alpha_prev = cfg.armijo.alpha0
    for _ in range(cfg.pretrain_rounds):
        idx = rng.choice(n, size=min(cfg.minibatch, n), replace=False)
        xb, yb = x[idx], y[idx]
        gxb = holder_inputs(xb, yb)
        x_tilde_b, g_caches, _ = mlp_forward(g, gxb, training=True)
        d_xt = (2.0 / len(idx)) * (x_tilde_b - xb)
        grads, _ = mlp_backward(g, g_caches, d_xt)

        def pre_eval(params, _xb=xb, _yb=yb):
            out, _, _ = mlp_forward(params, holder_inputs(_xb, _yb), training=True)
            return mean_sq_distortion(out, _xb)

        warm_alpha0 = min(cfg.armijo.alpha0, max(2.0 * alpha_prev, cfg.armijo.alpha0 * 2.0**-24))
        g, alpha = backtracking_update(g, grads, pre_eval, replace(cfg.armijo, alpha0=warm_alpha0))
        if alpha > 0:
            alpha_prev = alpha
        _, _, g_run = mlp_forward(g, gxb, training=True)
        g = commit_running_stats(g, g_run)

    trace: list[dict] = []
    best_g = None
    best_score = -np.inf
    prev_obj = None
    flat_rounds = 0
    alpha_prev = cfg.armijo.alpha0
    for t in range(cfg.T):
        beta_t, rho_t = cfg.beta_at(t), cfg.rho_at(t)
        idx = rng.choice(n, size=min(cfg.minibatch, n), replace=False)
        xb, yb = x[idx], y[idx]

        x_tilde_b, _, _ = mlp_forward(g, holder_inputs(xb, yb), training=True)
        h = train_attacker(h, x_tilde_b, yb, cfg.attacker_epochs)

        _, grads = holder_objective_and_grad(g, h, xb, yb, beta_t, rho_t, cfg.gamma)

        def evaluator(params, _h=h, _xb=xb, _yb=yb, _b=beta_t, _r=rho_t):
            return holder_objective(params, _h, _xb, _yb, _b, _r, cfg.gamma)

        # Warm-start the line search near the previously accepted step; the
        # cap keeps the documented alpha_used <= alpha0 contract.
        warm_alpha0 = min(cfg.armijo.alpha0, max(2.0 * alpha_prev, cfg.armijo.alpha0 * 2.0**-24))
        armijo_t = replace(cfg.armijo, alpha0=warm_alpha0)
        g, alpha = backtracking_update(g, grads, evaluator, armijo_t)
        if alpha > 0:
            alpha_prev = alpha

        x_tilde_b, _, g_run = mlp_forward(g, holder_inputs(xb, yb), training=True)
        g = commit_running_stats(g, g_run)
        dist = mean_sq_distortion(x_tilde_b, xb)
        att = attacker_loss(h, x_tilde_b, yb, training=False)
        obj = -att + beta_t * (dist - cfg.gamma) ** 2 + rho_t * max(0.0, dist - cfg.gamma)
        trace.append({
            "round": t, "objective": obj, "attacker_loss": att,
            "distortion": dist, "alpha": alpha, "beta": beta_t, "rho": rho_t,
        })

        if dist <= cfg.gamma * 1.05 + 1e-9 and att > best_score:
            best_score = att
            best_g = g

        if prev_obj is not None:
            rel = abs(obj - prev_obj) / max(1e-12, abs(prev_obj))
            flat_rounds = flat_rounds + 1 if rel < CONVERGENCE_REL else 0
            if flat_rounds >= CONVERGENCE_ROUNDS:
                prev_obj = obj
                break
        prev_obj = obj

    g_final = best_g if best_g is not None else g
    x_tilde, _, _ = mlp_forward(g_final, holder_inputs(x, y), training=False)
    return g_final, x_tilde, trace


def nn_attack_eval(
    x_tilde: np.ndarray,
    y: np.ndarray,
    split: SplitBatches,
    h_spec: MlpSpec | None = None,
    epochs: int = 300,
    seed: int = 0,
) -> dict:
    """Train a fresh attacker on released train rows, report train/test accuracy."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    y = np.asarray(y).ravel()
    spec = h_spec or default_attacker_spec(x_tilde.shape[1])
    h = init_mlp(spec, np.random.default_rng(seed))
    tr, te = split.train_indices, split.test_indices
    h = train_attacker(h, x_tilde[tr], y[tr], epochs)
    return {
        "accuracy_train": attacker_accuracy(h, x_tilde[tr], y[tr]),
        "accuracy_test": attacker_accuracy(h, x_tilde[te], y[te]),
    }
