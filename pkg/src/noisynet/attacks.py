"""Adversarial example generation: FGSM, PGD, and an L-BFGS-style attack.

All attacks work on pixel batches in [0, 1] and are deterministic given
the config seed.  When the victim injects noise, one set of noise draws is
frozen for the whole attack run, so iterative attacks see a fixed
realization of the randomized model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkState, loss_input_gradient, predict
from .tensor import DimensionError, RngStream
from .validation import check_labels, check_unit_range

_KINDS = ("fgsm", "pgd", "lbfgs")


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    alpha: float = 0.1          # step size
    eps: float = 0.0            # l-inf budget (pgd)
    steps: int = 1              # iteration cap (pgd, lbfgs)
    box: tuple = (0.0, 1.0)
    seed: int = 0
    random_start: bool = True   # pgd: start uniformly inside the eps ball
    proximity: float = 0.01     # lbfgs: l2 pull toward the clean input
    history: int = 10           # lbfgs: curvature-pair memory
    noise_mode: str | None = None  # victim noise override; None = auto

    def validate(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError(f"step size must be >= 0, got {self.alpha}")
        if self.kind == "pgd":
            if self.eps <= 0:
                raise ValueError("pgd needs a positive eps budget")
            if self.steps < 1:
                raise ValueError("pgd needs at least one iteration")


class _FrozenVictim:
    """Loss/gradient oracle with the victim's noise frozen once per run."""

    def __init__(self, net: NetworkState, noise_mode: str | None, seed: int):
        self.net = net
        if noise_mode is None:
            noise_mode = "active" if net.has_noise() else "disabled"
        self.mode = noise_mode
        self.rng = RngStream(seed, 0xA77ACF)
        self.trace = None

    def loss_grad(self, x, y):
        if self.mode == "disabled":
            loss, grad, _ = loss_input_gradient(self.net, x, y, "disabled")
            return loss, grad
        if self.trace is None:
            loss, grad, self.trace = loss_input_gradient(
                self.net, x, y, "active", rng=self.rng)
            return loss, grad
        loss, grad, _ = loss_input_gradient(self.net, x, y, "frozen",
                                            trace=self.trace)
        return loss, grad


def _check_inputs(net, x, y):
    x = check_unit_range(x, "x")
    y = check_labels(y, n_classes=net.n_outputs, name="y")
    if len(x) != len(y):
        raise DimensionError(f"{len(x)} inputs but {len(y)} labels")
    return x, y


def fgsm(net: NetworkState, x, y, cfg: AttackConfig) -> np.ndarray:
    """Single step along the sign of the loss gradient, clipped to the box."""
    cfg.validate()
    x, y = _check_inputs(net, x, y)
    victim = _FrozenVictim(net, cfg.noise_mode, cfg.seed)
    _, grad = victim.loss_grad(x, y)
    return np.clip(x + cfg.alpha * np.sign(grad), cfg.box[0], cfg.box[1])


def pgd(net: NetworkState, x, y, cfg: AttackConfig) -> np.ndarray:
    """Iterated sign-gradient ascent projected onto the l-inf eps ball.

    Every iterate (not just the result) satisfies the ball and box
    constraints exactly.
    """
    cfg.validate()
    x0, y = _check_inputs(net, x, y)
    victim = _FrozenVictim(net, cfg.noise_mode, cfg.seed)
    if cfg.random_start:
        start_rng = RngStream(cfg.seed, 0x96D)
        adv = x0 + start_rng.uniform(x0.shape, -cfg.eps, cfg.eps)
        adv = np.clip(np.clip(adv, x0 - cfg.eps, x0 + cfg.eps),
                      cfg.box[0], cfg.box[1])
    else:
        adv = x0.copy()
    for _ in range(cfg.steps):
        _, grad = victim.loss_grad(adv, y)
        adv = adv + cfg.alpha * np.sign(grad)
        adv = np.clip(adv, x0 - cfg.eps, x0 + cfg.eps)
        adv = np.clip(adv, cfg.box[0], cfg.box[1])
    return adv


def lbfgs_direction(grad: np.ndarray, s_list: list, y_list: list) -> np.ndarray:
    """Two-loop recursion: approximate (inverse Hessian) @ grad."""
    q = grad.copy()
    alphas = []
    rhos = []
    for s, yv in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / float(yv @ s)
        a = rho * float(s @ q)
        q -= a * yv
        alphas.append(a)
        rhos.append(rho)
    if s_list:
        s, yv = s_list[-1], y_list[-1]
        gamma = float(s @ yv) / float(yv @ yv)
    else:
        gamma = 1.0
    r = gamma * q
    for (s, yv), a, rho in zip(zip(s_list, y_list), reversed(alphas),
                               reversed(rhos)):
        b = rho * float(yv @ r)
        r += (a - b) * s
    return r


def minimize_lbfgs(objective, x0: np.ndarray, step_size: float, max_iter: int,
                   history: int = 10, bounds: tuple | None = None) -> np.ndarray:
    """Projected L-BFGS descent on a flat vector.

    `objective(x) -> (value, gradient)`.  Curvature pairs come from the
    realized (post-projection) steps; pairs with non-positive curvature are
    skipped.  With max_iter=0 the start point is returned unchanged.
    """
    x = x0.copy()
    if max_iter <= 0:
        return x
    s_list: list = []
    y_list: list = []
    _, grad = objective(x)
    for _ in range(max_iter):
        direction = -lbfgs_direction(grad, s_list, y_list)
        x_new = x + step_size * direction
        if bounds is not None:
            x_new = np.clip(x_new, bounds[0], bounds[1])
        _, grad_new = objective(x_new)
        s = x_new - x
        yv = grad_new - grad
        curvature = float(s @ yv)
        if curvature > 1e-10:
            s_list.append(s)
            y_list.append(yv)
            if len(s_list) > history:
                s_list.pop(0)
                y_list.pop(0)
        x, grad = x_new, grad_new
    return x


def lbfgs_attack(net: NetworkState, x, y, cfg: AttackConfig) -> np.ndarray:
    """Quasi-Newton loss ascent with an l2 pull toward the clean input.

    Minimizes -loss_sum(x') + proximity * ||x' - x||^2 over the pixel box.
    """
    cfg.validate()
    x0, y = _check_inputs(net, x, y)
    victim = _FrozenVictim(net, cfg.noise_mode, cfg.seed)
    shape = x0.shape
    n = shape[0]
    flat0 = x0.reshape(-1)

    def objective(flat):
        batch = flat.reshape(shape)
        loss, grad = victim.loss_grad(batch, y)
        diff = flat - flat0
        # loss is the batch mean; scale to the sum so the proximity term
        # is commensurate across batch sizes.
        value = -loss * n + cfg.proximity * float(diff @ diff)
        gvec = -grad.reshape(-1) + 2.0 * cfg.proximity * diff
        return value, gvec

    out = minimize_lbfgs(objective, flat0, cfg.alpha, cfg.steps,
                         history=cfg.history, bounds=cfg.box)
    return out.reshape(shape)


def run_attack(net: NetworkState, x, y, cfg: AttackConfig) -> np.ndarray:
    """Dispatch on cfg.kind."""
    if cfg.kind == "fgsm":
        return fgsm(net, x, y, cfg)
    if cfg.kind == "pgd":
        return pgd(net, x, y, cfg)
    if cfg.kind == "lbfgs":
        return lbfgs_attack(net, x, y, cfg)
    raise ValueError(f"unknown attack kind {cfg.kind!r}")


def transfer_attack(surrogate: NetworkState, victim: NetworkState, x, y,
                    cfg: AttackConfig, eval_noise_mode: str | None = None,
                    eval_seed: int | None = None):
    """Generate adversarial examples on the surrogate, score the victim.

    Returns (adversarial batch, victim accuracy).  The victim redraws its
    own noise at evaluation time.
    """
    if tuple(surrogate.input_shape) != tuple(victim.input_shape):
        raise DimensionError(
            f"surrogate input {surrogate.input_shape} does not match "
            f"victim input {victim.input_shape}"
        )
    adv = run_attack(surrogate, x, y, cfg)
    if eval_noise_mode is None:
        eval_noise_mode = "active" if victim.has_noise() else "disabled"
    rng = RngStream(cfg.seed if eval_seed is None else eval_seed, 0xE7A1)
    preds = predict(victim, adv, noise_mode=eval_noise_mode, rng=rng)
    y = check_labels(y, n_classes=victim.n_outputs, name="y")
    return adv, float(np.mean(preds == y))
