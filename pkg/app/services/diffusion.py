"""Mean-reverting diffusion on mel matrices: schedule, forward marginal and reverse samplers.

The forward process is dX = 1/2 beta(t) (mu - X) dt + sqrt(beta(t)) dW on t in [0, 1],
so X_t | X_0 is Gaussian with mean meancoef(t) X_0 + (1 - meancoef(t)) mu and
variance lambda(t). Terminal time is fixed at 1.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from app.core.config import DiffusionConfig
from app.core.errors import DegenerateDensityError, DomainError, InvalidInputError, ShapeMismatchError
from app.models.schemas import Solver

logger = logging.getLogger(__name__)

MODES = ("ode", "sde")
TIME_EPS = 1e-12

ScoreFn = Callable[[torch.Tensor, float], torch.Tensor]


def _exp(x):
    return torch.exp(x) if isinstance(x, torch.Tensor) else math.exp(x)


def _check_time(t, lo: float = 0.0, hi: float = 1.0):
    value = float(t)
    if not (lo - TIME_EPS <= value <= hi + TIME_EPS):
        raise DomainError(f"time {value} is outside [{lo}, {hi}]")


def _check_same_shape(*tensors: torch.Tensor):
    shapes = {tuple(x.shape) for x in tensors}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"shapes differ: {sorted(shapes)}")


@dataclass(frozen=True)
class NoiseSchedule:
    beta0: float = 0.05
    beta1: float = 20.0

    def __post_init__(self):
        if not (0 < self.beta0 <= self.beta1):
            raise InvalidInputError(f"schedule needs 0 < beta0 <= beta1, got ({self.beta0}, {self.beta1})")

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "NoiseSchedule":
        return cls(beta0=cfg.beta0, beta1=cfg.beta1)

    def beta(self, t):
        return self.beta0 + (self.beta1 - self.beta0) * t

    def cum(self, t):
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t

    def lam(self, t):
        return 1.0 - _exp(-self.cum(t))

    def meancoef(self, t):
        return _exp(-0.5 * self.cum(t))


@dataclass
class DiffusionCondition:
    mu: torch.Tensor  # prior mean, the excitation representation X_E
    style: torch.Tensor  # [d_s]
    formant: torch.Tensor  # X_F, same shape as mu

    def __post_init__(self):
        _check_same_shape(self.mu, self.formant)


@dataclass
class DiffusionState:
    x: torch.Tensor
    t: float

    def __post_init__(self):
        _check_time(self.t)


def forward_sample(x0: torch.Tensor, mu: torch.Tensor, t: float, eps: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    # draw X_t given X_0 with the supplied standard normal `eps`
    _check_time(t)
    _check_same_shape(x0, mu, eps)
    t = min(max(float(t), 0.0), 1.0)
    a = sched.meancoef(t)
    return a * x0 + (1.0 - a) * mu + math.sqrt(sched.lam(t)) * eps


def analytic_gaussian_score(x: torch.Tensor, t: float, m0, gamma2: float, mu: torch.Tensor,
                            sched: NoiseSchedule) -> torch.Tensor:
    """Exact score of X_t when X_0 ~ N(m0, gamma2 I)."""
    if gamma2 < 0:
        raise InvalidInputError(f"gamma2 must be nonnegative, got {gamma2}")
    _check_time(t)
    a = sched.meancoef(t)
    mean_t = a * m0 + (1.0 - a) * mu
    var_t = a * a * gamma2 + sched.lam(t)
    if var_t <= 0:
        raise DegenerateDensityError(f"marginal variance is zero at t={t}")
    return -(x - mean_t) / var_t


def reverse_step(state: DiffusionState, score: torch.Tensor, h: float, sched: NoiseSchedule, mode: str,
                 mu: torch.Tensor, noise: Optional[torch.Tensor] = None) -> DiffusionState:
    # one explicit step from t to t - h, drift and score taken at t
    if h <= 0:
        raise DomainError(f"step size must be positive, got {h}")
    if state.t - h < -TIME_EPS:
        raise DomainError(f"step of {h} from t={state.t} passes t=0")
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got '{mode}'")
    _check_same_shape(state.x, score, mu)

    x = state.x
    beta_h = sched.beta(state.t) * h
    if mode == "ode":
        x = x - 0.5 * beta_h * ((mu - x) - score)
    else:
        if noise is None:
            raise InvalidInputError("the sde step needs a noise draw")
        x = x - beta_h * (0.5 * (mu - x) - score) + math.sqrt(beta_h) * noise
    return DiffusionState(x=x, t=max(state.t - h, 0.0))


def posterior_step(state: DiffusionState, score: torch.Tensor, h: float, sched: NoiseSchedule,
                   mu: torch.Tensor, noise: torch.Tensor) -> DiffusionState:
    """Stochastic step through the exact forward posterior q(x_s | x_t, x0_hat).

    x0_hat is the posterior mean of X_0 implied by the score; at s = 0 the step
    returns x0_hat itself.
    """
    if h <= 0:
        raise DomainError(f"step size must be positive, got {h}")
    t, s = state.t, max(state.t - h, 0.0)
    if t - h < -TIME_EPS:
        raise DomainError(f"step of {h} from t={t} passes t=0")

    a_t, lam_t = sched.meancoef(t), sched.lam(t)
    x0_hat = (state.x - (1.0 - a_t) * mu + lam_t * score) / a_t
    lam_s = sched.lam(s)
    if lam_s <= 0:
        return DiffusionState(x=x0_hat, t=0.0)

    a_s = sched.meancoef(s)
    alpha = math.exp(-0.5 * (sched.cum(t) - sched.cum(s)))
    step_var = 1.0 - alpha * alpha
    post_var = 1.0 / (1.0 / lam_s + alpha * alpha / step_var)
    y0, yt = x0_hat - mu, state.x - mu
    post_mean = post_var * (a_s * y0 / lam_s + alpha * yt / step_var)
    return DiffusionState(x=mu + post_mean + math.sqrt(post_var) * noise, t=s)


def solver_mode(solver) -> str:
    # pf integrates the probability-flow ode, ml the reverse sde
    return "ode" if Solver(solver) == Solver.PF else "sde"


def sample_reverse(mu: torch.Tensor, n_steps: int, tau: float, mode: str, sched: NoiseSchedule,
                   score_fn: ScoreFn, seed: int, x_init: Optional[torch.Tensor] = None,
                   ml_posterior: bool = False) -> torch.Tensor:
    """Integrate from t = 1 to t = 0 on a uniform grid.

    Random numbers come from one generator seeded with `seed`: the initial draw
    first (always consumed, even with `x_init`), then one draw per sde step.
    Zero steps return mu unchanged.
    """
    if n_steps < 0:
        raise DomainError(f"n_steps must be nonnegative, got {n_steps}")
    if tau <= 0:
        raise DomainError(f"tau must be positive, got {tau}")
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got '{mode}'")
    if n_steps == 0:
        return mu.clone()

    gen = torch.Generator(device=mu.device).manual_seed(int(seed))
    eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype, device=mu.device)
    x = mu + eps / math.sqrt(tau) if x_init is None else x_init.clone()

    h = 1.0 / n_steps
    state = DiffusionState(x=x, t=1.0)
    for k in range(n_steps):
        state = DiffusionState(x=state.x, t=1.0 - k * h)
        score = score_fn(state.x, state.t)
        if mode == "ode":
            state = reverse_step(state, score, h, sched, "ode", mu)
            continue
        noise = torch.randn(mu.shape, generator=gen, dtype=mu.dtype, device=mu.device)
        if ml_posterior:
            state = posterior_step(state, score, h, sched, mu, noise)
        else:
            state = reverse_step(state, score, h, sched, "sde", mu, noise)
    return state.x


def compose_output(x_e_refined: torch.Tensor, x_f: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x_e_refined, x_f)
    return x_e_refined + x_f
