"""Differentially private optimization and privacy accounting.

The private path is per-example gradient clipping followed by Gaussian
noise on the clipped sum (noise scale sigma * C), averaged over the batch,
fed into a standard Adam update. Only the critic is trained this way; the
generator never sees real rows, so its plain updates are free under
post-processing.

Accounting composes Renyi divergences of the subsampled Gaussian mechanism
over a fixed grid of orders and converts to (epsilon, delta) with
eps = min_alpha [ rdp(alpha) + log(1/delta)/(alpha - 1) ].
For q = 1 the increment is the Gaussian closed form alpha / (2 sigma^2);
for q < 1 it is the standard numerically-stable series evaluation of the
subsampled-Gaussian bound (integer orders exactly, fractional orders via
the two-sided erfc form).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp

from .autodiff import ParamSet
from .errors import ConfigError, ContractError

Grads = dict[str, np.ndarray]

DEFAULT_ORDERS = (1.25, 1.5, *range(2, 513))


@dataclass
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    epsilon: float = 1.0
    delta: float = 1e-5
    sampling_rate: float = 0.01  # q = batch / N
    disable_clipping: bool = False

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigError(f"clip norm must be > 0, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ConfigError(
                f"noise multiplier must be >= 0, got {self.noise_multiplier}"
            )
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon target must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")
        if not 0 < self.sampling_rate <= 1:
            raise ConfigError(
                f"sampling rate must be in (0, 1], got {self.sampling_rate}"
            )


# ---------------------------------------------------------------------------
# gradient mechanics


def grad_norm(grads: Grads) -> float:
    """Euclidean norm of the whole flattened gradient vector."""
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_per_example(grads: Grads, clip_norm: float) -> Grads:
    """Scale one example's gradient so its global norm is at most clip_norm."""
    if clip_norm <= 0:
        raise ConfigError(f"clip norm must be > 0, got {clip_norm}")
    norm = grad_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    factor = clip_norm / norm
    return {k: g * factor for k, g in grads.items()}


def noisy_mean(
    per_example: list[Grads],
    clip_norm: float,
    noise_multiplier: float,
    rng: np.random.Generator,
) -> Grads:
    """(sum of clipped gradients + N(0, (sigma C)^2 I)) / batch size.

    With noise_multiplier == 0 no random draws are consumed at all, so the
    private path degenerates bit-exactly to a plain average.
    """
    if not per_example:
        raise ContractError("noisy_mean needs a non-empty batch")
    total = {k: g.copy() for k, g in per_example[0].items()}
    for ex in per_example[1:]:
        for k in total:
            total[k] += ex[k]
    scale = noise_multiplier * clip_norm
    b = len(per_example)
    out = {}
    for k, g in total.items():
        if scale > 0:
            g = g + rng.normal(0.0, scale, size=g.shape)
        out[k] = g / b
    return out


# ---------------------------------------------------------------------------
# optimizers (one shared update core, so the DP path cannot drift)


@dataclass
class OptState:
    """Moment buffers plus the step counter, shaped like the ParamSet."""

    t: int
    slots: dict[str, Grads]

    @staticmethod
    def zeros(params: ParamSet, slot_names: tuple[str, ...]) -> "OptState":
        arrays = params.arrays()
        return OptState(
            0, {s: {k: np.zeros_like(a) for k, a in arrays.items()} for s in slot_names}
        )


def _adam_core(
    params: ParamSet, grads: Grads, state: OptState, lr, beta1, beta2, eps
) -> tuple[OptState, ParamSet]:
    t = state.t + 1
    m, v, out = {}, {}, {}
    for k, a in params.arrays().items():
        g = grads[k]
        m[k] = beta1 * state.slots["m"][k] + (1.0 - beta1) * g
        v[k] = beta2 * state.slots["v"][k] + (1.0 - beta2) * g * g
        m_hat = m[k] / (1.0 - beta1**t)
        v_hat = v[k] / (1.0 - beta2**t)
        out[k] = a - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptState(t, {"m": m, "v": v}), params.replace(out)


class Adam:
    """Plain Adam over ParamSet gradients (one mean gradient per step)."""

    per_example = False

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def init(self, params: ParamSet) -> OptState:
        return OptState.zeros(params, ("m", "v"))

    def step(self, state: OptState, params: ParamSet, grads: Grads):
        return _adam_core(params, grads, state, self.lr, self.beta1, self.beta2, self.eps)


class RMSProp:
    """Root-mean-square gradient scaling without momentum."""

    per_example = False

    def __init__(self, lr: float, alpha: float = 0.99, eps: float = 1e-8):
        self.lr, self.alpha, self.eps = lr, alpha, eps

    def init(self, params: ParamSet) -> OptState:
        return OptState.zeros(params, ("s",))

    def step(self, state: OptState, params: ParamSet, grads: Grads):
        s, out = {}, {}
        for k, a in params.arrays().items():
            g = grads[k]
            s[k] = self.alpha * state.slots["s"][k] + (1.0 - self.alpha) * g * g
            out[k] = a - self.lr * g / (np.sqrt(s[k]) + self.eps)
        return OptState(state.t + 1, {"s": s}), params.replace(out)


class DpAdam:
    """Adam fed by clipped, noised per-example gradients.

    Calls the same update core as the plain optimizer, so with
    noise_multiplier 0 and clipping disabled the two are bit-identical.
    """

    per_example = True

    def __init__(self, lr: float, beta1: float, beta2: float, dp: DpConfig, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.dp = dp

    def init(self, params: ParamSet) -> OptState:
        return OptState.zeros(params, ("m", "v"))

    def step(
        self,
        state: OptState,
        params: ParamSet,
        per_example: list[Grads],
        rng: np.random.Generator,
    ):
        if not self.dp.disable_clipping:
            per_example = [clip_per_example(g, self.dp.clip_norm) for g in per_example]
        mean = noisy_mean(per_example, self.dp.clip_norm, self.dp.noise_multiplier, rng)
        return _adam_core(params, mean, state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# Renyi accounting for the subsampled Gaussian mechanism


def _log_comb(n: float, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log A_alpha for integer order: binomial expansion, all terms >= 0."""
    i = np.arange(alpha + 1, dtype=np.float64)
    log_coef = gammaln(alpha + 1) - gammaln(i + 1) - gammaln(alpha - i + 1)
    terms = log_coef + i * math.log(q) + (alpha - i) * math.log(1 - q)
    terms = terms + (i * i - i) / (2.0 * sigma * sigma)
    return float(logsumexp(terms))


def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(log_ndtr(-x * math.sqrt(2.0)))


def _log_add(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def _log_sub(a: float, b: float) -> float:
    if b > a:
        raise ContractError("log_sub of a larger value")
    if b == -math.inf:
        return a
    return a + math.log1p(-math.exp(b - a))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """log A_alpha for fractional order via the two-sided erfc split."""
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        if i > 10000:
            raise ContractError("fractional-order series failed to converge")
        log_coef = _log_comb(alpha, i)
        sign = 1.0
        # past i = alpha the generalized binomial coefficient alternates sign
        if i > alpha and (i - math.ceil(alpha)) % 2 == 1:
            sign = -1.0
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log(1 - q)
        log_t1 = log_coef + j * math.log(q) + i * math.log(1 - q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if sign > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30.0 and i > alpha:
            break
    return _log_add(log_a0, log_a1)


# per-step increment vectors keyed by (q, sigma, order grid); the same pair
# recurs thousands of times in a training run and during calibration
_INCREMENT_CACHE: dict[tuple, np.ndarray] = {}


def rdp_step(alpha: float, q: float, sigma: float) -> float:
    """Renyi divergence added by one subsampled-Gaussian step at one order."""
    if alpha <= 1:
        raise ConfigError(f"Renyi order must be > 1, got {alpha}")
    if not 0 < q <= 1:
        raise ConfigError(f"sampling rate must be in (0, 1], got {q}")
    if sigma <= 0:
        raise ConfigError(f"noise multiplier must be > 0, got {sigma}")
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1.0)


@dataclass
class Accountant:
    """Accumulated Renyi divergence per order, plus the step count."""

    orders: np.ndarray = field(
        default_factory=lambda: np.array(DEFAULT_ORDERS, dtype=np.float64)
    )
    rdp: np.ndarray | None = None
    steps: int = 0

    def __post_init__(self):
        self.orders = np.asarray(self.orders, dtype=np.float64)
        if np.any(self.orders <= 1):
            raise ConfigError("all Renyi orders must be > 1")
        if self.rdp is None:
            self.rdp = np.zeros_like(self.orders)
        self.rdp = np.asarray(self.rdp, dtype=np.float64)
        if self.rdp.shape != self.orders.shape:
            raise ConfigError("rdp accumulator shape must match the order grid")

    def _increment(self, q: float, sigma: float) -> np.ndarray:
        key = (float(q), float(sigma), self.orders.tobytes())
        inc = _INCREMENT_CACHE.get(key)
        if inc is None:
            inc = np.array([rdp_step(a, q, sigma) for a in self.orders])
            _INCREMENT_CACHE[key] = inc
        return inc

    def record(self, q: float, sigma: float, steps: int = 1) -> None:
        """Compose `steps` mechanism invocations at sampling rate q, noise sigma.

        Accumulates one step at a time so a bulk record is bit-identical to
        the per-step accumulation of a live training loop (the calibration
        search relies on that equality at the budget boundary).
        """
        if steps < 1:
            raise ConfigError(f"step count must be >= 1, got {steps}")
        inc = self._increment(q, sigma)
        rdp = self.rdp
        for _ in range(steps):
            rdp = rdp + inc
        self.rdp = rdp
        self.steps += steps

    def epsilon_at(self, delta: float) -> float:
        if not 0 < delta < 1:
            raise ConfigError(f"delta must be in (0, 1), got {delta}")
        eps = self.rdp + math.log(1.0 / delta) / (self.orders - 1.0)
        return float(eps.min())

    def best_order(self, delta: float) -> float:
        eps = self.rdp + math.log(1.0 / delta) / (self.orders - 1.0)
        return float(self.orders[int(np.argmin(eps))])

    def to_json(self) -> dict:
        return {
            "orders": self.orders.tolist(),
            "rdp": self.rdp.tolist(),
            "steps": self.steps,
        }

    @staticmethod
    def from_json(obj: dict) -> "Accountant":
        return Accountant(
            orders=np.array(obj["orders"]),
            rdp=np.array(obj["rdp"]),
            steps=int(obj["steps"]),
        )


def budget_exhausted(acct: Accountant, dp: DpConfig) -> bool:
    """True once the spent epsilon at the target delta exceeds the target."""
    return acct.epsilon_at(dp.delta) > dp.epsilon


def calibrate_sigma(
    epsilon: float,
    delta: float,
    q: float,
    steps: int,
    lo: float = 0.3,
    hi: float = 64.0,
    iters: int = 60,
) -> float:
    """Smallest noise multiplier whose epsilon after `steps` stays in budget.

    Bisection over sigma; epsilon is antitone in sigma, so the upper end of
    the final bracket is always feasible.
    """

    def eps_for(sigma: float) -> float:
        acct = Accountant()
        acct.record(q, sigma, steps=steps)
        return acct.epsilon_at(delta)

    if eps_for(hi) > epsilon:
        raise ConfigError(
            f"cannot reach epsilon {epsilon} within sigma <= {hi} at q={q}, T={steps}"
        )
    if eps_for(lo) <= epsilon:
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if eps_for(mid) > epsilon:
            lo = mid
        else:
            hi = mid
    return hi


# ---------------------------------------------------------------------------
# privacy log

PRIVACY_LOG_HEADER = ["step", "epoch", "sigma", "q", "clip_norm", "epsilon"]


class PrivacyLog:
    """Append-only CSV of per-step privacy spend."""

    def __init__(self, path):
        self.path = path
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(PRIVACY_LOG_HEADER)

    def append(self, step, epoch, sigma, q, clip_norm, epsilon) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [step, epoch, repr(float(sigma)), repr(float(q)), repr(float(clip_norm)), repr(float(epsilon))]
            )

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, encoding="utf-8", newline="") as fh:
            return [dict(r) for r in csv.DictReader(fh)]
