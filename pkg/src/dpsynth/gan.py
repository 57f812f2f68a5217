"""Generator/critic networks and the three adversarial training variants.

The generator maps z ~ U(-1, 1)^noise_dim through three ReLU layers
(default sizes [128, 256, 512]) to a sigmoid output the width of the
encoded table. The critic mirrors it ([512, 256, 128] -> 1) and ends in a
sigmoid for the vanilla variant or no activation for the Wasserstein
variants. Lipschitz control is weight clipping (wgan_clip) or a gradient
penalty on interpolates (wgan_gp).

Training state is reproducible by construction: all randomness is drawn
from named substreams keyed by (seed, epoch, batch index), so a checkpoint
only has to remember the seed and the counters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    ParamSet,
    Tensor,
    add,
    constant,
    forward_mlp,
    grad,
    init_mlp_params,
    log,
    mean_all,
    neg,
    row_norms,
    scale,
    shift,
    square,
    sub,
    sum_all,
    variable,
)
from .errors import ConfigError, ContractError, NumericGuardError, ParseError, TrainingDivergedError
from .privacy import Accountant, Adam, DpAdam, DpConfig, OptState, PrivacyLog, RMSProp, budget_exhausted
from .rng import substream

VARIANTS = ("vanilla", "wgan_clip", "wgan_gp")

CHECKPOINT_MAGIC = b"DPSCKPT1"
CHECKPOINT_VERSION = 1

# per-variant optimizer defaults, as recommended by the respective papers
_VARIANT_DEFAULTS = {
    "vanilla": {"lr": 1e-4, "beta1": 0.5, "beta2": 0.9, "n_critic": 1},
    "wgan_clip": {"lr": 5e-5, "beta1": 0.0, "beta2": 0.99, "n_critic": 5},
    "wgan_gp": {"lr": 1e-4, "beta1": 0.0, "beta2": 0.9, "n_critic": 5},
}


@dataclass
class GanConfig:
    out_width: int
    variant: str = "wgan_gp"
    noise_dim: int = 100
    gen_hidden: list[int] = field(default_factory=lambda: [128, 256, 512])
    critic_hidden: list[int] = field(default_factory=lambda: [512, 256, 128])
    batch_size: int = 256
    n_critic: int | None = None
    clip_const: float = 0.01
    penalty_weight: float = 10.0
    lr: float | None = None
    beta1: float | None = None
    beta2: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.out_width < 1:
            raise ConfigError(f"output width must be >= 1, got {self.out_width}")
        if self.noise_dim < 1:
            raise ConfigError(f"noise dim must be >= 1, got {self.noise_dim}")
        for name, sizes in (("generator", self.gen_hidden), ("critic", self.critic_hidden)):
            if len(sizes) != 3:
                raise ConfigError(
                    f"{name} hidden sizes must have exactly 3 entries, got {sizes}"
                )
            if any(s < 1 for s in sizes):
                raise ConfigError(f"{name} hidden sizes must be positive: {sizes}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.clip_const <= 0:
            raise ConfigError(f"clip constant must be > 0, got {self.clip_const}")
        if self.penalty_weight < 0:
            raise ConfigError(f"penalty weight must be >= 0, got {self.penalty_weight}")
        d = _VARIANT_DEFAULTS[self.variant]
        if self.n_critic is None:
            self.n_critic = d["n_critic"]
        if self.lr is None:
            self.lr = d["lr"]
        if self.beta1 is None:
            self.beta1 = d["beta1"]
        if self.beta2 is None:
            self.beta2 = d["beta2"]
        if self.n_critic < 1:
            raise ConfigError(f"n_critic must be >= 1, got {self.n_critic}")

    # network shapes ---------------------------------------------------

    def gen_layer_sizes(self) -> list[int]:
        return [self.noise_dim, *self.gen_hidden, self.out_width]

    def critic_layer_sizes(self) -> list[int]:
        return [self.out_width, *self.critic_hidden, 1]

    def gen_activations(self) -> list[str]:
        return ["relu"] * len(self.gen_hidden) + ["sigmoid"]

    def critic_activations(self) -> list[str]:
        final = "sigmoid" if self.variant == "vanilla" else "identity"
        return ["relu"] * len(self.critic_hidden) + [final]

    # optimizers --------------------------------------------------------

    def gen_optimizer(self):
        if self.variant == "wgan_clip":
            return RMSProp(self.lr, alpha=self.beta2)
        return Adam(self.lr, self.beta1, self.beta2)

    def critic_optimizer(self, dp: DpConfig | None = None):
        if dp is not None:
            # the private path always uses the Adam core
            return DpAdam(self.lr, self.beta1, self.beta2, dp)
        if self.variant == "wgan_clip":
            return RMSProp(self.lr, alpha=self.beta2)
        return Adam(self.lr, self.beta1, self.beta2)

    def to_json(self) -> dict:
        return {
            "out_width": self.out_width,
            "variant": self.variant,
            "noise_dim": self.noise_dim,
            "gen_hidden": list(self.gen_hidden),
            "critic_hidden": list(self.critic_hidden),
            "batch_size": self.batch_size,
            "n_critic": self.n_critic,
            "clip_const": self.clip_const,
            "penalty_weight": self.penalty_weight,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
        }

    @staticmethod
    def from_json(obj: dict) -> "GanConfig":
        return GanConfig(**obj)


@dataclass
class GanState:
    config: GanConfig
    gen: ParamSet
    critic: ParamSet
    gen_opt: OptState
    critic_opt: OptState
    seed: int
    epoch: int = 0
    critic_steps: int = 0
    gen_steps: int = 0


def init_state(config: GanConfig, seed: int) -> GanState:
    gen = init_mlp_params(config.gen_layer_sizes(), substream(seed, "init", 0))
    critic = init_mlp_params(config.critic_layer_sizes(), substream(seed, "init", 1))
    gen_optimizer = config.gen_optimizer()
    critic_optimizer = config.critic_optimizer()
    return GanState(
        config=config,
        gen=gen,
        critic=critic,
        gen_opt=gen_optimizer.init(gen),
        critic_opt=critic_optimizer.init(critic),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# forward passes and losses


def latent_batch(n: int, noise_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, noise_dim))


def generator_forward(gen: ParamSet, z: Tensor, config: GanConfig) -> Tensor:
    return forward_mlp(gen, z, config.gen_activations())


def critic_forward(critic: ParamSet, x: Tensor, config: GanConfig) -> Tensor:
    return forward_mlp(critic, x, config.critic_activations())


def generate(state: GanState, n: int, seed: int) -> np.ndarray:
    """Sample n soft rows from the generator; entries lie strictly in (0, 1)."""
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    z = latent_batch(n, state.config.noise_dim, substream(seed, "generate"))
    return generator_forward(state.gen, constant(z), state.config).data


def _guard_probability(p: np.ndarray, what: str) -> None:
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise NumericGuardError(
            f"{what} saturated outside (0, 1): range [{p.min()}, {p.max()}]"
        )


def vanilla_losses(critic: ParamSet, real: Tensor, fake: Tensor, config: GanConfig):
    """Jensen-Shannon objective with the non-saturating generator loss.

    d_loss = -mean log D(real) - mean log(1 - D(fake));
    g_loss = -mean log D(fake).
    """
    p_real = critic_forward(critic, real, config)
    p_fake = critic_forward(critic, fake, config)
    _guard_probability(p_real.data, "critic output on real rows")
    _guard_probability(p_fake.data, "critic output on fake rows")
    d_loss = add(
        neg(mean_all(log(p_real))),
        neg(mean_all(log(shift(neg(p_fake), 1.0)))),
    )
    g_loss = neg(mean_all(log(p_fake)))
    return d_loss, g_loss


def wgan_losses(critic: ParamSet, real: Tensor, fake: Tensor, config: GanConfig):
    """critic_loss = mean f(fake) - mean f(real) (minimized); g_loss = -mean f(fake)."""
    f_real = critic_forward(critic, real, config)
    f_fake = critic_forward(critic, fake, config)
    critic_loss = sub(mean_all(f_fake), mean_all(f_real))
    g_loss = neg(mean_all(f_fake))
    return critic_loss, g_loss


def clip_weights(params: ParamSet, c: float) -> ParamSet:
    """Clamp every component into [-c, c]."""
    if c <= 0:
        raise ConfigError(f"clip constant must be > 0, got {c}")
    return params.map(lambda a: np.clip(a, -c, c))


def gradient_penalty(
    critic: ParamSet,
    real: np.ndarray,
    fake: np.ndarray,
    weight: float,
    u: np.ndarray,
    config: GanConfig,
) -> Tensor:
    """weight * mean[(||grad_xhat f(xhat)||_2 - 1)^2] on per-row interpolates.

    u holds one interpolation coefficient per row (shape (n, 1)). The inner
    gradient is built on the tape, so the returned loss term is itself
    differentiable with respect to the critic parameters.
    """
    if real.shape != fake.shape:
        raise ContractError(
            f"interpolation needs matching shapes, got {real.shape} / {fake.shape}"
        )
    xhat = variable(u * real + (1.0 - u) * fake)
    f = critic_forward(critic, xhat, config)
    (inner,) = grad(sum_all(f), [xhat])
    norms = row_norms(inner)
    return scale(mean_all(square(shift(norms, -1.0))), weight)


def interpolation_draw(n: int, seed: int, epoch: int, batch: int) -> np.ndarray:
    return substream(seed, "interp", epoch, batch).random((n, 1))


# ---------------------------------------------------------------------------
# training


@dataclass
class DpTraining:
    """Everything a private run threads through the epoch loop."""

    dp: DpConfig
    accountant: Accountant
    log: PrivacyLog | None = None


@dataclass
class EpochSummary:
    epoch: int
    critic_losses: list[float]
    gen_losses: list[float]
    budget_stopped: bool = False
    epsilon: float | None = None

    @property
    def mean_critic_loss(self) -> float:
        return float(np.mean(self.critic_losses)) if self.critic_losses else float("nan")

    @property
    def mean_gen_loss(self) -> float:
        return float(np.mean(self.gen_losses)) if self.gen_losses else float("nan")


def _critic_batch_loss(
    critic: ParamSet,
    real: np.ndarray,
    fake: np.ndarray,
    u: np.ndarray,
    config: GanConfig,
) -> Tensor:
    """Variant-appropriate critic loss on constant (detached) batches."""
    real_t, fake_t = constant(real), constant(fake)
    if config.variant == "vanilla":
        d_loss, _ = vanilla_losses(critic, real_t, fake_t, config)
        return d_loss
    critic_loss, _ = wgan_losses(critic, real_t, fake_t, config)
    if config.variant == "wgan_gp":
        critic_loss = add(
            critic_loss,
            gradient_penalty(critic, real, fake, config.penalty_weight, u, config),
        )
    return critic_loss


def _check_finite(value: float, step: int, variant: str, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite {what} at step {step} ({variant}): {value}"
        )


def train_epoch(
    state: GanState,
    data: np.ndarray,
    dp_training: DpTraining | None = None,
) -> tuple[GanState, EpochSummary]:
    """One pass over shuffled minibatches (partial tail batch dropped).

    Every batch takes a critic step; every n_critic-th batch also takes a
    generator step. Under DP the critic step uses per-example clipped and
    noised gradients and the accountant is advanced once per critic step;
    the epoch stops immediately after the step whose post-step epsilon
    crosses the target.
    """
    cfg = state.config
    n = data.shape[0]
    if n < cfg.batch_size:
        raise ConfigError(
            f"dataset has {n} rows, smaller than batch size {cfg.batch_size}"
        )
    gen_optimizer = cfg.gen_optimizer()
    critic_optimizer = cfg.critic_optimizer(dp_training.dp if dp_training else None)

    gen, critic = state.gen, state.critic
    gen_opt, critic_opt = state.gen_opt, state.critic_opt
    critic_steps, gen_steps = state.critic_steps, state.gen_steps
    epoch = state.epoch

    perm = substream(state.seed, "batching", epoch).permutation(n)
    n_batches = n // cfg.batch_size
    critic_losses: list[float] = []
    gen_losses: list[float] = []
    budget_stopped = False
    epsilon = None

    for b in range(n_batches):
        idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        real = data[idx]

        z = latent_batch(cfg.batch_size, cfg.noise_dim, substream(state.seed, "latent", epoch, b, 0))
        fake = generator_forward(gen, constant(z), cfg).data
        u = interpolation_draw(cfg.batch_size, state.seed, epoch, b)

        if critic_optimizer.per_example:
            per_example = []
            example_losses = []
            for i in range(cfg.batch_size):
                loss_i = _critic_batch_loss(
                    critic, real[i : i + 1], fake[i : i + 1], u[i : i + 1], cfg
                )
                example_losses.append(loss_i.item())
                gs = grad(loss_i, critic.tensors())
                per_example.append(dict(zip(critic.names, (g.data for g in gs))))
            noise_rng = substream(state.seed, "noise", epoch, b)
            critic_opt, critic = critic_optimizer.step(critic_opt, critic, per_example, noise_rng)
            loss_value = float(np.mean(example_losses))
        else:
            loss = _critic_batch_loss(critic, real, fake, u, cfg)
            loss_value = loss.item()
            gs = grad(loss, critic.tensors())
            grads = dict(zip(critic.names, (g.data for g in gs)))
            critic_opt, critic = critic_optimizer.step(critic_opt, critic, grads)

        if cfg.variant == "wgan_clip":
            critic = clip_weights(critic, cfg.clip_const)

        critic_steps += 1
        critic_losses.append(loss_value)
        _check_finite(loss_value, critic_steps, cfg.variant, "critic loss")

        if dp_training is not None:
            dp = dp_training.dp
            dp_training.accountant.record(dp.sampling_rate, dp.noise_multiplier)
            epsilon = dp_training.accountant.epsilon_at(dp.delta)
            if dp_training.log is not None:
                dp_training.log.append(
                    critic_steps, epoch, dp.noise_multiplier, dp.sampling_rate, dp.clip_norm, epsilon
                )
            if budget_exhausted(dp_training.accountant, dp):
                budget_stopped = True
                break

        if (b + 1) % cfg.n_critic == 0:
            z2 = latent_batch(cfg.batch_size, cfg.noise_dim, substream(state.seed, "latent", epoch, b, 1))
            fake2 = generator_forward(gen, constant(z2), cfg)
            if cfg.variant == "vanilla":
                _, g_loss = vanilla_losses(critic, constant(real), fake2, cfg)
            else:
                _, g_loss = wgan_losses(critic, constant(real), fake2, cfg)
            g_value = g_loss.item()
            gs = grad(g_loss, gen.tensors())
            grads = dict(zip(gen.names, (g.data for g in gs)))
            gen_opt, gen = gen_optimizer.step(gen_opt, gen, grads)
            gen_steps += 1
            gen_losses.append(g_value)
            _check_finite(g_value, gen_steps, cfg.variant, "generator loss")

    new_state = replace(
        state,
        gen=gen,
        critic=critic,
        gen_opt=gen_opt,
        critic_opt=critic_opt,
        epoch=epoch + 1,
        critic_steps=critic_steps,
        gen_steps=gen_steps,
    )
    summary = EpochSummary(
        epoch=epoch,
        critic_losses=critic_losses,
        gen_losses=gen_losses,
        budget_stopped=budget_stopped,
        epsilon=epsilon,
    )
    return new_state, summary


# ---------------------------------------------------------------------------
# checkpoints: versioned header, JSON manifest, raw little-endian arrays


def _paramset_manifest(name: str, params: ParamSet) -> list[dict]:
    return [
        {"group": name, "name": k, "shape": list(a.shape)}
        for k, a in params.arrays().items()
    ]


def _optstate_manifest(name: str, opt: OptState) -> list[dict]:
    out = []
    for slot, grads in opt.slots.items():
        for k, a in grads.items():
            out.append({"group": f"{name}.{slot}", "name": k, "shape": list(a.shape)})
    return out


def save_checkpoint(state: GanState, path) -> None:
    manifest = {
        "config": state.config.to_json(),
        "seed": state.seed,
        "epoch": state.epoch,
        "critic_steps": state.critic_steps,
        "gen_steps": state.gen_steps,
        "gen_opt_t": state.gen_opt.t,
        "critic_opt_t": state.critic_opt.t,
        "arrays": (
            _paramset_manifest("gen", state.gen)
            + _paramset_manifest("critic", state.critic)
            + _optstate_manifest("gen_opt", state.gen_opt)
            + _optstate_manifest("critic_opt", state.critic_opt)
        ),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")

    def arrays_in_order():
        yield from state.gen.arrays().values()
        yield from state.critic.arrays().values()
        for opt in (state.gen_opt, state.critic_opt):
            for grads in opt.slots.values():
                yield from grads.values()

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays_in_order():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> GanState:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:8] != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint file")
        version, blob_len = struct.unpack("<II", head[8:])
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()

    offset = 0
    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ParseError(f"{path}: truncated checkpoint payload")
        offset += nbytes
        arr = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        groups.setdefault(entry["group"], {})[entry["name"]] = arr
    if offset != len(payload):
        raise ParseError(f"{path}: trailing bytes in checkpoint payload")

    config = GanConfig.from_json(manifest["config"])

    def opt_state(prefix: str, t: int) -> OptState:
        slots = {
            key.split(".", 1)[1]: grads
            for key, grads in groups.items()
            if key.startswith(prefix + ".")
        }
        return OptState(t, slots)

    return GanState(
        config=config,
        gen=ParamSet(list(groups["gen"].items())),
        critic=ParamSet(list(groups["critic"].items())),
        gen_opt=opt_state("gen_opt", manifest["gen_opt_t"]),
        critic_opt=opt_state("critic_opt", manifest["critic_opt_t"]),
        seed=manifest["seed"],
        epoch=manifest["epoch"],
        critic_steps=manifest["critic_steps"],
        gen_steps=manifest["gen_steps"],
    )
