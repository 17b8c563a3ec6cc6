"""Alternating critic / generator optimisation with Adam."""
from __future__ import annotations

import collections
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .data import PatchSet
from .discriminator import Critic, CriticSpec
from .errors import ConfigError, DataError, IntegrityError, NumericalError
from .generator import Generator, GeneratorSpec
from .losses import (
    CSV_COLUMNS,
    LossBreakdown,
    PenaltyConfig,
    content_loss,
    critic_loss,
    generator_adversarial_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.icaf"
LOSS_CSV_NAME = "losses.csv"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    epochs: int = 16
    lr_generator: float = 1e-4
    lr_critic: float = 4e-4
    generator_iters: int = 1
    critic_iters: int = 2
    lam: float = 10.0
    gp_point: str = "interpolate"
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    log_every: int = 50
    device: str = "cpu"
    max_steps: int | None = None
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    intensity_weight: float = 1.0
    gradient_weight: float = 1.0
    gradient_operator: str = "forward"
    history: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("batch_size", "epochs", "generator_iters", "critic_iters", "history"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr_generator < 0 or self.lr_critic < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        PenaltyConfig(self.lam, self.gp_point)

    @property
    def penalty(self) -> PenaltyConfig:
        return PenaltyConfig(self.lam, self.gp_point)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# Fields that only decide when to stop, log or save; they may change between resumes.
RUN_CONTROL_FIELDS = ("max_steps", "checkpoint_every", "log_every")


def _trajectory_fields(config: TrainConfig) -> TrainConfig:
    return dataclasses.replace(config, **{name: None for name in RUN_CONTROL_FIELDS})


def schedule_steps(n_patches: int, batch_size: int, epochs: int, max_steps: int | None = None) -> int:
    """Generator steps of a run: ``epochs * floor(N / batch)``, capped by ``max_steps``."""
    total = epochs * (n_patches // batch_size)
    return min(total, max_steps) if max_steps is not None else total


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64([seed, epoch])).permutation(n)


class TrainState:
    """Networks, optimisers, counters and RNG of one training run."""

    def __init__(self, config: TrainConfig, gen_spec: GeneratorSpec, critic_spec: CriticSpec):
        self.config, self.gen_spec, self.critic_spec = config, gen_spec, critic_spec
        dtype = _DTYPES[config.dtype]
        torch.manual_seed(config.seed)
        self.generator = Generator(gen_spec).to(config.device, dtype)
        self.critic_ir = Critic(critic_spec).to(config.device, dtype)
        self.critic_vis = Critic(critic_spec).to(config.device, dtype)
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), config.lr_generator, betas, config.adam_eps)
        self.opt_ir = torch.optim.Adam(self.critic_ir.parameters(), config.lr_critic, betas, config.adam_eps)
        self.opt_vis = torch.optim.Adam(self.critic_vis.parameters(), config.lr_critic, betas, config.adam_eps)
        self.rng = torch.Generator(device=config.device).manual_seed(config.seed + 1)
        self.step = 0
        self.epoch = 0
        self.history: collections.deque = collections.deque(maxlen=config.history)

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]

    # -- serialisation -------------------------------------------------
    def _modules(self):
        return {"generator": self.generator, "critic_ir": self.critic_ir, "critic_vis": self.critic_vis}

    def _optimizers(self):
        return {"g": self.opt_g, "ir": self.opt_ir, "vis": self.opt_vis}

    def tensors(self) -> dict:
        out = {}
        for prefix, module in self._modules().items():
            for name, t in module.state_dict().items():
                out[f"{prefix}/{name}"] = t
        for key, opt in self._optimizers().items():
            for idx, st in opt.state_dict()["state"].items():
                for field_name, t in st.items():
                    out[f"optim/{key}/{idx}/{field_name}"] = t
        out["rng/state"] = self.rng.get_state()
        return out

    def parameter_hash(self) -> str:
        return checkpoint.tensor_hash(self.tensors(), ("generator/", "critic_ir/", "critic_vis/"))

    def metadata(self) -> dict:
        return {
            "kind": "train_state",
            "config": self.config.to_dict(),
            "generator_spec": self.gen_spec.to_dict(),
            "critic_spec": self.critic_spec.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "history": [[s, b.to_dict()] for s, b in self.history],
            "parameter_count": sum(p.numel() for p in self.generator.parameters()),
            "parameter_hash": self.parameter_hash(),
        }


def save_checkpoint(state: TrainState, path) -> None:
    checkpoint.save(path, state.tensors(), state.metadata())


def load_checkpoint(path) -> TrainState:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "train_state":
        raise IntegrityError(f"{path} does not hold a training state")
    state = TrainState(
        TrainConfig.from_dict(meta["config"]),
        GeneratorSpec.from_dict(meta["generator_spec"]),
        CriticSpec.from_dict(meta["critic_spec"]),
    )
    for prefix, module in state._modules().items():
        sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
        module.load_state_dict(sd, strict=True)
    for key, opt in state._optimizers().items():
        sd = opt.state_dict()
        per_param: dict = {}
        for name, t in tensors.items():
            parts = name.split("/")
            if parts[0] == "optim" and parts[1] == key:
                per_param.setdefault(int(parts[2]), {})[parts[3]] = t
        sd["state"] = per_param
        opt.load_state_dict(sd)
    state.rng.set_state(tensors["rng/state"])
    state.step, state.epoch = meta["step"], meta["epoch"]
    state.history.extend((s, LossBreakdown(**b)) for s, b in meta["history"])
    if state.parameter_hash() != meta["parameter_hash"]:
        raise IntegrityError("parameter hash recomputed at load differs from the recorded one")
    return state


def load_generator(path) -> Generator:
    """Generator (eval mode, float32) from a checkpoint file."""
    tensors, meta = checkpoint.load(path)
    if "generator_spec" not in meta:
        raise IntegrityError(f"{path} has no generator")
    net = Generator(GeneratorSpec.from_dict(meta["generator_spec"]))
    net.load_state_dict({k[len("generator/"):]: v.float() for k, v in tensors.items()
                         if k.startswith("generator/")})
    return net.eval()


def _check_finite(state: TrainState, value: torch.Tensor, what: str, identifiers) -> None:
    if not torch.isfinite(value).all():
        msg = f"non-finite {what} at step {state.step + 1}; batch: {', '.join(identifiers or ['?'])}"
        log.error(msg)
        raise NumericalError(msg)


def train_step(state: TrainState, ir: torch.Tensor, vis: torch.Tensor, identifiers=None) -> LossBreakdown:
    """Critic updates, then generator updates, on one batch."""
    cfg, pen = state.config, state.config.penalty
    g, d_ir, d_vis = state.generator, state.critic_ir, state.critic_vis
    critic_params = list(d_ir.parameters()) + list(d_vis.parameters())

    for _ in range(cfg.critic_iters):
        with torch.no_grad():
            fused = g(ir, vis)
        loss_ir, gp_ir = critic_loss(d_ir, fused, ir, pen, state.rng, return_penalty=True)
        loss_vis, gp_vis = critic_loss(d_vis, fused, vis, pen, state.rng, return_penalty=True)
        _check_finite(state, loss_ir + loss_vis, "critic loss", identifiers)
        state.opt_ir.zero_grad(set_to_none=True)
        state.opt_vis.zero_grad(set_to_none=True)
        (loss_ir + loss_vis).backward(inputs=critic_params)
        state.opt_ir.step()
        state.opt_vis.step()

    gen_params = list(g.parameters())
    for _ in range(cfg.generator_iters):
        fused = g(ir, vis)
        l_con = content_loss(fused, ir, vis, cfg.intensity_weight, cfg.gradient_weight, cfg.gradient_operator)
        l_adv = generator_adversarial_loss(d_ir(fused), d_vis(fused))
        l_g = l_adv + l_con
        _check_finite(state, l_g, "generator loss", identifiers)
        state.opt_g.zero_grad(set_to_none=True)
        l_g.backward(inputs=gen_params)
        state.opt_g.step()

    state.step += 1
    breakdown = LossBreakdown(
        l_content=l_con.item(), l_adv=l_adv.item(), l_g=l_g.item(),
        l_d_ir=loss_ir.item(), l_d_vis=loss_vis.item(), gp_ir=gp_ir.item(), gp_vis=gp_vis.item(),
    )
    state.history.append((state.step, breakdown))
    return breakdown


def _rewrite_csv(path: Path, upto: int) -> None:
    rows = []
    if path.exists():
        with path.open(newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        w.writerows(r for r in rows if r and int(r[0]) <= upto)


def train(
    config: TrainConfig,
    dataset: PatchSet,
    gen_spec: GeneratorSpec | None = None,
    critic_spec: CriticSpec | None = None,
    out_dir=None,
    resume: bool = False,
    stop_after: int | None = None,
    progress: bool = True,
) -> TrainState:
    """Run the full schedule; with ``out_dir`` writes ``losses.csv`` and ``checkpoint.icaf``.

    ``resume`` continues from ``out_dir/checkpoint.icaf`` when present.
    ``stop_after`` halts after that many total steps (used to simulate
    interruption) without changing the schedule.
    """
    n = len(dataset)
    if n == 0:
        raise DataError("cannot train on an empty patch set")
    per_epoch = n // config.batch_size
    if per_epoch == 0:
        raise DataError(f"{n} patches cannot fill one batch of {config.batch_size}")
    total = schedule_steps(n, config.batch_size, config.epochs, config.max_steps)
    gen_spec = gen_spec or GeneratorSpec()
    critic_spec = critic_spec or CriticSpec(input_size=(dataset.size, dataset.size))

    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / CHECKPOINT_NAME if out else None
    if resume and ckpt_path is not None and ckpt_path.exists():
        state = load_checkpoint(ckpt_path)
        if _trajectory_fields(state.config) != _trajectory_fields(config):
            raise ConfigError("checkpoint was written with a different training configuration")
        state.config = config
        log.info("resuming from step %d", state.step)
    else:
        state = TrainState(config, gen_spec, critic_spec)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        _rewrite_csv(out / LOSS_CSV_NAME, state.step)

    csv_fh = (out / LOSS_CSV_NAME).open("a", newline="") if out else None
    writer = csv.writer(csv_fh) if csv_fh else None
    order, order_epoch = None, -1
    limit = total if stop_after is None else min(total, stop_after)
    try:
        while state.step < limit:
            epoch, idx = divmod(state.step, per_epoch)
            if epoch != order_epoch:
                order, order_epoch = epoch_order(n, config.seed, epoch), epoch
            state.epoch = epoch
            indices = order[idx * config.batch_size:(idx + 1) * config.batch_size]
            ir_np, vis_np = dataset.batch(indices)
            ir = torch.from_numpy(ir_np).to(config.device, state.dtype)
            vis = torch.from_numpy(vis_np).to(config.device, state.dtype)
            bd = train_step(state, ir, vis, dataset.identifiers(indices))
            if writer:
                writer.writerow(bd.row(state.step))
            if progress and (state.step % config.log_every == 0 or state.step == total):
                print(f"step {state.step}/{total} epoch {epoch + 1} l_g={bd.l_g:.4f} "
                      f"l_con={bd.l_content:.4f} l_d_ir={bd.l_d_ir:.4f} l_d_vis={bd.l_d_vis:.4f}",
                      file=sys.stderr)
            if ckpt_path and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                csv_fh.flush()
                save_checkpoint(state, ckpt_path)
        state.epoch = state.step // per_epoch
    finally:
        if csv_fh:
            csv_fh.close()
    if ckpt_path:
        save_checkpoint(state, ckpt_path)
    return state


@torch.no_grad()
def fuse_arrays(generator: Generator, ir: np.ndarray, vis: np.ndarray) -> np.ndarray:
    """Fuse one normalised pair of 2-D arrays; returns a normalised 2-D array."""
    p = next(generator.parameters())
    t_ir = torch.as_tensor(ir, dtype=p.dtype, device=p.device)[None, None]
    t_vis = torch.as_tensor(vis, dtype=p.dtype, device=p.device)[None, None]
    return generator(t_ir, t_vis)[0, 0].cpu().numpy()
