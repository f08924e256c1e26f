"""Optimization loop, learning-rate schedule, data mixing and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .decoder import NonFiniteInputError
from .lora import FreezePolicy, apply_policy, param_group, trainable_parameters
from .losses import LossBreakdown, LossWeights
from .model import ModelConfig, SegmentationModel, build_model
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

KIND_ORDER = ("semantic", "referring", "vqa", "reasoning")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration, sample_ids):
        self.iteration = iteration
        self.sample_ids = list(sample_ids)
        super().__init__(f"non-finite loss at iteration {iteration} (samples: {', '.join(self.sample_ids)})")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.0
    warmup_iters: int = 100
    batch_per_step: int = 2
    grad_accum_steps: int = 10
    total_iters: int = 2000
    max_categories_per_image: int = 3
    seed: int = 0
    mix_weights: dict | None = None
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.999)
    loss_weights: dict = field(default_factory=lambda: asdict(LossWeights()))

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if self.warmup_iters < 0 or self.batch_per_step <= 0 or self.grad_accum_steps <= 0:
            raise ValueError("warmup_iters must be >= 0; batch and accumulation sizes positive")
        if self.mix_weights is not None:
            s = sum(self.mix_weights.values())
            if any(w < 0 for w in self.mix_weights.values()) or abs(s - 1.0) > 1e-6:
                raise ValueError(f"mix weights must be non-negative and sum to 1, got {self.mix_weights}")
        self.betas = tuple(self.betas)

    @property
    def weights(self):
        return LossWeights(**self.loss_weights)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(iteration, config):
    """Linear warmup from 0 to ``lr`` over ``warmup_iters``, then linear decay to 0 at ``total_iters``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    w, total, lr = config.warmup_iters, config.total_iters, config.lr
    if iteration < w:
        return lr * iteration / w
    if total <= w:
        return lr
    return lr * max(0.0, (total - iteration) / (total - w))


class DataMixer:
    """Draws samples one at a time: a kind by mix weight, then a sample uniformly within it."""

    def __init__(self, samples, mix_weights=None, rng=None):
        self.by_kind = {k: [s for s in samples if s.kind == k] for k in KIND_ORDER}
        self.by_kind = {k: v for k, v in self.by_kind.items() if v}
        if not self.by_kind:
            raise ValueError("no training samples")
        self.kinds = list(self.by_kind)
        if mix_weights is None:
            w = np.ones(len(self.kinds))
        else:
            w = np.array([float(mix_weights.get(k, 0.0)) for k in self.kinds])
            if w.sum() <= 0:
                raise ValueError(f"mix weights {mix_weights} give no weight to available kinds {self.kinds}")
        self.p = w / w.sum()
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def draw(self, n):
        out = []
        for _ in range(n):
            kind = self.kinds[int(self.rng.choice(len(self.kinds), p=self.p))]
            pool = self.by_kind[kind]
            out.append(pool[int(self.rng.integers(len(pool)))])
        return out


@dataclass
class TrainState:
    model: SegmentationModel
    optimizer: torch.optim.Optimizer
    policy: FreezePolicy
    iteration: int = 0
    micro_step: int = 0
    rng: np.random.Generator | None = None
    pending: list = field(default_factory=list)
    last_update: tuple | None = None
    history: list = field(default_factory=list)
    manifest: dict | None = None


def make_optimizer(model, policy, config):
    params = list(trainable_parameters(model, policy).values())
    return torch.optim.AdamW(params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)


def new_state(model, config, policy=None):
    policy = policy or FreezePolicy()
    apply_policy(model, policy)
    return TrainState(
        model=model,
        optimizer=make_optimizer(model, policy, config),
        policy=policy,
        rng=np.random.default_rng(config.seed),
    )


def _mean_breakdown(parts):
    n = len(parts)
    return LossBreakdown(
        txt=sum(p.txt for p in parts) / n,
        bce=sum(p.bce for p in parts) / n,
        dice=sum(p.dice for p in parts) / n,
        total=sum(p.total for p in parts) / n,
    )


def train_step(batch, state, config):
    """One micro-step: forward, scaled backward, and an AdamW update every ``grad_accum_steps``.

    Returns (state, breakdown) for the micro-batch. When an update happens the
    accumulated breakdowns are averaged into ``state.last_update``.
    """
    for s in batch:
        if s.kind == "semantic" and s.n_masks > config.max_categories_per_image:
            raise ValueError(
                f"sample {s.id} has {s.n_masks} categories, more than {config.max_categories_per_image}"
            )
    model = state.model
    model.train()
    try:
        loss, parts = model.compute_loss(batch, config.weights)
    except NonFiniteInputError:
        raise NonFiniteLossError(state.iteration, [s.id for s in batch]) from None
    if not math.isfinite(parts.total):
        raise NonFiniteLossError(state.iteration, [s.id for s in batch])
    (loss / config.grad_accum_steps).backward()
    state.pending.append(parts)
    state.micro_step += 1
    if state.micro_step % config.grad_accum_steps == 0:
        params = [p for g in state.optimizer.param_groups for p in g["params"]]
        if config.grad_clip and config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        lr = lr_at(state.iteration, config)
        for g in state.optimizer.param_groups:
            g["lr"] = lr
        state.optimizer.step()
        state.optimizer.zero_grad(set_to_none=True)
        state.last_update = (state.iteration, lr, _mean_breakdown(state.pending))
        state.pending = []
        state.iteration += 1
    return state, parts


def run_training(train_samples, config, phase="pretrain", model=None, model_config=None, policy=None,
                 state=None, log_fn=None, checkpoint_dir=None, checkpoint_every=0):
    """Train until ``state.iteration`` reaches ``config.total_iters`` and return the final TrainState.

    ``total_iters`` is absolute, so a state restored from a checkpoint resumes
    the original schedule rather than starting a new one.

    ``pretrain`` drops reasoning samples from the pool; ``finetune`` requires an
    existing model (or resumable state) to continue from.
    """
    samples = list(train_samples)
    if phase == "pretrain":
        samples = [s for s in samples if s.kind != "reasoning"]
    elif phase == "finetune":
        if model is None and state is None:
            raise ValueError("finetune requires a base checkpoint")
    else:
        raise ValueError(f"unknown phase {phase!r}")
    if state is None:
        if model is None:
            model = build_model(model_config, seed=config.seed)
        state = new_state(model, config, policy)
    mixer = DataMixer(samples, config.mix_weights, state.rng)
    history = []
    while state.iteration < config.total_iters:
        batch = mixer.draw(config.batch_per_step)
        before = state.iteration
        state, _ = train_step(batch, state, config)
        if state.iteration != before:
            it, lr, parts = state.last_update
            rec = {"iter": it, "lr": lr, "txt": parts.txt, "bce": parts.bce, "dice": parts.dice, "total": parts.total}
            history.append(rec)
            if log_fn is not None:
                log_fn(rec)
            if it % 50 == 0:
                log.info("iter %d lr %.2e total %.4f", it, lr, parts.total)
            if checkpoint_dir and checkpoint_every and state.iteration % checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"iter_{state.iteration:06d}", state, config)
    state.history = history
    return state


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_FORMAT = "embedmask-checkpoint-v1"


def _write_f32(path, tensor):
    arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    arr.tofile(path)


def _read_f32(path, shape):
    arr = np.fromfile(path, dtype="<f4")
    return torch.from_numpy(arr.reshape(shape).copy())


def save_checkpoint(path, state_or_model, train_config=None):
    """Directory container: manifest + one raw little-endian float32 file per tensor."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(state_or_model, TrainState):
        state, model = state_or_model, state_or_model.model
    else:
        state, model = None, state_or_model
    tensors = {}
    for name, p in model.named_parameters():
        rel = f"params/{name}.f32"
        _write_f32(root / rel, p)
        tensors[name] = {"group": param_group(name), "shape": list(p.shape), "file": rel}
    optim = {}
    if state is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in state.optimizer.state.items():
            n = names[id(p)]
            entry = {"step": float(st["step"])}
            for key in ("exp_avg", "exp_avg_sq"):
                rel = f"optim/{n}.{key}.f32"
                _write_f32(root / rel, st[key])
                entry[key] = rel
            optim[n] = entry
    model.vocab.save(root / "vocab.txt")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "policy": (state.policy if state else FreezePolicy()).as_dict(),
        "iteration": state.iteration if state else 0,
        "micro_step": state.micro_step if state else 0,
        "rng_state": state.rng.bit_generator.state if state and state.rng is not None else None,
        "tensors": tensors,
        "optimizer": optim,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=int)
    return root


def load_checkpoint(path, train_config=None):
    """Rebuild a TrainState from a checkpoint directory.

    Optimizer moments and the data RNG are restored when present, so resuming
    continues the original trajectory.
    """
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    with open(mf, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    vocab = Vocabulary.load(root / "vocab.txt")
    mcfg = ModelConfig(**manifest["model_config"])
    model = SegmentationModel(vocab, mcfg)
    if model.lm.config.vocab_size != len(vocab):
        raise ValueError("checkpoint vocabulary does not match the model embedding size")
    params = dict(model.named_parameters())
    if set(params) != set(manifest["tensors"]):
        missing = set(params) ^ set(manifest["tensors"])
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, meta in manifest["tensors"].items():
            t = _read_f32(root / meta["file"], meta["shape"])
            if list(params[name].shape) != meta["shape"]:
                raise ValueError(f"shape mismatch for {name}: {list(params[name].shape)} vs {meta['shape']}")
            params[name].copy_(t)
    tcfg = train_config
    if tcfg is None and manifest.get("train_config"):
        tcfg = TrainConfig.from_dict(manifest["train_config"])
    policy = FreezePolicy(**manifest.get("policy", {}))
    state = new_state(model, tcfg or TrainConfig(), policy)
    state.iteration = manifest.get("iteration", 0)
    state.micro_step = manifest.get("micro_step", 0)
    if manifest.get("rng_state"):
        state.rng.bit_generator.state = manifest["rng_state"]
    opt_state = manifest.get("optimizer") or {}
    for name, entry in opt_state.items():
        p = params[name]
        state.optimizer.state[p] = {
            "step": torch.tensor(entry["step"]),
            "exp_avg": _read_f32(root / entry["exp_avg"], list(p.shape)),
            "exp_avg_sq": _read_f32(root / entry["exp_avg_sq"], list(p.shape)),
        }
    state.manifest = manifest
    return state
