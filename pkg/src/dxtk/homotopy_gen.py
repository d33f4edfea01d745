"""Conditional denoising diffusion over task embeddings, used to propose parent tasks.

A task is embedded as 16 keyframes of its reference plus a shape
descriptor (192 numbers). The model learns that distribution first, then is
fine-tuned to map a child embedding (the condition) to the embedding of an
effective parent. Proposals are turned back into full tasks by upsampling
the keyframes and borrowing the geometry of the closest library shape.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import io
from .geometry import wrap_angle
from .parallel import derive_seed
from .types import (ANGLE_IDX, EMBED_DIM, FINGER_LIMIT, N_KEYFRAMES, STATE_DIM, TrackingTask,
                    embed_task, geometry_descriptor, keyframe_indices)

CHECKPOINT_KIND = "homotopy_gen"
TIME_EMBED_DIM = 32
HIDDEN = 256
DEFAULT_STEPS = 64
COND_DROPOUT = 0.1
STD_FLOOR = 1e-6
X0_CLIP = 6.0
SNR_CAP = 5.0


class GeneratorError(ValueError):
    pass


def cosine_betas(steps: int, offset: float = 0.008) -> np.ndarray:
    """Noise schedule whose cumulative signal level follows a squared cosine."""
    if steps < 2:
        raise GeneratorError("need at least 2 diffusion steps")
    t = np.arange(steps + 1) / steps
    f = np.cos((t + offset) / (1 + offset) * np.pi / 2) ** 2
    abar = f / f[0]
    return np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)


def time_embedding(t: torch.Tensor, dim: int = TIME_EMBED_DIM) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freq[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class Denoiser(nn.Module):
    """Estimates the clean sample from (noisy sample, condition, step).

    The injected-noise estimate follows from it in closed form; predicting the clean sample directly keeps the
    small-noise steps well conditioned.
    """

    def __init__(self, dim: int = EMBED_DIM, hidden: int = HIDDEN):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * dim + TIME_EMBED_DIM, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, x, cond, t):
        return self.net(torch.cat([x, cond, time_embedding(t)], dim=1))


@dataclass
class GeneratorModel:
    net: Denoiser
    mean: np.ndarray
    std: np.ndarray
    steps: int = DEFAULT_STEPS
    trained: bool = False
    conditional: bool = False
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.betas = cosine_betas(self.steps)
        self.alphas = 1.0 - self.betas
        self.abar = np.cumprod(self.alphas)

    def standardize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def destandardize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def flat(self) -> np.ndarray:
        return np.concatenate([p.detach().double().reshape(-1).numpy() for p in self.net.parameters()])

    def load_flat(self, vec) -> None:
        vec = torch.as_tensor(np.asarray(vec, dtype=float))
        i = 0
        with torch.no_grad():
            for p in self.net.parameters():
                n = p.numel()
                p.copy_(vec[i:i + n].reshape(p.shape).to(p.dtype))
                i += n
        if i != len(vec):
            raise io.CheckpointError("generator parameter count mismatch")


def init_model(embeddings, seed: int, steps: int = DEFAULT_STEPS) -> GeneratorModel:
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2 or len(x) < 1 or x.shape[1] != EMBED_DIM:
        raise GeneratorError(f"embeddings must be (n, {EMBED_DIM})")
    torch.manual_seed(seed)
    std = x.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return GeneratorModel(Denoiser(), x.mean(axis=0), std, steps)


def _loss(model, x0, cond, t, eps):
    """Noise-prediction error weighted by min(SNR, cap) / SNR.

    Written in terms of the clean-sample error, which the weighting turns
    into ``min(SNR, cap) * |x0_hat - x0|^2``.
    """
    a = torch.as_tensor(model.abar, dtype=torch.float32)[t][:, None]
    xt = a.sqrt() * x0 + (1 - a).sqrt() * eps
    snr = a / (1 - a)
    return (torch.clamp(snr, max=SNR_CAP) * (model.net(xt, cond, t) - x0) ** 2).mean()


def _fit(model: GeneratorModel, targets, conds, epochs: int, seed: int, cond_dropout: float,
         lr: float, batch: int, steps_per_epoch: int) -> GeneratorModel:
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.as_tensor(model.standardize(targets), dtype=torch.float32)
    c = torch.as_tensor(conds, dtype=torch.float32)
    opt = torch.optim.Adam(model.net.parameters(), lr=lr)
    n = len(x0)
    for ep in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            idx = torch.randint(n, (batch,), generator=gen)
            t = torch.randint(model.steps, (batch,), generator=gen)
            eps = torch.randn((batch, x0.shape[1]), generator=gen)
            cb = c[idx]
            if cond_dropout > 0:
                keep = (torch.rand((batch, 1), generator=gen) >= cond_dropout).float()
                cb = cb * keep
            loss = _loss(model, x0[idx], cb, t, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        model.history.append(total / steps_per_epoch)
    return model


def train_unconditional(embeddings, epochs: int, seed: int, lr: float = 1e-3, batch: int = 64,
                        steps_per_epoch: int = 8, steps: int = DEFAULT_STEPS) -> GeneratorModel:
    """Learn the task distribution; the condition input is held at zero."""
    x = np.asarray(embeddings, dtype=float)
    if len(x) < 2:
        raise GeneratorError("need at least 2 embeddings")
    model = init_model(x, seed, steps)
    _fit(model, x, np.zeros_like(x), epochs, seed, 0.0, lr, batch, steps_per_epoch)
    model.trained = epochs > 0
    return model


def finetune_conditional(model: GeneratorModel, pairs, epochs: int, seed: int, lr: float = 1e-3,
                         batch: int = 64, steps_per_epoch: int = 8,
                         cond_dropout: float = COND_DROPOUT) -> GeneratorModel:
    """Continue training on (child, parent) embedding pairs with the child as condition."""
    pairs = list(pairs)
    if not pairs:
        raise GeneratorError("no (child, parent) pairs")
    out = copy.deepcopy(model)
    child = np.array([p[0] for p in pairs], dtype=float)
    parent = np.array([p[1] for p in pairs], dtype=float)
    _fit(out, parent, out.standardize(child), epochs, seed, cond_dropout, lr, batch, steps_per_epoch)
    out.trained = out.trained or epochs > 0
    out.conditional = True
    return out


@torch.no_grad()
def denoising_loss(model: GeneratorModel, embeddings, seed: int, conds=None) -> float:
    """Training objective on fixed draws of step and noise."""
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.as_tensor(model.standardize(embeddings), dtype=torch.float32)
    c = torch.zeros_like(x0) if conds is None else torch.as_tensor(model.standardize(conds), dtype=torch.float32)
    t = torch.randint(model.steps, (len(x0),), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    return float(_loss(model, x0, c, t, eps))


@torch.no_grad()
def sample(model: GeneratorModel, n: int, seed: int, condition=None) -> np.ndarray:
    """Ancestral sampling; ``condition`` is a raw embedding or None for unconditional draws.

    Returns standardized samples of shape (n, 192).
    """
    gen = torch.Generator().manual_seed(seed)
    D = EMBED_DIM
    if condition is None:
        c = torch.zeros((n, D))
    else:
        c = torch.as_tensor(model.standardize(condition), dtype=torch.float32).reshape(1, D).repeat(n, 1)
    x = torch.randn((n, D), generator=gen)
    ab = model.abar
    for t in range(model.steps - 1, -1, -1):
        tt = torch.full((n,), t, dtype=torch.long)
        x0 = model.net(x, c, tt).clamp(-X0_CLIP, X0_CLIP)
        if t == 0:
            x = x0
            break
        ab_prev = ab[t - 1]
        beta = model.betas[t]
        c0 = math.sqrt(ab_prev) * beta / (1 - ab[t])
        ct = math.sqrt(model.alphas[t]) * (1 - ab_prev) / (1 - ab[t])
        var = beta * (1 - ab_prev) / (1 - ab[t])
        x = c0 * x0 + ct * x + math.sqrt(var) * torch.randn((n, D), generator=gen)
    return x.double().numpy()


# materialisation


def upsample_keyframes(frames: np.ndarray, n_steps: int) -> np.ndarray:
    """Linear interpolation of 16 keyframes onto frames ``0..n_steps``; angles end up wrapped."""
    src = keyframe_indices(n_steps).astype(float)
    dst = np.arange(n_steps + 1, dtype=float)
    out = np.stack([np.interp(dst, src, frames[:, j]) for j in range(STATE_DIM)], axis=1)
    out[:, list(ANGLE_IDX)] = wrap_angle(out[:, list(ANGLE_IDX)])
    return out


def materialize(raw: np.ndarray, child: TrackingTask, library, task_id: str) -> TrackingTask:
    """Build a valid task from a raw 192-vector sample."""
    raw = np.asarray(raw, dtype=float)
    frames = raw[: N_KEYFRAMES * STATE_DIM].reshape(N_KEYFRAMES, STATE_DIM)
    # keyframes are stored unwrapped; an angle sample keeps its continuity through interpolation
    tail = raw[N_KEYFRAMES * STATE_DIM:]
    descs = np.array([geometry_descriptor(t.geometry) for t in library])
    geom = library[int(np.argmin(np.linalg.norm(descs - tail, axis=1)))].geometry
    ref = upsample_keyframes(frames, child.n_steps)
    ref[:, 3:7] = np.clip(ref[:, 3:7], -FINGER_LIMIT, FINGER_LIMIT)
    ref = np.nan_to_num(ref)
    return TrackingTask(id=task_id, ref=ref, geometry=geom, dt=child.dt)


def propose_parent(model: GeneratorModel, child: TrackingTask, library, seed: int) -> TrackingTask:
    if not model.trained:
        raise GeneratorError("generator has not been trained")
    library = list(library)
    if not library:
        raise GeneratorError("empty library")
    z = sample(model, 1, seed, embed_task(child))[0]
    return materialize(model.destandardize(z), child, library, f"gen:{child.id}:{seed}")


def propose_path(model: GeneratorModel, child: TrackingTask, library, k_max: int = 3, seed: int = 0):
    """Recursive parent proposals.

    Returns ``(tasks, path)``: the tasks ordered farthest ancestor first and
    ending with ``child``, and an unverified path record (errors NaN,
    effectiveness unknown) to be filled in by the miner.
    """
    from .miner import HomotopyPath

    if k_max < 0:
        raise GeneratorError("k_max must be >= 0")
    chain = [child]
    for hop in range(k_max):
        chain.append(propose_parent(model, chain[-1], library, derive_seed(seed, child.id, hop)))
    chain = chain[::-1]
    return chain, HomotopyPath([t.id for t in chain], [float("nan")] * len(chain), [None] * k_max)


# persistence


def save_generator(path, model: GeneratorModel) -> None:
    io.save_checkpoint(path, model.flat(), {
        "kind": CHECKPOINT_KIND, "mean": model.mean.tolist(), "std": model.std.tolist(),
        "steps": model.steps, "trained": model.trained, "conditional": model.conditional,
    })


def load_generator(path) -> GeneratorModel:
    vec, meta = io.load_checkpoint(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise io.CheckpointError(f"{path}: not a generator checkpoint")
    model = GeneratorModel(Denoiser(), np.array(meta["mean"]), np.array(meta["std"]), int(meta["steps"]),
                           bool(meta["trained"]), bool(meta["conditional"]))
    model.load_flat(vec)
    return model

