"""Deterministic DDIM machinery: schedule, inversion, sampling, masked
repainting, attention with reference injection and a small toy denoiser.

Latents are ``(h, w, c)`` float arrays.  ``alphas[t]`` is the signal rate
and ``sigmas[t]`` the noise rate, so ``alphas**2 + sigmas**2 == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import NumericalError
from .visibility import binarize

PROMPT_DIM = 16
HEAD_DIM = 16
PATCH = 8
DEFAULT_GUIDANCE = 5.0


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    alphas: np.ndarray
    sigmas: np.ndarray
    step_indices: np.ndarray

    def __post_init__(self):
        if self.alphas.shape != (self.T + 1,) or self.sigmas.shape != (self.T + 1,):
            raise ValueError("alphas and sigmas must have T + 1 entries")
        if np.any(np.abs(self.alphas**2 + self.sigmas**2 - 1.0) > 1e-9):
            raise ValueError("schedule is not variance preserving")
        if np.any(np.diff(self.alphas) > 0) or self.alphas[0] != 1.0:
            raise ValueError("alphas must start at 1 and be non-increasing")
        idx = self.step_indices
        if idx[0] != 0 or np.any(np.diff(idx) <= 0) or idx[-1] > self.T:
            raise ValueError("step indices must start at 0 and increase strictly")

    @classmethod
    def scaled_linear(cls, T: int = 1000, steps: int = 30, beta_start: float = 0.00085,
                      beta_end: float = 0.012) -> "NoiseSchedule":
        if T < 1 or not 0 <= steps <= T:
            raise ValueError(f"need 0 <= steps <= T, got steps={steps}, T={T}")
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T) ** 2
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        alphas = np.sqrt(alpha_bar)
        sigmas = np.sqrt(1.0 - alpha_bar)
        idx = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(np.int64)) if steps else np.array([0])
        return cls(T, alphas, sigmas, idx)

    @property
    def steps(self) -> int:
        return len(self.step_indices) - 1

    @property
    def t_max(self) -> int:
        return int(self.step_indices[-1])

    def _position(self, t: int) -> int:
        pos = int(np.searchsorted(self.step_indices, t))
        if pos >= len(self.step_indices) or self.step_indices[pos] != t:
            raise ValueError(f"timestep {t} is not on the schedule")
        return pos

    def prev(self, t: int) -> int:
        pos = self._position(t)
        if pos == 0:
            raise ValueError("no step below t = 0")
        return int(self.step_indices[pos - 1])

    def next(self, t: int) -> int:
        pos = self._position(t)
        if pos == len(self.step_indices) - 1:
            raise ValueError(f"no step above t = {t}")
        return int(self.step_indices[pos + 1])


@dataclass(frozen=True)
class Latent:
    data: np.ndarray
    t: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("latent data must be (h, w, c)")
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite latent at t = {self.t}")


@dataclass(frozen=True)
class AttentionFeatures:
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.keys.ndim != 2 or self.values.ndim != 2 or len(self.keys) != len(self.values):
            raise ValueError("keys and values must be (n, d) with equal n")


@dataclass(frozen=True)
class Conditioning:
    depth: np.ndarray | None = None
    prompt_embedding: np.ndarray | None = None
    reference_features: AttentionFeatures | None = None

    def without_prompt(self) -> "Conditioning":
        return replace(self, prompt_embedding=None)

    def without_reference(self) -> "Conditioning":
        return replace(self, reference_features=None)


@runtime_checkable
class Denoiser(Protocol):
    def predict_noise(self, x: np.ndarray, t: int, cond: Conditioning) -> np.ndarray: ...

    def capture(self, x: np.ndarray, t: int, cond: Conditioning) -> AttentionFeatures: ...


def ddim_step(x_t: Latent, eps: np.ndarray, sched: NoiseSchedule) -> Latent:
    if x_t.t == 0:
        raise ValueError("cannot step below t = 0")
    s = sched.prev(x_t.t)
    a_t, a_s = sched.alphas[x_t.t], sched.alphas[s]
    out = (a_s / a_t) * (x_t.data - sched.sigmas[x_t.t] * eps) + sched.sigmas[s] * eps
    return Latent(out, s)


def ddim_invert_step(x_prev: Latent, eps: np.ndarray, sched: NoiseSchedule) -> Latent:
    t = sched.next(x_prev.t)
    a_t, a_s = sched.alphas[t], sched.alphas[x_prev.t]
    out = (a_t / a_s) * (x_prev.data - sched.sigmas[x_prev.t] * eps) + sched.sigmas[t] * eps
    return Latent(out, t)


def invert_trajectory(x0: Latent, denoiser: Denoiser, cond: Conditioning, sched: NoiseSchedule,
                      steps: int | None = None, tol: float = 1e-12, max_iter: int = 100) -> list[Latent]:
    """DDIM inversion from ``x0`` up ``steps`` schedule steps (all by default).

    Each ``x_t`` solves ``x_t = invert(x_prev, eps(x_t, t))`` by fixed-point
    iteration, so sampling, which evaluates ``eps`` at the very same
    ``(x_t, t)``, retraces the trajectory exactly.
    """
    if x0.t != 0:
        raise ValueError("inversion starts from a t = 0 latent")
    steps = sched.steps if steps is None else steps
    if not 0 <= steps <= sched.steps:
        raise ValueError(f"steps must be in [0, {sched.steps}]")
    traj = [x0]
    eps = denoiser.predict_noise(x0.data, 0, cond) if steps else None
    for _ in range(steps):
        prev = traj[-1]
        t = sched.next(prev.t)
        # the last eps of the previous solve was taken at (nearly) x_prev
        guess = ddim_invert_step(prev, eps, sched).data
        for _ in range(max_iter):
            eps = denoiser.predict_noise(guess, t, cond)
            if not np.all(np.isfinite(eps)):
                raise NumericalError(f"non-finite noise prediction at t = {t}")
            new = ddim_invert_step(prev, eps, sched).data
            delta = np.max(np.abs(new - guess), initial=0.0)
            guess = new
            if delta <= tol * max(1.0, np.max(np.abs(new), initial=0.0)):
                break
        traj.append(Latent(guess, t))
    return traj


def sample_trajectory(x_t: Latent, denoiser: Denoiser, cond: Conditioning, sched: NoiseSchedule) -> list[Latent]:
    """Plain deterministic sampling from ``x_t`` down to t = 0."""
    traj = [x_t]
    while traj[-1].t > 0:
        cur = traj[-1]
        eps = denoiser.predict_noise(cur.data, cur.t, cond)
        if not np.all(np.isfinite(eps)):
            raise NumericalError(f"non-finite noise prediction at t = {cur.t}")
        traj.append(ddim_step(cur, eps, sched))
    return traj


def repaint_denoise(x_init: Latent, inv_traj, denoiser: Denoiser, cond: Conditioning, vis: np.ndarray,
                    sched: NoiseSchedule) -> Latent:
    """Denoise from ``x_init`` while pinning preserved texels to the inverted
    trajectory.  At each step the preserve mask is ``binarize(vis, t, T)``."""
    inv = {lat.t: lat.data for lat in inv_traj}
    vis = np.asarray(vis, dtype=np.float64)
    if vis.shape != x_init.data.shape[:2]:
        raise ValueError(f"visibility {vis.shape} does not match latent {x_init.data.shape[:2]}")
    x = x_init
    while x.t > 0:
        s = sched.prev(x.t)
        if s not in inv:
            raise KeyError(f"inverted trajectory has no latent at t = {s}")
        eps = denoiser.predict_noise(x.data, x.t, cond)
        if not np.all(np.isfinite(eps)):
            raise NumericalError(f"non-finite noise prediction at t = {x.t}")
        rev = ddim_step(x, eps, sched)
        keep = binarize(vis, x.t, sched.T)[..., None]
        x = Latent(np.where(keep, inv[s], rev.data), s)
    return x


def attention(q: np.ndarray, feats: AttentionFeatures) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    d = q.shape[-1]
    if feats.keys.shape[1] != d:
        raise ValueError(f"query width {d} does not match key width {feats.keys.shape[1]}")
    logits = q @ feats.keys.T / math.sqrt(d)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ feats.values


def _conv(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    k = weight.shape[0]
    r = k // 2
    pad = np.pad(x, ((r, r), (r, r), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(pad, (k, k), axis=(0, 1))
    return np.einsum("hwcij,ijco->hwo", cols, weight, optimize=True)


def _time_embedding(t: int, dim: int = HEAD_DIM) -> np.ndarray:
    freqs = np.exp(-math.log(1000.0) * np.arange(dim // 2) / (dim // 2))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


@dataclass(frozen=True, eq=False)
class ToyDenoiser:
    """Frozen random stand-in for a noise-prediction network.

    conv (k x k, latent + depth channel) -> + time and prompt bias -> tanh
    -> residual single-head attention over ``PATCH`` x ``PATCH`` patch tokens
    -> linear head.  ``guidance`` applies classifier-free guidance whenever
    the conditioning carries a prompt embedding.
    """

    channels: int
    conv: np.ndarray
    w_time: np.ndarray
    w_prompt: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    head: np.ndarray
    use_attention: bool = True
    guidance: float = DEFAULT_GUIDANCE

    def _preactivation(self, x: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ValueError(f"latent must be (h, w, {self.channels}), got {x.shape}")
        depth = np.zeros(x.shape[:2]) if cond.depth is None else np.asarray(cond.depth, dtype=np.float64)
        if depth.shape != x.shape[:2]:
            raise ValueError(f"depth conditioning {depth.shape} does not match latent {x.shape[:2]}")
        pre = _conv(np.concatenate([x, depth[..., None]], axis=-1), self.conv)
        return pre + _time_embedding(t) @ self.w_time

    def _prompt_bias(self, prompt) -> np.ndarray:
        prompt = np.asarray(prompt, dtype=np.float64)
        if prompt.shape != (PROMPT_DIM,):
            raise ValueError(f"prompt embedding must have {PROMPT_DIM} entries")
        return prompt @ self.w_prompt

    def _hidden(self, x, t, cond: Conditioning) -> np.ndarray:
        pre = self._preactivation(x, t, cond)
        if cond.prompt_embedding is not None:
            pre = pre + self._prompt_bias(cond.prompt_embedding)
        return np.tanh(pre)

    @staticmethod
    def _tokens(h: np.ndarray) -> np.ndarray:
        hh, ww, d = h.shape
        if hh % PATCH or ww % PATCH:
            raise ValueError(f"latent size {h.shape[:2]} is not a multiple of the {PATCH}-pixel patch")
        return h.reshape(hh // PATCH, PATCH, ww // PATCH, PATCH, d).sum(1).sum(2).reshape(-1, d) / PATCH**2

    def _features(self, tokens: np.ndarray) -> AttentionFeatures:
        return AttentionFeatures(tokens @ self.wk, tokens @ self.wv)

    def _head(self, h: np.ndarray, feats: AttentionFeatures | None) -> np.ndarray:
        if self.use_attention:
            tokens = self._tokens(h)
            att = attention(tokens @ self.wq, feats if feats is not None else self._features(tokens)) @ self.wo
            gh, gw = h.shape[0] // PATCH, h.shape[1] // PATCH
            h = h + np.repeat(np.repeat(att.reshape(gh, gw, -1), PATCH, 0), PATCH, 1)
        return h @ self.head

    def predict_noise(self, x: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        pre = self._preactivation(x, t, cond)
        if cond.prompt_embedding is None:
            return self._head(np.tanh(pre), cond.reference_features)
        # reference K/V only enter the conditional branch
        eps_c = self._head(np.tanh(pre + self._prompt_bias(cond.prompt_embedding)), cond.reference_features)
        if self.guidance == 1.0:
            return eps_c
        eps_u = self._head(np.tanh(pre), None)
        return eps_u + self.guidance * (eps_c - eps_u)

    def capture(self, x: np.ndarray, t: int, cond: Conditioning) -> AttentionFeatures:
        """Keys and values this network computes for ``x`` (conditional branch)."""
        return self._features(self._tokens(self._hidden(x, t, cond)))


def toy_denoiser_build(seed: int = 0, channels: int = 3, width: int = HEAD_DIM, kernel: int = 3,
                       use_attention: bool = True, guidance: float = DEFAULT_GUIDANCE,
                       gain: float = 0.15) -> ToyDenoiser:
    """Deterministic toy denoiser.  ``kernel=1, use_attention=False`` gives a
    per-texel (spatially local) network.  ``gain`` bounds how strongly the
    output reacts to the latent, which keeps inversion a contraction."""
    if width != HEAD_DIM:
        raise ValueError(f"attention width is fixed at {HEAD_DIM}")
    rng = np.random.default_rng(seed)
    cin = channels + 1

    def mat(*shape, scale):
        return rng.standard_normal(shape) * scale

    return ToyDenoiser(
        channels=channels,
        conv=mat(kernel, kernel, cin, width, scale=1.0 / math.sqrt(kernel * kernel * cin)),
        w_time=mat(HEAD_DIM, width, scale=0.3 / math.sqrt(HEAD_DIM)),
        w_prompt=mat(PROMPT_DIM, width, scale=0.3 / math.sqrt(PROMPT_DIM)),
        wq=mat(width, HEAD_DIM, scale=2.0 / math.sqrt(width)),
        wk=mat(width, HEAD_DIM, scale=2.0 / math.sqrt(width)),
        wv=mat(width, HEAD_DIM, scale=1.0 / math.sqrt(width)),
        wo=mat(HEAD_DIM, width, scale=1.0 / math.sqrt(HEAD_DIM)),
        head=mat(width, channels, scale=gain / math.sqrt(width)),
        use_attention=use_attention,
        guidance=guidance,
    )
