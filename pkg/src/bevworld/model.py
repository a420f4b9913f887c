"""Memory state-space world model over BEV occupancy grids.

Per observed step: encode the observation into a BEV feature, compress it to a
vector, form prior and posterior diagonal Gaussians over the stochastic state,
sample the posterior by reparameterization, refine the deterministic history
against a FIFO memory bank via cross-attention, decode occupancy from the
refined history + state + a propagated static BEV feature (with optional
task-prompt conditioning), predict the action, and advance the history through
a gated cell fed the motion-modulated state.

Imagination continues the same dataflow with the prior in place of the
posterior and the policy's action in place of the recorded one; it takes no
observations by construction. The recurrent state-space baseline is this model
with the static path, memory bank, motion norm and prompt all disabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Value
from .nn import DimensionError, ParamGroup
from .rng import RngState
from .world import STEER_LIMIT, Episode, to_onehot

DEFAULT_PROMPT = "the task is to predict the 3d occupancy of the current scene"

SIGMA_FLOOR = 1e-3


class NonFiniteError(FloatingPointError):
    """A latent distribution went non-finite; the step index is reported."""


def normalize_prompt(text: str) -> str:
    return " ".join(text.lower().split()).rstrip(".")


@dataclass(frozen=True)
class ModelConfig:
    grid_h: int = 32
    grid_w: int = 32
    z_slabs: int = 4
    n_classes: int = 3
    d_h: int = 96
    d_s: int = 24
    d_x: int = 64
    c_b: int = 24
    c_m: int = 12
    enc_mid: int = 16
    trunk_hidden: int = 96
    policy_hidden: int = 48
    dec_mid: tuple = (32, 24)
    bank_capacity: int = 8
    prompt_dim: int = 16
    prompt_capacity: int = 8
    action_bounds: tuple = (1.5, STEER_LIMIT)
    sigma_floor: float = SIGMA_FLOOR
    use_ssp: bool = True
    use_memory: bool = True
    use_motion_norm: bool = True
    use_prompt: bool = True
    combine_mode: str = "concat"  # or "add"
    future_from_final_state: bool = False

    def __post_init__(self):
        if self.grid_h % 4 or self.grid_w % 4:
            raise ValueError("grid dims must be divisible by 4 (two stride-2 encoder layers)")
        if self.combine_mode not in ("concat", "add"):
            raise ValueError("combine_mode must be 'concat' or 'add'")
        if self.combine_mode == "add" and self.use_ssp and self.c_m != self.c_b:
            raise ValueError("combine_mode 'add' requires c_m == c_b")

    @property
    def feat_h(self) -> int:
        return self.grid_h // 4

    @property
    def feat_w(self) -> int:
        return self.grid_w // 4

    @property
    def decoder_in_channels(self) -> int:
        if self.use_ssp and self.combine_mode == "concat":
            return self.c_m + self.c_b
        return self.c_m


def rssm_config(cfg: ModelConfig) -> ModelConfig:
    """Baseline variant: no static path, no memory bank, no motion norm, no prompt."""
    return replace(cfg, use_ssp=False, use_memory=False, use_motion_norm=False, use_prompt=False)


# ---------------------------------------------------------------------------
# rollout containers


@dataclass
class BevFeature:
    grid: Value
    source_step: int


@dataclass
class TaskPrompt:
    text: str
    token_id: int


@dataclass
class LatentState:
    mu: Value
    sigma: Value
    s: Value | None = None
    eps: np.ndarray | None = None
    h: Value | None = None
    h_refined: Value | None = None
    s_mod: Value | None = None


class MemoryBank:
    """Bounded FIFO of past deterministic histories; oldest evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity = capacity
        self.entries: list = []

    def push(self, h: Value) -> None:
        self.entries.append(h)
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def copy(self) -> "MemoryBank":
        bank = MemoryBank(self.capacity)
        bank.entries = list(self.entries)
        return bank

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class StepOutput:
    posterior: LatentState
    prior: LatentState
    action_pred: Value
    logits: Value


@dataclass
class FutureStep:
    prior: LatentState
    action_pred: Value
    logits: Value


@dataclass
class Carry:
    h: Value
    s: Value
    action_pred: Value
    bank: MemoryBank
    b_hat: Value | None
    h_refined_last: Value
    prompt_id: int | None


@dataclass
class SequenceRollout:
    steps: list
    carry: Carry
    ssp_frame: int | None = None
    future: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# model


class WorldModel:
    def __init__(self, cfg: ModelConfig, rng: RngState):
        self.cfg = cfg
        self.groups: dict[str, ParamGroup] = {}
        self.prompt_vocab: dict[str, int] = {}
        c = cfg
        zc = c.z_slabs * c.n_classes

        g = self._group("encoder")
        nn.conv_params(g, "c0", zc, c.enc_mid, 3, rng)
        nn.conv_params(g, "c1", c.enc_mid, c.c_b, 3, rng)

        g = self._group("compress")
        nn.linear_params(g, "proj", c.c_b, c.d_x, rng)

        g = self._group("posterior")
        nn.linear_params(g, "trunk", c.d_h + 2 + c.d_x, c.trunk_hidden, rng)
        nn.linear_params(g, "mu", c.trunk_hidden, c.d_s, rng)
        nn.linear_params(g, "presigma", c.trunk_hidden, c.d_s, rng)

        g = self._group("prior")
        nn.linear_params(g, "trunk", c.d_h + 2, c.trunk_hidden, rng)
        nn.linear_params(g, "mu", c.trunk_hidden, c.d_s, rng)
        nn.linear_params(g, "presigma", c.trunk_hidden, c.d_s, rng)

        g = self._group("policy")
        nn.linear_params(g, "h0", c.d_h + c.d_s, c.policy_hidden, rng)
        nn.linear_params(g, "h1", c.policy_hidden, 2, rng)

        nn.gru_params(self._group("transition"), c.d_h, c.d_s, rng)

        if c.use_memory:
            nn.attention_params(self._group("memory_attn"), c.d_h, rng)
        if c.use_motion_norm:
            nn.linear_params(self._group("motion_scale"), "", 3, c.d_s, rng)
            nn.linear_params(self._group("motion_shift"), "", 3, c.d_s, rng)
        if c.use_ssp:
            g = self._group("static_prop")
            nn.conv_params(g, "c0", c.c_b, c.c_b, 3, rng)
            nn.conv_params(g, "c1", c.c_b, c.c_b, 3, rng)

        g = self._group("expand")
        nn.linear_params(g, "proj", c.d_h + c.d_s, c.c_m * c.feat_h * c.feat_w, rng)
        nn.conv_params(g, "c0", c.c_m, c.c_m, 3, rng)

        dec_in = c.decoder_in_channels
        g = self._group("occ_decoder")
        nn.conv_params(g, "c0", dec_in, c.dec_mid[0], 3, rng)
        nn.conv_params(g, "c1", c.dec_mid[0], c.dec_mid[1], 3, rng)
        nn.conv_params(g, "c2", c.dec_mid[1], zc, 3, rng)

        if c.use_prompt:
            g = self._group("prompt")
            g.add("table", (c.prompt_capacity, c.prompt_dim), rng, init="normal02")
            nn.linear_params(self._group("prompt_film"), "proj", c.prompt_dim, 2 * dec_in, rng)
            self.register_prompt(DEFAULT_PROMPT)

    def _group(self, name: str) -> ParamGroup:
        group = ParamGroup(name)
        self.groups[name] = group
        return group

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> list:
        out = []
        for group in self.groups.values():
            out.extend(group.named_values())
        return out

    def n_params(self) -> int:
        return sum(v.data.size for _, v in self.named_params())

    def state_arrays(self) -> dict:
        return {name: v.data for name, v in self.named_params()}

    def load_state(self, arrays: dict, strict: bool = True) -> None:
        own = dict(self.named_params())
        for name, value in own.items():
            if name in arrays:
                src = np.asarray(arrays[name], dtype=np.float64)
                if src.shape != value.data.shape:
                    raise ValueError(f"shape mismatch for {name}: {src.shape} vs {value.data.shape}")
                value.data[...] = src
            elif strict:
                raise KeyError(f"missing parameter {name} in checkpoint")

    # -- prompts --------------------------------------------------------------

    def register_prompt(self, text: str) -> TaskPrompt:
        if not self.cfg.use_prompt:
            raise ValueError("prompt conditioning is disabled in this config")
        key = normalize_prompt(text)
        if key not in self.prompt_vocab:
            if len(self.prompt_vocab) >= self.cfg.prompt_capacity:
                raise ValueError("prompt table is full")
            self.prompt_vocab[key] = len(self.prompt_vocab)
        return TaskPrompt(text=key, token_id=self.prompt_vocab[key])

    def prompt_id(self, text: str | None) -> int | None:
        if not self.cfg.use_prompt:
            return None
        key = normalize_prompt(text) if text else DEFAULT_PROMPT
        if key not in self.prompt_vocab:
            raise KeyError(f"unknown prompt {key!r}; register it first")
        return self.prompt_vocab[key]

    # -- blocks ---------------------------------------------------------------

    def encode_bev(self, o_onehot: Value, source_step: int = -1) -> BevFeature:
        c = self.cfg
        expected = (c.z_slabs * c.n_classes, c.grid_h, c.grid_w)
        if o_onehot.data.shape != expected:
            raise DimensionError(f"encode_bev: observation {o_onehot.data.shape}, expected {expected}")
        g = self.groups["encoder"]
        h = ad.relu(nn.conv2d(o_onehot, g["c0.w"], g["c0.b"], stride=2, pad=1))
        h = ad.relu(nn.conv2d(h, g["c1.w"], g["c1.b"], stride=2, pad=1))
        return BevFeature(grid=h, source_step=source_step)

    def compress_bev(self, b: BevFeature) -> Value:
        g = self.groups["compress"]
        pooled = ad.vmean(b.grid, axis=(1, 2))
        return nn.linear(pooled, g["proj.w"], g["proj.b"])

    def _gaussian_head(self, group: ParamGroup, inp: Value, step: int) -> tuple:
        trunk = ad.tanh(nn.linear(inp, group["trunk.w"], group["trunk.b"]))
        mu = nn.linear(trunk, group["mu.w"], group["mu.b"])
        pre = nn.linear(trunk, group["presigma.w"], group["presigma.b"])
        sigma = ad.add(ad.softplus(pre), Value(self.cfg.sigma_floor))
        if not (np.isfinite(mu.data).all() and np.isfinite(sigma.data).all()):
            raise NonFiniteError(f"latent distribution non-finite at step {step}")
        return mu, sigma

    def posterior(self, h: Value, a_prev: np.ndarray, x: Value, rng: RngState | None,
                  step: int = -1, eps: np.ndarray | None = None) -> LatentState:
        inp = ad.concat([h, Value(np.asarray(a_prev, dtype=np.float64)), x])
        mu, sigma = self._gaussian_head(self.groups["posterior"], inp, step)
        if eps is None:
            eps = rng.normal(self.cfg.d_s) if rng is not None else np.zeros(self.cfg.d_s)
        s = ad.add(mu, ad.mul(sigma, Value(eps)))
        return LatentState(mu=mu, sigma=sigma, s=s, eps=np.asarray(eps, dtype=np.float64), h=h)

    def prior(self, h: Value, a_pred_prev: Value, rng: RngState | None = None,
              step: int = -1, eps: np.ndarray | None = None, sample: bool = False) -> LatentState:
        inp = ad.concat([h, a_pred_prev])
        mu, sigma = self._gaussian_head(self.groups["prior"], inp, step)
        state = LatentState(mu=mu, sigma=sigma, h=h)
        if sample:
            if eps is None:
                eps = rng.normal(self.cfg.d_s) if rng is not None else np.zeros(self.cfg.d_s)
            state.eps = np.asarray(eps, dtype=np.float64)
            state.s = ad.add(mu, ad.mul(sigma, Value(state.eps)))
        return state

    def initial_prior(self) -> LatentState:
        d = self.cfg.d_s
        return LatentState(mu=Value(np.zeros(d)), sigma=Value(np.ones(d)))

    def policy(self, h: Value, s: Value) -> Value:
        g = self.groups["policy"]
        hidden = ad.tanh(nn.linear(ad.concat([h, s]), g["h0.w"], g["h0.b"]))
        raw = ad.tanh(nn.linear(hidden, g["h1.w"], g["h1.b"]))
        return ad.mul(raw, Value(np.asarray(self.cfg.action_bounds, dtype=np.float64)))

    def refine_history(self, h: Value, bank: MemoryBank) -> Value:
        """Cross-attend h against the bank, then record h (refine-then-push)."""
        if not self.cfg.use_memory:
            return h
        if len(bank) == 0:
            refined = h
        else:
            refined = nn.cross_attention(h, bank.entries, bank.entries, self.groups["memory_attn"])
        bank.push(h)
        return refined

    def transition(self, h_refined: Value, s: Value, ctx: Value) -> tuple:
        """s~ = motion-modulated LN of s (when enabled); h' = gated cell."""
        if self.cfg.use_motion_norm:
            s_mod = nn.motion_layer_norm(s, ctx, self.groups["motion_scale"], self.groups["motion_shift"])
        else:
            s_mod = s
        return nn.gru_cell(h_refined, s_mod, self.groups["transition"]), s_mod

    def propagate_static(self, b: BevFeature) -> Value:
        g = self.groups["static_prop"]
        out = ad.relu(nn.conv2d(b.grid, g["c0.w"], g["c0.b"], stride=1, pad=1))
        return nn.conv2d(out, g["c1.w"], g["c1.b"], stride=1, pad=1)

    def decode_occupancy(self, h_refined: Value, s: Value, b_hat: Value | None,
                         prompt_id: int | None) -> Value:
        c = self.cfg
        g = self.groups["expand"]
        flat = nn.linear(ad.concat([h_refined, s]), g["proj.w"], g["proj.b"])
        grid = ad.reshape(flat, (c.c_m, c.feat_h, c.feat_w))
        grid = ad.relu(nn.conv2d(grid, g["c0.w"], g["c0.b"], stride=1, pad=1))

        if c.use_ssp:
            if b_hat is None:
                raise DimensionError("decoder expects a propagated static feature when the static path is on")
            grid = ad.concat([grid, b_hat], axis=0) if c.combine_mode == "concat" else ad.add(grid, b_hat)

        if c.use_prompt:
            if prompt_id is None:
                raise KeyError("prompt conditioning enabled but no prompt id given")
            grid = self._apply_prompt(grid, prompt_id)

        g = self.groups["occ_decoder"]
        out = ad.relu(nn.conv2d(grid, g["c0.w"], g["c0.b"], stride=1, pad=1))
        out = nn.upsample2x(out)
        out = ad.relu(nn.conv2d(out, g["c1.w"], g["c1.b"], stride=1, pad=1))
        out = nn.upsample2x(out)
        return nn.conv2d(out, g["c2.w"], g["c2.b"], stride=1, pad=1)

    def _apply_prompt(self, grid: Value, prompt_id: int) -> Value:
        """Instance-norm the feature grid, then scale/shift per channel from
        the prompt embedding ((1+gamma) * norm + beta)."""
        n_ch = grid.data.shape[0]
        if prompt_id >= len(self.prompt_vocab):
            raise KeyError(f"prompt token {prompt_id} not in vocabulary")
        e = nn.embed(self.groups["prompt"]["table"], prompt_id)
        film = nn.linear(e, self.groups["prompt_film"]["proj.w"], self.groups["prompt_film"]["proj.b"])
        gamma = ad.reshape(ad.slice_(film, (slice(0, n_ch),)), (n_ch, 1, 1))
        beta = ad.reshape(ad.slice_(film, (slice(n_ch, 2 * n_ch),)), (n_ch, 1, 1))
        mu = ad.vmean(grid, axis=(1, 2), keepdims=True)
        centered = ad.sub(grid, mu)
        var = ad.vmean(ad.square(centered), axis=(1, 2), keepdims=True)
        rstd = ad.exp(ad.mul(ad.log(ad.add(var, Value(1e-5))), Value(-0.5)))
        norm = ad.mul(centered, rstd)
        return ad.add(ad.mul(ad.add(gamma, Value(1.0)), norm), beta)

    # -- sequence rollouts ------------------------------------------------------

    def observe_sequence(self, ep: Episode, rng: RngState, prompt: str | None = None,
                         mean_latents: bool = False) -> SequenceRollout:
        """Filter the observed window o_{1..T}; returns per-step posterior and
        prior states, decoded occupancy, predicted actions, and the carry for
        imagination. Only episode indices < T are ever touched."""
        cfg = self.cfg
        t_obs = ep.t_observe
        if ep.labels.shape[0] < t_obs:
            raise ValueError("episode shorter than its observed window")
        prompt_id = self.prompt_id(prompt)

        feats = [
            self.encode_bev(Value(to_onehot(ep.obs[t], cfg.n_classes)), source_step=t)
            for t in range(t_obs)
        ]
        ssp_frame = None
        b_hat = None
        if cfg.use_ssp:
            ssp_frame = int(rng.integers(0, t_obs))
            b_hat = self.propagate_static(feats[ssp_frame])

        bank = MemoryBank(cfg.bank_capacity)
        h = Value(np.zeros(cfg.d_h))
        a_prev = np.zeros(2)
        a_pred_prev: Value | None = None
        steps: list[StepOutput] = []
        h_refined = h

        for t in range(t_obs):
            x = self.compress_bev(feats[t])
            if t == 0:
                prior = self.initial_prior()
            else:
                prior = self.prior(h, a_pred_prev, step=t)
            eps = np.zeros(cfg.d_s) if mean_latents else rng.normal(cfg.d_s)
            post = self.posterior(h, a_prev, x, rng=None, step=t, eps=eps)
            h_refined = self.refine_history(h, bank)
            post.h_refined = h_refined
            logits = self.decode_occupancy(h_refined, post.s, b_hat, prompt_id)
            a_pred = self.policy(h, post.s)
            ctx = Value(np.asarray(ep.motion[t], dtype=np.float64))
            h, s_mod = self.transition(h_refined, post.s, ctx)
            post.s_mod = s_mod
            steps.append(StepOutput(posterior=post, prior=prior, action_pred=a_pred, logits=logits))
            a_prev = np.asarray(ep.actions[t], dtype=np.float64)
            a_pred_prev = a_pred

        carry = Carry(
            h=h,
            s=steps[-1].posterior.s,
            action_pred=steps[-1].action_pred,
            bank=bank.copy(),
            b_hat=b_hat,
            h_refined_last=steps[-1].posterior.h_refined,
            prompt_id=prompt_id,
        )
        return SequenceRollout(steps=steps, carry=carry, ssp_frame=ssp_frame)

    def imagine(self, carry: Carry, horizon: int, rng: RngState,
                mean_latents: bool = False) -> list:
        """Roll the prior + policy forward for `horizon` steps. Takes no
        observations; the static feature stays frozen from the observed window."""
        if horizon < 0:
            raise ValueError("horizon must be >= 0")
        cfg = self.cfg
        bank = carry.bank.copy()
        h, s, a_pred = carry.h, carry.s, carry.action_pred
        out: list[FutureStep] = []
        for k in range(horizon):
            eps = np.zeros(cfg.d_s) if mean_latents else rng.normal(cfg.d_s)
            prior = self.prior(h, a_pred, step=k, eps=eps, sample=True)
            h_refined = self.refine_history(h, bank)
            prior.h_refined = h_refined
            if cfg.future_from_final_state:
                logits = self.decode_occupancy(carry.h_refined_last, carry.s, carry.b_hat, carry.prompt_id)
            else:
                logits = self.decode_occupancy(h_refined, prior.s, carry.b_hat, carry.prompt_id)
            a_pred = self.policy(h, prior.s)
            ctx = ad.concat([a_pred, Value(np.ones(1))])
            h, s_mod = self.transition(h_refined, prior.s, ctx)
            prior.s_mod = s_mod
            out.append(FutureStep(prior=prior, action_pred=a_pred, logits=logits))
        return out

    def rollout(self, ep: Episode, rng: RngState, horizon: int | None = None,
                prompt: str | None = None, mean_latents: bool = False) -> SequenceRollout:
        """observe_sequence + imagine on one episode."""
        seq = self.observe_sequence(ep, rng.spawn("observe"), prompt=prompt, mean_latents=mean_latents)
        h = ep.t_future if horizon is None else horizon
        seq.future = self.imagine(seq.carry, h, rng.spawn("imagine"), mean_latents=mean_latents)
        return seq

    # -- numpy latent path (shared-sample KL estimators for the audit) --------

    def _w(self, group: str, key: str) -> np.ndarray:
        return self.groups[group][key].data

    def sample_latent_paths(self, ep: Episode, n: int, rng: RngState,
                            force_floor: bool = False, mean_path: bool = False,
                            eps_override: np.ndarray | None = None,
                            return_details: bool = False) -> dict:
        """Resample latent trajectories with fresh posterior noise and return,
        per trajectory, the single-sample log-ratio sum (sequence-level KL
        estimator) and the closed-form stepwise KL sum. Pure numpy mirror of
        the latent recursion; parity with the graph path is covered by tests.
        """
        cfg = self.cfg
        t_obs = ep.t_observe
        floor = cfg.sigma_floor

        # x_t depends only on parameters and observations: compute once
        xs = []
        for t in range(t_obs):
            feat = self.encode_bev(Value(to_onehot(ep.obs[t], cfg.n_classes)), source_step=t)
            xs.append(self.compress_bev(feat).data)

        def lin(g, k, inp):
            return inp @ self._w(g, f"{k}.w").T + self._w(g, f"{k}.b")

        def softplus(x):
            return np.logaddexp(0.0, x)

        def sigmoid(x):
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            return out

        h = np.zeros((n, cfg.d_h))
        bank: list[np.ndarray] = []
        a_prev = np.zeros(2)
        a_pred_prev = None
        logratio = np.zeros(n)
        stepwise = np.zeros(n)
        details = []

        if eps_override is not None:
            eps_override = np.asarray(eps_override, dtype=np.float64).reshape(n, t_obs, cfg.d_s)

        for t in range(t_obs):
            if t == 0:
                mu_p = np.zeros((n, cfg.d_s))
                sigma_p = np.ones((n, cfg.d_s))
            else:
                trunk = np.tanh(lin("prior", "trunk", np.concatenate([h, a_pred_prev], axis=1)))
                mu_p = lin("prior", "mu", trunk)
                sigma_p = softplus(lin("prior", "presigma", trunk)) + floor
            inp = np.concatenate(
                [h, np.broadcast_to(a_prev, (n, 2)), np.broadcast_to(xs[t], (n, cfg.d_x))], axis=1
            )
            trunk = np.tanh(lin("posterior", "trunk", inp))
            mu_q = lin("posterior", "mu", trunk)
            sigma_q = softplus(lin("posterior", "presigma", trunk)) + floor
            if force_floor:
                sigma_q = np.full_like(sigma_q, floor)
                sigma_p = np.full_like(sigma_p, floor)
            if eps_override is not None:
                eps = eps_override[:, t]
            elif mean_path:
                eps = np.zeros((n, cfg.d_s))
            else:
                eps = rng.normal((n, cfg.d_s))
            s = mu_q + sigma_q * eps

            lq = (-0.5 * ((s - mu_q) / sigma_q) ** 2 - np.log(sigma_q)).sum(axis=1)
            lp = (-0.5 * ((s - mu_p) / sigma_p) ** 2 - np.log(sigma_p)).sum(axis=1)
            logratio += lq - lp
            stepwise += (
                np.log(sigma_p / sigma_q) + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p**2) - 0.5
            ).sum(axis=1)
            if return_details:
                details.append({"mu_q": mu_q.copy(), "sigma_q": sigma_q.copy(),
                                "mu_p": mu_p.copy(), "sigma_p": sigma_p.copy(), "s": s.copy(), "h": h.copy()})

            # policy for the next prior's action input
            ph = np.tanh(lin("policy", "h0", np.concatenate([h, s], axis=1)))
            a_pred_prev = np.tanh(lin("policy", "h1", ph)) * np.asarray(cfg.action_bounds)

            # refine against the bank, then push
            if cfg.use_memory and bank:
                d = cfg.d_h
                qp = lin("memory_attn", "q", h)
                kp = np.stack([lin("memory_attn", "k", b) for b in bank], axis=1)
                vp = np.stack([lin("memory_attn", "v", b) for b in bank], axis=1)
                scores = np.einsum("nd,nmd->nm", qp, kp) / np.sqrt(d)
                scores -= scores.max(axis=1, keepdims=True)
                wts = np.exp(scores)
                wts /= wts.sum(axis=1, keepdims=True)
                h_ref = h + np.einsum("nm,nmd->nd", wts, vp)
            else:
                h_ref = h
            if cfg.use_memory:
                bank.append(h.copy())
                if len(bank) > cfg.bank_capacity:
                    bank.pop(0)

            # motion-modulated layer norm of s
            if cfg.use_motion_norm:
                ctx = np.asarray(ep.motion[t], dtype=np.float64)
                gamma = ctx @ self._w("motion_scale", "w").T + self._w("motion_scale", "b")
                beta = ctx @ self._w("motion_shift", "w").T + self._w("motion_shift", "b")
                mu_s = s.mean(axis=1, keepdims=True)
                var_s = ((s - mu_s) ** 2).mean(axis=1, keepdims=True)
                s_mod = gamma * ((s - mu_s) / np.sqrt(var_s + 1e-5)) + beta
            else:
                s_mod = s

            hx = np.concatenate([h_ref, s_mod], axis=1)
            z = sigmoid(lin("transition", "update", hx))
            r = sigmoid(lin("transition", "reset", hx))
            cand = np.tanh(lin("transition", "cand", np.concatenate([r * h_ref, s_mod], axis=1)))
            h = (1.0 - z) * h_ref + z * cand
            a_prev = np.asarray(ep.actions[t], dtype=np.float64)

        out = {"logratio": logratio, "stepwise": stepwise}
        if return_details:
            out["details"] = details
        return out
