"""Clipped group-relative surrogate objective with exact gradients.

The objective per group: mean over members of the per-token mean of
min(rho * A, clip(rho, 1-eps, 1+eps) * A), minus beta times the mean exact
per-token KL against a frozen reference policy. Functions here return the
negated objective (a loss to descend). Because the policies are linear-softmax,
the gradient is computed analytically and cross-checked by central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hgrpo.errors import ContractViolation, NumericError
from hgrpo.policy import (
    EncodedContext,
    PolicyParams,
    PositionScorer,
    log_softmax_1d,
)
from hgrpo.vocab import Grammar, TokenSequence


@dataclass(frozen=True)
class GrpoConfig:
    epsilon_clip: float = 0.2
    beta_kl: float = 0.04
    lr: float = 0.05
    epochs: int = 2
    optimizer: str = "sgd"

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon_clip < 1.0:
            raise ContractViolation("epsilon_clip must lie in (0, 1)")
        if self.beta_kl < 0:
            raise ContractViolation("beta_kl must be >= 0")
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")


@dataclass
class GroupMember:
    seq: TokenSequence
    old_logps: np.ndarray
    ref_logps: np.ndarray
    advantage: float
    reward: float = 0.0

    def __post_init__(self) -> None:
        n = len(self.seq.tokens)
        if len(self.old_logps) != n or len(self.ref_logps) != n:
            raise ContractViolation("log-probability lists must match sequence length")
        if not np.isfinite(self.advantage):
            raise ContractViolation("advantage must be finite")


@dataclass
class GroupBatch:
    """G sampled outputs for one prompt plus the frozen reference snapshot.

    ref_params is carried so the KL term can be evaluated exactly over the
    categorical distribution at each position, not just on sampled tokens.
    """

    ctx: EncodedContext
    grammar: Grammar
    members: list[GroupMember]
    ref_params: PolicyParams

    def __post_init__(self) -> None:
        if not self.members:
            raise ContractViolation("empty group")


@dataclass
class Gradient:
    """Loss gradient congruent with PolicyParams."""

    d_weights: np.ndarray
    d_bias: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_weights.ravel(), self.d_bias])

    def norm(self) -> float:
        return float(np.sqrt((self.d_weights ** 2).sum() + (self.d_bias ** 2).sum()))

    def scaled(self, a: float) -> "Gradient":
        return Gradient(self.d_weights * a, self.d_bias * a)

    def add_(self, other: "Gradient") -> None:
        self.d_weights += other.d_weights
        self.d_bias += other.d_bias


def _as_batches(batch: "GroupBatch | Sequence[GroupBatch]") -> list[GroupBatch]:
    return [batch] if isinstance(batch, GroupBatch) else list(batch)


def surrogate_loss(params: PolicyParams, batch: GroupBatch | Sequence[GroupBatch],
                   config: GrpoConfig) -> float:
    """Negated Eq.-style clipped objective, averaged over batches."""
    batches = _as_batches(batch)
    total = 0.0
    for b in batches:
        total += _batch_objective(params, b, config, grad_out=None)
    loss = -total / len(batches)
    if not np.isfinite(loss):
        raise NumericError("non-finite surrogate loss")
    return loss


def objective_stats(params: PolicyParams, batch: GroupBatch | Sequence[GroupBatch],
                    config: GrpoConfig) -> dict[str, float]:
    """Loss plus mean exact per-token KL, for metrics logging."""
    batches = _as_batches(batch)
    stats: dict[str, float] = {}
    total = sum(_batch_objective(params, b, config, None, stats) for b in batches)
    mean_kl = stats.get("kl_sum", 0.0) / max(stats.get("kl_tokens", 0.0), 1.0)
    return {"loss": -total / len(batches), "mean_kl": mean_kl}


def loss_gradient(params: PolicyParams, batch: GroupBatch | Sequence[GroupBatch],
                  config: GrpoConfig) -> Gradient:
    """Exact gradient of surrogate_loss at params."""
    batches = _as_batches(batch)
    grad = Gradient(np.zeros_like(params.weights), np.zeros_like(params.bias))
    for b in batches:
        _batch_objective(params, b, config, grad_out=grad)
    # _batch_objective accumulates the objective's gradient; negate and average.
    grad.d_weights /= -len(batches)
    grad.d_bias /= -len(batches)
    if not (np.isfinite(grad.d_weights).all() and np.isfinite(grad.d_bias).all()):
        raise NumericError("non-finite gradient")
    return grad


def _row_log_softmax(Z: np.ndarray) -> np.ndarray:
    m = Z.max(axis=1, keepdims=True)
    return Z - m - np.log(np.exp(Z - m).sum(axis=1, keepdims=True))


def _batch_objective(params: PolicyParams, batch: GroupBatch, config: GrpoConfig,
                     grad_out: Gradient | None,
                     stats: dict[str, float] | None = None) -> float:
    """Objective of one batch; optionally accumulates d(objective)/d(params).

    Positions are bucketed by grammar state (identical legal token sets) so
    softmaxes and gradient rows vectorize across the whole group. The gradient
    factorizes into one outer product over the shared base-feature dims plus
    per-position prefix-dim rows.
    """
    do_kl = config.beta_kl > 0.0
    G = len(batch.members)
    table = batch.ctx.encoder.prefix_dims
    K = table.shape[1]

    # Replay every member; bucket positions by (state, #prefix dims).
    buckets: dict[tuple[Any, int], list[tuple]] = {}
    for member in batch.members:
        adv = member.advantage
        if adv == 0.0 and not do_kl:
            continue  # contributes exactly zero to objective and gradient
        toks = member.seq.tokens
        n = len(toks)
        inv = 1.0 / (G * n)
        state = batch.grammar.initial_state()
        for t, token in enumerate(toks):
            k = min(t, K)
            pdims = tuple(table[toks[t - 1 - off], off] for off in range(k))
            buckets.setdefault((state, k), []).append(
                (pdims, token, inv, adv, member.old_logps[t]))
            state = batch.grammar.advance(state, token)

    scorer = PositionScorer(params, batch.ctx)
    ref_scorer = PositionScorer(batch.ref_params, batch.ctx) if do_kl else None
    eps = config.epsilon_clip
    objective = 0.0
    base_u = np.zeros(params.vocab_size) if grad_out is not None else None

    for (state, k), rows in buckets.items():
        legal = batch.grammar.legal_ids(state)
        L = legal.size
        m = len(rows)
        pd = np.array([r[0] for r in rows], dtype=np.int64) if k else None
        tokens = np.array([r[1] for r in rows], dtype=np.int64)
        inv = np.array([r[2] for r in rows])
        adv = np.array([r[3] for r in rows])
        old = np.array([r[4] for r in rows])

        Z = np.broadcast_to(scorer.base[legal], (m, L)).copy()
        if k:
            flat = pd.reshape(-1)
            Z += params.weights[flat[:, None], legal[None, :]] \
                .reshape(m, k, L).sum(axis=1)
        logp = _row_log_softmax(Z)
        pos = np.searchsorted(legal, tokens)
        lp_tok = logp[np.arange(m), pos]
        if not np.isfinite(lp_tok).all():
            raise NumericError(f"-inf log-probability in state {state!r}")
        ratio = np.exp(lp_tok - old)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        objective += float((inv * np.minimum(unclipped, clipped)).sum())

        U = None
        p = None
        if grad_out is not None:
            active = (unclipped <= clipped) & (adv != 0.0)
            if active.any():
                p = np.exp(logp)
                coef = np.where(active, inv * adv * ratio, 0.0)
                U = (-coef)[:, None] * p
                U[np.arange(m), pos] += coef
        if do_kl:
            if p is None:
                p = np.exp(logp)
            Zr = np.broadcast_to(ref_scorer.base[legal], (m, L)).copy()
            if k:
                flat = pd.reshape(-1)
                Zr += batch.ref_params.weights[flat[:, None], legal[None, :]] \
                    .reshape(m, k, L).sum(axis=1)
            diff = logp - _row_log_softmax(Zr)
            kl = (p * diff).sum(axis=1)
            objective -= float((inv * config.beta_kl * kl).sum())
            if stats is not None:
                stats["kl_sum"] = stats.get("kl_sum", 0.0) + float(kl.sum())
                stats["kl_tokens"] = stats.get("kl_tokens", 0.0) + m
            if grad_out is not None:
                dkl = (config.beta_kl * inv)[:, None] * p * (diff - kl[:, None])
                U = -dkl if U is None else U - dkl

        if U is not None:
            base_u[legal] += U.sum(axis=0)
            if k:
                np.add.at(grad_out.d_weights,
                          (pd.reshape(-1)[:, None], legal[None, :]),
                          np.repeat(U, k, axis=0))

    if grad_out is not None and base_u is not None:
        grad_out.d_weights[batch.ctx.base_idx] += np.outer(batch.ctx.base_val, base_u)
        grad_out.d_bias += base_u
    return objective


def finite_diff_gradient(params: PolicyParams, batch: GroupBatch | Sequence[GroupBatch],
                         config: GrpoConfig, h: float = 1e-5) -> Gradient:
    """Central-difference oracle for loss_gradient (O(dim) loss evaluations)."""
    if h <= 0:
        raise ContractViolation("h must be positive")
    work = params.copy()

    def loss_at() -> float:
        return surrogate_loss(work, batch, config)

    dW = np.zeros_like(params.weights)
    for d in range(params.feature_dim):
        for v in range(params.vocab_size):
            orig = work.weights[d, v]
            work.weights[d, v] = orig + h
            up = loss_at()
            work.weights[d, v] = orig - h
            down = loss_at()
            work.weights[d, v] = orig
            dW[d, v] = (up - down) / (2 * h)
    db = np.zeros_like(params.bias)
    for v in range(params.vocab_size):
        orig = work.bias[v]
        work.bias[v] = orig + h
        up = loss_at()
        work.bias[v] = orig - h
        down = loss_at()
        work.bias[v] = orig
        db[v] = (up - down) / (2 * h)
    return Gradient(dW, db)


def apply_update(params: PolicyParams, grad: Gradient, config: GrpoConfig) -> PolicyParams:
    """One descent step on the loss; returns new params with version + 1."""
    if grad.d_weights.shape != params.weights.shape or \
            grad.d_bias.shape != params.bias.shape:
        raise ContractViolation("gradient shape does not match parameters")
    return PolicyParams(
        weights=params.weights - config.lr * grad.d_weights,
        bias=params.bias - config.lr * grad.d_bias,
        role=params.role,
        version=params.version + 1,
    )


@dataclass
class AdamState:
    """Optional adaptive-optimizer state (off by default)."""

    m_w: np.ndarray
    v_w: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: PolicyParams) -> "AdamState":
        return cls(np.zeros_like(params.weights), np.zeros_like(params.weights),
                   np.zeros_like(params.bias), np.zeros_like(params.bias))


def apply_adam_update(params: PolicyParams, grad: Gradient, config: GrpoConfig,
                      state: AdamState) -> PolicyParams:
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m_w = b1 * state.m_w + (1 - b1) * grad.d_weights
    state.v_w = b2 * state.v_w + (1 - b2) * grad.d_weights ** 2
    state.m_b = b1 * state.m_b + (1 - b1) * grad.d_bias
    state.v_b = b2 * state.v_b + (1 - b2) * grad.d_bias ** 2
    corr1, corr2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    step_w = (state.m_w / corr1) / (np.sqrt(state.v_w / corr2) + state.eps)
    step_b = (state.m_b / corr1) / (np.sqrt(state.v_b / corr2) + state.eps)
    return PolicyParams(params.weights - config.lr * step_w,
                        params.bias - config.lr * step_b,
                        params.role, params.version + 1)
