"""Linear-softmax token policies over hashed context features.

The context encoder hashes element labels, the keyboard flag, conditioning
text n-grams, and the last four prefix tokens (offset-tagged) into a fixed
feature dimension. Logits are linear in those features, so log-probabilities
and gradients are exact. Sampling is grammar-constrained; the returned
log-probabilities always come from the untempered (temperature 1)
distribution, which is the one the surrogate objective's ratios use.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from hgrpo.env.types import ScreenState
from hgrpo.errors import ContractViolation
from hgrpo.vocab import Grammar, TokenSequence, Vocabulary

PREFIX_K = 4
_RESERVED_DIMS = 2  # dim 0: bias, dim 1: keyboard flag

_hash_cache: dict[str, int] = {}


def stable_hash(key: str) -> int:
    """Process-independent 64-bit hash (python's builtin hash is salted)."""
    h = _hash_cache.get(key)
    if h is None:
        h = int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
        _hash_cache[key] = h
    return h


@dataclass(frozen=True)
class FeatureVector:
    """Sparse view of a fixed-dimension real feature vector."""

    dim: int
    idx: np.ndarray
    val: np.ndarray

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim)
        np.add.at(dense, self.idx, self.val)
        return dense


def _accumulate(pairs: list[tuple[int, float]]) -> tuple[np.ndarray, np.ndarray]:
    acc: dict[int, float] = {}
    for d, v in pairs:
        acc[d] = acc.get(d, 0.0) + v
    items = sorted(acc.items())
    return (np.array([d for d, _ in items], dtype=np.int64),
            np.array([v for _, v in items], dtype=np.float64))


class ContextEncoder:
    """Hashes (screen, conditioning text) once; prefix dims come per position."""

    def __init__(self, feature_dim: int, vocab: Vocabulary):
        if feature_dim <= _RESERVED_DIMS + 1:
            raise ContractViolation("feature_dim too small")
        self.feature_dim = feature_dim
        self.vocab = vocab
        self._span = feature_dim - _RESERVED_DIMS
        # Per (token, offset) prefix feature dims, precomputed for speed.
        self.prefix_dims = np.empty((vocab.size, PREFIX_K), dtype=np.int64)
        for t, tok in enumerate(vocab.tokens):
            for off in range(PREFIX_K):
                self.prefix_dims[t, off] = self._dim(f"p{off + 1}:{tok}")

    def _dim(self, key: str) -> int:
        return _RESERVED_DIMS + stable_hash(key) % self._span

    def encode_base(self, screen: ScreenState, conditioning_text: str) -> "EncodedContext":
        pairs: list[tuple[int, float]] = [(0, 1.0)]
        if screen.keyboard_visible:
            pairs.append((1, 1.0))
        for el in screen.visible_elements():
            pairs.append((self._dim(f"lbl:{el.label.lower()}"), 1.0))
        words = conditioning_text.lower().split()
        for w in words:
            pairs.append((self._dim(f"u:{w}"), 1.0))
        for a, b in zip(words, words[1:]):
            pairs.append((self._dim(f"b:{a} {b}"), 1.0))
        idx, val = _accumulate(pairs)
        return EncodedContext(self, idx, val)

    def prefix_dims_for(self, prefix: tuple[int, ...]) -> np.ndarray:
        k = min(PREFIX_K, len(prefix))
        if k == 0:
            return np.empty(0, dtype=np.int64)
        toks = prefix[-k:]
        return np.array(
            [self.prefix_dims[toks[-1 - off], off] for off in range(k)], dtype=np.int64)


@dataclass
class EncodedContext:
    """Base features of one prompt; shared by every position of a sequence."""

    encoder: ContextEncoder
    base_idx: np.ndarray
    base_val: np.ndarray

    def feature_vector(self, prefix: tuple[int, ...] = ()) -> FeatureVector:
        pdims = self.encoder.prefix_dims_for(prefix)
        pairs = list(zip(self.base_idx.tolist(), self.base_val.tolist()))
        pairs += [(int(d), 1.0) for d in pdims]
        idx, val = _accumulate(pairs)
        return FeatureVector(self.encoder.feature_dim, idx, val)


def encode_context(encoder: ContextEncoder, screen: ScreenState,
                   conditioning_text: str, prefix: tuple[int, ...] = ()) -> FeatureVector:
    """Deterministic feature vector for (screen, conditioning text, prefix)."""
    return encoder.encode_base(screen, conditioning_text).feature_vector(prefix)


# -- parameters ---------------------------------------------------------------

@dataclass
class PolicyParams:
    weights: np.ndarray  # (feature_dim, vocab_size)
    bias: np.ndarray     # (vocab_size,)
    role: str
    version: int = 0

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ContractViolation("weights/bias shapes are incongruent")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ContractViolation("policy parameters must be finite")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.bias.copy(), self.role, self.version)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])


def init_params(rng: np.random.Generator, feature_dim: int, vocab_size: int,
                role: str, scale: float = 0.01) -> PolicyParams:
    return PolicyParams(
        weights=rng.normal(0.0, scale, size=(feature_dim, vocab_size)),
        bias=np.zeros(vocab_size),
        role=role,
    )


def save_params(params: PolicyParams, prefix: str | Path) -> None:
    """Flat little-endian float64 blob plus a JSON sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    params.flat().astype("<f8").tofile(str(prefix) + ".bin")
    sidecar = {"feature_dim": params.feature_dim, "vocab_size": params.vocab_size,
               "role": params.role, "version": params.version}
    Path(str(prefix) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_params(prefix: str | Path) -> PolicyParams:
    meta = json.loads(Path(str(prefix) + ".json").read_text())
    flat = np.fromfile(str(prefix) + ".bin", dtype="<f8").astype(np.float64)
    d, v = meta["feature_dim"], meta["vocab_size"]
    if flat.size != d * v + v:
        raise ContractViolation("checkpoint size does not match sidecar dims")
    return PolicyParams(flat[: d * v].reshape(d, v), flat[d * v:], meta["role"],
                        meta["version"])


# -- scoring -------------------------------------------------------------------

class PositionScorer:
    """Caches base logits of (params, context); adds prefix rows per position."""

    def __init__(self, params: PolicyParams, ctx: EncodedContext):
        self.params = params
        self.ctx = ctx
        self.base = params.bias + params.weights[ctx.base_idx].T @ ctx.base_val

    def logits(self, prefix: tuple[int, ...]) -> np.ndarray:
        pdims = self.ctx.encoder.prefix_dims_for(prefix)
        if pdims.size == 0:
            return self.base.copy()
        return self.base + self.params.weights[pdims].sum(axis=0)

    def legal_logits(self, prefix: tuple[int, ...], legal: np.ndarray) -> np.ndarray:
        """Logits restricted to the grammar-legal token set (the hot path)."""
        pdims = self.ctx.encoder.prefix_dims_for(prefix)
        z = self.base[legal]
        if pdims.size:
            z = z + self.params.weights[pdims[:, None], legal[None, :]].sum(axis=0)
        return z


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities at temperature 1 with illegal tokens at -inf."""
    out = np.full_like(logits, -np.inf)
    z = logits[mask]
    m = z.max()
    out[mask] = z - m - np.log(np.exp(z - m).sum())
    return out


def log_softmax_1d(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())


def sequence_logprob(params: PolicyParams, ctx: EncodedContext, grammar: Grammar,
                     seq: TokenSequence) -> np.ndarray:
    """Exact per-token log-probabilities of seq under the untempered policy."""
    scorer = PositionScorer(params, ctx)
    state = grammar.initial_state()
    out = np.empty(len(seq.tokens))
    prefix: tuple[int, ...] = ()
    for t, token in enumerate(seq.tokens):
        legal = grammar.legal_ids(state)
        pos = np.searchsorted(legal, token)
        if pos >= legal.size or legal[pos] != token:
            raise ContractViolation(
                f"token {grammar.vocab.tokens[token]!r} not generable at position {t}")
        logp = log_softmax_1d(scorer.legal_logits(prefix, legal))
        out[t] = logp[pos]
        state = grammar.advance(state, token)
        prefix = prefix + (token,)
    return out


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 0.9
    top_p: float = 1.0
    top_k: int = 50
    max_length: int = 256
    group_size: int = 6

    def __post_init__(self) -> None:
        if self.temperature <= 0 or self.top_k < 1 or self.max_length < 1:
            raise ContractViolation("decoding parameters must be positive")
        if not 0.0 < self.top_p <= 1.0:
            raise ContractViolation("top_p must lie in (0, 1]")
        if self.group_size < 2:
            raise ContractViolation("group size must be >= 2 for advantage variance")


def _sample_pos(z: np.ndarray, cfg: DecodingConfig, rng: np.random.Generator) -> int:
    """Tempered top-k / top-p sample over legal logits; returns a position."""
    zt = z / cfg.temperature
    if cfg.top_k < zt.size:
        keep = np.argpartition(zt, -cfg.top_k)[-cfg.top_k:]
        zt = zt[keep]
    else:
        keep = None
    p = np.exp(zt - zt.max())
    if cfg.top_p < 1.0:
        order = np.argsort(p)[::-1]
        psort = p[order]
        csum = np.cumsum(psort)
        cut = int(np.searchsorted(csum / csum[-1], cfg.top_p) + 1)
        live = order[:cut]
        pl = psort[:cut]
        c = np.cumsum(pl)
        j = int(np.searchsorted(c, rng.random() * c[-1]))
        pos = int(live[min(j, cut - 1)])
    else:
        c = np.cumsum(p)
        pos = int(min(np.searchsorted(c, rng.random() * c[-1]), p.size - 1))
    return pos if keep is None else int(keep[pos])


def sample_sequence(params: PolicyParams, ctx: EncodedContext, grammar: Grammar,
                    decoding: DecodingConfig, rng: np.random.Generator,
                    greedy: bool = False) -> tuple[TokenSequence, np.ndarray]:
    """Sample one grammar-legal sequence; logps are untempered (see module doc)."""
    scorer = PositionScorer(params, ctx)
    weights = params.weights
    table = ctx.encoder.prefix_dims
    K = table.shape[1]
    state = grammar.initial_state()
    tokens: list[int] = []
    logps: list[float] = []
    while len(tokens) < decoding.max_length:
        legal = grammar.legal_ids(state)
        t = len(tokens)
        k = min(t, K)
        z = scorer.base[legal]
        if k:
            pd = [table[tokens[t - 1 - off], off] for off in range(k)]
            z = z + weights[np.array(pd)[:, None], legal[None, :]].sum(axis=0)
        if greedy:
            pos = int(np.argmax(z))
        else:
            pos = _sample_pos(z, decoding, rng)
        m = z.max()
        logps.append(float(z[pos] - m - np.log(np.exp(z - m).sum())))
        token = int(legal[pos])
        tokens.append(token)
        state = grammar.advance(state, token)
        if grammar.is_done(state):
            return TokenSequence(tuple(tokens), complete=True), np.array(logps)
    return TokenSequence(tuple(tokens), complete=False), np.array(logps)


def greedy_sequence(params: PolicyParams, ctx: EncodedContext, grammar: Grammar,
                    max_length: int = 256) -> TokenSequence:
    cfg = DecodingConfig(temperature=1.0, top_k=1, max_length=max_length)
    seq, _ = sample_sequence(params, ctx, grammar, cfg,
                             np.random.default_rng(0), greedy=True)
    return seq


def enumerate_sequence_probs(params: PolicyParams, ctx: EncodedContext,
                             grammar: Grammar, max_length: int
                             ) -> dict[tuple[int, ...], float]:
    """Brute-force probability of every sequence up to max_length.

    Sequences that have not finished at the cap contribute their prefix
    probability under the truncation rule, so the returned masses sum to 1.
    This is the independent oracle for the exactness tests.
    """
    scorer = PositionScorer(params, ctx)
    out: dict[tuple[int, ...], float] = {}

    def walk(state: Any, prefix: tuple[int, ...], logp: float) -> None:
        if grammar.is_done(state):
            out[prefix] = out.get(prefix, 0.0) + np.exp(logp)
            return
        if len(prefix) >= max_length:
            out[prefix] = out.get(prefix, 0.0) + np.exp(logp)
            return
        mask = grammar.mask(state)
        logps = masked_log_softmax(scorer.logits(prefix), mask)
        for token in np.flatnonzero(mask):
            walk(grammar.advance(state, int(token)), prefix + (int(token),),
                 logp + logps[token])

    walk(grammar.initial_state(), (), 0.0)
    return out
