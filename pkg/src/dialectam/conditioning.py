"""Generators that turn dialect identity and utterance-level summaries into
per-layer feature-wise scale/shift vectors.

Three families share one weight container:

* external: gamma/beta for every layer at once from the dialect one-hot,
  through two tanh layers and tanh output heads (outputs strictly inside
  (-1, 1));
* internal: per layer, from an utterance summary of the previous layer's
  output, through one tanh combiner and linear heads (unbounded);
* combined: per layer, the dialect embedding concatenated with the summary,
  then the same combiner and linear heads as the internal family.

The utterance summary a_s of a layer is the masked time-mean of
tanh(h_t @ w_s + b_s) over the unpadded frames, with h^0 being the input
features, so the summary for layer l never depends on layer l's own weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import FilmParams

__all__ = [
    "UNKNOWN_DIALECT",
    "ConditioningWeights",
    "DialectVocabulary",
    "combined_backward",
    "combined_forward",
    "external_backward",
    "external_forward",
    "generate_combined",
    "generate_external",
    "generate_internal",
    "internal_backward",
    "internal_forward",
    "summarize_backward",
    "summarize_utterance",
]

UNKNOWN_DIALECT = "<unknown>"


@dataclass(frozen=True)
class DialectVocabulary:
    """Ordered dialect names; the reserved unknown entry, if present, is last."""

    names: tuple

    def __post_init__(self):
        if len(self.names) == 0:
            raise ValueError("empty dialect vocabulary")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate dialect names")
        if UNKNOWN_DIALECT in self.names and self.names[-1] != UNKNOWN_DIALECT:
            raise ValueError("the unknown dialect must be the last vocabulary entry")

    @classmethod
    def of(cls, names, include_unknown=False):
        names = list(names)
        if include_unknown:
            names.append(UNKNOWN_DIALECT)
        return cls(tuple(names))

    @property
    def size(self):
        return len(self.names)

    @property
    def has_unknown(self):
        return self.names[-1] == UNKNOWN_DIALECT

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"dialect {name!r} not in vocabulary {list(self.names)}") from None

    def one_hot(self, name):
        vec = np.zeros(self.size)
        vec[self.index(name)] = 1.0
        return vec

    def one_hots(self, names):
        """Stack one-hot rows for a sequence of dialect names: [B, D]."""
        out = np.zeros((len(names), self.size))
        for row, name in enumerate(names):
            out[row, self.index(name)] = 1.0
        return out


@dataclass
class ConditioningWeights:
    """Weights of one gamma/beta generator.

    External family: one global instance (w_d/b_d dialect embedding, w_c/b_c
    combiner, heads sized L * width). Internal family: one instance per layer
    with w_s/b_s summary extractor. Combined family: per layer, both the
    dialect branch and the summary extractor; the combiner consumes their
    concatenation.
    """

    w_c: np.ndarray
    b_c: np.ndarray
    w_gamma: np.ndarray
    b_gamma: np.ndarray
    w_beta: np.ndarray
    b_beta: np.ndarray
    w_d: np.ndarray | None = None
    b_d: np.ndarray | None = None
    w_s: np.ndarray | None = None
    b_s: np.ndarray | None = None


@dataclass
class ConditioningGrads:
    w_c: np.ndarray
    b_c: np.ndarray
    w_gamma: np.ndarray
    b_gamma: np.ndarray
    w_beta: np.ndarray
    b_beta: np.ndarray
    w_d: np.ndarray | None = None
    b_d: np.ndarray | None = None


def _check_one_hot(rows):
    rows = np.asarray(rows, dtype=np.float64)
    single = rows.ndim == 1
    mat = rows[None] if single else rows
    for r in range(mat.shape[0]):
        row = mat[r]
        if not (np.all((row == 0.0) | (row == 1.0)) and row.sum() == 1.0):
            raise ValueError(f"not a one-hot vector: {row.tolist()}")
    return mat, single


@dataclass
class _SummaryCache:
    hiddens: np.ndarray
    tanh_u: np.ndarray
    mask: np.ndarray
    counts: np.ndarray
    w_s: np.ndarray
    squeeze: bool


def summarize_utterance(hiddens, mask, w_s, b_s):
    """Utterance summary: masked time-mean of tanh(h_t @ w_s + b_s).

    ``hiddens`` is [T, H] or [B, T, H] with a matching 0/1 mask; the mean
    divides by the number of unpadded frames of each sequence, so padding
    never dilutes it. Returns (a_s, cache).
    """
    h = np.asarray(hiddens, dtype=np.float64)
    squeeze = h.ndim == 2
    if squeeze:
        h = h[None]
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[None]
    if m.shape != h.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match hiddens shape {h.shape}")
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("cannot summarize an all-padded utterance")
    tanh_u = np.tanh(h @ w_s + b_s)
    a_s = (tanh_u * m[:, :, None]).sum(axis=1) / counts[:, None]
    cache = _SummaryCache(hiddens=h, tanh_u=tanh_u, mask=m, counts=counts, w_s=w_s, squeeze=squeeze)
    return (a_s[0] if squeeze else a_s), cache


def summarize_backward(d_as, cache):
    """Reverse of :func:`summarize_utterance`: (dhiddens, dw_s, db_s)."""
    d_as = np.asarray(d_as, dtype=np.float64)
    if cache.squeeze:
        d_as = d_as[None]
    dtanh = d_as[:, None, :] * (cache.mask / cache.counts[:, None])[:, :, None]
    du = dtanh * (1.0 - cache.tanh_u ** 2)
    dw_s = np.einsum("bti,bts->is", cache.hiddens, du)
    db_s = du.sum(axis=(0, 1))
    dh = du @ cache.w_s.T
    return (dh[0] if cache.squeeze else dh), dw_s, db_s


# ---------------------------------------------------------------------------
# External family: everything from the dialect one-hot, tanh everywhere.
# ---------------------------------------------------------------------------

@dataclass
class _ExternalCache:
    onehots: np.ndarray
    a_e: np.ndarray
    a_c: np.ndarray
    gamma_all: np.ndarray
    beta_all: np.ndarray
    weights: ConditioningWeights
    width: int
    squeeze: bool


def external_forward(onehots, weights, num_layers, width):
    """gamma/beta for all layers at once from dialect identity alone.

    a_e = tanh(d @ w_d + b_d); a_c = tanh(a_e @ w_c + b_c); the heads apply a
    final tanh, so every output lies strictly inside (-1, 1). Returns
    (gammas, betas, cache) with per-layer [B, width] slices.
    """
    mat, single = _check_one_hot(onehots)
    if weights.w_gamma.shape[1] != num_layers * width:
        raise ValueError(
            f"head width {weights.w_gamma.shape[1]} != layers*width {num_layers * width}")
    a_e = np.tanh(mat @ weights.w_d + weights.b_d)
    a_c = np.tanh(a_e @ weights.w_c + weights.b_c)
    gamma_all = np.tanh(a_c @ weights.w_gamma + weights.b_gamma)
    beta_all = np.tanh(a_c @ weights.w_beta + weights.b_beta)
    gammas = [gamma_all[:, l * width:(l + 1) * width] for l in range(num_layers)]
    betas = [beta_all[:, l * width:(l + 1) * width] for l in range(num_layers)]
    cache = _ExternalCache(onehots=mat, a_e=a_e, a_c=a_c, gamma_all=gamma_all,
                           beta_all=beta_all, weights=weights, width=width, squeeze=single)
    return gammas, betas, cache


def external_backward(dgammas, dbetas, cache):
    """Reverse of :func:`external_forward` given per-layer upstream grads."""
    dg_all = np.concatenate([np.asarray(d, dtype=np.float64) for d in dgammas], axis=-1)
    db_all = np.concatenate([np.asarray(d, dtype=np.float64) for d in dbetas], axis=-1)
    if cache.squeeze:
        dg_all, db_all = dg_all[None], db_all[None]
    w = cache.weights
    dpre_g = dg_all * (1.0 - cache.gamma_all ** 2)
    dpre_b = db_all * (1.0 - cache.beta_all ** 2)
    grads = ConditioningGrads(
        w_gamma=cache.a_c.T @ dpre_g, b_gamma=dpre_g.sum(axis=0),
        w_beta=cache.a_c.T @ dpre_b, b_beta=dpre_b.sum(axis=0),
        w_c=None, b_c=None,
    )
    da_c = dpre_g @ w.w_gamma.T + dpre_b @ w.w_beta.T
    dpre_c = da_c * (1.0 - cache.a_c ** 2)
    grads.w_c = cache.a_e.T @ dpre_c
    grads.b_c = dpre_c.sum(axis=0)
    da_e = dpre_c @ w.w_c.T
    dpre_e = da_e * (1.0 - cache.a_e ** 2)
    grads.w_d = cache.onehots.T @ dpre_e
    grads.b_d = dpre_e.sum(axis=0)
    return grads


def generate_external(onehot, weights, num_layers, width, position="output"):
    """One dialect's :class:`FilmParams` for all layers."""
    gammas, betas, _ = external_forward(onehot, weights, num_layers, width)
    return FilmParams(gamma=[g[0] for g in gammas], beta=[b[0] for b in betas], position=position)


# ---------------------------------------------------------------------------
# Internal family: per layer, summary -> tanh combiner -> linear heads.
# ---------------------------------------------------------------------------

@dataclass
class _LayerGenCache:
    a_s: np.ndarray
    a_d: np.ndarray | None
    onehots: np.ndarray | None
    concat: np.ndarray
    a_c: np.ndarray
    weights: ConditioningWeights
    squeeze: bool


def internal_forward(a_s, weights):
    """(gamma, beta) for one layer from its utterance summary.

    a_c = tanh(a_s @ w_c + b_c); the heads stay linear, so outputs are
    unbounded. Returns (gamma, beta, cache) shaped [B, width].
    """
    a_s = np.asarray(a_s, dtype=np.float64)
    single = a_s.ndim == 1
    mat = a_s[None] if single else a_s
    if mat.shape[1] != weights.w_c.shape[0]:
        raise ValueError(f"summary width {mat.shape[1]} != combiner input {weights.w_c.shape[0]}")
    a_c = np.tanh(mat @ weights.w_c + weights.b_c)
    gamma = a_c @ weights.w_gamma + weights.b_gamma
    beta = a_c @ weights.w_beta + weights.b_beta
    cache = _LayerGenCache(a_s=mat, a_d=None, onehots=None, concat=mat, a_c=a_c,
                           weights=weights, squeeze=single)
    if single:
        return gamma[0], beta[0], cache
    return gamma, beta, cache


def combined_forward(onehots, a_s, weights):
    """(gamma, beta) for one layer from the dialect embedding and summary.

    a_d = tanh(d @ w_d + b_d) is concatenated with a_s before the combiner;
    the heads are linear, as in the internal family.
    """
    mat_d, single_d = _check_one_hot(onehots)
    a_s = np.asarray(a_s, dtype=np.float64)
    single_s = a_s.ndim == 1
    mat_s = a_s[None] if single_s else a_s
    if single_d != single_s or mat_d.shape[0] != mat_s.shape[0]:
        raise ValueError("dialect and summary batch shapes disagree")
    a_d = np.tanh(mat_d @ weights.w_d + weights.b_d)
    concat = np.concatenate([a_d, mat_s], axis=1)
    if concat.shape[1] != weights.w_c.shape[0]:
        raise ValueError(
            f"concatenated width {concat.shape[1]} != combiner input {weights.w_c.shape[0]}")
    a_c = np.tanh(concat @ weights.w_c + weights.b_c)
    gamma = a_c @ weights.w_gamma + weights.b_gamma
    beta = a_c @ weights.w_beta + weights.b_beta
    cache = _LayerGenCache(a_s=mat_s, a_d=a_d, onehots=mat_d, concat=concat, a_c=a_c,
                           weights=weights, squeeze=single_d)
    if single_d:
        return gamma[0], beta[0], cache
    return gamma, beta, cache


def layer_generator_backward(dgamma, dbeta, cache):
    """Shared reverse pass for the internal and combined families.

    Returns (d_a_s, grads); grads.w_d/b_d are None for the internal family.
    """
    dgamma = np.asarray(dgamma, dtype=np.float64)
    dbeta = np.asarray(dbeta, dtype=np.float64)
    if cache.squeeze:
        dgamma, dbeta = dgamma[None], dbeta[None]
    w = cache.weights
    grads = ConditioningGrads(
        w_gamma=cache.a_c.T @ dgamma, b_gamma=dgamma.sum(axis=0),
        w_beta=cache.a_c.T @ dbeta, b_beta=dbeta.sum(axis=0),
        w_c=None, b_c=None,
    )
    da_c = dgamma @ w.w_gamma.T + dbeta @ w.w_beta.T
    dpre_c = da_c * (1.0 - cache.a_c ** 2)
    grads.w_c = cache.concat.T @ dpre_c
    grads.b_c = dpre_c.sum(axis=0)
    d_concat = dpre_c @ w.w_c.T
    if cache.a_d is None:
        d_as = d_concat
    else:
        split = cache.a_d.shape[1]
        d_ad, d_as = d_concat[:, :split], d_concat[:, split:]
        dpre_d = d_ad * (1.0 - cache.a_d ** 2)
        # The one-hot input is not trainable; only the embedding weights get grads.
        grads.w_d = cache.onehots.T @ dpre_d
        grads.b_d = dpre_d.sum(axis=0)
    if cache.squeeze:
        d_as = d_as[0]
    return d_as, grads


internal_backward = layer_generator_backward
combined_backward = layer_generator_backward


def generate_internal(a_s, weights):
    """Single-summary convenience wrapper; returns (gamma, beta)."""
    gamma, beta, _ = internal_forward(a_s, weights)
    return gamma, beta


def generate_combined(onehot, a_s, weights):
    """Single-utterance convenience wrapper; returns (gamma, beta)."""
    gamma, beta, _ = combined_forward(onehot, a_s, weights)
    return gamma, beta
