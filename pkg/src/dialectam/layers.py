"""Recurrent building blocks with hand-derived backward passes.

Batched sequences are ``[B, T, K]`` with a 0/1 mask ``[B, T]``; every forward
here also accepts a single sequence ``[T, K]`` and returns matching rank.
Padding is always trailing, so garbage recurrence state inside the padded
region of one sequence can only feed further padded frames of the same
sequence. Gate order inside every width-4H axis is (input, forget, cell,
output); the forget-gate slice is ``[H:2H]``.

Two distinct scale/shift mechanisms appear here and must not be confused:
batch normalization's own learned affine (fields ``gamma``/``beta`` on
:class:`BatchNormState`) and the dynamically generated feature-wise
modulation applied by :func:`apply_film`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import sigmoid

__all__ = [
    "BatchNormState",
    "FilmParams",
    "LookaheadParams",
    "LstmLayerParams",
    "apply_film",
    "batch_norm_backward",
    "film_backward",
    "lookahead_backward",
    "lookahead_forward",
    "lstm_forward",
    "lstm_layer_backward",
    "sequence_batch_norm",
]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.01


def _as_batched(x, mask=None):
    """Promote [T, K] to [B=1, T, K]; default mask is all-ones."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
        squeeze = True
    elif x.ndim == 3:
        squeeze = False
    else:
        raise ValueError(f"expected a [T, K] or [B, T, K] array, got shape {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 1:
            mask = mask[None]
        if mask.shape != x.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match sequence shape {x.shape}")
    return x, mask, squeeze


def apply_film(x, gamma, beta):
    """Feature-wise affine: out[..., k] = gamma[k] * x[..., k] + beta[k].

    ``gamma``/``beta`` are either one vector shared by every frame, or one
    row per batch element (``[B, K]`` against ``x [B, T, K]``).
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != beta.shape:
        raise ValueError(f"gamma shape {gamma.shape} != beta shape {beta.shape}")
    if gamma.shape[-1] != x.shape[-1]:
        raise ValueError(f"modulation width {gamma.shape[-1]} does not match feature width {x.shape[-1]}")
    if gamma.ndim == 2:
        if x.ndim != 3 or gamma.shape[0] != x.shape[0]:
            raise ValueError(f"per-batch modulation {gamma.shape} against input {x.shape}")
        return gamma[:, None, :] * x + beta[:, None, :]
    if gamma.ndim != 1:
        raise ValueError(f"modulation must be rank 1 or 2, got shape {gamma.shape}")
    return gamma * x + beta


def film_backward(dout, x, gamma):
    """Reverse of :func:`apply_film`; returns (dx, dgamma, dbeta).

    Gradients for gamma/beta are summed over every frame they touched
    (and over the batch when one shared vector was used).
    """
    dout = np.asarray(dout, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if dout.shape != x.shape:
        raise ValueError(f"upstream shape {dout.shape} != input shape {x.shape}")
    if gamma.ndim == 2 and x.ndim == 3:
        dgamma = (dout * x).sum(axis=1)
        dbeta = dout.sum(axis=1)
        dx = gamma[:, None, :] * dout
    else:
        axes = tuple(range(x.ndim - 1))
        dgamma = (dout * x).sum(axis=axes)
        dbeta = dout.sum(axis=axes)
        dx = gamma * dout
    return dx, dgamma, dbeta


@dataclass
class BatchNormState:
    """Sequence-wise batch normalization state for one width-K input.

    ``gamma``/``beta`` are the trainable affine (normally views into a
    ParamStore); running statistics are buffers updated only in train mode.
    Train mode mutates the running stats, so one state must be driven by a
    single thread; inference with frozen stats is thread-safe.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM
    mode: str = "train"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("negative running variance")
        if self.mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def fresh(cls, width, **kwargs):
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            **kwargs,
        )


@dataclass
class _BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mask: np.ndarray
    n: float
    mode: str
    gamma: np.ndarray
    squeeze: bool


def sequence_batch_norm(preacts, mask, state):
    """Normalize per feature over the unpadded frames of a whole batch.

    Train mode: mean and (biased) variance are pooled over every unpadded
    frame of every sequence, the same statistics divide the output, and the
    running buffers move by ``momentum`` toward the batch values. Infer
    mode: running statistics only, so the output of a frame depends on that
    frame alone. Returns (normalized, cache).
    """
    pre, mask, squeeze = _as_batched(preacts, mask)
    if state.mode == "train":
        n = float(mask.sum())
        if n < 2:
            raise ValueError("batch normalization needs at least 2 unpadded frames in train mode")
        w = mask[:, :, None]
        mean = (pre * w).sum(axis=(0, 1)) / n
        var = (((pre - mean) ** 2) * w).sum(axis=(0, 1)) / n
        state.running_mean += state.momentum * (mean - state.running_mean)
        state.running_var += state.momentum * (var - state.running_var)
    else:
        n = float(mask.sum())
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (pre - mean) * inv_std
    out = state.gamma * xhat + state.beta
    cache = _BnCache(xhat=xhat, inv_std=inv_std, mask=mask, n=n, mode=state.mode,
                     gamma=state.gamma, squeeze=squeeze)
    return (out[0] if squeeze else out), cache


def batch_norm_backward(dout, cache):
    """Reverse of :func:`sequence_batch_norm`; returns (dpre, dgamma, dbeta).

    Upstream gradients at padded frames are treated as zero: padded outputs
    are not part of the layer's observable result.
    """
    dout = np.asarray(dout, dtype=np.float64)
    if cache.squeeze:
        dout = dout[None]
    w = cache.mask[:, :, None]
    dout = dout * w
    dgamma = (dout * cache.xhat).sum(axis=(0, 1))
    dbeta = dout.sum(axis=(0, 1))
    dxhat = dout * cache.gamma
    if cache.mode == "train":
        # Pooled statistics couple every unpadded frame; padded frames never
        # entered the pool and get exactly zero gradient.
        sum_dxhat = dxhat.sum(axis=(0, 1))
        sum_dxhat_xhat = (dxhat * cache.xhat).sum(axis=(0, 1))
        dpre = (dxhat - (sum_dxhat + cache.xhat * sum_dxhat_xhat) / cache.n) * cache.inv_std
        dpre = dpre * w
    else:
        dpre = dxhat * cache.inv_std
    return (dpre[0] if cache.squeeze else dpre), dgamma, dbeta


@dataclass
class LstmLayerParams:
    """One LSTM layer: w_x [in, 4H], w_h [H, 4H], b [4H]."""

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        four_h = self.w_x.shape[1]
        if four_h % 4 != 0:
            raise ValueError(f"gate width {four_h} is not divisible by 4")
        h = four_h // 4
        if self.w_h.shape != (h, four_h) or self.b.shape != (four_h,):
            raise ValueError(
                f"inconsistent LSTM shapes: w_x {self.w_x.shape}, w_h {self.w_h.shape}, b {self.b.shape}"
            )

    @property
    def hidden(self):
        return self.w_h.shape[0]

    @property
    def input_dim(self):
        return self.w_x.shape[0]


@dataclass
class _LstmCache:
    inputs: np.ndarray
    z_bn: np.ndarray
    z: np.ndarray
    bn_cache: _BnCache
    film_gamma: np.ndarray | None
    film_beta: np.ndarray | None
    gates_i: np.ndarray
    gates_f: np.ndarray
    gates_g: np.ndarray
    gates_o: np.ndarray
    cells: np.ndarray
    tanh_cells: np.ndarray
    hiddens: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    params: LstmLayerParams
    mask: np.ndarray
    squeeze: bool


def lstm_forward(inputs, h0, c0, params, bn_state, film=None, mask=None):
    """Full layer-input pipeline: z = BN(x @ w_x), optional input-position
    modulation, then the LSTM recurrence.

    ``film``, when given, is a (gamma, beta) pair of width 4H ([4H] or
    [B, 4H]) applied to the normalized pre-activation. Returns
    (hiddens, cache); hiddens are the raw per-frame h_t with no masking and
    no lookahead. ``h0``/``c0`` default to zeros.
    """
    x, mask, squeeze = _as_batched(inputs, mask)
    batch, steps, _ = x.shape
    hid = params.hidden
    if x.shape[2] != params.input_dim:
        raise ValueError(f"input width {x.shape[2]} != layer input width {params.input_dim}")

    z_pre = x @ params.w_x  # already [B, T, 4H], so BN returns the same rank
    z_bn, bn_cache = sequence_batch_norm(z_pre, mask, bn_state)
    if film is not None:
        gamma, beta = film
        gamma = np.asarray(gamma, dtype=np.float64)
        beta = np.asarray(beta, dtype=np.float64)
        z = apply_film(z_bn, gamma, beta)
    else:
        gamma = beta = None
        z = z_bn

    h = np.zeros((batch, hid)) if h0 is None else np.broadcast_to(
        np.asarray(h0, dtype=np.float64), (batch, hid)).copy()
    c = np.zeros((batch, hid)) if c0 is None else np.broadcast_to(
        np.asarray(c0, dtype=np.float64), (batch, hid)).copy()
    h0_arr, c0_arr = h.copy(), c.copy()

    gi = np.empty((batch, steps, hid))
    gf = np.empty((batch, steps, hid))
    gg = np.empty((batch, steps, hid))
    go = np.empty((batch, steps, hid))
    cells = np.empty((batch, steps, hid))
    tanh_cells = np.empty((batch, steps, hid))
    hiddens = np.empty((batch, steps, hid))
    for t in range(steps):
        pre = z[:, t, :] + h @ params.w_h + params.b
        i = sigmoid(pre[:, :hid])
        f = sigmoid(pre[:, hid:2 * hid])
        g = np.tanh(pre[:, 2 * hid:3 * hid])
        o = sigmoid(pre[:, 3 * hid:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gi[:, t], gf[:, t], gg[:, t], go[:, t] = i, f, g, o
        cells[:, t], tanh_cells[:, t], hiddens[:, t] = c, tc, h
    if not np.isfinite(hiddens).all():
        raise FloatingPointError("non-finite activation in LSTM forward")

    cache = _LstmCache(
        inputs=x, z_bn=z_bn, z=z, bn_cache=bn_cache, film_gamma=gamma, film_beta=beta,
        gates_i=gi, gates_f=gf, gates_g=gg, gates_o=go, cells=cells,
        tanh_cells=tanh_cells, hiddens=hiddens, h0=h0_arr, c0=c0_arr,
        params=params, mask=mask, squeeze=squeeze,
    )
    return (hiddens[0] if squeeze else hiddens), cache


@dataclass
class LstmLayerGrads:
    d_inputs: np.ndarray
    d_w_x: np.ndarray
    d_w_h: np.ndarray
    d_b: np.ndarray
    d_bn_gamma: np.ndarray
    d_bn_beta: np.ndarray
    d_film_gamma: np.ndarray | None = None
    d_film_beta: np.ndarray | None = None


def lstm_layer_backward(dhiddens, cache):
    """Analytic reverse of :func:`lstm_forward`.

    Upstream gradients at padded frames are zeroed with the forward mask, so
    the padded tail of any sequence contributes nothing to any gradient.
    """
    dh_out = np.asarray(dhiddens, dtype=np.float64)
    if cache.squeeze:
        dh_out = dh_out[None]
    if dh_out.shape != cache.hiddens.shape:
        raise ValueError(f"upstream shape {dh_out.shape} != hiddens shape {cache.hiddens.shape}")
    dh_out = dh_out * cache.mask[:, :, None]

    params = cache.params
    batch, steps, hid = cache.hiddens.shape
    dz = np.zeros((batch, steps, 4 * hid))
    d_w_h = np.zeros_like(params.w_h)
    d_b = np.zeros_like(params.b)
    dh_rec = np.zeros((batch, hid))
    dc = np.zeros((batch, hid))
    dpre = np.empty((batch, 4 * hid))
    for t in reversed(range(steps)):
        i, f, g, o = cache.gates_i[:, t], cache.gates_f[:, t], cache.gates_g[:, t], cache.gates_o[:, t]
        tc = cache.tanh_cells[:, t]
        dh = dh_out[:, t] + dh_rec
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        c_prev = cache.cells[:, t - 1] if t > 0 else cache.c0
        df = dc * c_prev
        dpre[:, :hid] = di * i * (1.0 - i)
        dpre[:, hid:2 * hid] = df * f * (1.0 - f)
        dpre[:, 2 * hid:3 * hid] = dg * (1.0 - g * g)
        dpre[:, 3 * hid:] = do * o * (1.0 - o)
        dz[:, t] = dpre
        h_prev = cache.hiddens[:, t - 1] if t > 0 else cache.h0
        d_w_h += h_prev.T @ dpre
        d_b += dpre.sum(axis=0)
        dh_rec = dpre @ params.w_h.T
        dc = dc * f

    if cache.film_gamma is not None:
        dz_bn, d_fg, d_fb = film_backward(dz, cache.z_bn, cache.film_gamma)
    else:
        dz_bn, d_fg, d_fb = dz, None, None
    d_z_pre, d_bn_gamma, d_bn_beta = batch_norm_backward(dz_bn, cache.bn_cache)
    d_w_x = np.einsum("bti,btk->ik", cache.inputs, d_z_pre)
    d_inputs = d_z_pre @ params.w_x.T
    return LstmLayerGrads(
        d_inputs=(d_inputs[0] if cache.squeeze else d_inputs),
        d_w_x=d_w_x, d_w_h=d_w_h, d_b=d_b,
        d_bn_gamma=d_bn_gamma, d_bn_beta=d_bn_beta,
        d_film_gamma=d_fg, d_film_beta=d_fb,
    )


@dataclass
class LookaheadParams:
    """Per-channel linear convolution over the current and tau future frames."""

    w: np.ndarray  # [tau + 1, H]

    def __post_init__(self):
        if self.w.ndim != 2 or self.w.shape[0] < 1:
            raise ValueError(f"lookahead weights must be [tau+1, H], got {self.w.shape}")

    @property
    def tau(self):
        return self.w.shape[0] - 1


@dataclass
class _LookaheadCache:
    hiddens: np.ndarray
    w: np.ndarray
    squeeze: bool


def lookahead_forward(hiddens, params):
    """out[t, k] = sum_j w[j, k] * h[t + j, k], zero past the sequence end.

    Linear, no activation; frames beyond the buffer are zero, so feeding
    mask-zeroed hiddens realizes per-sequence zero padding exactly.
    """
    h, _, squeeze = _as_batched(hiddens)
    if h.shape[2] != params.w.shape[1]:
        raise ValueError(f"channel count {h.shape[2]} != lookahead width {params.w.shape[1]}")
    steps = h.shape[1]
    out = np.zeros_like(h)
    for j in range(params.w.shape[0]):
        if j >= steps:
            break
        if j == 0:
            out += params.w[0] * h
        else:
            out[:, :steps - j] += params.w[j] * h[:, j:]
    cache = _LookaheadCache(hiddens=h, w=params.w, squeeze=squeeze)
    return (out[0] if squeeze else out), cache


def lookahead_backward(dout, cache):
    """Reverse of :func:`lookahead_forward`; returns (dhiddens, dw)."""
    dout = np.asarray(dout, dtype=np.float64)
    if cache.squeeze:
        dout = dout[None]
    if dout.shape != cache.hiddens.shape:
        raise ValueError(f"upstream shape {dout.shape} != hiddens shape {cache.hiddens.shape}")
    steps = dout.shape[1]
    dh = np.zeros_like(cache.hiddens)
    dw = np.zeros_like(cache.w)
    for j in range(cache.w.shape[0]):
        if j >= steps:
            break
        if j == 0:
            dh += cache.w[0] * dout
            dw[0] = (dout * cache.hiddens).sum(axis=(0, 1))
        else:
            dh[:, j:] += cache.w[j] * dout[:, :steps - j]
            dw[j] = (dout[:, :steps - j] * cache.hiddens[:, j:]).sum(axis=(0, 1))
    return (dh[0] if cache.squeeze else dh), dw


@dataclass
class FilmParams:
    """Per-layer scale/shift vectors produced by one generator pass.

    Width per layer is 4H at the input position (one slot per gate
    pre-activation channel) and H at the output position, a factor-of-four
    asymmetry that shows up directly in generator head sizes.
    """

    gamma: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    position: str = "output"

    def __post_init__(self):
        if self.position not in ("input", "output"):
            raise ValueError(f"unknown conditioning position {self.position!r}")
        if len(self.gamma) != len(self.beta):
            raise ValueError("gamma/beta layer counts differ")
        for l, (g, b) in enumerate(zip(self.gamma, self.beta)):
            if np.shape(g) != np.shape(b):
                raise ValueError(f"layer {l + 1}: gamma shape {np.shape(g)} != beta shape {np.shape(b)}")

    @property
    def num_layers(self):
        return len(self.gamma)

    def width(self, layer):
        """Modulation width of 1-based ``layer``."""
        return np.shape(self.gamma[layer - 1])[-1]

    def validate_widths(self, hidden):
        expected = 4 * hidden if self.position == "input" else hidden
        for l in range(1, self.num_layers + 1):
            if self.width(l) != expected:
                raise ValueError(
                    f"layer {l} modulation width {self.width(l)} != expected {expected} "
                    f"for position {self.position!r}"
                )
