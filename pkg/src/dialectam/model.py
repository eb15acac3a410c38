"""Model family construction, the full forward/backward pass, and the model
file format.

A model is a stack of batch-normalized LSTM layers, each followed by a
lookahead convolution, topped by a per-frame softmax head. Depending on the
configuration the stack is modulated by feature-wise scale/shift vectors
generated from the dialect one-hot (external), from utterance summaries of
each previous layer (internal), or from both, applied either to the
normalized gate pre-activations (input position, width 4H) or to the layer
output (output position, width H).

Conditioned layers are evaluated strictly in order: layer l-1 runs to
completion (including lookahead and any output modulation) before its output
is summarized for layer l, so a layer's modulation never depends on its own
weights.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import conditioning as cond
from .conditioning import UNKNOWN_DIALECT, ConditioningWeights, DialectVocabulary
from .layers import (
    BatchNormState,
    FilmParams,
    LookaheadParams,
    LstmLayerParams,
    apply_film,
    film_backward,
    lookahead_backward,
    lookahead_forward,
    lstm_forward,
    lstm_layer_backward,
)
from .numerics import ParamStore, Rng

__all__ = [
    "ConfigError",
    "Model",
    "ModelConfig",
    "VARIANTS",
    "build_model",
    "count_params",
    "forward",
    "load_model",
    "loss_and_grads",
    "parameter_shapes",
    "save_model",
    "softmax_cross_entropy",
    "variant_config",
]

COND_SOURCES = ("none", "external", "internal", "both")
COND_POSITIONS = ("none", "input", "output")

# Family table: variant -> (cond_source, cond_position, dialect_aware_input,
# needs_unknown). M2 shares M1's architecture; it differs only by the
# per-dialect fine-tuning protocol.
VARIANTS = {
    "M1": ("none", "none", False, False),
    "M2": ("none", "none", False, False),
    "M3": ("none", "none", True, False),
    "M4": ("external", "input", False, False),
    "M5": ("internal", "input", False, False),
    "M6": ("both", "input", False, False),
    "M7": ("external", "output", False, False),
    "M8": ("internal", "output", False, False),
    "M9": ("both", "output", False, False),
    "M10": ("both", "output", False, True),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Complete declarative description of one family member."""

    num_layers: int
    hidden: int
    input_dim: int
    num_classes: int
    vocabulary: DialectVocabulary
    lookahead_tau: int = 2
    cond_source: str = "none"
    cond_position: str = "none"
    dialect_aware_input: bool = False
    unknown_prob: float = 0.0
    repr_units: int = 64
    combiner_units: int = 64

    def validate(self):
        if min(self.num_layers, self.hidden, self.input_dim, self.num_classes) < 1:
            raise ConfigError("layer count, widths and class count must be positive")
        if self.lookahead_tau < 0:
            raise ConfigError("lookahead_tau must be >= 0")
        if self.cond_source not in COND_SOURCES:
            raise ConfigError(f"unknown cond_source {self.cond_source!r}")
        if self.cond_position not in COND_POSITIONS:
            raise ConfigError(f"unknown cond_position {self.cond_position!r}")
        if (self.cond_source == "none") != (self.cond_position == "none"):
            raise ConfigError("cond_source and cond_position must be 'none' together")
        if not 0.0 <= self.unknown_prob <= 1.0:
            raise ConfigError("unknown_prob must lie in [0, 1]")
        if self.unknown_prob > 0 and not self.vocabulary.has_unknown:
            raise ConfigError("unknown_prob > 0 requires the unknown dialect in the vocabulary")
        if self.repr_units < 1 or self.combiner_units < 1:
            raise ConfigError("generator widths must be positive")
        if self.cond_source == "both" and self.repr_units % 2 != 0:
            raise ConfigError("combined conditioning splits repr_units in half; it must be even")

    @property
    def conditioned(self):
        return self.cond_source != "none"

    @property
    def film_width(self):
        """Per-layer modulation width: 4H at the input position, H at the output."""
        if not self.conditioned:
            return 0
        return 4 * self.hidden if self.cond_position == "input" else self.hidden

    @property
    def needs_dialect(self):
        return self.dialect_aware_input or self.cond_source in ("external", "both")

    def layer_input_width(self, layer):
        """Input width of 1-based ``layer``; layer 1 may carry the one-hot concat."""
        if layer == 1:
            extra = self.vocabulary.size if self.dialect_aware_input else 0
            return self.input_dim + extra
        return self.hidden

    def to_dict(self):
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "vocabulary": list(self.vocabulary.names),
            "lookahead_tau": self.lookahead_tau,
            "cond_source": self.cond_source,
            "cond_position": self.cond_position,
            "dialect_aware_input": self.dialect_aware_input,
            "unknown_prob": self.unknown_prob,
            "repr_units": self.repr_units,
            "combiner_units": self.combiner_units,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["vocabulary"] = DialectVocabulary(tuple(data["vocabulary"]))
        cfg = cls(**data)
        cfg.validate()
        return cfg


def variant_config(variant, vocabulary, input_dim, num_classes, hidden, num_layers,
                   unknown_prob=0.1, **overrides):
    """Build the :class:`ModelConfig` for a named family member (M1..M10)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
    source, position, aware, needs_unknown = VARIANTS[variant]
    if needs_unknown and not vocabulary.has_unknown:
        raise ConfigError(f"variant {variant} needs the unknown dialect in the vocabulary")
    cfg = ModelConfig(
        num_layers=num_layers,
        hidden=hidden,
        input_dim=input_dim,
        num_classes=num_classes,
        vocabulary=vocabulary,
        cond_source=source,
        cond_position=position,
        dialect_aware_input=aware,
        unknown_prob=unknown_prob if needs_unknown else 0.0,
        **overrides,
    )
    cfg.validate()
    return cfg


def parameter_shapes(config):
    """Ordered (name, shape) list of every trainable tensor.

    This single list drives initialization, the parameter count, and the
    model file layout, so the three can never disagree.
    """
    cfg = config
    shapes = []
    four_h = 4 * cfg.hidden
    for l in range(1, cfg.num_layers + 1):
        in_l = cfg.layer_input_width(l)
        shapes.append((f"layer{l}.w_x", (in_l, four_h)))
        shapes.append((f"layer{l}.w_h", (cfg.hidden, four_h)))
        shapes.append((f"layer{l}.b", (four_h,)))
        shapes.append((f"layer{l}.bn_gamma", (four_h,)))
        shapes.append((f"layer{l}.bn_beta", (four_h,)))
        shapes.append((f"layer{l}.lookahead", (cfg.lookahead_tau + 1, cfg.hidden)))
    shapes.append(("softmax.w", (cfg.hidden, cfg.num_classes)))
    shapes.append(("softmax.b", (cfg.num_classes,)))

    width = cfg.film_width
    d = cfg.vocabulary.size
    r = cfg.repr_units
    m = cfg.combiner_units
    if cfg.cond_source == "external":
        shapes += [
            ("cond.dialect_w", (d, r)), ("cond.dialect_b", (r,)),
            ("cond.combine_w", (r, m)), ("cond.combine_b", (m,)),
            ("cond.gamma_w", (m, cfg.num_layers * width)), ("cond.gamma_b", (cfg.num_layers * width,)),
            ("cond.beta_w", (m, cfg.num_layers * width)), ("cond.beta_b", (cfg.num_layers * width,)),
        ]
    elif cfg.cond_source in ("internal", "both"):
        branch = r // 2 if cfg.cond_source == "both" else r
        for l in range(1, cfg.num_layers + 1):
            summary_in = cfg.layer_input_width(1) if l == 1 else cfg.hidden
            if cfg.cond_source == "both":
                shapes += [(f"cond{l}.dialect_w", (d, branch)), (f"cond{l}.dialect_b", (branch,))]
            shapes += [
                (f"cond{l}.summary_w", (summary_in, branch)), (f"cond{l}.summary_b", (branch,)),
                (f"cond{l}.combine_w", (r, m)), (f"cond{l}.combine_b", (m,)),
                (f"cond{l}.gamma_w", (m, width)), (f"cond{l}.gamma_b", (width,)),
                (f"cond{l}.beta_w", (m, width)), (f"cond{l}.beta_b", (width,)),
            ]
    return shapes


def count_params(config):
    """Exact trainable parameter count for a configuration."""
    config.validate()
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(config))


@dataclass
class Model:
    config: ModelConfig
    params: ParamStore
    bn_states: list

    def lstm_params(self, layer):
        p = self.params
        return LstmLayerParams(
            w_x=p.value(f"layer{layer}.w_x"),
            w_h=p.value(f"layer{layer}.w_h"),
            b=p.value(f"layer{layer}.b"),
        )

    def lookahead_params(self, layer):
        return LookaheadParams(w=self.params.value(f"layer{layer}.lookahead"))

    def conditioning_weights(self, layer=None):
        """Generator weights: global for external, per 1-based layer otherwise."""
        p = self.params
        if self.config.cond_source == "external":
            return ConditioningWeights(
                w_d=p.value("cond.dialect_w"), b_d=p.value("cond.dialect_b"),
                w_c=p.value("cond.combine_w"), b_c=p.value("cond.combine_b"),
                w_gamma=p.value("cond.gamma_w"), b_gamma=p.value("cond.gamma_b"),
                w_beta=p.value("cond.beta_w"), b_beta=p.value("cond.beta_b"),
            )
        prefix = f"cond{layer}"
        kwargs = {}
        if self.config.cond_source == "both":
            kwargs = {"w_d": p.value(f"{prefix}.dialect_w"), "b_d": p.value(f"{prefix}.dialect_b")}
        return ConditioningWeights(
            w_s=p.value(f"{prefix}.summary_w"), b_s=p.value(f"{prefix}.summary_b"),
            w_c=p.value(f"{prefix}.combine_w"), b_c=p.value(f"{prefix}.combine_b"),
            w_gamma=p.value(f"{prefix}.gamma_w"), b_gamma=p.value(f"{prefix}.gamma_b"),
            w_beta=p.value(f"{prefix}.beta_w"), b_beta=p.value(f"{prefix}.beta_b"),
            **kwargs,
        )

    def film_parameters(self, dialect):
        """External-family :class:`FilmParams` for one dialect name."""
        if self.config.cond_source != "external":
            raise ConfigError("per-dialect film parameters exist only for external conditioning")
        onehot = self.config.vocabulary.one_hot(dialect)
        return cond.generate_external(
            onehot, self.conditioning_weights(), self.config.num_layers,
            self.config.film_width, position=self.config.cond_position)

    def clone(self):
        return copy.deepcopy(self)


# Near-identity modulation at step 0: internal/combined heads start at
# gamma = 1 exactly; the external heads are tanh-bounded below 1, so they
# start at tanh(atanh(0.75)) = 0.75.
EXTERNAL_GAMMA_INIT = 0.75
GENERATOR_HIDDEN_SCALE = 0.05


def build_model(config, seed):
    """Deterministically initialize a model; same (config, seed) gives
    byte-identical parameters."""
    config.validate()
    rng = Rng(seed)
    store = ParamStore()
    hid = config.hidden
    scale = 1.0 / np.sqrt(hid)
    for name, shape in parameter_shapes(config):
        kind = name.split(".", 1)[1]
        if kind in ("w_x", "w_h") or name == "softmax.w":
            store.add(name, rng.uniform(-scale, scale, shape))
        elif kind == "b":
            b = np.zeros(shape)
            b[hid:2 * hid] = 1.0  # forget-gate bias
            store.add(name, b)
        elif kind == "bn_gamma":
            store.add(name, np.ones(shape))
        elif kind == "lookahead":
            w = np.zeros(shape)
            w[0] = 1.0  # start as a passthrough over the current frame
            store.add(name, w)
        elif kind in ("dialect_w", "summary_w", "combine_w"):
            store.add(name, rng.uniform(-GENERATOR_HIDDEN_SCALE, GENERATOR_HIDDEN_SCALE, shape))
        elif kind == "gamma_b":
            init = np.arctanh(EXTERNAL_GAMMA_INIT) if config.cond_source == "external" else 1.0
            store.add(name, np.full(shape, init))
        else:
            # bn_beta, softmax.b, dialect_b, summary_b, combine_b, gamma_w,
            # beta_w, beta_b: all zero.
            store.add(name, np.zeros(shape))
    bn_states = [
        BatchNormState(
            gamma=store.value(f"layer{l}.bn_gamma"),
            beta=store.value(f"layer{l}.bn_beta"),
            running_mean=np.zeros(4 * hid),
            running_var=np.ones(4 * hid),
        )
        for l in range(1, config.num_layers + 1)
    ]
    return Model(config=config, params=store, bn_states=bn_states)


@dataclass
class _LayerCache:
    inputs: np.ndarray
    lstm: object
    lookahead: object
    lookahead_out: np.ndarray
    gamma: np.ndarray | None
    beta: np.ndarray | None
    summary: object | None
    generator: object | None


@dataclass
class ForwardResult:
    logits: np.ndarray
    layer_caches: list
    final_hidden: np.ndarray
    external_cache: object | None
    film: list
    mask: np.ndarray


def _batch_onehots(config, dialects, batch_size):
    if dialects is None:
        raise ConfigError("this model needs a dialect label for every utterance")
    if len(dialects) != batch_size:
        raise ConfigError(f"got {len(dialects)} dialect labels for a batch of {batch_size}")
    return config.vocabulary.one_hots(dialects)


def forward(model, batch, mode="infer", film_override=None):
    """Run the full stack on one padded batch.

    ``mode`` selects batch-norm behavior ("train" pools batch statistics and
    updates running buffers, "infer" uses running buffers only).
    ``film_override="identity"`` replaces every generated modulation with
    gamma=1, beta=0; it exists for identity checks and has no backward path.
    """
    cfg = model.config
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    frames = np.asarray(batch.frames, dtype=np.float64)
    mask = np.asarray(batch.mask, dtype=np.float64)
    bsz, steps, feat = frames.shape
    if feat != cfg.input_dim:
        raise ConfigError(f"feature width {feat} != configured input_dim {cfg.input_dim}")

    onehots = None
    if cfg.needs_dialect:
        onehots = _batch_onehots(cfg, batch.dialects, bsz)

    x = frames
    if cfg.dialect_aware_input:
        tiled = np.broadcast_to(onehots[:, None, :], (bsz, steps, cfg.vocabulary.size))
        x = np.concatenate([frames, tiled], axis=2)

    for state in model.bn_states:
        state.mode = mode

    ext_gammas = ext_betas = ext_cache = None
    if cfg.cond_source == "external":
        ext_gammas, ext_betas, ext_cache = cond.external_forward(
            onehots, model.conditioning_weights(), cfg.num_layers, cfg.film_width)

    caches = []
    film = []
    h = x
    identity = film_override == "identity"
    for l in range(1, cfg.num_layers + 1):
        gamma = beta = None
        summary_cache = gen_cache = None
        if cfg.conditioned:
            if cfg.cond_source == "external":
                gamma, beta = ext_gammas[l - 1], ext_betas[l - 1]
            else:
                w = model.conditioning_weights(l)
                a_s, summary_cache = cond.summarize_utterance(h, mask, w.w_s, w.b_s)
                if cfg.cond_source == "internal":
                    gamma, beta, gen_cache = cond.internal_forward(a_s, w)
                else:
                    gamma, beta, gen_cache = cond.combined_forward(onehots, a_s, w)
            if identity:
                gamma = np.ones_like(gamma)
                beta = np.zeros_like(beta)
        film_in = (gamma, beta) if (cfg.conditioned and cfg.cond_position == "input") else None
        hiddens, lstm_cache = lstm_forward(
            h, None, None, model.lstm_params(l), model.bn_states[l - 1], film=film_in, mask=mask)
        h_masked = hiddens * mask[:, :, None]
        la_out, la_cache = lookahead_forward(h_masked, model.lookahead_params(l))
        out = la_out
        if cfg.conditioned and cfg.cond_position == "output":
            out = apply_film(la_out, gamma, beta)
        caches.append(_LayerCache(
            inputs=h, lstm=lstm_cache, lookahead=la_cache, lookahead_out=la_out,
            gamma=gamma, beta=beta, summary=summary_cache, generator=gen_cache))
        film.append((gamma, beta))
        h = out

    logits = h @ model.params.value("softmax.w") + model.params.value("softmax.b")
    return ForwardResult(logits=logits, layer_caches=caches, final_hidden=h,
                         external_cache=ext_cache, film=film, mask=mask)


def softmax_cross_entropy(logits, labels, mask):
    """Mean cross-entropy over unpadded frames; returns (loss, dlogits).

    Labels must lie in [0, C) wherever the mask is set; padded label slots
    are ignored entirely.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=np.float64)
    num_classes = logits.shape[-1]
    valid = mask > 0
    picked_labels = np.where(valid, labels, 0)
    if picked_labels.min() < 0 or picked_labels.max() >= num_classes:
        bad = labels[valid]
        raise ValueError(f"label out of range [0, {num_classes}): {bad.min()}..{bad.max()}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=-1, keepdims=True)
    log_probs = shifted - np.log(total)
    n = mask.sum()
    if n == 0:
        raise ValueError("loss over an entirely padded batch")
    picked = np.take_along_axis(log_probs, picked_labels[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / n
    probs = exp / total
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, picked_labels[..., None], 1.0, axis=-1)
    dlogits = (probs - onehot) * mask[..., None] / n
    return float(loss), dlogits


def _backward(model, result, dlogits):
    cfg = model.config
    store = model.params
    store.accumulate("softmax.w", np.einsum("bth,btc->hc", result.final_hidden, dlogits))
    store.accumulate("softmax.b", dlogits.sum(axis=(0, 1)))
    d_out = dlogits @ store.value("softmax.w").T

    ext_dgammas = [None] * cfg.num_layers
    ext_dbetas = [None] * cfg.num_layers
    for l in range(cfg.num_layers, 0, -1):
        cache = result.layer_caches[l - 1]
        dgamma = dbeta = None
        if cfg.conditioned and cfg.cond_position == "output":
            d_la, dgamma, dbeta = film_backward(d_out, cache.lookahead_out, cache.gamma)
        else:
            d_la = d_out
        dh_masked, d_w_la = lookahead_backward(d_la, cache.lookahead)
        store.accumulate(f"layer{l}.lookahead", d_w_la)
        grads = lstm_layer_backward(dh_masked, cache.lstm)
        store.accumulate(f"layer{l}.w_x", grads.d_w_x)
        store.accumulate(f"layer{l}.w_h", grads.d_w_h)
        store.accumulate(f"layer{l}.b", grads.d_b)
        store.accumulate(f"layer{l}.bn_gamma", grads.d_bn_gamma)
        store.accumulate(f"layer{l}.bn_beta", grads.d_bn_beta)
        if cfg.conditioned and cfg.cond_position == "input":
            dgamma, dbeta = grads.d_film_gamma, grads.d_film_beta
        d_prev = grads.d_inputs
        if cfg.conditioned:
            if cfg.cond_source == "external":
                ext_dgammas[l - 1] = dgamma
                ext_dbetas[l - 1] = dbeta
            else:
                d_as, gen_grads = cond.layer_generator_backward(dgamma, dbeta, cache.generator)
                prefix = f"cond{l}"
                store.accumulate(f"{prefix}.combine_w", gen_grads.w_c)
                store.accumulate(f"{prefix}.combine_b", gen_grads.b_c)
                store.accumulate(f"{prefix}.gamma_w", gen_grads.w_gamma)
                store.accumulate(f"{prefix}.gamma_b", gen_grads.b_gamma)
                store.accumulate(f"{prefix}.beta_w", gen_grads.w_beta)
                store.accumulate(f"{prefix}.beta_b", gen_grads.b_beta)
                if gen_grads.w_d is not None:
                    store.accumulate(f"{prefix}.dialect_w", gen_grads.w_d)
                    store.accumulate(f"{prefix}.dialect_b", gen_grads.b_d)
                dh_summary, d_w_s, d_b_s = cond.summarize_backward(d_as, cache.summary)
                store.accumulate(f"{prefix}.summary_w", d_w_s)
                store.accumulate(f"{prefix}.summary_b", d_b_s)
                d_prev = d_prev + dh_summary
        d_out = d_prev

    if cfg.cond_source == "external":
        ext_grads = cond.external_backward(ext_dgammas, ext_dbetas, result.external_cache)
        store.accumulate("cond.dialect_w", ext_grads.w_d)
        store.accumulate("cond.dialect_b", ext_grads.b_d)
        store.accumulate("cond.combine_w", ext_grads.w_c)
        store.accumulate("cond.combine_b", ext_grads.b_c)
        store.accumulate("cond.gamma_w", ext_grads.w_gamma)
        store.accumulate("cond.gamma_b", ext_grads.b_gamma)
        store.accumulate("cond.beta_w", ext_grads.w_beta)
        store.accumulate("cond.beta_b", ext_grads.b_beta)
    # d_out now holds the gradient with respect to the network input
    # (including any one-hot concat columns); inputs are not trainable.


def loss_and_grads(model, batch):
    """Mean cross-entropy over unpadded frames plus a full backward pass.

    Zeroes the store's gradients, then populates every trainable entry,
    including the generator weights. Returns (loss, params).
    """
    model.params.zero_grads()
    result = forward(model, batch, mode="train")
    loss, dlogits = softmax_cross_entropy(result.logits, batch.labels, batch.mask)
    _backward(model, result, dlogits)
    return loss, model.params


# ---------------------------------------------------------------------------
# Model file format (version 1). Byte layout, all little-endian:
#   magic            8 bytes  b"DAMODEL1"
#   config length    u32
#   config           UTF-8 JSON (sorted keys, compact separators)
#   tensor count     u32
#   per tensor:      u16 name length, name UTF-8, u8 rank, rank * u32 dims,
#                    prod(dims) float64 values
# Tensors appear in ParamStore insertion order, followed by the per-layer
# batch-norm running statistics (layer{l}.bn_running_mean / _var).
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"DAMODEL1"


def _config_json(config):
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_tensor(buf, name, array):
    encoded = name.encode("utf-8")
    buf.append(struct.pack("<H", len(encoded)))
    buf.append(encoded)
    arr = np.ascontiguousarray(array, dtype="<f8")
    buf.append(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.append(struct.pack("<I", dim))
    buf.append(arr.tobytes())


def model_bytes(model):
    buf = [MODEL_MAGIC]
    cfg_json = _config_json(model.config)
    buf.append(struct.pack("<I", len(cfg_json)))
    buf.append(cfg_json)
    names = model.params.names()
    running = []
    for l, state in enumerate(model.bn_states, start=1):
        running.append((f"layer{l}.bn_running_mean", state.running_mean))
        running.append((f"layer{l}.bn_running_var", state.running_var))
    buf.append(struct.pack("<I", len(names) + len(running)))
    for name in names:
        _pack_tensor(buf, name, model.params.value(name))
    for name, arr in running:
        _pack_tensor(buf, name, arr)
    return b"".join(buf)


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


class ModelFormatError(ValueError):
    pass


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise ModelFormatError(f"truncated model file while reading {what}")
    return data


def load_model(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(MODEL_MAGIC), "magic")
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"bad magic {magic!r}; not a model file")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            cfg_dict = json.loads(_read_exact(fh, cfg_len, "config").decode("utf-8"))
            config = ModelConfig.from_dict(cfg_dict)
        except (ValueError, KeyError, TypeError) as exc:
            raise ModelFormatError(f"bad model config: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        order = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * size, f"values of {name}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
            if not np.isfinite(arr).all():
                raise ModelFormatError(f"non-finite values in tensor {name!r}")
            tensors[name] = arr
            order.append(name)
        if fh.read(1):
            raise ModelFormatError("trailing bytes after the last tensor")

    expected = [name for name, _ in parameter_shapes(config)]
    running_names = []
    for l in range(1, config.num_layers + 1):
        running_names += [f"layer{l}.bn_running_mean", f"layer{l}.bn_running_var"]
    if order != expected + running_names:
        raise ModelFormatError("model file tensor list does not match the configuration")
    for name, shape in parameter_shapes(config):
        if tensors[name].shape != shape:
            raise ModelFormatError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")

    store = ParamStore()
    for name in expected:
        store.add(name, tensors[name])
    bn_states = []
    for l in range(1, config.num_layers + 1):
        var = tensors[f"layer{l}.bn_running_var"]
        if np.any(var < 0):
            raise ModelFormatError(f"negative running variance in layer {l}")
        bn_states.append(BatchNormState(
            gamma=store.value(f"layer{l}.bn_gamma"),
            beta=store.value(f"layer{l}.bn_beta"),
            running_mean=tensors[f"layer{l}.bn_running_mean"].copy(),
            running_var=var.copy(),
        ))
    return Model(config=config, params=store, bn_states=bn_states)
