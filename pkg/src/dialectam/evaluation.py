"""Frame error metrics, the ten-variant comparison harness, and the
modulation-vector dump with its cluster-separation score.

The harness trains the dialect-unaware baseline, derives per-dialect models
from it by fine-tuning, trains the remaining variants, and evaluates all of
them on a test set that includes one dialect absent from training. Held-out
utterances are fed the native label to every model except the one trained
with unknown-dialect relabeling, which uses its reserved unknown entry.
Error counts are accumulated across seeds, so every overall number stays an
exact frame-weighted mean of the per-dialect numbers.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .conditioning import UNKNOWN_DIALECT, DialectVocabulary
from .data import batch_iterator
from .model import build_model, count_params, forward, variant_config
from .training import TrainConfig, TrainingDiverged, fine_tune, train

__all__ = [
    "EvalReport",
    "EvalRow",
    "FerTable",
    "FilmDump",
    "SuiteConfig",
    "cluster_score",
    "compare_suite",
    "dump_film",
    "frame_error_rate",
    "load_film_dump",
    "save_film_dump",
]

POLICIES = ("true", "native-fallback", "unknown-fallback")


@dataclass
class FerTable:
    """Frame error counts keyed by the utterance's true dialect."""

    errors: dict = field(default_factory=dict)
    frames: dict = field(default_factory=dict)

    def record(self, dialect, errors, frames):
        self.errors[dialect] = self.errors.get(dialect, 0) + int(errors)
        self.frames[dialect] = self.frames.get(dialect, 0) + int(frames)

    def merge(self, other):
        for name in other.frames:
            self.record(name, other.errors[name], other.frames[name])

    def dialects(self):
        return sorted(self.frames)

    def fer(self, dialect):
        return self.errors[dialect] / self.frames[dialect]

    def overall(self, exclude=()):
        err = sum(e for d, e in self.errors.items() if d not in exclude)
        tot = sum(f for d, f in self.frames.items() if d not in exclude)
        if tot == 0:
            raise ValueError("no frames left after exclusions")
        return err / tot


def _policy_label(policy, fallback, vocabulary, dialect):
    if dialect in vocabulary.names:
        return dialect
    if policy == "true":
        return dialect  # the vocabulary lookup downstream reports the error
    if policy == "native-fallback":
        if fallback is None:
            raise ValueError("native-fallback policy needs a fallback dialect")
        return fallback
    if policy == "unknown-fallback":
        return UNKNOWN_DIALECT
    raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")


def frame_error_rate(model, dataset, policy="true", fallback=None, batch_size=64):
    """Per-dialect frame error of ``model`` on ``dataset`` (inference mode).

    ``policy`` decides which dialect label is fed to the model for
    utterances whose dialect is missing from the model's vocabulary.
    """
    if dataset.num_classes != model.config.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model expects "
                         f"{model.config.num_classes}")
    fed = [_policy_label(policy, fallback, model.config.vocabulary, u.dialect)
           for u in dataset]
    table = FerTable()
    for batch in batch_iterator(dataset, batch_size, dialect_overrides=fed):
        result = forward(model, batch, mode="infer")
        pred = result.logits.argmax(axis=-1)
        wrong = (pred != batch.labels) & (batch.mask > 0)
        for row, idx in enumerate(batch.indices):
            table.record(dataset[idx].dialect, wrong[row].sum(), batch.mask[row].sum())
    return table


# ---------------------------------------------------------------------------
# The ten-variant comparison harness.
# ---------------------------------------------------------------------------

VARIANT_ORDER = ["M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8", "M9", "M10"]
VARIANT_LABELS = {
    "M1": "dialect-unaware",
    "M2": "dialect-specific (fine-tuned)",
    "M3": "dialect-aware input",
    "M4": "cond. dialect info @ input",
    "M5": "cond. utterance summary @ input",
    "M6": "cond. both @ input",
    "M7": "cond. dialect info @ output",
    "M8": "cond. utterance summary @ output",
    "M9": "cond. both @ output",
    "M10": "cond. both @ output + unknown dialect",
}


@dataclass
class SuiteConfig:
    """Geometry and training settings shared by every suite member.

    The training defaults here are the tuned desk-scale settings (notably a
    3e-3 rate, which converges in roughly a quarter of the epochs the
    library's 1e-3 default needs on the synthetic bundle).
    """

    num_layers: int = 2
    hidden: int = 16
    lookahead_tau: int = 2
    repr_units: int = 32
    combiner_units: int = 32
    unknown_prob: float = 0.1
    native: str = "native"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-3, max_epochs=20))
    fine_tune_epochs: int = 4
    fine_tune_lr_scale: float = 0.1
    eval_batch: int = 64


@dataclass
class EvalRow:
    variant: str
    description: str
    param_count: int
    table: FerTable = field(default_factory=FerTable)
    failed: str | None = None

    def fer(self, dialect):
        if self.failed or dialect not in self.table.frames:
            return float("nan")
        return self.table.fer(dialect)

    def overall(self, exclude=()):
        if self.failed:
            return float("nan")
        return self.table.overall(exclude)


@dataclass
class EvalReport:
    rows: list
    dialect_order: list
    held_out: str

    def row(self, variant):
        for row in self.rows:
            if row.variant == variant:
                return row
        raise KeyError(variant)

    def to_dict(self):
        out = {"held_out": self.held_out, "dialects": self.dialect_order, "rows": []}
        for row in self.rows:
            out["rows"].append({
                "variant": row.variant,
                "description": row.description,
                "param_count": row.param_count,
                "failed": row.failed,
                "per_dialect": {d: row.fer(d) for d in self.dialect_order},
                "overall_excl_held_out": row.overall(exclude=(self.held_out,)),
                "overall_incl_held_out": row.overall(),
            })
        return out

    def to_text(self):
        headers = (["variant", "size"] + self.dialect_order
                   + [f"-{self.held_out}", f"+{self.held_out}"])
        lines = [headers]
        for row in self.rows:
            cells = [row.variant, str(row.param_count)]
            cells += [f"{100 * row.fer(d):.2f}" for d in self.dialect_order]
            cells.append(f"{100 * row.overall(exclude=(self.held_out,)):.2f}")
            cells.append(f"{100 * row.overall():.2f}")
            if row.failed:
                cells[2:] = ["FAILED"] * (len(cells) - 2)
            lines.append(cells)
        widths = [max(len(line[i]) for line in lines) for i in range(len(headers))]
        rendered = ["  ".join(cell.rjust(w) for cell, w in zip(line, widths)) for line in lines]
        rendered.insert(1, "-" * len(rendered[0]))
        return "\n".join(rendered) + "\n"


def _suite_model_config(suite, variant, vocabulary, input_dim, num_classes):
    return variant_config(
        variant, vocabulary, input_dim=input_dim, num_classes=num_classes,
        hidden=suite.hidden, num_layers=suite.num_layers,
        unknown_prob=suite.unknown_prob,
        lookahead_tau=suite.lookahead_tau, repr_units=suite.repr_units,
        combiner_units=suite.combiner_units,
    )


def _eval_policy(variant):
    if variant == "M10":
        return "unknown-fallback"
    return "native-fallback"


def _run_standard_variant(args):
    """Train one non-M2 variant for one seed and evaluate it on the test set."""
    variant, seed, suite, bundle, vocab_names = args
    vocabulary = DialectVocabulary(tuple(vocab_names))
    train_set, dev_set, test_set = bundle["train"], bundle["dev"], bundle["test"]
    cfg = _suite_model_config(suite, variant, vocabulary,
                              train_set.feature_dim, train_set.num_classes)
    tcfg = replace(suite.train, seed=seed)
    model = build_model(cfg, seed=seed)
    model, _ = train(model, train_set, dev_set, tcfg)
    table = frame_error_rate(model, test_set, policy=_eval_policy(variant),
                             fallback=suite.native, batch_size=suite.eval_batch)
    return variant, seed, table, model


def _run_m2(m1_model, seed, suite, bundle):
    """Fine-tune the trained baseline per dialect and evaluate each test
    dialect with its own model; held-out utterances use the native model."""
    train_set, dev_set, test_set = bundle["train"], bundle["dev"], bundle["test"]
    ft_cfg = replace(suite.train, seed=seed, max_epochs=suite.fine_tune_epochs)
    specific = {}
    for dialect in train_set.dialects():
        specific[dialect], _ = fine_tune(
            m1_model, train_set.filter_dialect(dialect), dev_set.filter_dialect(dialect),
            ft_cfg, lr_scale=suite.fine_tune_lr_scale)
    table = FerTable()
    for dialect in test_set.dialects():
        member = specific.get(dialect, specific[suite.native])
        table.merge(frame_error_rate(member, test_set.filter_dialect(dialect),
                                     policy="true", batch_size=suite.eval_batch))
    return table


def compare_suite(bundle, suite, seeds, jobs=1, keep_variants=()):
    """Train and evaluate all ten variants, averaged over ``seeds``.

    Returns (report, kept) where ``kept[variant][seed]`` holds the trained
    models requested via ``keep_variants``. A diverging member marks its row
    as failed and the suite continues. Rows are assembled in variant order
    regardless of scheduling, so results do not depend on ``jobs``.
    """
    train_set, test_set = bundle["train"], bundle["test"]
    train_names = train_set.dialects()
    held = [d for d in test_set.dialects() if d not in train_names]
    if len(held) != 1:
        raise ValueError(f"expected exactly one held-out dialect in the test set, found {held}")
    held_out = held[0]
    if suite.native not in train_names:
        raise ValueError(f"native dialect {suite.native!r} missing from the training set")
    vocab = DialectVocabulary.of(train_names)
    vocab_u = DialectVocabulary.of(train_names, include_unknown=True)

    rows = {}
    for variant in VARIANT_ORDER:
        names = vocab_u.names if variant == "M10" else vocab.names
        cfg = _suite_model_config(suite, variant, DialectVocabulary(names),
                                  train_set.feature_dim, train_set.num_classes)
        rows[variant] = EvalRow(variant=variant, description=VARIANT_LABELS[variant],
                                param_count=count_params(cfg))

    kept = {v: {} for v in keep_variants}
    m1_models = {}

    tasks = []
    for seed in seeds:
        for variant in VARIANT_ORDER:
            if variant == "M2":
                continue
            names = vocab_u.names if variant == "M10" else vocab.names
            tasks.append((variant, seed, suite, bundle, list(names)))

    def consume(variant, seed, table, model):
        rows[variant].table.merge(table)
        if variant == "M1":
            m1_models[seed] = model
        if variant in kept:
            kept[variant][seed] = model

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(task, pool.submit(_run_standard_variant, task)) for task in tasks]
            for task, future in futures:
                try:
                    consume(*future.result())
                except TrainingDiverged as exc:
                    rows[task[0]].failed = str(exc)
    else:
        for task in tasks:
            try:
                consume(*_run_standard_variant(task))
            except TrainingDiverged as exc:
                rows[task[0]].failed = str(exc)

    for seed in seeds:
        if rows["M2"].failed:
            break
        if seed not in m1_models:
            rows["M2"].failed = rows["M1"].failed or "baseline model unavailable"
            break
        try:
            rows["M2"].table.merge(_run_m2(m1_models[seed], seed, suite, bundle))
        except TrainingDiverged as exc:
            rows["M2"].failed = str(exc)

    dialect_order = [d for d in test_set.dialects() if d != held_out] + [held_out]
    report = EvalReport(rows=[rows[v] for v in VARIANT_ORDER],
                        dialect_order=dialect_order, held_out=held_out)
    return report, kept


# ---------------------------------------------------------------------------
# Modulation dumps and the cluster-separation score.
# ---------------------------------------------------------------------------

@dataclass
class FilmDump:
    """Per utterance: the true dialect and one concatenated (gamma, beta)
    vector per layer."""

    ids: list
    dialects: list
    vectors: list  # vectors[i][l] is layer l+1's concat vector for record i

    @property
    def num_layers(self):
        return len(self.vectors[0]) if self.vectors else 0


def dump_film(model, dataset, batch_size=64, policy="true", fallback=None):
    """Collect every utterance's generated modulation vectors, layer by layer."""
    if not model.config.conditioned:
        raise ValueError("cannot dump modulation vectors from an unconditioned model")
    fed = [_policy_label(policy, fallback, model.config.vocabulary, u.dialect)
           for u in dataset]
    ids, dialects, vectors = [], [], []
    for batch in batch_iterator(dataset, batch_size, dialect_overrides=fed):
        result = forward(model, batch, mode="infer")
        for row, idx in enumerate(batch.indices):
            per_layer = [np.concatenate([gamma[row], beta[row]])
                         for gamma, beta in result.film]
            ids.append(dataset[idx].utt_id)
            dialects.append(dataset[idx].dialect)
            vectors.append(per_layer)
    return FilmDump(ids=ids, dialects=dialects, vectors=vectors)


def save_film_dump(dump, path):
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(dump.ids)):
            rec = {"id": dump.ids[i], "dialect": dump.dialects[i],
                   "film": [v.tolist() for v in dump.vectors[i]]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_film_dump(path):
    ids, dialects, vectors = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(rec["id"])
                dialects.append(rec["dialect"])
                vectors.append([np.asarray(v, dtype=np.float64) for v in rec["film"]])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"line {line_no}: malformed dump record: {exc}") from exc
    return FilmDump(ids=ids, dialects=dialects, vectors=vectors)


def cluster_score(dump, layer):
    """Mean silhouette coefficient of one layer's vectors grouped by dialect.

    Euclidean distance; the degenerate 0/0 case (a point equidistant from
    its own and the nearest other cluster) scores 0. Requires at least two
    dialects and at least two records per dialect.
    """
    if not 1 <= layer <= dump.num_layers:
        raise ValueError(f"layer must lie in [1, {dump.num_layers}]")
    points = np.stack([vec[layer - 1] for vec in dump.vectors])
    labels = np.asarray(dump.dialects)
    names, counts = np.unique(labels, return_counts=True)
    if len(names) < 2:
        raise ValueError("silhouette needs at least two dialects")
    for name, count in zip(names, counts):
        if count < 2:
            raise ValueError(f"dialect {name!r} has a single record")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    scores = np.empty(len(points))
    for i in range(len(points)):
        same = labels == labels[i]
        a = dist[i, same].sum() / (same.sum() - 1)
        b = min(dist[i, labels == other].mean() for other in names if other != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())
