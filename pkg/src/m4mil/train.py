"""Optimisation loop, rank-based AUC, cross-validation, gradient checks.

Training follows a batch-size-1 protocol: one forward/backward/update
per bag, bags reshuffled every epoch from the run seed. The optimiser
is Adam with the standard bias-corrected moments; parameter tensors
whose gradient is absent (None) are skipped entirely, so an update with
no gradients is a no-op for any optimiser state.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import layers
from . import model as model_mod
from .autodiff import Tensor
from .data import Bag, make_fold_split
from .errors import AUCUndefinedError, ConfigError, ShapeError, TrainingDivergedError
from .model import M4Model, ModelConfig


class Adam:
    """Bias-corrected adaptive-moment optimiser over a list of tensors.

    Parameter storage is repacked into one flat buffer (each tensor's
    ``values`` becomes a view into it), so moments and updates are a
    handful of vectorised numpy calls instead of ten per tensor.
    Tensors whose gradient is None are skipped: their values and
    moments stay untouched whatever the optimiser state.
    """

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        spans = []
        offset = 0
        for p in self.params:
            spans.append((offset, offset + p.size))
            offset += p.size
        self.spans = spans
        self.theta = np.empty(offset)
        for p, (a, b) in zip(self.params, spans):
            self.theta[a:b] = p.values.reshape(-1)
            p.values = self.theta[a:b].reshape(p.values.shape)
        self.m = np.zeros(offset)
        self.v = np.zeros(offset)
        self._grad = np.empty(offset)

    def step(self) -> None:
        """One update; advances the step counter even when nothing moves."""
        self.t += 1
        g = self._grad
        skipped = []
        for p, (a, b) in zip(self.params, self.spans):
            if p.grad is None:
                skipped.append((a, b, self.m[a:b].copy(), self.v[a:b].copy()))
                g[a:b] = 0.0
            else:
                if p.grad.shape != p.values.shape:
                    raise ShapeError(
                        f"gradient shape {p.grad.shape} does not match parameter {p.values.shape}"
                    )
                g[a:b] = p.grad.reshape(-1)
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        delta = (self.lr / correction1) * self.m / (np.sqrt(self.v / correction2) + self.eps)
        for a, b, m_prev, v_prev in skipped:
            self.m[a:b] = m_prev
            self.v[a:b] = v_prev
            delta[a:b] = 0.0
        self.theta -= delta

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 30
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")


def train(model: M4Model, bags: list[Bag], config: TrainConfig) -> list[float]:
    """Fit ``model`` in place; returns the per-epoch mean loss trajectory.

    Bags whose labels are entirely missing are skipped. A non-finite
    loss aborts immediately with the epoch and bag id.
    """
    usable = [b for b in bags if b.labels is not None and b.label_mask.any()]
    if not usable:
        raise ConfigError("training set is empty (or every bag is unlabelled)")
    rng = np.random.default_rng(config.seed)
    optimiser = Adam(model.parameters(), lr=config.lr)
    trajectory = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(usable)) if config.shuffle else np.arange(len(usable))
        total = 0.0
        for i in order:
            bag = usable[i]
            loss = model_mod.multi_task_loss(model_mod.forward(model, bag), bag.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, bag.id, value)
            loss.backward()
            optimiser.step()
            optimiser.zero_grad()
            total += value
        trajectory.append(total / len(usable))
    return trajectory


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties half.

    Computed from tied ranks: (sum of positive ranks - P(P+1)/2) / (P*Q),
    which equals brute-force pair counting with half credit for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores and labels must be equal-length vectors, got {scores.shape} and {labels.shape}")
    positives = int(np.sum(labels == 1))
    negatives = int(np.sum(labels == 0))
    if positives == 0 or negatives == 0:
        raise AUCUndefinedError(
            f"AUC needs both classes, got {positives} positives and {negatives} negatives"
        )
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    average_rank = starts + (counts + 1) / 2.0  # 1-based average rank per tied group
    ranks = average_rank[inverse]
    positive_rank_sum = float(ranks[labels == 1].sum())
    return (positive_rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives)


def score_bags(model: M4Model, bags: list[Bag]) -> np.ndarray:
    """Per-task probabilities for every bag, evaluated without recording."""
    probs = np.empty((len(bags), model.config.tasks))
    with ad.no_grad():
        for i, bag in enumerate(bags):
            probs[i] = model_mod.forward(model, bag).probs
    return probs


def evaluate(model: M4Model, bags: list[Bag]) -> np.ndarray:
    """Per-task AUC over labelled bags; NaN where a class is missing."""
    probs = score_bags(model, bags)
    labels = np.array([b.labels for b in bags])
    out = np.full(model.config.tasks, np.nan)
    for t in range(model.config.tasks):
        mask = ~np.isnan(labels[:, t])
        try:
            out[t] = auc(probs[mask, t], labels[mask, t])
        except AUCUndefinedError:
            pass  # reported as skipped
    return out


@dataclass
class EvalReport:
    """Per-task AUC for each fold plus aggregates.

    ``fold_aucs`` is folds x tasks with NaN marking a task whose
    evaluation split lacked one of the classes; such tasks are excluded
    from ``mean_auc``.
    """

    task_names: list[str]
    fold_aucs: np.ndarray
    counts: list[tuple[int, int]] = field(default_factory=list)

    @property
    def mean_per_task(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.fold_aucs, axis=0)

    @property
    def mean_auc(self) -> float:
        per_task = self.mean_per_task
        valid = ~np.isnan(per_task)
        if not valid.any():
            return float("nan")
        return float(per_task[valid].mean())

    def to_csv(self, path) -> None:
        k = self.fold_aucs.shape[0]
        with open(path, "w", newline="") as fh:
            fh.write("task," + ",".join(f"fold{i + 1}" for i in range(k)) + ",mean\n")
            for t, name in enumerate(self.task_names):
                cells = [_format_auc(self.fold_aucs[f, t]) for f in range(k)]
                cells.append(_format_auc(self.mean_per_task[t]))
                fh.write(name + "," + ",".join(cells) + "\n")


def _format_auc(value: float) -> str:
    return "" if np.isnan(value) else format(value, ".10g")


def read_report(path) -> tuple[list[str], np.ndarray]:
    """Parse a report written by ``EvalReport.to_csv``: names and fold columns."""
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split(",")
    names, rows = [], []
    for line in lines[1:]:
        cells = line.split(",")
        names.append(cells[0])
        rows.append([float(c) if c else float("nan") for c in cells[1:]])
    values = np.array(rows)
    if values.shape[1] != len(header) - 1:
        raise ConfigError(f"{path}: ragged report table")
    return names, values


def cross_validate(
    bags: list[Bag],
    task_names: list[str],
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 5,
    workers: int = 1,
    return_models: bool = False,
):
    """Hold out a 4:1 test set, train k fold models, evaluate each on it.

    Fold i trains on every training fold except fold i, with model and
    shuffle seeds derived as base seed + fold index, so folds are
    independent and may run in parallel. ``k=1`` degenerates to the
    plain protocol: one model trained on the whole training split. With
    ``return_models`` the trained fold models come back alongside the
    report.
    """
    by_id = {b.id: b for b in bags}
    split = make_fold_split([b.id for b in bags], k=k, seed=train_config.seed)
    test_bags = [by_id[i] for i in split.test_ids]

    def run_fold(fold_index: int) -> tuple[np.ndarray, M4Model]:
        if k == 1:
            train_ids = list(split.folds[0])
        else:
            train_ids = [
                bag_id
                for j, fold in enumerate(split.folds)
                if j != fold_index
                for bag_id in fold
            ]
        fold_model = model_mod.build(replace(model_config, seed=model_config.seed + fold_index))
        fold_cfg = replace(train_config, seed=train_config.seed + fold_index)
        train(fold_model, [by_id[i] for i in train_ids], fold_cfg)
        return evaluate(fold_model, test_bags), fold_model

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_fold, range(k)))
    else:
        results = [run_fold(i) for i in range(k)]
    fold_aucs = np.array([aucs for aucs, _ in results])
    models = [m for _, m in results]

    labels = np.array([b.labels for b in test_bags])
    counts = [
        (int(np.sum(labels[:, t] == 1)), int(np.sum(labels[:, t] == 0)))
        for t in range(len(task_names))
    ]
    report = EvalReport(task_names=list(task_names), fold_aucs=fold_aucs, counts=counts)
    if return_models:
        return report, models
    return report


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _check_gradients(name, make_scalar, tensors, h, tol, corrupt) -> CheckResult:
    for t in tensors:
        t.zero_grad()
    make_scalar().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        if corrupt:
            analytic = analytic * 1.01
        numeric = ad.finite_diff_grad(lambda _: make_scalar(), t, h=h).values
        worst = max(worst, ad.max_relative_error(analytic, numeric))
    for t in tensors:
        t.zero_grad()
    return CheckResult(name=name, max_rel_err=worst, tol=tol)


def gradcheck_suite(
    config: ModelConfig,
    n_patches: int = 10,
    h: float = 1e-5,
    tol: float = 1e-4,
    corrupt: bool = False,
) -> list[CheckResult]:
    """Finite-difference comparison for every layer and model variant.

    Runs at the dimensions in ``config`` (desk scale is the intended
    regime). ``corrupt`` scales each analytic gradient by 1.01 before
    comparing, as a sensitivity probe of the checker itself; with it the
    suite must fail.
    """
    rng = np.random.default_rng(config.seed + 97)
    checks: list[CheckResult] = []

    def bag(n):
        return Tensor(rng.uniform(-1, 1, (n, config.d)))

    def run(name, make_scalar, tensors):
        checks.append(_check_gradients(name, make_scalar, tensors, h, tol, corrupt))

    def projected(layer_fn):
        pooled, attn = layer_fn()
        p1 = Tensor(rng.uniform(-1, 1, pooled.shape))
        p2 = Tensor(rng.uniform(-1, 1, attn.shape))
        return lambda: (lambda out: ad.sum_all(out[0] * p1) + ad.sum_all(out[1] * p2))(layer_fn())

    h_small = bag(n_patches)
    attn_params = layers.init_gated_attention(rng, config.d_f, config.attn_width)
    embedded = Tensor(rng.uniform(-1, 1, (n_patches, config.d_f)))
    run(
        "layer:gated_attention_pool",
        projected(lambda: layers.gated_attention_pool(embedded, attn_params)),
        [t for _, t in attn_params.named_parameters("p")],
    )

    amil = layers.init_amil(rng, config.d, config.d_f, config.attn_width)
    run(
        "layer:amil_forward",
        projected(lambda: layers.amil_forward(h_small, amil)),
        [t for _, t in amil.named_parameters("p")],
    )

    mp = layers.init_mp_amil(rng, config.d, config.d_f, config.attn_width)
    run(
        "layer:mp_amil_forward[preserve]",
        projected(lambda: layers.mp_amil_forward(h_small, mp, "preserve")),
        [t for _, t in mp.named_parameters("p")],
    )
    h_literal = bag(max(n_patches, 25))  # the 7x7 literal branch needs a 5x5 grid
    mp_lit = layers.init_mp_amil(rng, config.d, config.d_f, config.attn_width)
    run(
        "layer:mp_amil_forward[literal]",
        projected(lambda: layers.mp_amil_forward(h_literal, mp_lit, "literal")),
        [t for _, t in mp_lit.named_parameters("p")],
    )

    gate = layers.init_mp_gate(rng, config.d, config.d_1, config.experts)
    gate_proj = Tensor(rng.uniform(-1, 1, (layers.SEGMENTS, config.experts)))
    run(
        "layer:mp_gate_forward",
        lambda: ad.sum_all(layers.mp_gate_forward(h_small, gate) * gate_proj),
        [t for _, t in gate.named_parameters("p")],
    )

    simple = layers.init_simple_gate(rng, config.d, config.experts)
    simple_proj = Tensor(rng.uniform(-1, 1, (1, config.experts)))
    run(
        "layer:simple_gate_forward",
        lambda: ad.sum_all(layers.simple_gate_forward(h_small, simple) * simple_proj),
        [simple],
    )

    tower = layers.init_tower(rng, config.d_f, config.tower_hidden)
    pooled_in = Tensor(rng.uniform(-1, 1, (1, config.d_f)))
    run(
        "layer:tower_forward",
        lambda: layers.tower_forward(pooled_in, tower),
        [t for _, t in tower.named_parameters("p")],
    )

    pool_towers = [layers.init_tower(rng, config.d, config.tower_hidden) for _ in range(2)]
    pool_tensors = [t for tw in pool_towers for _, t in tw.named_parameters("p")]
    run(
        "layer:mean_pool_head",
        lambda: ad.sum_all(ad.concat_rows(layers.mean_pool_head(h_small, pool_towers))),
        pool_tensors,
    )
    run(
        "layer:max_pool_head",
        lambda: ad.sum_all(ad.concat_rows(layers.max_pool_head(h_small, pool_towers))),
        pool_tensors,
    )

    conv_x = Tensor(rng.uniform(-1, 1, (5, 5, 2)), requires_grad=True)
    conv_k = Tensor(rng.uniform(-1, 1, (3, 3, 2)), requires_grad=True)
    conv_p = Tensor(rng.uniform(-1, 1, (2, 2)), requires_grad=True)
    conv_proj = Tensor(rng.uniform(-1, 1, (5, 5, 2)))
    run(
        "op:depthwise_separable_conv2d",
        lambda: ad.sum_all(
            ad.depthwise_separable_conv2d(conv_x, conv_k, conv_p, 1, 1) * conv_proj
        ),
        [conv_x, conv_k, conv_p],
    )

    feats = rng.uniform(-1, 1, (n_patches, config.d))
    labels = np.tile([1.0, 0.0], (config.tasks + 1) // 2)[: config.tasks]
    for variant in model_mod.VARIANTS:
        variant_model = model_mod.build(replace(config, variant=variant))
        run(
            f"variant:{variant}",
            lambda m=variant_model: model_mod.multi_task_loss(
                model_mod.forward(m, feats), labels
            ),
            variant_model.parameters(),
        )

    return checks
