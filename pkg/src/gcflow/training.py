"""Full-batch training loop, optimizer, and the model-kind dispatcher.

One entry point, ``train``, covers every model kind: the graph classifier,
the plain row-wise flow, the graph-convolutional flow with fixed or
parameterized mixing, and the two EM-mixture references fitted on raw or
pre-mixed features. Everything stochastic draws from a single generator
seeded by the run seed, so a repeated run reproduces its metrics exactly.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import evalkit
from .adjparam import (
    DEFAULT_DAMPING,
    DEFAULT_STRETCH_HI,
    DEFAULT_STRETCH_LO,
    DEFAULT_TEMPERATURE,
    AttentionAdjacency,
    ConcreteAdjacency,
)
from .baselines import (
    GCN_DROPOUT,
    GCN_HIDDEN,
    EmGmm,
    GcnModel,
    component_class_mapping,
    em_fit,
    gcn_forward,
    gcn_loss,
    gcn_predict,
)
from .data import Dataset, apply_pca_reduction
from .errors import ConfigError, DivergedError, DomainError, SingularMatrixError
from .evalkit import PcaProjection, kmeans, micro_f1, pca_apply, silhouette
from .flows import build_gcflow
from .graphs import normalize_row, normalize_sym
from .mixture import (
    LossConfig,
    MixtureHead,
    init_means_from_labels,
    predict,
    semi_supervised_loss,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 50.0
RESCUE_DAMPING = 1e-3
FLOW_HIDDEN = 64

MODEL_KINDS = ("gcn", "flowgmm", "gcflow", "gcflow-p", "gcflow-l", "gmm-x", "gmm-ax")
FLOW_KINDS = ("flowgmm", "gcflow", "gcflow-p", "gcflow-l")
GMM_KINDS = ("gmm-x", "gmm-ax")


# -- optimizer ----------------------------------------------------------


class AdamState:
    """Adam moments for a fixed parameter list, with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay=0.0,
                 beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        if lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]


def adam_step(state: AdamState):
    """One update from the gradients currently stored on the parameters.

    Weight decay multiplies the parameter directly (it never enters the
    moments), then the bias-corrected moment ratio is applied.
    """
    state.steps += 1
    t = state.steps
    correct1 = 1.0 - state.beta1 ** t
    correct2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        np.copyto(m, state.beta1 * m + (1.0 - state.beta1) * g)
        np.copyto(v, state.beta2 * v + (1.0 - state.beta2) * g * g)
        p.data -= state.lr * (m / correct1) / (np.sqrt(v / correct2) + state.eps)


def clip_gradients(params, threshold=CLIP_NORM):
    """Scale all gradients so their joint L2 norm is at most the threshold.

    Returns the norm measured before clipping.
    """
    if threshold <= 0.0:
        raise ConfigError(f"clip threshold must be positive, got {threshold}")
    total = np.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if total > threshold:
        scale = threshold / total
        for p in params:
            p.grad *= scale
    return total


# -- configuration and run record ---------------------------------------


@dataclass
class TrainConfig:
    model: str = "gcflow"
    num_flows: int = 2
    couplings: int = 1
    net_layers: int = 2
    hidden: int | None = None  # None picks the kind's default width
    dropout: float | None = None
    unlabeled_weight: float = 0.5
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 400
    clip: float = CLIP_NORM
    patience: int = 50
    seed: int = 0
    pca_dim: int | None = None
    adjacency: str = "row"
    damping: float = 0.0
    learn_weights: bool = False
    label_init_means: bool = True
    mean_lo: float = 0.5  # smallest component-mean scalar at init
    mean_hi: float = 10.0
    log_std_init: float = 0.0
    embed_dim: int = 16
    temperature: float = DEFAULT_TEMPERATURE
    stretch_lo: float = DEFAULT_STRETCH_LO
    stretch_hi: float = DEFAULT_STRETCH_HI

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}, expected one of {MODEL_KINDS}")
        if self.model in FLOW_KINDS and not (0.0 < self.unlabeled_weight < 1.0):
            raise ConfigError(
                f"unlabeled weight must lie strictly inside (0, 1) for flow models, "
                f"got {self.unlabeled_weight}"
            )
        if self.adjacency not in ("row", "sym"):
            raise ConfigError(f"adjacency scheme must be 'row' or 'sym', got {self.adjacency!r}")
        if self.epochs < 1 or self.patience < 1:
            raise ConfigError("epochs and patience must both be at least 1")
        if self.lr <= 0.0 or self.clip <= 0.0:
            raise ConfigError("learning rate and clip threshold must be positive")
        if self.num_flows < 1 or self.couplings < 1 or self.net_layers < 1:
            raise ConfigError("flow depth settings must be at least 1")
        if self.mean_hi < self.mean_lo:
            raise ConfigError("component mean range is inverted")

    @property
    def resolved_hidden(self):
        if self.hidden is not None:
            return self.hidden
        return GCN_HIDDEN if self.model == "gcn" else FLOW_HIDDEN

    @property
    def resolved_dropout(self):
        if self.dropout is not None:
            return self.dropout
        return GCN_DROPOUT if self.model == "gcn" else 0.0


@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs_run: int
    losses: list
    val_f1s: list
    test_micro_f1: float
    silhouette_kmeans: float
    silhouette_truth: float
    nmi: float
    ari: float
    wall_seconds: float
    checkpoint_path: str | None = None

    def metrics_dict(self):
        """The stable serialization schema for a finished run."""
        return {
            "config": self.config,
            "seed": self.seed,
            "epochs_run": self.epochs_run,
            "test_micro_f1": self.test_micro_f1,
            "silhouette_kmeans": self.silhouette_kmeans,
            "silhouette_truth": self.silhouette_truth,
            "nmi": self.nmi,
            "ari": self.ari,
            "wall_seconds": self.wall_seconds,
        }


@dataclass
class TrainedModel:
    """A model with everything needed to run it on the dataset it came from."""

    kind: str
    config: dict
    dim: int
    classes: int
    model: object
    head: MixtureHead | None = None
    gmm_mapping: np.ndarray | None = None
    pca: PcaProjection | None = None
    damping_used: float = 0.0


# -- model assembly -----------------------------------------------------


def build_adjacency(graph, scheme, damping=0.0):
    """Normalize per the scheme; a singular result is retried with damping."""
    fn = normalize_row if scheme == "row" else normalize_sym
    try:
        return fn(graph, damping=damping), float(damping)
    except SingularMatrixError:
        eps = RESCUE_DAMPING if damping == 0.0 else 10.0 * damping
        return fn(graph, damping=eps), eps


def assemble_model(cfg: TrainConfig, graph, dim, classes, damping_used=None) -> TrainedModel:
    """Fresh, untrained model structure for a config. Deterministic in the
    config seed, so a checkpoint can rebuild the exact same skeleton."""
    hidden = cfg.resolved_hidden
    dropout = cfg.resolved_dropout
    damp = cfg.damping
    if cfg.model == "gcn":
        adj, damp = build_adjacency(graph, cfg.adjacency, damping_used if damping_used is not None else cfg.damping)
        model = GcnModel(adj, [dim, hidden, classes], dropout=dropout, seed=cfg.seed)
        head = None
    elif cfg.model in FLOW_KINDS:
        if cfg.model == "flowgmm":
            source = None
        elif cfg.model == "gcflow":
            source, damp = build_adjacency(
                graph, cfg.adjacency, damping_used if damping_used is not None else cfg.damping
            )
        elif cfg.model == "gcflow-p":
            damp = cfg.damping if cfg.damping > 0.0 else DEFAULT_DAMPING
            source = AttentionAdjacency(graph, dim, embed_dim=cfg.embed_dim, damping=damp, seed=cfg.seed)
        else:
            damp = cfg.damping if cfg.damping > 0.0 else DEFAULT_DAMPING
            source = ConcreteAdjacency(
                graph, dim,
                embed_dim=cfg.embed_dim,
                temperature=cfg.temperature,
                stretch_lo=cfg.stretch_lo,
                stretch_hi=cfg.stretch_hi,
                damping=damp,
                seed=cfg.seed,
            )
        model = build_gcflow(
            cfg.num_flows, dim, hidden, cfg.net_layers,
            couplings_per_flow=cfg.couplings, adjacency=source, seed=cfg.seed, dropout=dropout,
        )
        if classes == 1:
            scalars = [cfg.mean_lo]
        else:
            step = (cfg.mean_hi - cfg.mean_lo) / (classes - 1)
            scalars = [cfg.mean_lo + k * step for k in range(classes)]
        head = MixtureHead(
            classes, dim,
            mean_scalars=scalars,
            log_stds=[cfg.log_std_init] * classes,
            learn_weights=cfg.learn_weights,
        )
    else:  # gmm kinds get their parameters from em_fit afterwards
        model = None
        head = None
        if cfg.model == "gmm-ax":
            _, damp = build_adjacency(
                graph, cfg.adjacency, damping_used if damping_used is not None else cfg.damping
            )
    return TrainedModel(
        kind=cfg.model,
        config=asdict(cfg),
        dim=dim,
        classes=classes,
        model=model,
        head=head,
        damping_used=damp,
    )


# -- running a trained model --------------------------------------------


def node_features(tm: TrainedModel, ds: Dataset):
    x = ds.features
    if tm.pca is not None and x.shape[1] != tm.dim:
        x = pca_apply(tm.pca, x)
    if x.shape[1] != tm.dim:
        raise ConfigError(f"model expects {tm.dim} features, dataset provides {x.shape[1]}")
    return x


def _mixed_features(tm: TrainedModel, ds: Dataset, x):
    adj, _ = build_adjacency(ds.graph, tm.config["adjacency"], tm.damping_used)
    return adj.matrix @ x


def representation(tm: TrainedModel, ds: Dataset):
    """The node embedding each model kind is evaluated on: latents for
    flows, penultimate activations for the classifier, (mixed) features
    for the EM references."""
    x = node_features(tm, ds)
    if tm.kind == "gcn":
        _, penult = tm.model.forward(x)
        return penult
    if tm.kind in FLOW_KINDS:
        return tm.model.forward(x).z.data
    if tm.kind == "gmm-ax":
        return _mixed_features(tm, ds, x)
    return x


def predictions(tm: TrainedModel, ds: Dataset):
    x = node_features(tm, ds)
    if tm.kind == "gcn":
        return gcn_predict(tm.model, x)
    if tm.kind in FLOW_KINDS:
        return predict(tm.model, tm.head, x)
    feats = _mixed_features(tm, ds, x) if tm.kind == "gmm-ax" else x
    from .baselines import responsibilities

    resp, _ = responsibilities(tm.model, feats)
    return tm.gmm_mapping[resp.argmax(axis=1)]


def evaluate(tm: TrainedModel, ds: Dataset, seed=None):
    """Classification and clustering metrics on the dataset's test split."""
    if seed is None:
        seed = tm.config["seed"]
    pred = predictions(tm, ds)
    z = representation(tm, ds)
    test = ds.mask_indices("test")
    if test.size == 0:
        raise ConfigError("dataset has an empty test split")
    km = kmeans(z, ds.num_classes, seed=seed)
    known = ds.labels >= 0
    return {
        "test_micro_f1": micro_f1(pred[test], ds.labels[test]),
        "silhouette_kmeans": silhouette(z, km),
        "silhouette_truth": silhouette(z[known], ds.labels[known]),
        "nmi": evalkit.nmi(km.labels[known], ds.labels[known]),
        "ari": evalkit.ari(km.labels[known], ds.labels[known]),
    }


# -- the training loop --------------------------------------------------


def _epoch_loss(tm, x, labels, loss_cfg, rng):
    if tm.kind == "gcn":
        probs = gcn_forward(tm.model, x, training=True, rng=rng)
        return gcn_loss(probs, labels, loss_cfg.labeled)
    return semi_supervised_loss(
        tm.model, tm.head, x, labels, loss_cfg, training=True, rng=rng
    )


def _val_f1(tm, x, labels, val_idx):
    if tm.kind == "gcn":
        pred = gcn_predict(tm.model, x)
    else:
        pred = predict(tm.model, tm.head, x)
    return micro_f1(pred[val_idx], labels[val_idx])


def _fit_gmm(cfg: TrainConfig, tm: TrainedModel, ds: Dataset):
    x = node_features(tm, ds)
    feats = _mixed_features(tm, ds, x) if cfg.model == "gmm-ax" else x
    train_idx = ds.mask_indices("train")
    init = np.stack(
        [feats[train_idx[ds.labels[train_idx] == c]].mean(axis=0) for c in range(ds.num_classes)]
    )
    tm.model = em_fit(feats, ds.num_classes, init_means=init, seed=cfg.seed)
    tm.gmm_mapping = component_class_mapping(tm.model, feats, ds.labels, train_idx)
    return tm


def train(cfg: TrainConfig, dataset: Dataset, checkpoint_dir=None) -> RunRecord:
    """Fit a model and report its metrics.

    Gradient models run full-batch with early stopping on validation
    micro-F1: the best-scoring parameters are kept and restored at the
    end, and training stops once the best epoch is ``patience`` epochs
    old. A non-finite loss or a numeric blow-up mid-epoch aborts with the
    progress so far attached to the raised error.
    """
    start = time.perf_counter()
    ds = dataset
    if cfg.pca_dim is not None:
        ds = apply_pca_reduction(ds, cfg.pca_dim)
    tm = assemble_model(cfg, ds.graph, ds.dim, ds.num_classes)
    tm.pca = ds.pca
    snapshot = dict(tm.config)
    snapshot["damping_used"] = tm.damping_used

    if cfg.model in GMM_KINDS:
        tm = _fit_gmm(cfg, tm, ds)
        metrics = evaluate(tm, dataset)
        record = RunRecord(
            config=snapshot, seed=cfg.seed, epochs_run=0, losses=[], val_f1s=[],
            wall_seconds=time.perf_counter() - start, **metrics,
        )
        return _maybe_checkpoint(record, tm, checkpoint_dir)

    x = ds.features
    labels = ds.labels
    train_idx = ds.mask_indices("train")
    val_idx = ds.mask_indices("val")
    if val_idx.size == 0:
        raise ConfigError("early stopping needs a non-empty validation split")
    unlabeled = np.flatnonzero(~ds.train_mask)
    loss_cfg = LossConfig(train_idx, unlabeled, unlabeled_weight=cfg.unlabeled_weight)

    params = tm.model.params() + (tm.head.params() if tm.head is not None else [])
    if tm.head is not None and cfg.label_init_means:
        z0 = tm.model.forward(x).z.data
        init_means_from_labels(tm.head, z0, labels, train_idx)

    run_rng = np.random.default_rng(cfg.seed)
    opt = AdamState(params, cfg.lr, weight_decay=cfg.weight_decay)
    losses: list[float] = []
    val_f1s: list[float] = []
    best_f1 = -1.0
    best_loss = np.inf
    best_epoch = -1
    best_params = None

    for epoch in range(cfg.epochs):
        ad.zero_grads(params)
        try:
            loss = _epoch_loss(tm, x, labels, loss_cfg, run_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DomainError(f"loss is {value}")
            loss.backward()
            clip_gradients(params, cfg.clip)
            adam_step(opt)
            losses.append(value)
            f1 = _val_f1(tm, x, labels, val_idx)
        except (DomainError, SingularMatrixError) as exc:
            record = RunRecord(
                config=snapshot, seed=cfg.seed, epochs_run=len(losses), losses=losses,
                val_f1s=val_f1s, test_micro_f1=float("nan"), silhouette_kmeans=float("nan"),
                silhouette_truth=float("nan"), nmi=float("nan"), ari=float("nan"),
                wall_seconds=time.perf_counter() - start,
            )
            raise DivergedError(f"training diverged at epoch {epoch}: {exc}", record=record) from None
        val_f1s.append(f1)
        # ties on validation F1 go to the lower training loss, so a
        # saturated validation set does not freeze an early model
        if f1 > best_f1 or (f1 == best_f1 and value < best_loss):
            best_f1 = f1
            best_loss = value
            best_epoch = epoch
            best_params = [p.data.copy() for p in params]
        if epoch - best_epoch >= cfg.patience:
            break

    for p, saved in zip(params, best_params):
        np.copyto(p.data, saved)
    metrics = evaluate(tm, dataset)
    record = RunRecord(
        config=snapshot, seed=cfg.seed, epochs_run=len(losses), losses=losses,
        val_f1s=val_f1s, wall_seconds=time.perf_counter() - start, **metrics,
    )
    return _maybe_checkpoint(record, tm, checkpoint_dir)


def _maybe_checkpoint(record, tm, checkpoint_dir):
    if checkpoint_dir is not None:
        from pathlib import Path

        from .checkpoint import save_checkpoint

        path = Path(checkpoint_dir) / "checkpoint.json"
        save_checkpoint(path, tm)
        record.checkpoint_path = str(path)
    return record
