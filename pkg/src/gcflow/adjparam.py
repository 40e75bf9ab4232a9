"""Input-dependent mixing matrices learned alongside the flows.

Two constructions, both confined to the given edge set:

* attention reweighting: each existing edge gets a positive weight from a
  small scorer over endpoint embeddings, and each node's weights are
  softmax-normalized over its neighborhood, so rows are stochastic;
* near-binary edge selection: each existing edge gets a gate in [0,1]
  sampled from a stretched, temperature-controlled logistic relaxation, so
  training can softly remove edges while gradients still flow.

Neither construction adds edges. Both add a small multiple of the identity
before determinant use, since rows of a softmax-normalized matrix sum to 1
and exact singularity is otherwise common. Embedding weights are shared
across stages; the matrices still differ per stage because each stage feeds
its own features in.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import DomainError
from .flows import Mlp
from .graphs import Graph, logabsdet_tensor

DEFAULT_DAMPING = 1e-3
DEFAULT_TEMPERATURE = 0.66
DEFAULT_STRETCH_LO = -0.1
DEFAULT_STRETCH_HI = 1.1


def directed_edges(graph: Graph):
    """Both orientations of every stored edge, in deterministic order."""
    pairs = sorted({(i, j) for i, j in graph.edges} | {(j, i) for i, j in graph.edges})
    src = np.array([p[0] for p in pairs], dtype=np.intp)
    dst = np.array([p[1] for p in pairs], dtype=np.intp)
    return src, dst


class AttentionAdjacency:
    """Row-stochastic edge reweighting from learned endpoint embeddings."""

    def __init__(self, graph: Graph, dim, embed_dim=16, damping=DEFAULT_DAMPING, seed=0):
        if not graph.edges:
            raise DomainError("attention reweighting needs at least one edge")
        rng = np.random.default_rng(seed)
        self.n = graph.n
        self.dim = int(dim)
        self.embed_dim = int(embed_dim)
        self.damping = float(damping)
        self.seed = int(seed)
        self.src, self.dst = directed_edges(graph)
        self.embed_src = Mlp([dim, embed_dim], rng)
        self.embed_dst = Mlp([dim, embed_dim], rng)
        self.scorer = Mlp([2 * embed_dim, 1], rng)
        # isolated nodes produce an all-zero row; damping supplies their diagonal
        degree = np.bincount(self.src, minlength=self.n)
        self._lonely = (degree == 0).astype(np.float64)

    def edge_scores(self, x) -> ad.Tensor:
        x = ad.as_tensor(x)
        h = ad.relu(self.embed_src(x))
        g = ad.relu(self.embed_dst(x))
        paired = ad.concat_cols([ad.gather_rows(h, self.src), ad.gather_rows(g, self.dst)])
        return ad.lrelu(ad.reshape(self.scorer(paired), (self.src.size,)))

    def realize(self, x, stage, training=False, rng=None):
        scores = self.edge_scores(x)
        # softmax per source row, stabilized by a constant per-row shift
        row_max = np.zeros(self.n)
        np.maximum.at(row_max, self.src, scores.data)
        weights = ad.exp(scores - ad.Tensor(row_max[self.src]))
        numer = ad.scatter_matrix(weights, self.src, self.dst, (self.n, self.n))
        denom = ad.tsum(numer, axis=1) + ad.Tensor(self._lonely)
        a = numer / ad.reshape(denom, (self.n, 1))
        if self.damping:
            a = a + ad.Tensor(self.damping * np.eye(self.n))
        return a, logabsdet_tensor(a)

    def params(self):
        return self.embed_src.params() + self.embed_dst.params() + self.scorer.params()


class ConcreteAdjacency:
    """Per-edge soft gates from a stretched logistic relaxation.

    Each edge's keep-score is an antisymmetric function of its endpoint
    embeddings squashed to (-1, 1). Training perturbs the score with
    logistic noise from the seeded stream; evaluation uses the noise-free
    deterministic limit. Stretching past [0,1] and clamping back lets gates
    reach exactly 0 (edge removed) or 1 (edge kept) with nonzero
    probability; the clamp passes gradient only in its interior.
    """

    def __init__(self, graph: Graph, dim, embed_dim=16, temperature=DEFAULT_TEMPERATURE,
                 stretch_lo=DEFAULT_STRETCH_LO, stretch_hi=DEFAULT_STRETCH_HI,
                 damping=DEFAULT_DAMPING, seed=0):
        if temperature <= 0.0:
            raise DomainError(f"temperature must be positive, got {temperature}")
        if stretch_lo >= 0.0:
            raise DomainError(f"stretch lower bound must be negative, got {stretch_lo}")
        if stretch_hi <= 1.0:
            raise DomainError(f"stretch upper bound must exceed 1, got {stretch_hi}")
        if not graph.edges:
            raise DomainError("edge gating needs at least one edge")
        rng = np.random.default_rng(seed)
        self.n = graph.n
        self.dim = int(dim)
        self.embed_dim = int(embed_dim)
        self.temperature = float(temperature)
        self.stretch_lo = float(stretch_lo)
        self.stretch_hi = float(stretch_hi)
        self.damping = float(damping)
        self.seed = int(seed)
        self.src, self.dst = directed_edges(graph)
        self.embed_a = Mlp([dim, embed_dim], rng)
        self.embed_b = Mlp([dim, embed_dim], rng)
        self._noise_rng = np.random.default_rng(seed + 1)

    def edge_logits(self, x) -> ad.Tensor:
        """Antisymmetric per-edge score: swapping an edge's endpoints negates it."""
        x = ad.as_tensor(x)
        ta = ad.tanh(self.embed_a(x))
        tb = ad.tanh(self.embed_b(x))
        forward = ad.gather_rows(ta, self.src) * ad.gather_rows(tb, self.dst)
        backward = ad.gather_rows(tb, self.src) * ad.gather_rows(ta, self.dst)
        return ad.tanh(ad.tsum(forward - backward, axis=1))

    def realize(self, x, stage, training=False, rng=None):
        logits = self.edge_logits(x)
        if training:
            stream = rng if rng is not None else self._noise_rng
            eps = stream.uniform(size=self.src.size)
            logits = logits + ad.Tensor(np.log(eps) - np.log1p(-eps))
        soft = ad.sigmoid(logits * (1.0 / self.temperature))
        stretched = soft * (self.stretch_hi - self.stretch_lo) + self.stretch_lo
        gates = ad.clamp(stretched, 0.0, 1.0)
        a = ad.scatter_matrix(gates, self.src, self.dst, (self.n, self.n))
        if self.damping:
            a = a + ad.Tensor(self.damping * np.eye(self.n))
        return a, logabsdet_tensor(a)

    def params(self):
        return self.embed_a.params() + self.embed_b.params()
