"""Gaussian-mixture base distribution and the semi-supervised likelihood.

The latent distribution is a K-component mixture of isotropic Gaussians
whose means are scalar multiples of the all-ones vector and whose
covariances are scalar multiples of the identity, one scalar pair per
component. Each component doubles as a class: a node's label posterior is
the component posterior of its latent vector.

A node's log-density adds three pieces: the mixture log-density of its
latent vector, its own coupling log-determinant, and an equal per-node
share of the adjacency log-determinant. The last piece is a constant when
the adjacency is fixed, but it is always included so reported values are
proper log-likelihoods; constants cost nothing under differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError

LOG_2PI = float(np.log(2.0 * np.pi))

# default spread for component mean scalars
MEAN_LO = 0.5
MEAN_HI = 10.0


class MixtureHead:
    """Per-component mean and log-std scalars, plus mixture weights.

    Weights are uniform and fixed unless ``learn_weights`` is set, in which
    case softmax-parameterized logits train with everything else.
    """

    def __init__(self, num_components, dim, mean_scalars=None, log_stds=None, learn_weights=False):
        if num_components < 1:
            raise DomainError(f"need at least one component, got {num_components}")
        if dim < 1:
            raise DomainError(f"need at least one feature, got {dim}")
        self.num_components = int(num_components)
        self.dim = int(dim)
        if mean_scalars is None:
            if num_components == 1:
                mean_scalars = [MEAN_LO]
            else:
                step = (MEAN_HI - MEAN_LO) / (num_components - 1)
                mean_scalars = [MEAN_LO + k * step for k in range(num_components)]
        if log_stds is None:
            log_stds = [0.0] * num_components
        if len(mean_scalars) != num_components or len(log_stds) != num_components:
            raise DomainError("need one mean scalar and one log-std per component")
        self.means = [ad.Tensor(float(m), requires_grad=True) for m in mean_scalars]
        self.log_stds = [ad.Tensor(float(s), requires_grad=True) for s in log_stds]
        self.learn_weights = bool(learn_weights)
        self.weight_logits = ad.Tensor(np.zeros(num_components), requires_grad=self.learn_weights)

    def log_weights(self):
        if not self.learn_weights:
            return ad.Tensor(np.full(self.num_components, -np.log(self.num_components)))
        row = ad.reshape(self.weight_logits, (1, self.num_components))
        return ad.reshape(row - ad.reshape(ad.logsumexp_rows(row), (1, 1)), (self.num_components,))

    def params(self):
        out = self.means + self.log_stds
        if self.learn_weights:
            out.append(self.weight_logits)
        return out


def component_logpdf_matrix(head: MixtureHead, z) -> ad.Tensor:
    """n x K matrix of per-component Gaussian log-densities, differentiable."""
    z = ad.as_tensor(z)
    n, dim = z.shape
    cols = []
    for m, ls in zip(head.means, head.log_stds):
        diff = z - m
        sq = ad.tsum(diff * diff, axis=1)
        inv_var = ad.exp(ls * -2.0)
        cols.append(sq * inv_var * -0.5 - (0.5 * dim * LOG_2PI) - ls * float(dim))
    return ad.stack_cols(cols)


def component_logpdf(head: MixtureHead, z, k) -> float:
    """Log-density of one latent vector under component k."""
    if not (0 <= k < head.num_components):
        raise IndexError(f"component {k} out of range for K={head.num_components}")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    dim = z.size
    m = head.means[k].item()
    ls = head.log_stds[k].item()
    sq = float(((z - m) ** 2).sum())
    return -0.5 * np.exp(-2.0 * ls) * sq - 0.5 * dim * LOG_2PI - dim * ls


def mixture_logpdf(head: MixtureHead, z) -> float:
    """Log-density of one latent vector under the whole mixture."""
    lw = head.log_weights().data
    comps = np.array([component_logpdf(head, z, k) for k in range(head.num_components)])
    stacked = lw + comps
    m = stacked.max()
    return float(m + np.log(np.exp(stacked - m).sum()))


def share_rows(result) -> ad.Tensor:
    """Per-node log-determinant: own coupling part plus adjacency share."""
    n = result.flow_logdet.shape[0]
    return result.flow_logdet + result.graph_logdet * (1.0 / n)


def marginal_rows(head: MixtureHead, result) -> ad.Tensor:
    """Length-n tensor of per-node marginal log-densities."""
    comp = component_logpdf_matrix(head, result.z)
    return ad.logsumexp_rows(comp + head.log_weights()) + share_rows(result)


def joint_matrix(head: MixtureHead, result) -> ad.Tensor:
    """n x K tensor of per-node, per-class joint log-densities."""
    comp = component_logpdf_matrix(head, result.z)
    n = result.flow_logdet.shape[0]
    return comp + head.log_weights() + ad.reshape(share_rows(result), (n, 1))


def log_marginal(model, head: MixtureHead, x, i) -> float:
    return float(marginal_rows(head, model.forward(x)).data[i])


def log_joint_labeled(model, head: MixtureHead, x, i, k) -> float:
    if not (0 <= k < head.num_components):
        raise IndexError(f"component {k} out of range for K={head.num_components}")
    return float(joint_matrix(head, model.forward(x)).data[i, k])


def posterior_matrix(head: MixtureHead, z) -> np.ndarray:
    """Component posteriors per node; the determinant terms cancel out."""
    comp = component_logpdf_matrix(head, z)
    return ad.row_softmax(comp + head.log_weights()).data


def posterior(model, head: MixtureHead, x, i) -> np.ndarray:
    return posterior_matrix(head, model.forward(x).z)[i]


def predict(model, head: MixtureHead, x) -> np.ndarray:
    """Most probable component per node."""
    return posterior_matrix(head, model.forward(x).z).argmax(axis=1)


@dataclass
class LossConfig:
    """Index sets and the weight that balances the unlabeled term."""

    labeled: np.ndarray
    unlabeled: np.ndarray
    unlabeled_weight: float = 0.5

    def __post_init__(self):
        self.labeled = np.asarray(self.labeled, dtype=np.intp)
        self.unlabeled = np.asarray(self.unlabeled, dtype=np.intp)
        if self.labeled.size == 0:
            raise ConfigError("the labeled set must not be empty")
        if np.intersect1d(self.labeled, self.unlabeled).size:
            raise ConfigError("labeled and unlabeled sets overlap")
        if not (0.0 <= self.unlabeled_weight <= 1.0):
            raise DomainError(f"unlabeled weight must lie in [0,1], got {self.unlabeled_weight}")


def semi_supervised_loss(model, head: MixtureHead, x, labels, cfg: LossConfig,
                         training=False, rng=None, result=None) -> ad.Tensor:
    """Negative weighted sum of labeled joint and unlabeled marginal terms.

    Labeled nodes contribute their joint log-density with the observed class,
    unlabeled nodes their marginal log-density; the two means are blended
    with weights (1 - w) and w and negated for minimization. With no
    unlabeled nodes the second term is dropped.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if result is None:
        result = model.forward(x, training=training, rng=rng)
    n = result.z.shape[0]
    comp_lw = component_logpdf_matrix(head, result.z) + head.log_weights()
    share = share_rows(result)
    share_col = ad.reshape(share, (n, 1))

    joint = comp_lw + share_col
    picked = ad.take_per_row(ad.gather_rows(joint, cfg.labeled), labels[cfg.labeled])
    w = cfg.unlabeled_weight
    loss = ad.tsum(picked) * (-(1.0 - w) / cfg.labeled.size)

    if cfg.unlabeled.size:
        marg = ad.logsumexp_rows(ad.gather_rows(comp_lw, cfg.unlabeled))
        marg = marg + ad.tsum(ad.gather_rows(share_col, cfg.unlabeled), axis=1)
        loss = loss + ad.tsum(marg) * (-w / cfg.unlabeled.size)
    return loss


def init_means_from_labels(head: MixtureHead, z, labels, labeled):
    """Set each component's mean scalar from its labeled nodes' latents.

    Uses the mean coordinate value over the labeled nodes of that class;
    classes with no labeled nodes keep their current scalar.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    labeled = np.asarray(labeled, dtype=np.intp)
    for k in range(head.num_components):
        mine = labeled[labels[labeled] == k]
        if mine.size:
            head.means[k].data[...] = z[mine].mean()
