"""Sigmoid-binned (differentiable) histograms and f-divergences between them."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

FLOOR = 1e-12
KINK_TOL = 1e-9


class DivergenceKind(str, Enum):
    TV = "tv"
    JS = "js"
    KL = "kl"

    def k(self, r):
        """Convex generator with k(1) = 0."""
        r = np.asarray(r, dtype=float)
        if self is DivergenceKind.TV:
            return np.abs(r - 1.0) / 2.0
        if self is DivergenceKind.JS:
            # halved so that JS(p, q) = (KL(p||m) + KL(q||m)) / 2 <= log 2
            return 0.5 * (r * np.log(2.0 * r / (r + 1.0)) + np.log(2.0 / (r + 1.0)))
        return r * np.log(r)

    def dq_term(self, r):
        """k(r) - r k'(r), the derivative of q k(p/q) with respect to q."""
        r = np.asarray(r, dtype=float)
        if self is DivergenceKind.TV:
            # subgradient 0 at the kink, with slack for rounding in r
            return -np.where(np.abs(r - 1.0) <= KINK_TOL, 0.0, np.sign(r - 1.0)) / 2.0
        if self is DivergenceKind.JS:
            return 0.5 * np.log(2.0 / (r + 1.0))
        return -r


@dataclass
class BinLayout:
    """Finite edges b_0..b_M per neuron (rows padded with +inf).

    Bin 0 is (-inf, b_0), bins 1..M are [b_{i-1}, b_i), bin M+1 is [b_M, inf).
    """

    edges: np.ndarray  # (J, Mmax + 1)
    finite_bins: np.ndarray  # (J,) M per neuron
    delta_b: float

    @property
    def n_bins(self):
        return self.edges.shape[1] + 1

    @property
    def valid(self):
        """(J, n_bins) mask of bins that exist for each neuron."""
        idx = np.arange(self.n_bins)
        return idx[None, :] <= (self.finite_bins + 1)[:, None]

    def to_dict(self):
        return {
            "b_min": self.edges[:, 0].tolist(),
            "finite_bins": self.finite_bins.tolist(),
            "delta_b": self.delta_b,
        }

    @classmethod
    def from_dict(cls, d):
        return layout_from_starts(np.array(d["b_min"]), np.array(d["finite_bins"]), d["delta_b"])


def finite_bin_count(b_min, b_max, delta_b):
    """ceil((b_max - b_min) / delta_b), at least 1, robust to float noise."""
    n = math.ceil((b_max - b_min) / delta_b - 1e-9)
    return max(int(n), 1)


def layout_from_starts(b_min, counts, delta_b):
    b_min = np.atleast_1d(np.asarray(b_min, dtype=float))
    counts = np.atleast_1d(np.asarray(counts, dtype=int))
    width = int(counts.max()) + 1
    idx = np.arange(width)
    edges = b_min[:, None] + idx[None, :] * delta_b
    edges = np.where(idx[None, :] <= counts[:, None], edges, np.inf)
    return BinLayout(edges, counts, float(delta_b))


def build_bins(activations, delta_b=0.1):
    """Bin layout from reference activations, shape (n,) or (n, J)."""
    a = np.asarray(activations, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < 1:
        raise ValueError("need at least one activation value")
    lo, hi = a.min(axis=0), a.max(axis=0)
    counts = np.array([finite_bin_count(l, h, delta_b) for l, h in zip(lo, hi)])
    return layout_from_starts(lo, counts, delta_b)


def _edge_sigmoids(values, layout, tau):
    # (n, J, E)
    return expit(tau * (values[:, :, None] - layout.edges[None, :, :]))


def bin_masses(values, layout, tau):
    """Per-instance soft bin memberships, shape (n, J, n_bins); rows sum to 1."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    s = _edge_sigmoids(v, layout, tau)
    n, J, _ = s.shape
    ones = np.ones((n, J, 1))
    zeros = np.zeros((n, J, 1))
    upper = np.concatenate([ones, s], axis=2)
    lower = np.concatenate([s, zeros], axis=2)
    return upper - lower


@dataclass
class SoftHistogram:
    layout: BinLayout
    tau: float
    probs: np.ndarray  # (J, n_bins)

    @property
    def M(self):
        return self.probs.shape[1]


def soft_histogram(values, layout, tau=150.0):
    return SoftHistogram(layout, float(tau), bin_masses(values, layout, tau).mean(axis=0))


def hard_histogram(values, layout):
    """Indicator-count histogram with the same bin convention (oracle)."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    n, J = v.shape
    out = np.zeros((J, layout.n_bins))
    for j in range(J):
        # bin index = number of finite edges <= value
        idx = np.searchsorted(layout.edges[j], v[:, j], side="right")
        out[j] = np.bincount(idx, minlength=layout.n_bins)[: layout.n_bins] / n
    return out


def _prepare(p, q, valid):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if p.shape != q.shape:
        raise ValueError(f"histogram layouts differ: {p.shape} vs {q.shape}")
    valid = np.ones(p.shape, dtype=bool) if valid is None else np.broadcast_to(valid, p.shape)
    return p, q, valid


def _floored(x, valid):
    xf = np.where(valid, np.maximum(x, FLOOR), 0.0)
    return xf / xf.sum(axis=-1, keepdims=True), xf


def divergence_per_row(p, q, kind=DivergenceKind.TV, valid=None):
    """D_k(p || q) = sum_i q_i k(p_i / q_i) for each row (neuron)."""
    kind = DivergenceKind(kind)
    p, q, valid = _prepare(p, q, valid)
    pn, _ = _floored(p, valid)
    qn, _ = _floored(q, valid)
    r = np.where(valid, pn / np.where(valid, qn, 1.0), 1.0)
    return np.where(valid, qn * kind.k(r), 0.0).sum(axis=-1)


def divergence(p, q, kind=DivergenceKind.TV, valid=None):
    if isinstance(p, SoftHistogram):
        if isinstance(q, SoftHistogram) and q.probs.shape != p.probs.shape:
            raise ValueError("histogram layouts differ")
        valid = p.layout.valid if valid is None else valid
        p = p.probs
    if isinstance(q, SoftHistogram):
        q = q.probs
    return float(divergence_per_row(p, q, kind, valid).sum())


def divergence_grad_q(p, q, kind=DivergenceKind.TV, valid=None):
    """Gradient of sum_rows D_k(p || q) with respect to the raw q entries."""
    kind = DivergenceKind(kind)
    p, q, valid = _prepare(p, q, valid)
    pn, _ = _floored(p, valid)
    qn, qf = _floored(q, valid)
    r = np.where(valid, pn / np.where(valid, qn, 1.0), 1.0)
    g_qn = np.where(valid, kind.dq_term(r), 0.0)
    # qn = qf / sum(qf): d/dqf_i = (g_i - sum_k g_k qn_k) / sum(qf)
    total = qf.sum(axis=-1, keepdims=True)
    g_qf = (g_qn - (g_qn * qn).sum(axis=-1, keepdims=True)) / total
    return np.where(valid & (q > FLOOR), g_qf, 0.0)


def histogram_grad_values(values, layout, tau, grad_probs):
    """Backpropagate d(loss)/d(probs) (J, n_bins) to the (n, J) input values."""
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    s = _edge_sigmoids(v, layout, tau)
    ds = tau * s * (1.0 - s)  # (n, J, E)
    # mass_k = s_{k-1} - s_k, so sum_k g_k dmass_k = sum_e ds_e (g_{e+1} - g_e)
    dg = grad_probs[:, 1:] - grad_probs[:, :-1]  # (J, E)
    return (ds * dg[None, :, :]).sum(axis=2) / n
