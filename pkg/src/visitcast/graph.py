"""Visit-code bipartite structural embedding.

Visits are attributed nodes (their multi-hot code vector), codes are one-hot
nodes; both are projected into a shared D_m space by affine maps. Visit
embeddings are always computed on the fly from the multi-hot attributes, so
unseen visits embed inductively.

Second-order proximity is trained with a sigmoid negative-sampling estimator:
positive (visit, code) edges come from the visits of the patients in the
current temporal batch, and each positive draws K uniform negatives from the
codes the visit does not carry. The exact softmax objective is kept here as
a small-scale test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class GraphError(ValueError):
    pass


@dataclass
class EmbeddingParams:
    """Affine projections for visit attributes and one-hot codes."""

    W_v: Tensor  # (|C|, D_m)
    b_v: Tensor  # (D_m,)
    W_c: Tensor  # (|C|, D_m)
    b_c: Tensor  # (D_m,)

    @property
    def n_codes(self):
        return self.W_v.data.shape[0]

    @property
    def dim(self):
        return self.W_v.data.shape[1]

    def tensors(self):
        return [("W_v", self.W_v), ("b_v", self.b_v),
                ("W_c", self.W_c), ("b_c", self.b_c)]


def init_embedding_params(n_codes, dim, rng):
    return EmbeddingParams(
        W_v=ad.parameter(ad.glorot_uniform(rng, n_codes, dim)),
        b_v=ad.parameter(np.zeros(dim)),
        W_c=ad.parameter(ad.glorot_uniform(rng, n_codes, dim)),
        b_c=ad.parameter(np.zeros(dim)),
    )


def embed_visit(params, x):
    """Project a multi-hot visit vector: W_v^T x + b_v."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.n_codes,):
        raise GraphError(f"multi-hot length {x.shape} != |C|={params.n_codes}")
    return embed_visit_codes(params, np.flatnonzero(x))


def embed_visit_codes(params, code_indices):
    """Same map, from the visit's code index list (rows of W_v sum)."""
    idx = np.asarray(code_indices, dtype=np.intp)
    rows = ad.take_rows(params.W_v, idx)
    ones = Tensor(np.ones(len(idx)))
    return ad.matmul(ones, rows) + params.b_v


def embed_code(params, j):
    """Project one-hot code j: row j of W_c plus bias."""
    if not 0 <= j < params.n_codes:
        raise GraphError(f"code index {j} out of range [0, {params.n_codes})")
    return params.W_c[j] + params.b_c


@dataclass(frozen=True)
class VisitEdges:
    """Positive codes of one visit plus the sampled negatives, (n_pos, K)."""

    patient_id: str
    visit_codes: tuple
    positives: np.ndarray
    negatives: np.ndarray


@dataclass(frozen=True)
class EdgeBatch:
    entries: tuple
    k: int

    @property
    def n_positives(self):
        return sum(len(e.positives) for e in self.entries)


def sample_edges(patients, n_codes, k, rng, cap_per_patient=512):
    """Visit-sequence-based edge sampling for a batch of patients.

    Every (visit, code) incidence of the batch patients becomes a positive
    edge (capped per patient); negatives are drawn uniformly from the codes
    absent from that visit.
    """
    if not patients:
        raise GraphError("empty patient batch")
    if k < 1:
        raise GraphError("need at least one negative per positive")
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    entries = []
    for patient in patients:
        budget = cap_per_patient
        for visit in patient.visits:
            if budget <= 0:
                break
            codes = np.asarray(visit.codes, dtype=np.intp)
            if n_codes <= len(codes):
                raise GraphError("cannot draw negatives: taxonomy no larger "
                                 "than the visit's code set")
            pos = codes[:budget]
            budget -= len(pos)
            complement = np.setdiff1d(np.arange(n_codes, dtype=np.intp), codes,
                                      assume_unique=False)
            neg = rng.choice(complement, size=(len(pos), k), replace=True)
            entries.append(VisitEdges(patient_id=patient.id,
                                      visit_codes=tuple(visit.codes),
                                      positives=pos, negatives=neg))
    return EdgeBatch(entries=tuple(entries), k=k)


def sample_edges_random(patients, pool, n_codes, k, rng, cap_per_patient=512):
    """Ablation variant: positives drawn from a global edge pool instead of
    the batch's own visits. `pool` is a sequence of (codes_tuple, code) pairs.
    """
    if not pool:
        raise GraphError("empty global edge pool")
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    n_edges = sum(min(sum(len(v.codes) for v in p.visits), cap_per_patient)
                  for p in patients)
    n_edges = min(n_edges, len(pool))
    picks = rng.choice(len(pool), size=n_edges, replace=False)
    entries = []
    for p in picks:
        visit_codes, code = pool[p]
        codes = np.asarray(visit_codes, dtype=np.intp)
        if n_codes <= len(codes):
            raise GraphError("cannot draw negatives for pooled edge")
        complement = np.setdiff1d(np.arange(n_codes, dtype=np.intp), codes)
        neg = rng.choice(complement, size=(1, k), replace=True)
        entries.append(VisitEdges(patient_id="<pool>", visit_codes=visit_codes,
                                  positives=np.asarray([code], dtype=np.intp),
                                  negatives=neg))
    return EdgeBatch(entries=tuple(entries), k=k)


def build_edge_pool(patients):
    """All (visit codes, code) incidences of a corpus, for random sampling."""
    pool = []
    for p in patients:
        for v in p.visits:
            for c in v.codes:
                pool.append((tuple(v.codes), c))
    return pool


def _log_sigmoid(scores):
    # ln sigma(x) = -softplus(-x); composed from clamped exp so large
    # magnitudes saturate instead of overflowing
    return ad.neg(ad.tlog(ad.texp(ad.neg(scores)) + 1.0))


def structural_loss(params, batch):
    """Negative-sampling structural loss over an EdgeBatch (autodiff graph).

    Per positive edge: -ln sigma(c+ . v) - sum_k ln sigma(-c-_k . v).
    """
    total = Tensor(0.0)
    for entry in batch.entries:
        v = embed_visit_codes(params, entry.visit_codes)
        n_pos = len(entry.positives)
        idx = np.concatenate([entry.positives, entry.negatives.ravel()])
        rows = ad.take_rows(params.W_c, idx)
        scores = ad.matmul(rows, v) + ad.matmul(params.b_c, v)
        pos_term = _log_sigmoid(scores[:n_pos])
        neg_term = _log_sigmoid(ad.neg(scores[n_pos:]))
        total = total + ad.neg(ad.tsum(pos_term) + ad.tsum(neg_term))
    return total


def exact_softmax_loss(w_v, b_v, w_c, b_c, edges):
    """Oracle: exact second-order-proximity loss, full softmax over codes.

    `edges` is a list of (visit_codes, code) pairs; parameters are plain
    numpy arrays. Only tractable for small taxonomies.
    """
    loss = 0.0
    all_codes = w_c + b_c  # (|C|, D)
    for visit_codes, code in edges:
        v = w_v[list(visit_codes)].sum(axis=0) + b_v
        logits = all_codes @ v
        logits = logits - logits.max()
        log_z = np.log(np.exp(logits).sum())
        loss -= logits[code] - log_z
    return loss
