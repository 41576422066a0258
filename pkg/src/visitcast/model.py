"""Time-aware attention encoder-decoder over visit sequences.

The pipeline per patient, with visits (t_i, x_i):

  marker      v_i  = affine(multi-hot x_i)            (shared with graph.py)
  time ctx    tau_i = W_dt * log_gap_i                 (vector; or raw scalar)
  encoder     h_i  = GRU(h_{i-1}, [v_i, tau_i])
  attention   e_{i,j} = mlp([s_{i-1}, h_j]) for j <= i (causal)
              theta_i = softmax(e_i),  z_i = sum_j theta_{i,j} h_j
  decoder     s_i  = GRU(s_{i-1}, [v_i, z_i])          (teacher forcing)
  codes       p_{i+1} = softmax(W_o s_i + b_o)
  intensity   ln lambda(t) = W_h.h_i + W_s.s_i + W_u.v_i + w_t (t - t_i) + b_t

Training minimizes, per patient with N visits,

  ( sum_{i=1}^{N-1} [ code_loss(i) + alpha * time_nll(i) ] + beta * L_struct )
      / (N - 1)

averaged over the batch. The first step contributes no time term: its input
gap is the synthetic log(epsilon) placeholder, not an observed gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import graph as vgraph
from .autodiff import Tensor
from .config import AblationFlags, RunConfig, substream
from .data import GAP_EPSILON_DAYS, log_gap
from .intensity import (IntensityContext, LOG_INTENSITY_CLAMP,
                        expected_next_time)

PROB_CLAMP = 1e-12
_W_LIMIT = 1e-8


class ModelError(ValueError):
    pass


def _gru_params(rng, in_dim, hidden):
    # gate order: update z, reset r, candidate n
    return {
        "W": ad.parameter(ad.glorot_uniform(rng, 3 * hidden, in_dim).T),
        "U": ad.parameter(ad.glorot_uniform(rng, 3 * hidden, hidden).T),
        "b": ad.parameter(np.zeros(3 * hidden)),
    }


def _gru_step(p, x, h, hidden):
    gx = ad.matmul(x, p["W"]) + p["b"]
    gh = ad.matmul(h, p["U"])
    z = ad.sigmoid(gx[0:hidden] + gh[0:hidden])
    r = ad.sigmoid(gx[hidden:2 * hidden] + gh[hidden:2 * hidden])
    n = ad.tanh(gx[2 * hidden:] + r * gh[2 * hidden:])
    return (1.0 - z) * h + z * n


class CascadeModel:
    """Parameters plus forward passes for one taxonomy and one variant."""

    def __init__(self, n_codes, cfg: RunConfig, rng):
        self.n_codes = n_codes
        self.cfg = cfg
        self.flags = cfg.ablation
        dm, dt, dh = cfg.d_marker, cfg.d_time, cfg.d_hidden
        self.dims = (dm, dt, dh)

        if self.flags.no_graph:
            self.embed = None
            self.W_m = ad.parameter(ad.glorot_uniform(rng, n_codes, dm))
            self.b_m = ad.parameter(np.zeros(dm))
        else:
            self.embed = vgraph.init_embedding_params(n_codes, dm, rng)

        if not self.flags.scalar_time:
            self.W_dt = ad.parameter(ad.gaussian(rng, (dt,), 0.01))
        enc_in = dm + (1 if self.flags.scalar_time else dt)
        self.enc = _gru_params(rng, enc_in, dh)
        self.dec = _gru_params(rng, dm + dh, dh)

        self.A_W = ad.parameter(ad.glorot_uniform(rng, 2 * dh, dh))
        self.A_b = ad.parameter(np.zeros(dh))
        self.A_v = ad.parameter(ad.glorot_uniform(rng, dh, 1)[:, 0])
        self.A_c = ad.parameter(np.zeros(()))

        self.W_o = ad.parameter(ad.glorot_uniform(rng, dh, n_codes))
        self.b_o = ad.parameter(np.zeros(n_codes))

        self.w_h = ad.parameter(ad.glorot_uniform(rng, dh, 1)[:, 0])
        self.w_s = ad.parameter(ad.glorot_uniform(rng, dh, 1)[:, 0])
        self.w_u = ad.parameter(ad.glorot_uniform(rng, dm, 1)[:, 0])
        # small nonzero start keeps the likelihood off the w == 0 limit branch
        self.w_t = ad.parameter(ad.gaussian(rng, (), 0.01))
        self.b_t = ad.parameter(np.zeros(()))

    @classmethod
    def from_config(cls, n_codes, cfg):
        return cls(n_codes, cfg, substream(cfg.seed, "init"))

    def named_parameters(self):
        pairs = []
        if self.embed is not None:
            pairs.extend(self.embed.tensors())
        else:
            pairs.extend([("W_m", self.W_m), ("b_m", self.b_m)])
        if not self.flags.scalar_time:
            pairs.append(("W_dt", self.W_dt))
        for tag, gru in (("enc", self.enc), ("dec", self.dec)):
            pairs.extend([(f"{tag}.W", gru["W"]), (f"{tag}.U", gru["U"]),
                          (f"{tag}.b", gru["b"])])
        pairs.extend([("A_W", self.A_W), ("A_b", self.A_b),
                      ("A_v", self.A_v), ("A_c", self.A_c),
                      ("W_o", self.W_o), ("b_o", self.b_o),
                      ("w_h", self.w_h), ("w_s", self.w_s),
                      ("w_u", self.w_u), ("w_t", self.w_t),
                      ("b_t", self.b_t)])
        return pairs

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    # -- forward pieces ----------------------------------------------------

    def marker(self, visit):
        if self.embed is not None:
            return vgraph.embed_visit_codes(self.embed, visit.codes)
        idx = np.asarray(visit.codes, dtype=np.intp)
        rows = ad.take_rows(self.W_m, idx)
        ones = Tensor(np.ones(len(idx)))
        return ad.matmul(ones, rows) + self.b_m

    def _time_feature(self, delta_log):
        if self.flags.scalar_time:
            return Tensor(np.asarray([delta_log]))
        return ad.mul(self.W_dt, float(delta_log))

    def encode(self, visits, markers):
        """GRU over [marker, time-context]; h_0 = 0."""
        if not visits:
            raise ModelError("cannot encode an empty sequence")
        dh = self.dims[2]
        h = Tensor(np.zeros(dh))
        states = []
        prev_t = None
        for visit, v in zip(visits, markers):
            dlog = math.log(GAP_EPSILON_DAYS) if prev_t is None \
                else log_gap(prev_t, visit.t)
            x = ad.concat([v, self._time_feature(dlog)])
            h = _gru_step(self.enc, x, h, dh)
            states.append(h)
            prev_t = visit.t
        return states

    def attend(self, s_prev, h_states):
        """Causal attention over encoder states 1..i; returns (theta, z)."""
        i = len(h_states)
        if self.flags.no_cascade:
            theta = np.zeros(i)
            theta[-1] = 1.0
            return Tensor(theta), h_states[-1]
        scores = []
        for h_j in h_states:
            hid = ad.tanh(ad.matmul(ad.concat([s_prev, h_j]), self.A_W)
                          + self.A_b)
            scores.append(ad.matmul(self.A_v, hid) + self.A_c)
        e = ad.concat(scores)
        if self.flags.single_parent:
            # hard argmax, earliest index on ties; gradient does not flow
            # through the selection itself
            j = int(np.argmax(e.data))
            theta = np.zeros(i)
            theta[j] = 1.0
            return Tensor(theta), h_states[j]
        theta = ad.softmax_lastdim(e)
        z = ad.matmul(theta, ad.stack_rows(h_states))
        return theta, z

    def decode_step(self, s_prev, marker, z):
        x = ad.concat([marker, z])
        return _gru_step(self.dec, x, s_prev, self.dims[2])

    def predict_codes(self, s):
        return ad.softmax_lastdim(ad.matmul(s, self.W_o) + self.b_o)

    def intensity_terms(self, h, s, v):
        a_h = ad.matmul(self.w_h, h)
        a_s = ad.matmul(self.w_s, s)
        a_u = ad.matmul(self.w_u, v)
        return a_h + a_s + a_u + self.b_t

    def intensity_context(self, h, s, v, t0):
        """Float-valued context for prediction-time quadrature."""
        return IntensityContext(
            hist=float(np.dot(self.w_h.data, h.data)),
            cascade=float(np.dot(self.w_s.data, s.data)),
            visit=float(np.dot(self.w_u.data, v.data)),
            slope=float(self.w_t.data),
            bias=float(self.b_t.data),
            t0=t0,
        )

    def time_nll_tensor(self, c_raw, delta):
        """-ln f(t_i + delta) as an autodiff graph over the scalar c and w_t."""
        c = ad.clip(c_raw, -np.inf, LOG_INTENSITY_CLAMP)
        w = float(self.w_t.data)
        if abs(w) < _W_LIMIT:
            return ad.neg(c - ad.texp(c) * delta)
        exponent = ad.clip(c + self.w_t * delta, -np.inf, LOG_INTENSITY_CLAMP)
        return ad.neg(exponent - (ad.texp(exponent) - ad.texp(c)) / self.w_t)

    def disease_loss(self, probs, x_next):
        """Cross-entropy of a softmax vector against a multi-hot target,
        with both the hit and the miss terms."""
        p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
        x = Tensor(x_next)
        pos = ad.matmul(x, ad.tlog(p))
        negt = ad.matmul(1.0 - x, ad.tlog(1.0 - p))
        return ad.neg(pos + negt)

    # -- losses ------------------------------------------------------------

    def sequence_steps(self, visits):
        """Teacher-forced roll; yields per-step tensors for steps 1..N-1:
        (h_i, s_i, v_i, theta_i). Histories longer than max_seq_len keep
        only the most recent visits."""
        visits = list(visits)[-self.cfg.max_seq_len:]
        markers = [self.marker(v) for v in visits]
        hs = self.encode(visits, markers)
        dh = self.dims[2]
        s = Tensor(np.zeros(dh))
        steps = []
        for i in range(len(visits)):
            theta, z = self.attend(s, hs[:i + 1])
            s = self.decode_step(s, markers[i], z)
            steps.append((hs[i], s, markers[i], theta))
        return visits, steps

    def patient_loss(self, patient, edge_entries, alpha, beta):
        """Per-patient normalized joint loss (a scalar graph tensor)."""
        visits, steps = self.sequence_steps(patient.visits)
        n = len(visits)
        if n < 2:
            raise ModelError(f"patient {patient.id}: need >= 2 visits")
        total = Tensor(0.0)
        for i in range(n - 1):
            h, s, v, _ = steps[i]
            probs = self.predict_codes(s)
            x_next = visits[i + 1].multi_hot(self.n_codes)
            total = total + self.disease_loss(probs, x_next)
            if alpha > 0.0 and i >= 1:
                c_raw = self.intensity_terms(h, s, v)
                delta = visits[i + 1].t - visits[i].t
                total = total + alpha * self.time_nll_tensor(c_raw, delta)
        if beta > 0.0 and not self.flags.no_graph and edge_entries:
            batch = vgraph.EdgeBatch(entries=tuple(edge_entries),
                                     k=self.cfg.neg_samples)
            total = total + beta * vgraph.structural_loss(self.embed, batch)
        return total / float(n - 1)

    def batch_loss(self, patients, edge_rng, alpha=None, beta=None,
                   edge_pool=None):
        """Mean per-patient loss over a batch, with edge sampling attached.

        Default sampling draws each patient's own visit-code edges; under
        random_edge_sampling positives come from the global pool instead.
        """
        if not patients:
            raise ModelError("empty batch")
        alpha = self.cfg.alpha if alpha is None else alpha
        beta = self.cfg.beta if beta is None else beta
        per_patient_edges = [None] * len(patients)
        if beta > 0.0 and not self.flags.no_graph:
            for i, p in enumerate(patients):
                if self.flags.random_edge_sampling:
                    if not edge_pool:
                        raise ModelError("random edge sampling needs a pool")
                    eb = vgraph.sample_edges_random(
                        [p], edge_pool, self.n_codes, self.cfg.neg_samples,
                        edge_rng, self.cfg.edge_cap)
                else:
                    eb = vgraph.sample_edges(
                        [p], self.n_codes, self.cfg.neg_samples, edge_rng,
                        self.cfg.edge_cap)
                per_patient_edges[i] = eb.entries
        total = Tensor(0.0)
        for p, entries in zip(patients, per_patient_edges):
            total = total + self.patient_loss(p, entries, alpha, beta)
        return total / float(len(patients))

    # -- prediction ---------------------------------------------------------

    def step_predictions(self, patient):
        """All next-step predictions of one teacher-forced pass (no grads).

        Returns a list over i = 1..N-1 of
        (probs over codes, expected next time, attention weights).
        """
        with ad.no_grad():
            visits, steps = self.sequence_steps(patient.visits)
            out = []
            for i in range(len(visits) - 1):
                h, s, v, theta = steps[i]
                probs = self.predict_codes(s).data
                ctx = self.intensity_context(h, s, v, visits[i].t)
                out.append((probs, expected_next_time(ctx), theta.data))
        return out

    def predict_next(self, prefix_visits):
        """Prediction for the visit following a prefix (length >= 1)."""
        if not prefix_visits:
            raise ModelError("prefix must contain at least one visit")
        with ad.no_grad():
            visits, steps = self.sequence_steps(prefix_visits)
            h, s, v, theta = steps[-1]
            probs = self.predict_codes(s).data
            ctx = self.intensity_context(h, s, v, visits[-1].t)
            t_hat = expected_next_time(ctx)
        return t_hat, probs, theta.data


def train_model(model, train_patients, cfg, epoch_callback=None):
    """Seeded minibatch training; returns the Adam state used.

    The patient order, edge sampling and initialization all derive from
    cfg.seed through named substreams, so runs are bit-reproducible.
    """
    if not train_patients:
        raise ModelError("empty training split")
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    run_training(model, train_patients, cfg, state, cfg.epochs, epoch_callback)
    return state


def run_training(model, train_patients, cfg, state, epochs,
                 epoch_callback=None, epoch_offset=0):
    params = model.parameters()
    order_rng = substream(cfg.seed, "order")
    edge_rng = substream(cfg.seed, "edges")
    pool = None
    if cfg.ablation.random_edge_sampling and not cfg.ablation.no_graph:
        pool = vgraph.build_edge_pool(train_patients)
    patients = list(train_patients)
    for epoch in range(epoch_offset, epoch_offset + epochs):
        order = order_rng.permutation(len(patients))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(patients), cfg.batch_size):
            batch = [patients[i] for i in order[start:start + cfg.batch_size]]
            loss = model.batch_loss(batch, edge_rng, edge_pool=pool)
            epoch_loss += loss.item()
            n_batches += 1
            ad.backward(loss)
            ad.adam_step(params, state)
        if epoch_callback is not None:
            epoch_callback(epoch, epoch_loss / max(n_batches, 1))
