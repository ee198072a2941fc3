"""Sample-average acquisition objectives with frozen noise banks.

Given the frozen standard-normal banks of one BO iteration, the
knowledge-gradient family needs two smooth quantities:

* ``u_values(X)`` / ``u_value_grad(x)``: the L-sample expected metric at
  query points under the current posterior;
* ``joint_value_grad(x, XP, cond)``: the mean over outer samples k of
  the expected metric at ``XP[k]`` after conditioning the selected
  compartments on the reparametrized fantasy outputs drawn at ``x``.

Conditioning on a single fantasy point is applied in closed form against
the unconditioned posterior (exact one-point Gaussian conditioning), so
no refactorization happens inside the optimization loop. Composite-mode
models (every node sees x alone) run on a vectorized numpy backend with
hand-derived gradients; full-network models run through torch autograd,
whose graph handles the chain rule across parent samples.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy.linalg import cho_solve

# Acquisition values feed byte-reproducible run logs; torch reductions
# must not depend on the machine's thread count.
torch.set_num_threads(1)

from .funcnet import COMPOSITE, NetworkSurrogate
from .gp import SurrogateNode, matern52_with_query_grad
from .metrics import ObservationSet
from .ode import COMPARTMENTS

SQRT5 = math.sqrt(5.0)
# Keeps sqrt gradients finite when a posterior variance collapses to ~0.
VAR_FLOOR = 1e-18

NEG_SE_HEAD = "neg_se"
IDENTITY_HEAD = "identity"


# ---------------------------------------------------------------------------
# Numpy backend: composite mode (shared node inputs per compartment)


class _Block:
    """One compartment whose nodes share inputs, kernel, and factorization."""

    def __init__(self, nodes):
        first = nodes[0]
        self.Xn = first._Xn
        self.chol = first.chol
        self.A = np.column_stack([nd.alpha for nd in nodes])  # (n, T)
        self.means = np.array([nd.hyper.mean_const for nd in nodes])
        self.ls = first.hyper.lengthscales
        self.sig2 = float(first.hyper.signal_variance)
        self.jit = float(first.hyper.noise_jitter)
        self.in_shift = first.transform.in_shift
        self.in_scale = first.transform.in_scale
        self.out_shift = float(first.transform.out_shift)
        self.out_scale = float(first.transform.out_scale)

    def query(self, Q, want_grad):
        """Posterior pieces at raw query rows (M, D).

        Returns (mu (M, T), var (M,), var_mask, G, aQ, dmu, dvar, dG)
        with all derivatives taken w.r.t. the raw query coordinates;
        ``var`` is clamped at zero and ``var_mask`` marks where the
        clamp was inactive.
        """
        Qn = (Q - self.in_shift) / self.in_scale
        if want_grad:
            G, dGn = matern52_with_query_grad(Qn, self.Xn, self.ls, self.sig2)
            dG = dGn / self.in_scale
        else:
            diff = (Qn[:, None, :] - self.Xn[None, :, :]) / self.ls
            r = np.sqrt((diff * diff).sum(-1))
            G = self.sig2 * (1 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)
            dG = None
        aQ = cho_solve((self.chol, True), G.T)  # (n, M)
        v = self.sig2 - np.einsum("mn,nm->m", G, aQ)
        vmask = v > 0.0
        v = np.maximum(v, 0.0)
        mu = self.means + G @ self.A
        if not want_grad:
            return mu, v, vmask, G, aQ, None, None, None
        dmu = np.einsum("mnd,nt->mtd", dG, self.A)
        dv = -2.0 * np.einsum("mnd,nm->md", dG, aQ)
        return mu, v, vmask, G, aQ, dmu, dv, dG

    def pair_kernel_grad(self, XP, x):
        """k(x'_k, x) and its gradient w.r.t. x'_k (raw coordinates)."""
        diff = ((XP - x) / self.in_scale) / self.ls
        s2 = (diff * diff).sum(-1)
        r = np.sqrt(s2)
        e = np.exp(-SQRT5 * r)
        k = self.sig2 * (1 + SQRT5 * r + (5.0 / 3.0) * s2) * e
        gfac = -(5.0 / 3.0) * self.sig2 * (1 + SQRT5 * r) * e
        dk_dxp = gfac[:, None] * diff / (self.ls * self.in_scale)
        return k, dk_dxp


class CompositeSaa:
    """Vectorized numpy objective for composite-mode (and scalar) models."""

    def __init__(self, blocks, comp_ids, head, d_obs, w_obs, t_count, eps_outer, eps_inner):
        self.blocks = blocks
        self.comp_ids = comp_ids  # epsilon row per block
        self.head = head
        self.d = d_obs  # (C, T); None for the identity head
        self.w = w_obs
        self.t_count = t_count
        self.eps_outer = eps_outer
        self.eps_inner = eps_inner
        self.K = eps_outer.shape[0]
        self.L = eps_inner.shape[0]

    def _g(self, Y, bi):
        """Metric contribution of one block's samples (..., T)."""
        if self.head == IDENTITY_HEAD:
            return Y[..., 0]
        resid = Y - self.d[bi]
        return -(resid * resid * self.w[bi]).sum(-1) / self.t_count

    def _dg(self, Y, bi, scale):
        """d(objective)/dY where the objective carries weight ``scale``."""
        if self.head == IDENTITY_HEAD:
            out = np.zeros_like(Y)
            out[..., 0] = scale
            return out
        return -2.0 * scale * self.w[bi] * (Y - self.d[bi]) / self.t_count

    def u_values(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        total = np.zeros(X.shape[0])
        for bi, blk in enumerate(self.blocks):
            mu, v, _, _, _, _, _, _ = blk.query(X, want_grad=False)
            sd = np.sqrt(v + VAR_FLOOR)
            eps = self.eps_inner[:, self.comp_ids[bi], :]  # (L, T)
            y = mu[None, :, :] + sd[None, :, None] * eps[:, None, :]
            Y = blk.out_shift + blk.out_scale * y
            total += self._g(Y, bi).mean(0)
        return total

    def u_value_grad(self, x):
        x = np.asarray(x, dtype=float)
        val = 0.0
        grad = np.zeros_like(x)
        for bi, blk in enumerate(self.blocks):
            mu, v, vmask, _, _, dmu, dv, _ = blk.query(x[None, :], want_grad=True)
            sd = math.sqrt(v[0] + VAR_FLOOR)
            eps = self.eps_inner[:, self.comp_ids[bi], :]  # (L, T)
            y = mu[0] + sd * eps
            Y = blk.out_shift + blk.out_scale * y
            val += float(self._g(Y, bi).mean())
            dY = self._dg(Y, bi, 1.0 / self.L) * blk.out_scale  # (L, T)
            g_mu = dY.sum(0)
            g_v = float((dY * eps).sum()) / (2.0 * sd) if vmask[0] else 0.0
            grad += g_mu @ dmu[0] + g_v * dv[0]
        return val, grad

    def u_fantasy_values(self, x, XP, cond) -> np.ndarray:
        """Per-fantasy conditioned expected metric at XP rows (no gradient)."""
        x = np.asarray(x, dtype=float)
        XP = np.atleast_2d(np.asarray(XP, dtype=float))
        total = np.zeros(XP.shape[0])
        for bi, blk in enumerate(self.blocks):
            Q = np.vstack([x[None, :], XP])
            mu, v, _, G, aQ, _, _, _ = blk.query(Q, want_grad=False)
            eps_in = self.eps_inner[:, self.comp_ids[bi], :]
            if cond[bi]:
                sd_x = math.sqrt(v[0] + VAR_FLOOR)
                denom = v[0] + blk.jit
                kxq, _ = blk.pair_kernel_grad(XP, x)
                cc = kxq - G[1:] @ aQ[:, 0]
                dev = sd_x * self.eps_outer[:, self.comp_ids[bi], :]
                mu2 = mu[1:] + (cc / denom)[:, None] * dev
                v2 = np.maximum(v[1:] - cc * cc / denom, 0.0)
            else:
                mu2, v2 = mu[1:], v[1:]
            sd2 = np.sqrt(v2 + VAR_FLOOR)
            y = mu2[None, :, :] + sd2[None, :, None] * eps_in[:, None, :]
            Y = blk.out_shift + blk.out_scale * y
            total += self._g(Y, bi).mean(0)
        return total

    def joint_value_grad(self, x, XP, cond):
        """Mean conditioned expected metric over fantasies, with gradient
        w.r.t. the concatenated vector [x, XP.ravel()]."""
        x = np.asarray(x, dtype=float)
        XP = np.atleast_2d(np.asarray(XP, dtype=float))
        K, D = XP.shape
        scale = 1.0 / (self.K * self.L)
        val = 0.0
        gx = np.zeros(D)
        gXP = np.zeros((K, D))
        for bi, blk in enumerate(self.blocks):
            Q = np.vstack([x[None, :], XP])
            mu, v, vmask, G, aQ, dmu, dv, dG = blk.query(Q, want_grad=True)
            eps_out = self.eps_outer[:, self.comp_ids[bi], :]  # (K, T)
            eps_in = self.eps_inner[:, self.comp_ids[bi], :]  # (L, T)
            if cond[bi]:
                v_x = v[0]
                sd_x = math.sqrt(v_x + VAR_FLOOR)
                denom = v_x + blk.jit
                kxq, dkxq = blk.pair_kernel_grad(XP, x)
                cc = kxq - G[1:] @ aQ[:, 0]  # (K,)
                wgt = cc / denom
                dev = sd_x * eps_out  # (K, T)
                mu2 = mu[1:] + wgt[:, None] * dev
                v2_raw = v[1:] - cc * cc / denom
                v2mask = v2_raw > 0.0
                v2 = np.maximum(v2_raw, 0.0)
            else:
                mu2, v2, v2mask = mu[1:], v[1:], vmask[1:]
            sd2 = np.sqrt(v2 + VAR_FLOOR)
            y = mu2[None, :, :] + sd2[None, :, None] * eps_in[:, None, :]
            Y = blk.out_shift + blk.out_scale * y  # (L, K, T)
            val += float(self._g(Y, bi).sum()) * scale

            dY = self._dg(Y, bi, scale) * blk.out_scale  # (L, K, T)
            g_mu2 = dY.sum(0)  # (K, T)
            g_sd2 = (dY * eps_in[:, None, :]).sum(axis=(0, 2))  # (K,)
            g_v2 = np.where(v2mask, g_sd2 / (2.0 * sd2), 0.0)

            # Through the unconditioned posterior at the XP rows.
            gXP += np.einsum("kt,ktd->kd", g_mu2, dmu[1:]) + g_v2[:, None] * dv[1:]

            if cond[bi]:
                g_wgt = np.einsum("kt,kt->k", g_mu2, dev)
                g_dev = g_mu2 * wgt[:, None]
                g_sdx = float((g_dev * eps_out).sum())
                g_cc = g_wgt / denom - 2.0 * cc / denom * g_v2
                g_denom = (-float((g_wgt * cc).sum())
                           + float((cc * cc * g_v2).sum())) / denom**2
                # cc_k = k(x'_k, x) - G[1+k] . aQ[:, 0]
                gXP += g_cc[:, None] * (dkxq - np.einsum("knd,n->kd", dG[1:], aQ[:, 0]))
                gx -= g_cc @ dkxq
                gx -= np.einsum("k,nk,nd->d", g_cc, aQ[:, 1:], dG[0])
                if vmask[0]:
                    gx += (g_denom + g_sdx / (2.0 * sd_x)) * dv[0]
        return val, np.concatenate([gx, gXP.ravel()])


# ---------------------------------------------------------------------------
# Torch backend: full-network mode


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _matern_t(Q, X, ls, sig2):
    diff = (Q.unsqueeze(-2) - X) / ls
    s2 = diff.square().sum(-1)
    r = s2.clamp_min(1e-24).sqrt()
    return sig2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * s2) * torch.exp(-SQRT5 * r)


def _matern_pair_t(A, B, ls, sig2):
    diff = (A - B) / ls
    s2 = diff.square().sum(-1)
    r = s2.clamp_min(1e-24).sqrt()
    return sig2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * s2) * torch.exp(-SQRT5 * r)


class _NodeTensors:
    """Per-time node caches of one compartment, stacked into tensors.

    All queries run batched across the time axis: every method maps a
    (T, ..., d) query block through the T per-time factorizations in one
    set of tensor ops.
    """

    def __init__(self, nodes):
        first = nodes[0]
        self.Xn = torch.stack([_t(nd._Xn) for nd in nodes])  # (T, n, d)
        self.chol = torch.stack([_t(nd.chol) for nd in nodes])
        self.alpha = torch.stack([_t(nd.alpha) for nd in nodes])  # (T, n)
        self.means = _t([nd.hyper.mean_const for nd in nodes])
        self.jit = _t([nd.hyper.noise_jitter for nd in nodes])
        self.ls = _t(first.hyper.lengthscales)
        self.sig2 = float(first.hyper.signal_variance)
        self.in_shift = _t(first.transform.in_shift)
        self.in_scale = _t(first.transform.in_scale)
        self.out_shift = float(first.transform.out_shift)
        self.out_scale = float(first.transform.out_scale)
        self.Xs = self.Xn / self.ls  # lengthscale-scaled rows
        self.x_sq = self.Xs.square().sum(-1)  # (T, n)
        eye = torch.eye(self.Xn.shape[1], dtype=torch.float64)
        self.Kinv = torch.cholesky_solve(eye.expand(self.chol.shape[0], -1, -1), self.chol)

    def norm(self, Q):
        return (Q - self.in_shift) / self.in_scale

    def kernel_rows(self, Qn):
        """k(q, X_t) for queries (T, ..., d) -> (T, ..., n).

        Distances use the matmul expansion |q-x|^2 = |q|^2 + |x|^2 - 2qx
        to avoid materializing a (..., n, d) difference tensor.
        """
        Qs = Qn / self.ls
        T = Qs.shape[0]
        flat = Qs.reshape(T, -1, Qs.shape[-1])  # (T, M, d)
        cross = torch.bmm(flat, self.Xs.transpose(1, 2))  # (T, M, n)
        s2 = (flat.square().sum(-1, keepdim=True) + self.x_sq.unsqueeze(1)
              - 2.0 * cross).clamp_min(0.0)
        r = s2.clamp_min(1e-24).sqrt()
        k = self.sig2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * s2) * torch.exp(-SQRT5 * r)
        return k.reshape(*Qs.shape[:-1], self.Xn.shape[1])

    def post_all(self, Qn):
        """Posterior mean/variance at (T, ..., d) queries, plus the kernel
        rows for reuse; all outputs lead with the time axis."""
        kq = self.kernel_rows(Qn)
        T = kq.shape[0]
        flat = kq.reshape(T, -1, kq.shape[-1])  # (T, M, n)
        aq = torch.bmm(flat, self.Kinv)  # (T, M, n)
        var = (self.sig2 - (flat * aq).sum(-1)).reshape(kq.shape[:-1])
        mean = torch.einsum("tmn,tn->tm", flat, self.alpha).reshape(kq.shape[:-1])
        shape = (T,) + (1,) * (kq.dim() - 2)
        return self.means.reshape(shape) + mean, var.clamp_min(0.0), kq


class NetworkSaa:
    """Objective for full-network models: parents enter each node's input."""

    def __init__(self, comps, parents, comp_ids, d_obs, w_obs, t_count,
                 eps_outer, eps_inner):
        self.comps = comps  # list of _NodeTensors, topological order
        self.parents = parents  # per comp: indices into self.comps
        self.comp_ids = comp_ids
        self.d = _t(d_obs)
        self.w = _t(w_obs)
        self.t_count = t_count
        self.eps_outer = _t(eps_outer)
        self.eps_inner = _t(eps_inner)
        self.K = eps_outer.shape[0]
        self.L = eps_inner.shape[0]
        self.n_times = self.d.shape[1]

    def _g_total(self, samples):
        """samples per comp: (T, ...); returns the metric over (...)."""
        total = None
        for bi, Y in enumerate(samples):
            w = self.w[bi].reshape((-1,) + (1,) * (Y.dim() - 1))
            dd = self.d[bi].reshape((-1,) + (1,) * (Y.dim() - 1))
            contrib = -((Y - dd).square() * w).sum(0) / self.t_count
            total = contrib if total is None else total + contrib
        return total

    def _expand_x(self, xblock, lead):
        """Broadcast an (..., D) query to (T, ..., D)."""
        return xblock.unsqueeze(0).expand(self.n_times, *lead, -1)

    def _u_batch_t(self, Xq: torch.Tensor) -> torch.Tensor:
        L, B = self.L, Xq.shape[0]
        Xq_full = self._expand_x(Xq.unsqueeze(0).expand(L, B, -1), (L, B))
        samples = []  # per comp: (T, L, B)
        for bi, blk in enumerate(self.comps):
            if self.parents[bi]:
                pvals = torch.stack([samples[p] for p in self.parents[bi]], dim=-1)
                Q = torch.cat([Xq_full, pvals], dim=-1)
            else:
                Q = Xq_full
            mean, var, _ = blk.post_all(blk.norm(Q))
            sd = (var + VAR_FLOOR).sqrt()
            eps = self.eps_inner[:, self.comp_ids[bi], :].T.reshape(self.n_times, L, 1)
            samples.append(blk.out_shift + blk.out_scale * (mean + sd * eps))
        return self._g_total(samples).mean(0)

    def _u_fantasy_t(self, x: torch.Tensor, XP: torch.Tensor, cond) -> torch.Tensor:
        K, L = XP.shape[0], self.L
        x_rows = self._expand_x(x.unsqueeze(0).expand(K, -1), (K,))  # (T, K, D)
        # Outer pass: fantasy input rows, deviations, and denominators.
        fant_rows, fant_dev, fant_denom, out_samples = [], [], [], []
        for bi, blk in enumerate(self.comps):
            if self.parents[bi]:
                pvals = torch.stack([out_samples[p] for p in self.parents[bi]], dim=-1)
                U = torch.cat([x_rows, pvals], dim=-1)
            else:
                U = x_rows
            Un = blk.norm(U)  # (T, K, d)
            mean_u, var_u, _ = blk.post_all(Un)
            sd_u = (var_u + VAR_FLOOR).sqrt()
            dev = sd_u * self.eps_outer[:, self.comp_ids[bi], :].T  # (T, K)
            fant_rows.append(Un)
            fant_dev.append(dev)
            fant_denom.append(var_u + blk.jit.reshape(-1, 1))
            out_samples.append(blk.out_shift + blk.out_scale * (mean_u + dev))

        # Inner pass: conditioned sampling at XP, batched over (L, K).
        XP_full = self._expand_x(XP.unsqueeze(0).expand(L, K, -1), (L, K))
        samples = []
        for bi, blk in enumerate(self.comps):
            if self.parents[bi]:
                pvals = torch.stack([samples[p] for p in self.parents[bi]], dim=-1)
                Q = torch.cat([XP_full, pvals], dim=-1)
            else:
                Q = XP_full
            Qn = blk.norm(Q)  # (T, L, K, d)
            mean_q, var_q, kq = blk.post_all(Qn)
            if cond[bi]:
                Un = fant_rows[bi]  # (T, K, d)
                ku = blk.kernel_rows(Un)  # (T, K, n)
                au = torch.bmm(ku, blk.Kinv)  # (T, K, n)
                kqu = _matern_pair_t(Qn, Un.unsqueeze(1), blk.ls, blk.sig2)  # (T, L, K)
                cov = kqu - torch.einsum("tlkn,tkn->tlk", kq, au)
                denom = fant_denom[bi].unsqueeze(1)  # (T, 1, K)
                mean2 = mean_q + cov * fant_dev[bi].unsqueeze(1) / denom
                var2 = (var_q - cov.square() / denom).clamp_min(0.0)
            else:
                mean2, var2 = mean_q, var_q
            sd2 = (var2 + VAR_FLOOR).sqrt()
            eps = self.eps_inner[:, self.comp_ids[bi], :].T.reshape(self.n_times, L, 1)
            samples.append(blk.out_shift + blk.out_scale * (mean2 + sd2 * eps))
        return self._g_total(samples).mean(0)

    # -- numpy-facing protocol ---------------------------------------------

    def u_values(self, X) -> np.ndarray:
        with torch.no_grad():
            return self._u_batch_t(_t(np.atleast_2d(X))).numpy()

    def u_value_grad(self, x):
        xt = _t(x).requires_grad_(True)
        u = self._u_batch_t(xt.unsqueeze(0))[0]
        u.backward()
        return float(u.detach()), xt.grad.numpy()

    def u_fantasy_values(self, x, XP, cond) -> np.ndarray:
        with torch.no_grad():
            return self._u_fantasy_t(_t(x), _t(np.atleast_2d(XP)), cond).numpy()

    def joint_value_grad(self, x, XP, cond):
        xt = _t(x).requires_grad_(True)
        xpt = _t(XP).requires_grad_(True)
        u = self._u_fantasy_t(xt, xpt, cond).mean()
        u.backward()
        grad = np.concatenate([xt.grad.numpy(), xpt.grad.numpy().ravel()])
        return float(u.detach()), grad


# ---------------------------------------------------------------------------
# Builder


def _obs_tables(obs: ObservationSet, compartments, time_indices):
    C, T = len(compartments), len(time_indices)
    d = np.zeros((C, T))
    w = np.zeros((C, T))
    for bi, c in enumerate(compartments):
        ci = COMPARTMENTS.index(c)
        for k, t in enumerate(time_indices):
            if obs.mask[t, ci]:
                d[bi, k] = obs.values[t, ci]
                w[bi, k] = 1.0
    return d, w


def build_saa(model, obs, eps_outer, eps_inner):
    """SAA objective for a network surrogate or a scalar objective node."""
    if isinstance(model, SurrogateNode):
        return CompositeSaa([_Block([model])], [0], IDENTITY_HEAD,
                            None, None, 1, eps_outer, eps_inner)
    assert isinstance(model, NetworkSurrogate)
    comp_ids = [model.comp_index(c) for c in model.compartments]
    d, w = _obs_tables(obs, model.compartments, model.time_indices)
    if model.mode == COMPOSITE and _composite_eligible(model):
        blocks = [_Block(model.nodes[c]) for c in model.compartments]
        return CompositeSaa(blocks, comp_ids, NEG_SE_HEAD, d, w,
                            obs.n_observed_times, eps_outer, eps_inner)
    comps = [_NodeTensors(model.nodes[c]) for c in model.compartments]
    parents = [
        [model.compartments.index(p) for p in model.parents[c]]
        for c in model.compartments
    ]
    return NetworkSaa(comps, parents, comp_ids, d, w,
                      obs.n_observed_times, eps_outer, eps_inner)


def _composite_eligible(model: NetworkSurrogate) -> bool:
    """Nodes of each compartment must share inputs and kernel settings."""
    for c in model.compartments:
        nodes = model.nodes[c]
        first = nodes[0]
        for nd in nodes[1:]:
            if nd.X.shape != first.X.shape or not np.array_equal(nd.X, first.X):
                return False
            if not np.array_equal(nd.hyper.lengthscales, first.hyper.lengthscales):
                return False
            if (nd.hyper.signal_variance, nd.hyper.noise_jitter) != (
                first.hyper.signal_variance,
                first.hyper.noise_jitter,
            ):
                return False
    return True
