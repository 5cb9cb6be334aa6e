"""An independent re-implementation of the per-datapoint ELBO in numpy extended precision.

Used as the finite-difference oracle for gradient checks: in float64 a central
difference with step 1e-5 carries roughly eps * |f| / h ~ 1e-10 of rounding
noise, which swamps gradient entries below ~1e-6. Extended precision (64-bit
mantissa) pushes that floor down by three orders of magnitude.
"""
import numpy as np

from gpvae.prob import RngStream

LD = np.longdouble
EPS_VAR = LD("1e-8")


def _mlp(flat, widths, hidden, x):
    off = 0
    n_layers = len(widths) - 1
    for i, (fin, fout) in enumerate(zip(widths[:-1], widths[1:])):
        W = flat[off:off + fin * fout].reshape(fout, fin)
        off += fin * fout
        b = flat[off:off + fout]
        off += fout
        x = x @ W.T + b
        if i < n_layers - 1:
            x = np.where(x >= 0, x, hidden * x)
    return x


def _lower(raw):
    p = raw.shape[-1]
    tril = np.tril(np.ones((p, p), dtype=LD), -1)
    eye = np.eye(p, dtype=LD)
    return raw * tril + eye * np.exp(np.diagonal(raw, axis1=-2, axis2=-1))[..., None, :]


class ExtendedElbo:
    """Mean ELBO of a gpvae-mode model on a fixed batch with frozen noise."""

    def __init__(self, model, x, rng: RngStream, n_data: int):
        cfg = model.config
        self.d, self.p, self.D, self.h = cfg.d, cfg.p, model.data_dim, cfg.h
        self.s2 = LD(cfg.sigma2_x)
        self.n_data = n_data
        self.x = np.asarray(x, dtype=LD)
        B = len(self.x)
        # same stream addresses the training objective uses
        self.eps_log = rng.child("logsq").normal((cfg.mc_kl, B, self.d, self.p)).numpy().astype(LD)
        self.eps_rec = rng.child("recon").normal((cfg.mc_recon, B, self.d)).numpy().astype(LD)

    def __call__(self, groups: dict) -> LD:
        d, p, D, h = self.d, self.p, self.D, self.h
        g = {k: np.asarray(v, dtype=LD) for k, v in groups.items()}
        enc = _mlp(g["encoder"], [D, h, h, 2 * d], LD("0.01"), self.x)
        feat = _mlp(g["features"], [D, h, h, 2 * p], LD("0.01"), self.x)
        b, c = enc[:, :d], enc[:, d:]
        pm, ps = feat[:, :p], feat[:, p:]
        lam = g["lambda"]
        dp = d * p
        mu, eta = lam[:dp].reshape(d, p), lam[dp:2 * dp].reshape(d, p)
        Ls = _lower(lam[2 * dp:2 * dp + dp * p].reshape(d, p, p))
        Lg = _lower(lam[2 * dp + dp * p:].reshape(d, p, p))
        m = b + pm @ mu.T
        proj_m = np.einsum("nk,jkl->njl", pm, Ls)
        proj_s = np.einsum("nk,jkl->njl", ps, Lg)
        eta_s = ps @ eta.T
        v = np.maximum((c + eta_s) ** 2 + (proj_s ** 2).sum(-1) + (proj_m ** 2).sum(-1), EPS_VAR)
        std = c + eta_s + (self.eps_log * proj_s).sum(-1)
        log_sq = np.log(np.maximum(std ** 2, EPS_VAR)).mean(0)
        kl = LD("0.5") * (v + m ** 2 - 1 - log_sq).sum(-1)
        z = m + np.sqrt(v) * self.eps_rec
        gz = _mlp(g["decoder"], [d, h, h, D], LD(0), z)
        ll = (-LD("0.5") * np.log(2 * LD(np.pi) * self.s2) - (self.x - gz) ** 2 / (2 * self.s2)).sum(-1).mean(0)

        def block_kl(mean, L):
            logdet = 2 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
            return LD("0.5") * ((L ** 2).sum((-2, -1)) + (mean ** 2).sum(-1) - p - logdet)

        wkl = (block_kl(mu, Ls) + block_kl(eta, Lg)).sum()
        return (ll - kl - wkl / self.n_data).mean()

    def central_differences(self, groups: dict, h=LD("1e-5")) -> dict:
        base = {k: np.asarray(v, dtype=LD) for k, v in groups.items()}
        out = {}
        for name, flat in base.items():
            fd = np.empty(len(flat), dtype=LD)
            for i in range(len(flat)):
                up, dn = flat.copy(), flat.copy()
                up[i] += h
                dn[i] -= h
                fd[i] = (self({**base, name: up}) - self({**base, name: dn})) / (2 * h)
            out[name] = fd
        return out
