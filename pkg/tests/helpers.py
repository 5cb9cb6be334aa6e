"""Shared oracles and tiny model builders for the tests."""
import numpy as np
import torch

from gpvae.gp import EncoderNets, GPVarParams
from gpvae.model import Decoder
from gpvae.nn import MLP, Activation
from gpvae.prob import RngStream


def linear_mlp(W, b) -> MLP:
    """Single affine layer with the given weight (out x in) and bias."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    net = MLP([W.shape[1], W.shape[0]], Activation.IDENTITY)
    with torch.no_grad():
        net.params.copy_(torch.from_numpy(np.concatenate([W.ravel(), b])))
    return net


def random_nets(D, d, p, h, seed) -> EncoderNets:
    rng = RngStream(seed)
    base = MLP([D, h, h, 2 * d], Activation.LEAKY_RELU).init(rng.child("base"))
    feats = MLP([D, h, h, 2 * p], Activation.LEAKY_RELU).init(rng.child("feat"))
    return EncoderNets(base, feats)


def random_lambda(d, p, seed, scale=0.5, diag=False):
    """Random variational parameters plus their dense numpy counterparts.

    Returns ``(lam, dense)`` where ``dense`` holds mu, eta (d, p) and the
    covariance factors / matrices built directly from the log-Cholesky numbers.
    """
    g = np.random.default_rng(seed)
    blocks, dense = [], {"mu": [], "eta": [], "Ls": [], "Lg": []}
    for _ in range(d):
        mu, eta = g.normal(0, scale, p), g.normal(0, scale, p)
        facs = []
        for _ in range(2):
            S = np.zeros((p, p)) if diag else np.tril(g.normal(0, scale, (p, p)), -1)
            S[np.diag_indices(p)] = g.normal(np.log(scale), 0.3, p)
            facs.append(S)
        blocks.append(tuple(torch.from_numpy(a) for a in (mu, facs[0], eta, facs[1])))
        for name, val in (("mu", mu), ("eta", eta)):
            dense[name].append(val)
        for name, S in (("Ls", facs[0]), ("Lg", facs[1])):
            L = np.tril(S, -1) + np.diag(np.exp(np.diag(S)))
            dense[name].append(L)
    dense = {k: np.array(v) for k, v in dense.items()}
    dense["Sigma"] = dense["Ls"] @ dense["Ls"].transpose(0, 2, 1)
    dense["Gamma"] = dense["Lg"] @ dense["Lg"].transpose(0, 2, 1)
    return GPVarParams.from_log_cholesky_blocks(blocks, diag=diag), dense


def sample_weights(dense, n, g):
    """n ancestral draws of W and U from q(W, U): arrays (n, d, p)."""
    d, p = dense["mu"].shape
    W = dense["mu"] + np.einsum("jkl,njl->njk", dense["Ls"], g.standard_normal((n, d, p)))
    U = dense["eta"] + np.einsum("jkl,njl->njk", dense["Lg"], g.standard_normal((n, d, p)))
    return W, U


def net_outputs(nets, x, d, p):
    """Base outputs b, c and features phi_m, phi_s as numpy arrays for a single input row."""
    with torch.no_grad():
        base = nets.base(torch.as_tensor(x)).numpy()
        feats = nets.features(torch.as_tensor(x)).numpy()
    return base[:d], base[d:], feats[:p], feats[p:]


def conjugate_decoder(a, c0, sigma2) -> Decoder:
    """x | z ~ N(a z + c0, sigma2) with scalar z and x."""
    return Decoder(linear_mlp([[a]], [c0]), sigma2)


def conjugate_posterior(x, a, c0, sigma2):
    """Exact N(m, s2) posterior and log p(x) for z ~ N(0, 1), x | z ~ N(a z + c0, sigma2)."""
    s2 = 1.0 / (1.0 + a * a / sigma2)
    m = s2 * a * (x - c0) / sigma2
    var_x = a * a + sigma2
    log_px = -0.5 * np.log(2 * np.pi * var_x) - (x - c0) ** 2 / (2 * var_x)
    return m, s2, log_px


def central_fd(fn, theta: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar ``fn`` at flat ``theta``."""
    out = torch.empty_like(theta)
    base = theta.detach().clone()
    for i in range(len(base)):
        up, dn = base.clone(), base.clone()
        up[i] += h
        dn[i] -= h
        out[i] = (float(fn(up)) - float(fn(dn))) / (2 * h)
    return out


def elbo_gradient_check(seed=0, h_fd=1e-5):
    """Analytic gradients of the mean ELBO against central differences of an extended-precision oracle.

    Tiny instance: 2 datapoints, d=2, p=4, h=8, random (non-initial) variational
    parameters, MC noise frozen by reusing the same stream address for every evaluation.
    Returns ``(groups, value_float64, value_extended)`` with groups mapping
    name -> (analytic, finite_difference) as float64 tensors.
    """
    from fd_oracle import LD, ExtendedElbo
    from gpvae.nn import grad
    from gpvae.training import TrainConfig, elbo, init_state

    cfg = TrainConfig(mode="gpvae", d=2, p=4, h=8, mc_kl=8, seed=seed)
    x = torch.from_numpy(np.random.default_rng(seed).uniform(size=(2, 3)))
    model = init_state(cfg, 3).model
    lam, _ = random_lambda(2, 4, seed, scale=0.3)
    with torch.no_grad():
        model.lam.params.copy_(lam.params)
    groups = model.groups()
    rng = RngStream(seed, ("fd",))
    value = elbo(model, x, rng, n_data=2).mean()
    analytic = dict(zip(groups, grad(value, list(groups.values()))))
    oracle = ExtendedElbo(model, x.numpy(), rng, n_data=2)
    snapshot = {k: v.detach().numpy() for k, v in groups.items()}
    fd = oracle.central_differences(snapshot, LD(h_fd))
    out = {k: (analytic[k].detach(), torch.from_numpy(fd[k].astype(np.float64))) for k in groups}
    return out, float(value.detach()), float(oracle(snapshot))


def relative_errors(a: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """|a - f| / max(|a|, |f|), defined as 0 where both are exactly 0."""
    scale = torch.maximum(a.abs(), f.abs())
    return torch.where(scale > 0, (a - f).abs() / torch.where(scale > 0, scale, torch.ones_like(scale)),
                       torch.zeros_like(scale))


def vae_reduction_runs(x, steps=100, seed=0, d=2, h=32, batch_size=128, scale=1e-150):
    """Train vae mode and gpvae mode with frozen near-zero variational parameters side by side.

    Returns per-step (max |param diff| over encoder and decoder, |ELBO diff|).
    """
    from gpvae.training import TrainConfig, init_state, train_step

    common = dict(d=d, h=h, batch_size=batch_size, seed=seed)
    a = init_state(TrainConfig(mode="vae", **common), x.shape[1])
    b = init_state(TrainConfig(mode="gpvae", freeze_lambda=True, lambda_init_scale=scale, **common), x.shape[1])
    xt = torch.from_numpy(np.ascontiguousarray(x))
    root = RngStream(seed)
    n = len(x)
    per_batch = int(np.ceil(n / batch_size))
    trace = []
    for step in range(steps):
        epoch, i = divmod(step, per_batch)
        order = torch.from_numpy(root.child("shuffle", epoch).permutation(n))
        xb = xt[order[i * batch_size:(i + 1) * batch_size]]
        ea = train_step(a, xb, root.child("train", epoch, i), n)
        eb = train_step(b, xb, root.child("train", epoch, i), n)
        diff = max(float((a.model.groups()[k] - b.model.groups()[k]).abs().max().detach()) for k in ("encoder", "decoder"))
        trace.append((diff, abs(ea - eb)))
    return trace
