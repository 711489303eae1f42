"""Conditional Gaussian-mixture VAE over task embeddings.

Latents: a categorical component c (K values), a Gaussian y that feeds the
component prior network, and a Gaussian x whose prior given (y, c, O) is a
mixture component. The decoder maps x and the observation features to a
task-embedding estimate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .tensor import Adam, Graph, NumericError, nn, ops, param_checksum
from .tensor.engine import Node
from .tensor.serialize import checkpoint_bytes, parse_checkpoint

LOGVAR_MIN, LOGVAR_MAX = -8.0, 4.0
LOG_2PI = math.log(2 * math.pi)
TERMS = ("recon", "x_kl", "y_kl", "c_kl")


class TrainingDiverged(RuntimeError):
    pass


# -- Gumbel-Softmax ------------------------------------------------------------------

@dataclass(frozen=True)
class GumbelDraw:
    g: np.ndarray
    omega: np.ndarray
    tau: float


def gumbel_softmax_sample(log_pi: np.ndarray, tau: float, seed: int = 0) -> GumbelDraw:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    log_pi = np.asarray(log_pi, dtype=np.float64)
    g = np.random.default_rng(seed).gumbel(size=log_pi.shape)
    return GumbelDraw(g, relaxed_one_hot(log_pi, g, tau), tau)


def relaxed_one_hot(log_pi: np.ndarray, g: np.ndarray, tau: float) -> np.ndarray:
    a = (np.asarray(log_pi, dtype=np.float64) + g) / tau
    return np.exp(a - logsumexp(a, axis=-1, keepdims=True))


def _check_interior(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    if np.any(omega <= 0) or abs(omega.sum() - 1.0) > 1e-9:
        raise ValueError("omega must lie in the open simplex")
    return omega


def gumbel_density(omega: np.ndarray, pi: np.ndarray, tau: float) -> float:
    """Gamma(k) tau^(k-1) (sum pi_i / w_i^tau)^(-k) prod(pi_i / w_i^tau)."""
    omega = _check_interior(omega)
    pi = np.asarray(pi, dtype=np.float64)
    k = len(omega)
    r = pi / omega ** tau
    return float(np.exp(gammaln(k) + (k - 1) * math.log(tau) - k * math.log(r.sum()) + np.log(r).sum()))


def gumbel_density_normalized(omega: np.ndarray, pi: np.ndarray, tau: float) -> float:
    """Same expression with the change-of-variables factor prod(1 / w_i) included."""
    omega = _check_interior(omega)
    return gumbel_density(omega, pi, tau) / float(np.prod(omega))


# -- configuration and parameters ----------------------------------------------------

@dataclass(frozen=True)
class ModeSelectorConfig:
    K: int = 8
    y_dim: int = 8
    x_dim: int = 16
    z_dim: int = 32
    n_views: int = 5
    feat_dim: int = 32
    cond_dim: int = 64
    hidden: int = 64
    depth: int = 2
    dec_dim: int = 64
    dec_heads: int = 4
    dec_layers: int = 2
    tau_start: float = 1.0
    tau_end: float = 0.3
    kl_weight: float = 1.0
    use_gumbel: bool = True
    batch_size: int = 32
    lr: float = 1e-3


class ModeSelector:
    """Network structure; parameters live in ``self.params``, data scales in ``self.buffers``."""

    def __init__(self, cfg: ModeSelectorConfig, seed: int = 0):
        self.cfg = cfg
        c = cfg
        self.cond = nn.Linear("ms.cond", c.n_views * c.feat_dim, c.cond_dim)
        self.q_y = nn.ResMLP("ms.qy", c.z_dim + c.cond_dim, c.hidden, 2 * c.y_dim, c.depth)
        self.q_x = nn.ResMLP("ms.qx", c.z_dim + c.cond_dim, c.hidden, 2 * c.x_dim, c.depth)
        self.prior = nn.ResMLP("ms.prior", c.y_dim + c.cond_dim, c.hidden, 2 * c.K * c.x_dim, c.depth)
        self.view_in = nn.Linear("ms.dec.view_in", c.feat_dim, c.dec_dim)
        self.x_in = nn.Linear("ms.dec.x_in", c.x_dim, c.dec_dim)
        self.decoder = nn.Transformer("ms.dec.tf", c.dec_dim, c.dec_heads, c.dec_layers)
        self.head = nn.Linear("ms.dec.out", c.dec_dim, c.z_dim)
        rng = np.random.default_rng([seed, 0x3D5])
        params = {}
        for m in (self.cond, self.q_y, self.q_x, self.prior, self.view_in, self.x_in, self.decoder, self.head):
            params.update(m.init(rng))
        params["ms.dec.pos"] = (0.02 * rng.standard_normal((c.n_views + 1, c.dec_dim))).astype(np.float32)
        self.params = params
        self.buffers = {"ms.z_scale": np.ones((), np.float32),
                        "ms.f_mean": np.zeros((), np.float32),
                        "ms.f_scale": np.ones((), np.float32)}

    # -- data scaling -----------------------------------------------------------
    def fit_scales(self, feats: np.ndarray, z: np.ndarray) -> None:
        self.buffers["ms.z_scale"] = np.float32(max(np.sqrt(np.mean(np.square(z))), 1e-6))
        self.buffers["ms.f_mean"] = np.float32(np.mean(feats))
        self.buffers["ms.f_scale"] = np.float32(max(np.std(feats), 1e-6))

    def scale_feats(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats) - self.buffers["ms.f_mean"]) / self.buffers["ms.f_scale"]

    def scale_z(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) / self.buffers["ms.z_scale"]

    # -- network pieces (inputs already scaled) ---------------------------------
    def graph(self, dtype=np.float32, params=None) -> Graph:
        return Graph(self.params if params is None else params, dtype=dtype)

    def condition(self, g: Graph, feats: Node) -> Node:
        b = feats.shape[0]
        return self.cond(g, ops.reshape(feats, (b, -1)))

    def _split(self, h: Node, d: int) -> tuple[Node, Node]:
        mu = ops.slice_(h, (Ellipsis, slice(0, d)))
        lv = ops.clamp(ops.slice_(h, (Ellipsis, slice(d, 2 * d))), LOGVAR_MIN, LOGVAR_MAX)
        return mu, lv

    def posterior_y(self, g, z, cond):
        return self._split(self.q_y(g, ops.concat([z, cond], axis=-1)), self.cfg.y_dim)

    def posterior_x(self, g, z, cond):
        return self._split(self.q_x(g, ops.concat([z, cond], axis=-1)), self.cfg.x_dim)

    def prior_components(self, g, y, cond) -> tuple[Node, Node]:
        """(B, K, x_dim) means and clamped log-variances."""
        b = y.shape[0]
        h = self.prior(g, ops.concat([y, cond], axis=-1))
        h = ops.reshape(h, (b, self.cfg.K, 2 * self.cfg.x_dim))
        return self._split(h, self.cfg.x_dim)

    def decode(self, g, x, feats) -> Node:
        b = x.shape[0]
        tokens = ops.concat([self.view_in(g, feats), ops.reshape(self.x_in(g, x), (b, 1, self.cfg.dec_dim))], axis=1)
        tokens = ops.bias(tokens, g.param("ms.dec.pos"))
        out = self.decoder(g, tokens)
        return self.head(g, ops.reshape(ops.slice_(out, (slice(None), self.cfg.n_views)), (b, self.cfg.dec_dim)))

    # -- checkpoint ---------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {**{k: self.params[k] for k in sorted(self.params)},
                **{k: self.buffers[k] for k in sorted(self.buffers)}}

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self.state_dict())

    def load_bytes(self, data: bytes) -> "ModeSelector":
        t = parse_checkpoint(data)
        missing = [k for k in list(self.params) + list(self.buffers) if k not in t]
        if missing:
            raise KeyError(f"checkpoint lacks {missing[:3]}")
        for k in self.params:
            self.params[k] = t[k].reshape(self.params[k].shape).astype(np.float32)
        for k in self.buffers:
            self.buffers[k] = np.float32(t[k])
        return self

    def checksum(self) -> str:
        return param_checksum(self.state_dict())


# -- ELBO -------------------------------------------------------------------------------

def component_log_density(x: Node, mu: Node, logvar: Node) -> Node:
    """log N(x; mu_k, diag exp(logvar_k)) for every component: (B, K)."""
    g = x.graph
    xk = ops.expand(x, 1, mu.shape[1])
    d = xk - mu
    quad = ops.mul(ops.mul(d, d), ops.exp(ops.scale(logvar, -1.0)))
    inner = ops.sum_(quad + logvar, axis=-1)
    const = g.const(np.full(inner.shape, mu.shape[2] * LOG_2PI))
    return ops.scale(inner + const, -0.5)


def log_c_posterior(x: Node, mu: Node, logvar: Node, log_pi: np.ndarray) -> Node:
    """log q(c | x, y, O): Bayes over the mixture components, in log space."""
    g = x.graph
    b, k = mu.shape[0], mu.shape[1]
    lp = g.const(np.broadcast_to(np.asarray(log_pi, dtype=np.float64), (b, k)))
    return ops.log_softmax(component_log_density(x, mu, logvar) + lp, axis=-1)


def c_posterior(x: np.ndarray, mu: np.ndarray, logvar: np.ndarray, log_pi: np.ndarray) -> np.ndarray:
    """Numpy float64 version for a single batch, (B, K)."""
    g = Graph(dtype=np.float64, check_finite=False)
    return np.exp(log_c_posterior(g.const(x), g.const(mu), g.const(logvar), log_pi).value)


@dataclass(frozen=True)
class ElboNoise:
    eps_y: np.ndarray
    eps_x: np.ndarray
    gumbel: np.ndarray | None

    @classmethod
    def draw(cls, rng: np.random.Generator, b: int, cfg: ModeSelectorConfig, gumbel: bool) -> "ElboNoise":
        return cls(rng.standard_normal((b, cfg.y_dim)), rng.standard_normal((b, cfg.x_dim)),
                   rng.gumbel(size=(b, cfg.K)) if gumbel else None)


@dataclass
class ElboHeads:
    """Every network output the ELBO is assembled from."""
    mu_y: Node
    lv_y: Node
    mu_x: Node
    lv_x: Node
    y: Node
    x: Node
    mu_c: Node
    lv_c: Node
    eps_hat: Node


def elbo_heads(model: ModeSelector, g: Graph, feats: np.ndarray, z: np.ndarray, noise: ElboNoise) -> ElboHeads:
    f = g.input(feats, "feats")
    zn = g.input(z, "z")
    cond = model.condition(g, f)
    mu_y, lv_y = model.posterior_y(g, zn, cond)
    mu_x, lv_x = model.posterior_x(g, zn, cond)
    y = ops.gaussian_reparameterize(mu_y, lv_y, noise.eps_y)
    x = ops.gaussian_reparameterize(mu_x, lv_x, noise.eps_x)
    mu_c, lv_c = model.prior_components(g, y, cond)
    eps_hat = model.decode(g, x, f)
    return ElboHeads(mu_y, lv_y, mu_x, lv_x, y, x, mu_c, lv_c, eps_hat)


def elbo_terms(h: ElboHeads, z: Node | np.ndarray, log_pi: np.ndarray, noise: ElboNoise | None = None,
               tau: float = 1.0) -> dict[str, Node]:
    """Per-datum (B,) terms. With Gumbel noise the x-term weights are a relaxed draw from q(c)."""
    g = h.x.graph
    b, k, _ = h.mu_c.shape
    recon = ops.squared_error(h.eps_hat, z)
    log_qc = log_c_posterior(h.x, h.mu_c, h.lv_c, log_pi)
    kl_x = ops.kl_diag_gaussian(ops.expand(h.mu_x, 1, k), ops.expand(h.lv_x, 1, k), h.mu_c, h.lv_c)
    if noise is not None and noise.gumbel is not None:
        weights = ops.gumbel_softmax(log_qc, noise.gumbel, tau)
    else:
        weights = ops.exp(log_qc)
    x_term = ops.sum_(ops.mul(weights, kl_x), axis=-1)
    zeros = g.const(np.zeros(h.mu_y.shape))
    y_term = ops.kl_diag_gaussian(h.mu_y, h.lv_y, zeros, zeros)
    lp = g.const(np.broadcast_to(np.asarray(log_pi, dtype=np.float64), (b, k)))
    c_term = ops.kl_categorical(log_qc, lp)
    return {"recon": recon, "x_kl": x_term, "y_kl": y_term, "c_kl": c_term}


def uniform_log_pi(K: int) -> np.ndarray:
    return np.full(K, -math.log(K))


def elbo(model: ModeSelector, g: Graph, feats: np.ndarray, z: np.ndarray, noise: ElboNoise,
         tau: float = 1.0) -> tuple[Node, dict[str, float]]:
    """Scalar batch-mean loss plus the mean of each term. Inputs must be pre-scaled."""
    h = elbo_heads(model, g, feats, z, noise)
    terms = elbo_terms(h, g.input(z), uniform_log_pi(model.cfg.K), noise, tau)
    for name, t in terms.items():
        if not np.all(np.isfinite(t.value)):
            raise NumericError(t.id, name, f"non-finite ELBO term {name}")
    kl = terms["x_kl"] + terms["y_kl"] + terms["c_kl"]
    total = ops.mean(terms["recon"] + ops.scale(kl, model.cfg.kl_weight))
    return total, {k: float(np.mean(v.value)) for k, v in terms.items()}


# -- training -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ModeSelector
    curve: list[dict[str, float]]

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "total", *TERMS])
        for row in self.curve:
            w.writerow([row["epoch"], *(f"{row[k]:.6g}" for k in ("total", *TERMS))])
        return buf.getvalue()


def tau_at(cfg: ModeSelectorConfig, step: int, total: int) -> float:
    if total <= 1:
        return cfg.tau_end
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * step / (total - 1)


def train(feats: np.ndarray, z: np.ndarray, cfg: ModeSelectorConfig, epochs: int, seed: int = 0,
          model: ModeSelector | None = None) -> TrainResult:
    """Adam on the ELBO. ``feats``: (N, 5, feat_dim) per-view features of O_init; ``z``: (N, z_dim)."""
    feats = np.asarray(feats, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if len(feats) == 0 or len(feats) != len(z):
        raise ValueError("need a nonempty, aligned batch of features and embeddings")
    model = model or ModeSelector(cfg, seed)
    model.fit_scales(feats, z)
    fs, zs = model.scale_feats(feats), model.scale_z(z)
    opt = Adam(model.params, lr=cfg.lr, clip_norm=10.0)
    rng = np.random.default_rng([seed, 0x7A1])
    n = len(z)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = epochs * steps_per_epoch
    curve = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(("total", *TERMS), 0.0)
        for s in range(0, n, cfg.batch_size):
            idx = order[s: s + cfg.batch_size]
            noise = ElboNoise.draw(rng, len(idx), cfg, cfg.use_gumbel)
            g = model.graph()
            loss, parts = elbo(model, g, fs[idx], zs[idx], noise, tau_at(cfg, step, total_steps))
            value = float(loss.value)
            if not math.isfinite(value) or value > 1e6:
                raise TrainingDiverged(f"epoch {epoch} step {step}: loss {value:.3g}, terms {parts}")
            opt.step(g.backward(loss))
            step += 1
            w = len(idx) / n
            sums["total"] += w * value
            for k in TERMS:
                sums[k] += w * parts[k]
        curve.append({"epoch": epoch, **sums})
    return TrainResult(model, curve)


# -- inference ---------------------------------------------------------------------------

def _means_path(model: ModeSelector, feats: np.ndarray, z: np.ndarray):
    g = Graph(model.params, dtype=np.float64)
    f = g.input(model.scale_feats(feats))
    zn = g.input(model.scale_z(z))
    cond = model.condition(g, f)
    mu_y, _ = model.posterior_y(g, zn, cond)
    mu_x, _ = model.posterior_x(g, zn, cond)
    mu_c, lv_c = model.prior_components(g, mu_y, cond)
    return g, f, mu_x, mu_c, lv_c


def assign_clusters(model: ModeSelector, feats: np.ndarray, z: np.ndarray) -> np.ndarray:
    """argmax of the c-posterior at the posterior means, (N,)."""
    _, _, mu_x, mu_c, lv_c = _means_path(model, feats, z)
    return np.argmax(c_posterior(mu_x.value, mu_c.value, lv_c.value, uniform_log_pi(model.cfg.K)), axis=1)


def reconstruct(model: ModeSelector, feats: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Decoded embedding at the posterior mean of x (unscaled units), (N, z_dim)."""
    g, f, mu_x, _, _ = _means_path(model, feats, z)
    return model.decode(g, mu_x, f).value * model.buffers["ms.z_scale"]


def infer_mode(model: ModeSelector, feats: np.ndarray, k: int) -> np.ndarray:
    """Mode embedding for cluster ``k`` in 1..K with y at its prior mean: (N, z_dim) or (z_dim,)."""
    if not 1 <= k <= model.cfg.K:
        raise ValueError(f"cluster {k} out of range 1..{model.cfg.K}")
    single = np.ndim(feats) == 2
    f_arr = np.asarray(feats, dtype=np.float64)[None] if single else np.asarray(feats, dtype=np.float64)
    g = Graph(model.params, dtype=np.float64)
    f = g.input(model.scale_feats(f_arr))
    cond = model.condition(g, f)
    y = g.const(np.zeros((len(f_arr), model.cfg.y_dim)))
    mu_c, _ = model.prior_components(g, y, cond)
    x = ops.reshape(ops.slice_(mu_c, (slice(None), k - 1)), (len(f_arr), model.cfg.x_dim))
    eps = model.decode(g, x, f).value * model.buffers["ms.z_scale"]
    return eps[0] if single else eps


def cluster_purity(assignments: np.ndarray, labels) -> float:
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    total = 0
    for c in np.unique(assignments):
        _, counts = np.unique(labels[assignments == c], return_counts=True)
        total += counts.max()
    return total / len(labels)
