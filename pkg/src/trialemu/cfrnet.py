"""Counterfactual regression: shared representation with two outcome heads.

The network maps covariates through a unit-normalized representation and
predicts each arm with its own head. The training objective is a
treatment-reweighted factual loss plus a Wasserstein penalty between the
treated and control representation clouds (TARNet is the penalty-free
special case).

Everything runs in float64 on CPU so runs are reproducible and the
finite-difference gradient check is meaningful.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linprog

from .linprop import AteEstimate

log = logging.getLogger(__name__)

torch.set_default_dtype(torch.float64)


@dataclass(frozen=True)
class CfrConfig:
    rep_width: int = 200
    head_width: int = 100
    n_rep_layers: int = 3
    n_head_layers: int = 3
    alpha: float = 1.0            # imbalance penalty weight; 0 for TARNet
    lam: float = 1e-4             # weight decay on head parameters
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 128
    patience: int = 10
    max_epochs: int = 300
    ot_iters: int = 10
    ot_strength: float = 10.0     # entropic sharpness: eps = max(cost)/strength
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be nonnegative")


class CfrNet(torch.nn.Module):
    """Representation + two heads; representation output is unit-normalized."""

    def __init__(self, d_in: int, config: CfrConfig):
        super().__init__()
        cfg = config
        rep = []
        width = d_in
        for _ in range(cfg.n_rep_layers):
            rep += [torch.nn.Linear(width, cfg.rep_width), torch.nn.ELU()]
            width = cfg.rep_width
        self.rep = torch.nn.Sequential(*rep)
        self.head0 = self._head(cfg)
        self.head1 = self._head(cfg)

    @staticmethod
    def _head(cfg: CfrConfig) -> torch.nn.Sequential:
        layers = []
        width = cfg.rep_width
        for _ in range(cfg.n_head_layers):
            layers += [torch.nn.Linear(width, cfg.head_width), torch.nn.ELU()]
            width = cfg.head_width
        layers.append(torch.nn.Linear(width, 1))
        return torch.nn.Sequential(*layers)

    def represent(self, x: torch.Tensor) -> torch.Tensor:
        phi = self.rep(x)
        return phi / phi.norm(dim=1, keepdim=True).clamp_min(1e-12)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        phi = self.represent(x)
        y0 = self.head0(phi).squeeze(-1)
        y1 = self.head1(phi).squeeze(-1)
        return torch.where(t > 0.5, y1, y0)

    def head_parameters(self):
        yield from self.head0.parameters()
        yield from self.head1.parameters()


@dataclass
class CfrModel:
    """Trained network plus the train-split standardization it expects."""

    net: CfrNet
    config: CfrConfig
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def _standardize(self, X) -> torch.Tensor:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return torch.from_numpy((X - self.x_mean) / self.x_std)

    def predict(self, X, t) -> np.ndarray:
        xs = self._standardize(X)
        tt = torch.as_tensor(np.array(np.broadcast_to(np.asarray(t, dtype=float), (xs.shape[0],))))
        with torch.no_grad():
            out = self.net(xs, tt).numpy()
        return out * self.y_std + self.y_mean

    def represent(self, X) -> np.ndarray:
        with torch.no_grad():
            return self.net.represent(self._standardize(X)).numpy()


@dataclass
class TrainTrace:
    train_loss: list[float] = field(default_factory=list)
    validation_loss: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0


def sample_weight(t, u: float):
    """Arm reweighting 0.5 * (t/u + (1-t)/(1-u)) for treated fraction u."""
    if not 0 < u < 1:
        raise ValueError(f"treated fraction must lie in (0, 1), got {u}")
    t = np.asarray(t, dtype=float)
    return 0.5 * (t / u + (1.0 - t) / (1.0 - u))


def _pairwise_sq_dists(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    return torch.cdist(A, B, p=2.0) ** 2


def _sinkhorn_plan(C: torch.Tensor, iters: int, strength: float) -> torch.Tensor:
    """Fixed-iteration iterative scaling with uniform marginals.

    Runs in the log domain so sharp regularization (small entropic
    temperature) stays numerically stable.
    """
    na, nb = C.shape
    eps = float(C.max()) / strength
    if eps <= 0:
        return torch.full_like(C, 1.0 / (na * nb))
    logK = -C / eps
    log_a = torch.full((na,), -np.log(na), dtype=C.dtype)
    log_b = torch.full((nb,), -np.log(nb), dtype=C.dtype)
    f = torch.zeros(na, dtype=C.dtype)
    g = torch.zeros(nb, dtype=C.dtype)
    for _ in range(iters):
        f = log_a - torch.logsumexp(logK + g[None, :], dim=1)
        g = log_b - torch.logsumexp(logK + f[:, None], dim=0)
    return torch.exp(f[:, None] + logK + g[None, :])


def _greedy_plan_cost(C: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Cost of the cheapest-cell-first feasible plan (an upper bound)."""
    a, b = a.copy(), b.copy()
    total = 0.0
    for flat in np.argsort(C.ravel()):
        i, j = divmod(int(flat), C.shape[1])
        m = min(a[i], b[j])
        if m > 0:
            total += m * C[i, j]
            a[i] -= m
            b[j] -= m
    return total


def _round_to_feasible(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an almost-feasible plan onto the transport polytope."""
    P = P * np.minimum(a / np.maximum(P.sum(axis=1), 1e-300), 1.0)[:, None]
    P = P * np.minimum(b / np.maximum(P.sum(axis=0), 1e-300), 1.0)[None, :]
    ea, eb = a - P.sum(axis=1), b - P.sum(axis=0)
    s = ea.sum()
    if s > 1e-15:
        P = P + np.outer(ea, eb) / s
    return P


def wasserstein_approx(A, B, strength: float = 500.0, max_iter: int = 2000,
                       tol: float = 1e-9) -> float:
    """Entropic-regularized transport cost between two point clouds
    (uniform weights, squared-Euclidean ground cost).

    Runs log-domain iterative scaling to marginal tolerance, rounds the
    plan onto the transport polytope, and returns the cheaper of that
    plan and a greedy feasible plan. Both candidates are feasible, so the
    result upper-bounds the exact cost and is tight for sharp
    regularization (larger `strength` means a colder temperature).
    """
    from scipy.special import logsumexp

    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("point sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    C = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)
    na, nb = C.shape
    a, b = np.full(na, 1.0 / na), np.full(nb, 1.0 / nb)
    cmax = float(C.max())
    if cmax <= 0:
        return 0.0
    eps = cmax / strength
    logK = -C / eps
    la, lb = np.log(a), np.log(b)
    f, g = np.zeros(na), np.zeros(nb)
    for it in range(max_iter):
        f = la - logsumexp(logK + g[None, :], axis=1)
        g = lb - logsumexp(logK + f[:, None], axis=0)
        if it % 10 == 9:
            P = np.exp(f[:, None] + logK + g[None, :])
            if np.abs(P.sum(1) - a).sum() + np.abs(P.sum(0) - b).sum() < tol:
                break
    P = _round_to_feasible(np.exp(f[:, None] + logK + g[None, :]), a, b)
    return min(float((P * C).sum()), _greedy_plan_cost(C, a, b))


def wasserstein_exact(A, B) -> float:
    """Exact transport cost via the transportation linear program.

    Intended as a small-instance oracle; refuses problems with more than
    64 cost entries.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    na, nb = A.shape[0], B.shape[0]
    if na * nb > 64:
        raise ValueError(f"problem too large for the exact oracle: {na}x{nb}")
    C = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)
    # Row-marginal and column-marginal constraints on the flattened plan.
    A_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        A_eq[i, i * nb : (i + 1) * nb] = 1.0
    for j in range(nb):
        A_eq[na + j, j::nb] = 1.0
    b_eq = np.concatenate([np.full(na, 1.0 / na), np.full(nb, 1.0 / nb)])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _ot_penalty(phi: torch.Tensor, t: torch.Tensor, config: CfrConfig) -> torch.Tensor:
    """Transport cost with the plan held fixed, so gradients flow through
    the cost matrix only (envelope-style subgradient)."""
    treated = phi[t > 0.5]
    control = phi[t <= 0.5]
    C = _pairwise_sq_dists(treated, control)
    with torch.no_grad():
        P = _sinkhorn_plan(C.detach(), config.ot_iters, config.ot_strength)
    return (P * C).sum()


def cfr_loss(net: CfrNet, x: torch.Tensor, t: torch.Tensor, y: torch.Tensor,
             config: CfrConfig, u: float | None = None) -> torch.Tensor:
    """Weighted factual loss + head weight decay + imbalance penalty."""
    if u is None:
        u = float(t.mean())
    w = torch.as_tensor(sample_weight(t.numpy(), u))
    phi = net.represent(x)
    y0 = net.head0(phi).squeeze(-1)
    y1 = net.head1(phi).squeeze(-1)
    pred = torch.where(t > 0.5, y1, y0)
    loss = (w * (pred - y) ** 2).mean()
    if config.lam > 0:
        reg = sum((p**2).sum() for p in net.head_parameters())
        loss = loss + config.lam * reg
    if config.alpha > 0:
        if t.min() == t.max():
            log.warning("single-arm batch: imbalance penalty skipped")
        else:
            loss = loss + config.alpha * _ot_penalty(phi, t, config)
    return loss


def _surrogate_loss(net, x, t, y, config, u) -> float:
    with torch.no_grad():
        phi = net.represent(x)
        y0 = net.head0(phi).squeeze(-1)
        y1 = net.head1(phi).squeeze(-1)
        pred = torch.where(t > 0.5, y1, y0)
        w = torch.as_tensor(sample_weight(t.numpy(), u))
        val = float((w * (pred - y) ** 2).mean())
        if config.alpha > 0 and t.min() < t.max():
            val += config.alpha * float(_ot_penalty(phi, t, config))
    return val


def cfr_train(train, validation, config: CfrConfig = CfrConfig()):
    """Minibatch Adam on the CfR objective with best-epoch early stopping.

    `train` and `validation` are (X, t, y) triples. Returns the model at
    the epoch with the lowest validation surrogate plus the training
    trace. Deterministic given the config seed.
    """
    X_tr, t_tr, y_tr = (np.asarray(a, dtype=float) for a in train)
    X_va, t_va, y_va = (np.asarray(a, dtype=float) for a in validation)
    X_tr = np.atleast_2d(X_tr)
    X_va = np.atleast_2d(X_va)

    x_mean = X_tr.mean(axis=0)
    x_std = X_tr.std(axis=0)
    x_std[x_std == 0] = 1.0
    y_mean, y_std = float(y_tr.mean()), float(y_tr.std())
    if y_std == 0:
        y_std = 1.0

    xs = torch.from_numpy((X_tr - x_mean) / x_std)
    ys = torch.from_numpy((y_tr - y_mean) / y_std)
    ts = torch.from_numpy(t_tr)
    xv = torch.from_numpy((X_va - x_mean) / x_std)
    yv = torch.from_numpy((y_va - y_mean) / y_std)
    tv = torch.from_numpy(t_va)

    u = float(ts.mean())
    if not 0 < u < 1:
        raise ValueError("training set must contain both arms")

    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    net = CfrNet(xs.shape[1], config)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate, betas=config.betas)

    trace = TrainTrace()
    best = (np.inf, 0, {k: v.clone() for k, v in net.state_dict().items()})
    n = xs.shape[0]
    since_best = 0
    for epoch in range(config.max_epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            opt.zero_grad()
            loss = cfr_loss(net, xs[idx], ts[idx], ys[idx], config, u=u)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch}: loss={float(loss)}; "
                    f"trace={trace.train_loss}"
                )
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        trace.train_loss.append(epoch_loss / max(n_batches, 1))
        val = _surrogate_loss(net, xv, tv, yv, config, u)
        trace.validation_loss.append(val)
        if val < best[0]:
            best = (val, epoch, {k: v.clone() for k, v in net.state_dict().items()})
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break
    trace.stop_epoch = len(trace.train_loss)
    trace.best_epoch = best[1]
    net.load_state_dict(best[2])
    model = CfrModel(net=net, config=config, x_mean=x_mean, x_std=x_std,
                     y_mean=y_mean, y_std=y_std)
    return model, trace


def cfr_cate(model: CfrModel, X) -> np.ndarray:
    """Per-row effect f(phi(x), 1) - f(phi(x), 0) in outcome units."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ones = np.ones(X.shape[0])
    return model.predict(X, ones) - model.predict(X, 0 * ones)


def cfr_ate(model: CfrModel, X_test) -> AteEstimate:
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    if X_test.shape[0] == 0:
        raise ValueError("test set is empty")
    method = "cfr" if model.config.alpha > 0 else "tarnet"
    return AteEstimate(value=float(np.mean(cfr_cate(model, X_test))), method=method)


def gradient_check(net: CfrNet, x, t, y, config: CfrConfig,
                   n_coords: int = 20, h: float = 1e-6, seed: int = 0) -> float:
    """Max relative error of autograd gradients of the penalty-free loss
    against central finite differences on sampled coordinates."""
    cfg = CfrConfig(**{**config.__dict__, "alpha": 0.0})
    x = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=float)))
    t = torch.as_tensor(np.asarray(t, dtype=float))
    y = torch.as_tensor(np.asarray(y, dtype=float))
    u = float(t.mean())
    if not 0 < u < 1:
        u = 0.5

    net.zero_grad()
    loss = cfr_loss(net, x, t, y, cfg, u=u)
    loss.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for param in net.parameters():
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        k = min(n_coords, flat.numel())
        for j in rng.choice(flat.numel(), size=k, replace=False):
            orig = float(flat[j])
            flat[j] = orig + h
            with torch.no_grad():
                up = float(cfr_loss(net, x, t, y, cfg, u=u))
            flat[j] = orig - h
            with torch.no_grad():
                down = float(cfr_loss(net, x, t, y, cfg, u=u))
            flat[j] = orig
            fd = (up - down) / (2 * h)
            g = float(grad[j])
            denom = max(abs(fd) + abs(g), 1e-8)
            worst = max(worst, abs(fd - g) / denom)
    return worst
