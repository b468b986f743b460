"""Recursive PAC-Bayes certification of return predictors.

The chain over a split ``S_1..S_T`` of the validation data is

* stage 1: ``B_1 = B kl^{-1,+}(L1 / B, (KL(rho_1 || rho_0) + ln(2T sqrt(N) / delta)) / N)``
  on all ``N`` samples, with ``rho_0`` the data-free prior;
* stage t >= 2: a split-kl bound ``E_t`` on the excess loss
  ``loss(h) - kappa loss(h')``, ``h ~ rho_t``, ``h' ~ rho_{t-1}``, evaluated on
  ``S_{>=t}`` (``N_t`` samples) with budget
  ``Psi_t = (KL(rho_t || rho_{t-1}) + ln(4T sqrt(N_t) / delta)) / N_t``;
* composition ``B_t = E_t + kappa B_{t-1}``.

Empirical means over the posterior are Monte-Carlo estimates with one fresh
hypothesis draw per sample; they are widened by a kl inverse with budget
``ln(T / delta') / N`` (stage 1) or ``ln(2T / delta') / N_t`` (each excess
component), so the final certificate holds with probability at least
``1 - delta - delta'``.

Posterior ``rho_t`` is fitted on ``S_{<=t}`` so it never depends on data that a
later stage evaluates against it as a prior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .binary_kl import kl_inverse_lower, kl_inverse_upper
from .predictor import (
    Architecture,
    GaussianNet,
    gaussian_kl,
    gaussian_kl_grad,
    init_uninformed_prior,
    lrt_backward,
    lrt_forward,
)
from .rollout import DegenerateDataError, LabeledDataset, SplitPlan

__all__ = [
    "TrainConfig",
    "CertConfig",
    "StageResult",
    "CertificateReport",
    "METHODS",
    "clipped_loss",
    "clipped_losses",
    "mcallester_objective",
    "stage_objective",
    "train_stage",
    "sampled_losses",
    "mc_corrected_mean",
    "kl_bound",
    "split_kl_bound",
    "bound_stage1",
    "bound_excess_stage",
    "certify",
    "method_label",
]

METHODS = ("NonRec-NonInf", "NonRec-Inf", "Rec")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 2e-2
    lr_decay: float = 0.5
    lr_step: int = 10
    max_grad_norm: float = 1.0
    batch_size: int | None = None  # None: full batch
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class CertConfig:
    delta: float = 0.025
    delta_prime: float = 0.01
    kappa: float = 0.5
    mu: float = 0.0
    loss_bound: float = 1.0

    def __post_init__(self):
        if not (0 < self.delta < 1 and 0 < self.delta_prime < 1 and self.delta + self.delta_prime < 1):
            raise ValueError("delta, delta' must lie in (0, 1) with delta + delta' < 1")
        if not (0 < self.kappa < 1):
            raise ValueError("kappa must lie in (0, 1)")
        if self.loss_bound <= 0:
            raise ValueError("loss_bound must be positive")
        if not (-self.kappa * self.loss_bound <= self.mu <= self.loss_bound):
            raise ValueError("mu must lie in [-kappa B, B]")


@dataclass
class StageResult:
    t: int
    n_t: int
    kl: float
    emp_mean: float  # raw one-draw-per-sample mean (loss for t = 1, excess for t >= 2)
    emp_plus_corrected: float
    emp_minus_corrected: float
    e_t: float  # E_t for t >= 2; equals B_1 for t = 1
    b_t: float
    posterior: GaussianNet | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "n_t": self.n_t,
            "kl": self.kl,
            "emp_plus_corrected": self.emp_plus_corrected,
            "emp_minus_corrected": self.emp_minus_corrected,
            "e_t": self.e_t,
            "b_t": self.b_t,
        }


@dataclass
class CertificateReport:
    method: str
    depth: int
    delta: float
    delta_prime: float
    kappa: float
    mu: float
    stages: list[StageResult]
    final_bound: float
    train_loss: float
    test_loss: float | None
    g_max: float
    seed: int
    episode_counts: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "depth": self.depth,
            "delta": self.delta,
            "delta_prime": self.delta_prime,
            "kappa": self.kappa,
            "mu": self.mu,
            "stages": [s.to_dict() for s in self.stages],
            "final_bound": self.final_bound,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "g_max": self.g_max,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CertificateReport":
        stages = [
            StageResult(
                t=s["t"], n_t=s["n_t"], kl=s["kl"], emp_mean=math.nan,
                emp_plus_corrected=s["emp_plus_corrected"], emp_minus_corrected=s["emp_minus_corrected"],
                e_t=s["e_t"], b_t=s["b_t"],
            )
            for s in d["stages"]
        ]
        return cls(
            method=d["method"], depth=d["depth"], delta=d["delta"], delta_prime=d["delta_prime"],
            kappa=d["kappa"], mu=d["mu"], stages=stages, final_bound=d["final_bound"],
            train_loss=d["train_loss"], test_loss=d["test_loss"], g_max=d["g_max"], seed=d["seed"],
        )


def method_label(method: str, depth: int) -> str:
    return f"Rec T={depth}" if method == "Rec" else method


# -- losses and objectives ---------------------------------------------------


def clipped_loss(prediction: float, target_norm: float) -> float:
    """Squared error clipped to [0, 1]."""
    return min(1.0, (prediction - target_norm) ** 2)


def clipped_losses(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.minimum(1.0, (pred - target) ** 2)


def mcallester_objective(emp_mean: float, kl: float, n: int, delta: float, range_width: float = 1.0) -> float:
    """emp_mean + range_width sqrt((kl + ln(2 sqrt(n) / delta)) / (2 n))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kl < 0:
        raise ValueError("kl must be nonnegative")
    return emp_mean + range_width * math.sqrt((kl + math.log(2.0 * math.sqrt(n) / delta)) / (2.0 * n))


def _check_finite(pred: np.ndarray) -> None:
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("non-finite predictions (inputs or weights overflow)")


def _seed(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


def stage_objective(
    net: GaussianNet,
    prior: GaussianNet,
    X: np.ndarray,
    y: np.ndarray,
    noise: Sequence[np.ndarray],
    *,
    n_bound: int,
    delta_eff: float,
    range_width: float,
    prior_loss_mean: float = 0.0,
    kappa: float = 0.0,
) -> tuple[float, np.ndarray]:
    """McAllester-relaxed stage objective and its gradient for a fixed LRT draw.

    ``mean(clipped_loss) - kappa * prior_loss_mean
    + range_width * sqrt((KL + ln(2 sqrt(n_bound) / delta_eff)) / (2 n_bound))``.
    The prior-loss term is constant in the posterior parameters.
    """
    pred, cache = lrt_forward(net, X, noise=noise)
    _check_finite(pred)
    resid = pred - y
    sq = resid * resid
    active = sq < 1.0
    emp = float(np.mean(np.where(active, sq, 1.0)))
    d_out = np.where(active, 2.0 * resid, 0.0) / len(y)
    grad = lrt_backward(net, cache, d_out)

    kl = gaussian_kl(net, prior)
    inner = (kl + math.log(2.0 * math.sqrt(n_bound) / delta_eff)) / (2.0 * n_bound)
    root = math.sqrt(inner)
    value = emp - kappa * prior_loss_mean + range_width * root
    grad += (range_width / (2.0 * root * 2.0 * n_bound)) * gaussian_kl_grad(net, prior)
    return value, grad


def train_stage(
    prior: GaussianNet,
    X: np.ndarray,
    y: np.ndarray,
    *,
    n_bound: int,
    delta_eff: float,
    range_width: float = 1.0,
    kappa: float = 0.0,
    prior_losses: np.ndarray | None = None,
    cfg: TrainConfig = TrainConfig(),
    stage: int = 1,
    history: list | None = None,
) -> GaussianNet:
    """Fit a posterior starting from a copy of ``prior`` with Adam on the stage objective.

    Step-decayed learning rate, global gradient-norm clipping and one fresh
    LRT draw per sample per step. ``history`` (if given) receives the
    full-data objective before training and after every epoch, each evaluated
    with one common noise draw.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n == 0:
        raise ValueError("empty training slice")
    prior_loss_mean = float(np.mean(prior_losses)) if prior_losses is not None and len(prior_losses) else 0.0
    arch = prior.arch
    rng = _seed(cfg.seed, stage, 1)
    theta = prior.to_vector().copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = cfg.betas
    batch = n if cfg.batch_size is None else min(cfg.batch_size, n)
    kw = dict(n_bound=n_bound, delta_eff=delta_eff, range_width=range_width,
              prior_loss_mean=prior_loss_mean, kappa=kappa)

    eval_noise = None
    if history is not None:
        eval_rng = _seed(cfg.seed, stage, 2)
        widths = [o for _, o in arch.layer_shapes]
        eval_noise = [eval_rng.standard_normal((n, w)) for w in widths]
        history.append(stage_objective(prior, prior, X, y, eval_noise, **kw)[0])

    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            net = GaussianNet.from_vector(arch, theta)
            noise = [rng.standard_normal((len(idx), o)) for _, o in arch.layer_shapes]
            _, grad = stage_objective(net, prior, X[idx], y[idx], noise, **kw)
            norm = float(np.linalg.norm(grad))
            if norm > cfg.max_grad_norm:
                grad *= cfg.max_grad_norm / (norm + 1e-6)
            step += 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError(f"non-finite parameters at stage {stage}, epoch {epoch}")
        if history is not None:
            net = GaussianNet.from_vector(arch, theta)
            history.append(stage_objective(net, prior, X, y, eval_noise, **kw)[0])
    return GaussianNet.from_vector(arch, theta)


def sampled_losses(net: GaussianNet, X: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Clipped loss of one fresh hypothesis draw (via LRT) per sample."""
    pred, _ = lrt_forward(net, X, rng)
    _check_finite(pred)
    return clipped_losses(pred, y)


# -- bound arithmetic -------------------------------------------------------


def mc_corrected_mean(
    raw_mean: float, range_width: float, n: int, n_methods: int, delta_prime: float, side: str = "upper"
) -> float:
    """Widen a one-draw-per-sample mean of a [0, range_width] variable by a kl inverse.

    Budget ``ln(n_methods / delta_prime) / n``; ``side`` is ``"upper"`` or ``"lower"``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if range_width == 0:
        return 0.0
    p = min(max(raw_mean / range_width, 0.0), 1.0)
    eps = math.log(n_methods / delta_prime) / n
    if side == "upper":
        return range_width * kl_inverse_upper(p, eps)
    if side == "lower":
        return range_width * kl_inverse_lower(p, eps)
    raise ValueError(f"side must be 'upper' or 'lower', got {side!r}")


def kl_bound(emp_mean: float, kl: float, n: int, delta_eff: float, loss_bound: float = 1.0) -> float:
    """B kl^{-1,+}(emp / B, (KL + ln(2 sqrt(n) / delta_eff)) / n)."""
    eps = (kl + math.log(2.0 * math.sqrt(n) / delta_eff)) / n
    return loss_bound * kl_inverse_upper(min(max(emp_mean / loss_bound, 0.0), 1.0), eps)


def split_kl_bound(
    plus_mean: float, minus_mean: float, kl: float, n: int, delta_eff: float,
    mu: float, kappa: float, loss_bound: float = 1.0,
) -> float:
    """Split-kl bound on a [-kappa B, B] variable around offset mu.

    ``delta_eff`` enters as ``ln(2 sqrt(n) / delta_eff)``; pass ``delta / (2T)``
    for the ``ln(4T sqrt(n) / delta)`` budget of an excess stage.
    """
    psi = (kl + math.log(2.0 * math.sqrt(n) / delta_eff)) / n
    hi = loss_bound - mu
    lo = mu + kappa * loss_bound
    value = mu
    if hi > 0:
        value += hi * kl_inverse_upper(min(max(plus_mean / hi, 0.0), 1.0), psi)
    if lo > 0:
        value -= lo * kl_inverse_lower(min(max(minus_mean / lo, 0.0), 1.0), psi)
    return min(max(value, -kappa * loss_bound), loss_bound)


def bound_stage1(
    posterior: GaussianNet,
    prior: GaussianNet,
    X: np.ndarray,
    y: np.ndarray,
    cert: CertConfig,
    depth: int,
    rng: np.random.Generator,
) -> StageResult:
    """Stage-1 kl certificate over all ``len(y)`` samples with a data-free prior."""
    n = len(y)
    if n == 0:
        raise ValueError("empty evaluation slice")
    B = cert.loss_bound
    raw = float(np.mean(sampled_losses(posterior, X, y, rng)))
    corrected = mc_corrected_mean(raw, B, n, depth, cert.delta_prime, "upper")
    kl = gaussian_kl(posterior, prior)
    b1 = kl_bound(corrected, kl, n, cert.delta / depth, B)
    return StageResult(1, n, kl, raw, corrected, 0.0, b1, b1, posterior)


def bound_excess_stage(
    t: int,
    posterior: GaussianNet,
    prior: GaussianNet,
    X: np.ndarray,
    y: np.ndarray,
    prev_bound: float,
    cert: CertConfig,
    depth: int,
    rng: np.random.Generator,
) -> StageResult:
    """Split-kl certificate E_t on the excess loss over S_{>=t}, and B_t = E_t + kappa B_{t-1}."""
    n = len(y)
    if n == 0:
        raise ValueError("empty evaluation slice")
    B, kappa, mu = cert.loss_bound, cert.kappa, cert.mu
    post_rng, prior_rng = rng.spawn(2)
    excess = sampled_losses(posterior, X, y, post_rng) - kappa * sampled_losses(prior, X, y, prior_rng)
    plus = float(np.mean(np.maximum(0.0, excess - mu)))
    minus = float(np.mean(np.maximum(0.0, mu - excess)))
    plus_c = mc_corrected_mean(plus, B - mu, n, 2 * depth, cert.delta_prime, "upper")
    minus_c = mc_corrected_mean(minus, mu + kappa * B, n, 2 * depth, cert.delta_prime, "lower")
    kl = gaussian_kl(posterior, prior)
    e_t = split_kl_bound(plus_c, minus_c, kl, n, cert.delta / (2 * depth), mu, kappa, B)
    return StageResult(t, n, kl, float(np.mean(excess)), plus_c, minus_c, e_t, e_t + kappa * prev_bound, posterior)


# -- orchestration -----------------------------------------------------------


def _gibbs_loss(net: GaussianNet, ds: LabeledDataset, rng: np.random.Generator) -> float:
    return float(np.mean(sampled_losses(net, ds.features, ds.g_norm, rng)))


def certify(
    dataset: LabeledDataset,
    plan: SplitPlan,
    method: str,
    *,
    arch: Architecture | None = None,
    train: TrainConfig = TrainConfig(),
    cert: CertConfig = CertConfig(),
    seed: int = 0,
    test: LabeledDataset | None = None,
) -> CertificateReport:
    """Run one certification of the given method over ``plan``'s split of ``dataset``.

    NonRec-NonInf takes a depth-1 plan; NonRec-Inf a depth-2 plan (prior
    portion, bound portion); Rec any depth. The uninformed prior is seeded by
    ``seed`` only; stage training and Monte-Carlo draws use substreams of
    ``(seed, stage)``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "NonRec-NonInf" and plan.depth != 1:
        raise ValueError("NonRec-NonInf requires a depth-1 plan")
    if method == "NonRec-Inf" and plan.depth != 2:
        raise ValueError("NonRec-Inf requires a depth-2 plan")
    if len(dataset) == 0 or dataset.g_max <= 0:
        raise DegenerateDataError("empty or unnormalized dataset")
    arch = arch or Architecture(dataset.features.shape[1])
    if arch.input_dim != dataset.features.shape[1]:
        raise ValueError("architecture input_dim does not match the dataset features")

    X, y = dataset.features, dataset.g_norm
    portions = plan.portions(dataset)
    cfg = TrainConfig(**{**train.__dict__, "seed": seed})
    rho0 = init_uninformed_prior(arch, seed)
    B = cert.loss_bound

    def fit(prior, idx, stage, n_bound, delta_eff, range_width, kappa=0.0, prior_losses=None):
        return train_stage(prior, X[idx], y[idx], n_bound=n_bound, delta_eff=delta_eff,
                           range_width=range_width, kappa=kappa, prior_losses=prior_losses,
                           cfg=cfg, stage=stage)

    stages: list[StageResult] = []
    if method == "NonRec-Inf":
        prior_idx, bound_idx = portions
        rho_p = fit(rho0, prior_idx, 0, len(prior_idx), cert.delta, B)
        rho = fit(rho_p, bound_idx, 1, len(bound_idx), cert.delta, B)
        stages.append(bound_stage1(rho, rho_p, X[bound_idx], y[bound_idx], cert, 1, _seed(seed, 1, 3)))
    else:
        T = plan.depth
        rho = fit(rho0, portions[0], 1, len(dataset), cert.delta / T, B)
        stages.append(bound_stage1(rho, rho0, X, y, cert, T, _seed(seed, 1, 3)))
        for t in range(2, T + 1):
            train_idx = np.concatenate(portions[:t])
            eval_idx = np.concatenate(portions[t - 1 :])
            prev = rho
            prior_losses = sampled_losses(prev, X[train_idx], y[train_idx], _seed(seed, t, 4))
            rho = fit(prev, train_idx, t, len(eval_idx), cert.delta / (2 * T), (1 + cert.kappa) * B,
                      kappa=cert.kappa, prior_losses=prior_losses)
            stages.append(bound_excess_stage(t, rho, prev, X[eval_idx], y[eval_idx], stages[-1].b_t,
                                             cert, T, _seed(seed, t, 3)))

    final = stages[-1].b_t
    if not math.isfinite(final):
        raise FloatingPointError("certificate is not finite")
    train_loss = _gibbs_loss(rho, dataset, _seed(seed, 99, 5))
    test_loss = None
    if test is not None:
        test_loss = _gibbs_loss(rho, test.renormalized(dataset.g_max), _seed(seed, 99, 6))
    return CertificateReport(
        method=method, depth=plan.depth, delta=cert.delta, delta_prime=cert.delta_prime,
        kappa=cert.kappa, mu=cert.mu, stages=stages, final_bound=final, train_loss=train_loss,
        test_loss=test_loss, g_max=dataset.g_max, seed=seed, episode_counts=plan.counts,
    )
