"""Closed-form binary Gaussian world with a one-hidden-layer BN network.

Clean inputs are X | Y ~ N(Y*mu, sigma^2 I) with Y uniform on {-1, +1};
triggered inputs are X_b ~ N(-mu + epsilon, sigma_b^2 I) and the attacker's
target is +1. The hidden layer is a_j(x) = gamma_j (w_j.x - m_j)/sqrt(v_j) + beta_j
followed by linear output nodes u_-, u_+. Class -1 wins when u.a(x) > 0 with
u = u_- - u_+.

Everything here is exact (normal CDF from erfc); Monte-Carlo helpers exist
only to cross-check the closed forms.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erfc

SQRT2 = math.sqrt(2.0)


def normal_cdf(x):
    """Standard normal CDF via erfc; accurate in both tails."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / SQRT2)


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@dataclass
class GaussianSetting:
    mu: np.ndarray
    sigma: float
    epsilon: np.ndarray
    sigma_b: float

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.epsilon = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        if self.mu.shape != self.epsilon.shape or self.mu.ndim != 1:
            raise ValueError("mu and epsilon must be vectors of the same length")
        if not (self.sigma > 0 and self.sigma_b > 0):
            raise ValueError("sigma and sigma_b must be positive")

    @property
    def d(self):
        return self.mu.shape[0]

    @property
    def mu_b(self):
        return -self.mu + self.epsilon


@dataclass
class AnalyticMlp:
    W: np.ndarray  # (J, d)
    m: np.ndarray
    v: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    u_minus: np.ndarray
    u_plus: np.ndarray

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        J = self.W.shape[0]
        for name in ("m", "v", "gamma", "beta", "u_minus", "u_plus"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape != (J,):
                raise ValueError(f"{name} must have length J={J}")
            setattr(self, name, arr)
        if np.any(self.v <= 0):
            raise ValueError("BN variances must be positive")

    @property
    def J(self):
        return self.W.shape[0]

    @property
    def u(self):
        return self.u_minus - self.u_plus

    def activations(self, x, m=None, v=None):
        m = self.m if m is None else m
        v = self.v if v is None else v
        return (np.atleast_2d(x) @ self.W.T - m) / np.sqrt(v) * self.gamma + self.beta


@dataclass
class InterpolatedState:
    alpha: float
    m_hat: np.ndarray
    v_hat: np.ndarray


@dataclass
class AnalyticConfig:
    eta: float = 0.45
    psi: float = 0.55

    def __post_init__(self):
        if not 0 < self.eta < 0.5:
            raise ValueError("eta must lie in (0, 1/2)")
        if not 0.5 < self.psi <= 1:
            raise ValueError("psi must lie in (1/2, 1]")


class AssumptionsUnmet(ValueError):
    """Raised when a setting does not satisfy the monotonicity preconditions."""

    def __init__(self, reasons, measured):
        super().__init__("assumptions unmet: " + "; ".join(reasons))
        self.reasons = reasons
        self.measured = measured


def corrected_moments(setting: GaussianSetting, model: AnalyticMlp):
    """BN mean/variance that make triggered activations match clean source ones.

    The variance ratio is squared: Var[w.X_b] = sigma_b^2 |w|^2, so equal
    activation variance needs sqrt(v*) = (sigma_b/sigma) sqrt(v).
    """
    r = setting.sigma_b / setting.sigma
    w_mu = model.W @ setting.mu
    w_eps = model.W @ setting.epsilon
    m_star = r * model.m + (r - 1.0) * w_mu + w_eps
    v_star = r * r * model.v
    if np.any(v_star <= 0) or not np.all(np.isfinite(v_star)):
        raise ValueError("corrected variances are not positive; model is corrupted")
    return m_star, v_star


def interpolate(model: AnalyticMlp, m_star, v_star, alpha: float) -> InterpolatedState:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    m_hat = alpha * model.m + (1.0 - alpha) * np.asarray(m_star)
    v_hat = (alpha * np.sqrt(model.v) + (1.0 - alpha) * np.sqrt(v_star)) ** 2
    return InterpolatedState(float(alpha), m_hat, v_hat)


def score_moments(model: AnalyticMlp, m, v, mean_x, sd_x):
    """Mean and variance of u.a(X) for X ~ N(mean_x, sd_x^2 I) under BN stats (m, v)."""
    coef = model.u * model.gamma / np.sqrt(v)  # u^T V^-1/2 Gamma
    mean = coef @ (model.W @ mean_x - m) + model.u @ model.beta
    var = sd_x**2 * float(np.sum((model.W.T @ coef) ** 2))
    return float(mean), var


def _prob_positive(mean, var):
    if var <= 0:
        raise ValueError("score variance is zero: u is orthogonal to every transformed direction")
    return float(1.0 - normal_cdf(-mean / math.sqrt(var)))


def sia_closed_form(setting: GaussianSetting, model: AnalyticMlp, state: InterpolatedState):
    """P[u.a_hat(X_b | alpha) > 0]: triggered inputs sent back to class -1."""
    mean, var = score_moments(model, state.m_hat, state.v_hat, setting.mu_b, setting.sigma_b)
    return _prob_positive(mean, var)


def source_accuracy(setting, model):
    """P[f_-(X_-) > f_+(X_-)] for clean source-class inputs."""
    mean, var = score_moments(model, model.m, model.v, -setting.mu, setting.sigma)
    return _prob_positive(mean, var)


def class_error_rates(setting, model):
    """(error on class -1, error on class +1) of the unmodified classifier."""
    err_minus = 1.0 - source_accuracy(setting, model)
    mean, var = score_moments(model, model.m, model.v, setting.mu, setting.sigma)
    err_plus = _prob_positive(mean, var)
    return err_minus, err_plus


def attack_success_rate(setting, model):
    mean, var = score_moments(model, model.m, model.v, setting.mu_b, setting.sigma_b)
    return 1.0 - _prob_positive(mean, var)


def sia_ratio(setting, model, alpha, moments=None):
    """Standardised score mean E/sqrt(Var); SIA = Phi of this value."""
    m_star, v_star = moments or corrected_moments(setting, model)
    st = interpolate(model, m_star, v_star, alpha)
    mean, var = score_moments(model, st.m_hat, st.v_hat, setting.mu_b, setting.sigma_b)
    return mean / math.sqrt(var)


def sia_ratio_slope(setting, model):
    """d(E/sqrt(Var))/d(alpha); constant in alpha for this model family."""
    r = setting.sigma_b / setting.sigma
    coef = model.u * model.gamma / np.sqrt(model.v)
    W_mu = model.W @ setting.mu
    W_eps = model.W @ setting.epsilon
    num = (r - 1.0) * (coef @ (model.m + W_mu - W_eps) - model.u @ model.beta) + r * (coef @ W_eps)
    den = setting.sigma_b * float(np.linalg.norm(model.W.T @ coef))
    return float(num / den)


def sia_derivative(setting, model, alpha, moments=None):
    """Analytic d SIA / d alpha = phi(ratio) * d ratio / d alpha."""
    return float(normal_pdf(sia_ratio(setting, model, alpha, moments)) * sia_ratio_slope(setting, model))


@dataclass
class MonotonicityReport:
    grid: list
    sia: list
    derivatives: list
    eta_measured: float
    psi_measured: float
    source_accuracy: float
    sigma_ratio: float
    strictly_decreasing: bool
    derivatives_negative: bool
    endpoint_low_ok: bool  # SIA(1) <= 1 - psi
    endpoint_high_ok: bool  # SIA(0) >= 1 - eta
    status: str = "certified"
    reasons: list = field(default_factory=list)

    @property
    def passed(self):
        return self.status == "certified"

    def to_dict(self):
        return asdict(self)


def measure_preconditions(setting, model, config):
    err_minus, err_plus = class_error_rates(setting, model)
    eta = max(err_minus, err_plus)
    psi = attack_success_rate(setting, model)
    reasons = []
    if not eta <= config.eta:
        reasons.append(f"classifier is {eta:.4f}-erroneous, above eta={config.eta}")
    if not psi >= config.psi:
        reasons.append(f"attack is only {psi:.4f}-successful, below psi={config.psi}")
    if setting.sigma_b > setting.sigma:
        reasons.append(f"sigma_b={setting.sigma_b} exceeds sigma={setting.sigma}")
    return eta, psi, reasons


def verify_theorem1(setting, model, config=None, grid=None, tol=1e-9):
    """Evaluate closed-form SIA and its derivative on an alpha grid.

    Raises AssumptionsUnmet (carrying the measurements) when the measured
    error rate, attack success or sigma_b <= sigma precondition fails.
    """
    config = config or AnalyticConfig()
    grid = [float(a) for a in (grid if grid is not None else np.linspace(0, 1, 11))]
    eta, psi, reasons = measure_preconditions(setting, model, config)
    if reasons:
        raise AssumptionsUnmet(reasons, {"eta": eta, "psi": psi, "sigma_b": setting.sigma_b, "sigma": setting.sigma})
    moments = corrected_moments(setting, model)
    sia = [sia_closed_form(setting, model, interpolate(model, *moments, a)) for a in grid]
    derivs = [sia_derivative(setting, model, a, moments) for a in grid]
    ordered = sorted(range(len(grid)), key=grid.__getitem__)
    decreasing = all(sia[i] > sia[j] for i, j in zip(ordered, ordered[1:]))
    at = dict(zip(grid, sia))
    low_ok = at[1.0] <= 1.0 - psi + tol if 1.0 in at else True
    high_ok = at[0.0] >= 1.0 - eta - tol if 0.0 in at else True
    ok = decreasing and all(d < 0 for d in derivs) and low_ok and high_ok
    return MonotonicityReport(
        grid=grid,
        sia=sia,
        derivatives=derivs,
        eta_measured=eta,
        psi_measured=psi,
        source_accuracy=source_accuracy(setting, model),
        sigma_ratio=setting.sigma_b / setting.sigma,
        strictly_decreasing=decreasing,
        derivatives_negative=all(d < 0 for d in derivs),
        endpoint_low_ok=low_ok,
        endpoint_high_ok=high_ok,
        status="certified" if ok else "failed",
    )


# ---------------------------------------------------------------------------
# sampling


def sample_clean_source(setting, n, rng):
    return -setting.mu + setting.sigma * rng.standard_normal((n, setting.d))


def sample_triggered(setting, n, rng):
    return setting.mu_b + setting.sigma_b * rng.standard_normal((n, setting.d))


def monte_carlo_sia(setting, model, state, n, rng, samples=None):
    xb = sample_triggered(setting, n, rng) if samples is None else samples
    a = model.activations(xb, state.m_hat, state.v_hat)
    return float(np.mean(a @ model.u > 0))


def _fit_output_weights(setting, W, m, v, gamma, beta, mixture):
    """Least-squares output weights from population moments of the training mixture.

    Regresses +1 (class -1) / -1 (class +1) on the activations; the mixture is a
    list of (weight, mean, sd, target).
    """
    A = (gamma / np.sqrt(v))[:, None] * W  # a = A x + c
    c = beta - gamma * m / np.sqrt(v)
    d = setting.d
    Exx = np.zeros((d, d))
    Ex = np.zeros(d)
    Exy = np.zeros(d)
    Ey = 0.0
    for w, mean, sd, t in mixture:
        Exx += w * (sd**2 * np.eye(d) + np.outer(mean, mean))
        Ex += w * mean
        Exy += w * t * mean
        Ey += w * t
    Eaa = A @ Exx @ A.T + np.outer(A @ Ex, c) + np.outer(c, A @ Ex) + np.outer(c, c)
    Eay = A @ Exy + c * Ey
    u, *_ = np.linalg.lstsq(Eaa, Eay, rcond=None)
    return u


def random_setting(rng, d=None, J=None, sigma_ratio=None, poison_fraction=0.2, config=None, max_tries=1000):
    """Draw a (setting, model) pair whose measured eta/psi clear the config with margin.

    The model mimics training on a poisoned set: BN statistics are the population
    moments of the hidden pre-activations under the poisoned mixture and output
    weights are a least-squares fit on it.
    """
    config = config or AnalyticConfig()
    for _ in range(max_tries):
        dd = int(d if d is not None else rng.integers(1, 9))
        jj = int(J if J is not None else rng.integers(1, 17))
        sigma = float(rng.uniform(0.5, 2.0))
        mu = rng.normal(0.0, 1.0, dd)
        mu *= rng.uniform(1.0, 3.0) * sigma / max(np.linalg.norm(mu), 1e-12)
        eps = rng.normal(0.0, 1.0, dd)
        eps *= rng.uniform(2.0, 6.0) * sigma / max(np.linalg.norm(eps), 1e-12)
        ratio = float(sigma_ratio if sigma_ratio is not None else rng.uniform(0.5, 1.0))
        setting = GaussianSetting(mu, sigma, eps, ratio * sigma)
        W = rng.normal(0.0, 1.0, (jj, dd))
        p = poison_fraction
        mixture = [
            ((1 - p) / 2, -mu, sigma, 1.0),
            ((1 - p) / 2, mu, sigma, -1.0),
            (p, setting.mu_b, setting.sigma_b, -1.0),
        ]
        mean = sum(w * (W @ mk) for w, mk, _, _ in mixture)
        second = sum(w * (sk**2 * np.sum(W**2, axis=1) + (W @ mk) ** 2) for w, mk, sk, _ in mixture)
        var = second - mean**2
        gamma = rng.uniform(0.5, 1.5, jj)
        beta = rng.normal(0.0, 0.2, jj)
        u = _fit_output_weights(setting, W, mean, var, gamma, beta, mixture)
        if not np.all(np.isfinite(u)) or np.linalg.norm(u) < 1e-9:
            continue
        u_minus = rng.normal(0.0, 1.0, jj)
        model = AnalyticMlp(W, mean, var, gamma, beta, u_minus, u_minus - u)
        try:
            eta, psi, reasons = measure_preconditions(setting, model, config)
        except ValueError:
            continue
        if not reasons and eta < config.eta - 0.01 and psi > config.psi + 0.01:
            return setting, model
    raise RuntimeError("could not draw a valid analytic setting")
