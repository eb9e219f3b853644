#!/usr/bin/env python3
"""
MCMC Module - Adaptive random-walk Metropolis with convergence diagnostics
All chains advance together: the log-target receives a (n_chains, dim)
array and returns one log-density per chain. During warmup each chain's
proposal scale follows a Robbins-Monro rule toward the target acceptance,
and the shared proposal shape is re-estimated from the pooled warmup draws.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from core.errors import DiagnosticsError, InvalidArgumentError

logger = logging.getLogger(__name__)

LogTarget = Callable[[np.ndarray], np.ndarray]


@dataclass
class SamplerOptions:
    """Configuration for the adaptive Metropolis sampler"""
    n_chains: int = 4
    n_draws: int = 4000          # post-warmup draws kept, summed over chains
    thin: int = 1
    target_acceptance: float = 0.3
    adaptation_interval: int = 50
    initial_scale: float = 0.5
    init_jitter: float = 0.5
    rhat_threshold: float = 1.05
    check_convergence: bool = True

    def __post_init__(self):
        if self.n_chains < 1 or self.n_draws < self.n_chains or self.thin < 1:
            raise InvalidArgumentError("Need n_chains >= 1, n_draws >= n_chains and thin >= 1")
        if not 0 < self.target_acceptance < 1:
            raise InvalidArgumentError("target_acceptance must lie in (0, 1)")

    @property
    def draws_per_chain(self) -> int:
        return int(np.ceil(self.n_draws / self.n_chains))

    @property
    def warmup_per_chain(self) -> int:
        # half of all iterations are warmup
        return self.draws_per_chain * self.thin

    def with_draws(self, n_draws: int) -> "SamplerOptions":
        return replace(self, n_draws=n_draws)


@dataclass
class ChainResult:
    samples: np.ndarray              # (n_chains, draws_per_chain, dim), unconstrained space
    names: List[str]
    acceptance: np.ndarray           # post-warmup acceptance rate per chain
    rhat: Dict[str, float] = field(default_factory=dict)
    ess: Dict[str, float] = field(default_factory=dict)

    def pooled(self, n: Optional[int] = None) -> np.ndarray:
        flat = self.samples.reshape(-1, self.samples.shape[-1])
        return flat if n is None else flat[:n]

    @property
    def diagnostics(self) -> Dict[str, Any]:
        return {"rhat": dict(self.rhat), "ess": dict(self.ess),
                "acceptance": [float(a) for a in self.acceptance]}


# ========================================================================
#                               Diagnostics
# ========================================================================

def split_rhat(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction for one parameter, chains (m, n)"""
    m, n = chains.shape
    half = n // 2
    if half < 2:
        return float("nan")
    split = np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)
    means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean()
    between = half * means.var(ddof=1)
    if within <= 0:
        return 1.0 if between <= 0 else float("inf")
    var_plus = (half - 1) / half * within + between / half
    return float(np.sqrt(var_plus / within))


def effective_draws(chains: np.ndarray) -> float:
    """Multi-chain effective sample size with Geyer's initial positive sequence"""
    m, n = chains.shape
    if n < 4:
        return float(m * n)
    centered = chains - chains.mean(axis=1, keepdims=True)
    nfft = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, nfft, axis=1)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), nfft, axis=1)[:, :n] / n
    chain_var = acov[:, 0] * n / (n - 1)
    within = chain_var.mean()
    means = chains.mean(axis=1)
    var_plus = within * (n - 1) / n + (means.var(ddof=1) if m > 1 else 0.0)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        total += pair
        t += 2
    tau = max(2.0 * total - 1.0, 1.0 / np.log10(max(m * n, 10)))
    return float(m * n / tau)


# ========================================================================
#                                 Sampler
# ========================================================================

def _safe_logp(log_target: LogTarget, x: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        lp = np.asarray(log_target(x), dtype=float)
    return np.where(np.isfinite(lp), lp, -np.inf)


def sample(log_target: LogTarget, init: Sequence[float], rng: np.random.Generator,
           options: Optional[SamplerOptions] = None, names: Optional[Sequence[str]] = None) -> ChainResult:
    """Run adaptive random-walk Metropolis and return post-warmup draws"""
    options = options or SamplerOptions()
    init = np.asarray(init, dtype=float)
    dim = init.size
    names = list(names) if names is not None else [f"x{i}" for i in range(dim)]
    n_chains = options.n_chains

    x = init + options.init_jitter * rng.standard_normal((n_chains, dim))
    lp = _safe_logp(log_target, x)
    # fall back to the supplied point for chains that start in a zero-density region
    bad = ~np.isfinite(lp)
    if np.any(bad):
        x[bad] = init
        lp[bad] = _safe_logp(log_target, x[bad])
    if not np.all(np.isfinite(lp)):
        raise DiagnosticsError("Log-target is not finite at the initial point", {"init": init.tolist()})

    scale = np.full(n_chains, options.initial_scale)
    chol = np.eye(dim)
    shaped = False
    warmup = options.warmup_per_chain
    keep = options.draws_per_chain
    total = warmup + keep * options.thin

    warm_trace = np.empty((n_chains, warmup, dim))
    samples = np.empty((n_chains, keep, dim))
    accepted_window = np.zeros(n_chains)
    accepted_post = np.zeros(n_chains)

    for it in range(total):
        z = rng.standard_normal((n_chains, dim)) @ chol.T
        proposal = x + scale[:, None] * z
        lp_prop = _safe_logp(log_target, proposal)
        accept = np.log(rng.uniform(size=n_chains)) < lp_prop - lp
        x = np.where(accept[:, None], proposal, x)
        lp = np.where(accept, lp_prop, lp)

        if it < warmup:
            warm_trace[:, it] = x
            accepted_window += accept
            if (it + 1) % options.adaptation_interval == 0:
                rate = accepted_window / options.adaptation_interval
                step = 1.0 / np.sqrt((it + 1) / options.adaptation_interval)
                scale *= np.exp(step * (rate - options.target_acceptance) / options.target_acceptance)
                accepted_window[:] = 0
                if it + 1 >= warmup // 2 and it + 1 >= 4 * dim:
                    recent = warm_trace[:, (it + 1) // 2: it + 1].reshape(-1, dim)
                    cov = np.atleast_2d(np.cov(recent, rowvar=False)) + 1e-8 * np.eye(dim)
                    try:
                        chol = np.linalg.cholesky(cov * 2.38 ** 2 / dim)
                    except np.linalg.LinAlgError:
                        continue
                    if not shaped:
                        # scales were tuned against the identity shape
                        scale[:] = 1.0
                        shaped = True
        else:
            accepted_post += accept
            post = it - warmup
            if post % options.thin == options.thin - 1:
                samples[:, post // options.thin] = x

    acceptance = accepted_post / (keep * options.thin)
    result = ChainResult(samples, names, acceptance)
    for i, name in enumerate(names):
        result.rhat[name] = split_rhat(samples[:, :, i]) if n_chains > 1 else float("nan")
        result.ess[name] = effective_draws(samples[:, :, i])

    logger.debug(f"MCMC finished: acceptance={np.round(acceptance, 3).tolist()} rhat={result.rhat}")
    if options.check_convergence and n_chains > 1:
        worst = max(result.rhat.values())
        if not np.isfinite(worst) or worst > options.rhat_threshold:
            raise DiagnosticsError(f"Chains did not converge (max split-R-hat {worst:.3f})", result.diagnostics)
    return result
