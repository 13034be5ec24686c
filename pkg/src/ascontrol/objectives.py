"""Scalar objectives: surprisal costs, variational free energy, the per-step
pathwise objective, the global surprise rate, and mean-centered advantages.

All expectations over latent tuples are exhaustive sums in log-space;
sampling estimators exist behind an explicit `n_samples` flag. Units are
nats throughout.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import chains
from .errors import EnumerationBudgetError
from .logspace import kl_divergence, safe_log
from .model import RecognitionContext


@dataclass(frozen=True)
class StepObjective:
    """One step's objective terms: expected reference surprisal (j), expected
    observation surprisal (l), belief-to-prior divergence (kl)."""

    j: float
    l: float
    kl: float

    @property
    def total(self):
        return self.j + self.l + self.kl


@dataclass(frozen=True)
class RateEstimate:
    mean_rate: float
    steps: int
    per_step: tuple


@dataclass(frozen=True)
class StepBelief:
    """A logged belief: the observation it conditions on plus the joint over
    latent tuples (flat, (L,))."""

    o: int
    q: np.ndarray


def reference_surprisal(ref, x):
    """-log R(o | a1) - log R(s1 | a2) for a realized state."""
    x.validate(ref.spec)
    val = -(safe_log(ref.ref_o.prob((x.a1,), x.o))
            + safe_log(ref.ref_s1.prob((x.a2,), x.s1)))
    if np.isinf(val):
        warnings.warn("reference places zero mass on a realized state",
                      RuntimeWarning, stacklevel=2)
    return float(val)


def likelihood_surprisal(gen, x):
    """-log p(o | a1, s1) for a realized state."""
    x.validate(gen.spec)
    val = -safe_log(gen.lik.prob((x.a1, x.s1), x.o))
    if np.isinf(val):
        warnings.warn("likelihood places zero mass on a realized observation",
                      RuntimeWarning, stacklevel=2)
    return float(val)


def _check_latent_budget(spec, budget):
    if budget is None:
        from .oracle import EnumerationBudget

        budget = EnumerationBudget.from_env()
    if spec.n_states > budget.max_states:
        raise EnumerationBudgetError(
            f"{spec.n_states} complete states exceed the enumeration budget",
            required=spec.n_states, allowed=budget.max_states)


def _context_rows(gen, rec, context, tick):
    """Belief, latent prior, and per-latent surprisal columns for one context."""
    spec = gen.spec
    q = rec.joint(context, tick=tick).reshape(-1)
    prior = chains.latent_prior_row(gen, context.x_prev, tick)
    lat = chains.Lattice.of(spec)
    l_lat = -safe_log(gen.lik.reshaped()[lat.la1, lat.ls1, context.o])
    return q, prior, l_lat


@dataclass(frozen=True)
class FreeEnergy:
    """Variational free energy and its two computation routes."""

    expected_nll: float
    kl_prior: float
    divergence_form: float

    @property
    def total(self):
        return self.expected_nll + self.kl_prior


def variational_free_energy(gen, rec, context, tick=True, budget=None,
                            n_samples=None, rng=None):
    """E_q[-log p(o | a1, s1)] + KL(q || latent prior), plus the equivalent
    single-divergence form (belief against the unnormalized joint)."""
    _check_latent_budget(gen.spec, budget)
    q, prior, l_lat = _context_rows(gen, rec, context, tick)
    if n_samples:
        rng = rng or np.random.default_rng()
        draws = rng.choice(len(q), size=n_samples, p=q)
        nll = float(np.mean(l_lat[draws]))
        kl = float(np.mean(safe_log(q[draws]) - safe_log(prior[draws])))
        return FreeEnergy(nll, kl, nll + kl)
    mask = q > 0.0
    nll = float(np.sum(q[mask] * l_lat[mask]))
    kl = kl_divergence(q, prior)
    log_joint = safe_log(prior) - l_lat  # log(prior * lik), unnormalized
    div = float(np.sum(q[mask] * (safe_log(q[mask]) - log_joint[mask])))
    return FreeEnergy(nll, kl, div)


def step_objective(gen, rec, ref, context, tick=True, budget=None,
                   n_samples=None, rng=None):
    """The per-step pathwise objective: expected reference surprisal plus the
    two free-energy terms."""
    _check_latent_budget(gen.spec, budget)
    q, prior, l_lat = _context_rows(gen, rec, context, tick)
    lat = chains.Lattice.of(gen.spec)
    j_lat = chains.reference_over_latents(ref)[:, context.o]
    if n_samples:
        rng = rng or np.random.default_rng()
        draws = rng.choice(len(q), size=n_samples, p=q)
        return StepObjective(
            j=float(np.mean(j_lat[draws])),
            l=float(np.mean(l_lat[draws])),
            kl=float(np.mean(safe_log(q[draws]) - safe_log(prior[draws]))))
    mask = q > 0.0
    return StepObjective(
        j=float(np.sum(q[mask] * j_lat[mask])),
        l=float(np.sum(q[mask] * l_lat[mask])),
        kl=kl_divergence(q, prior))


def reference_cross_entropy_rate(beliefs, ref):
    """Window average of E_q[-log R(x)] over logged per-step beliefs."""
    if not beliefs:
        raise ValueError("empty belief window")
    j_lat = chains.reference_over_latents(ref)
    vals = []
    for b in beliefs:
        with np.errstate(invalid="ignore"):
            vals.append(float(np.where(b.q > 0.0, b.q * j_lat[:, b.o], 0.0).sum()))
    return float(np.mean(vals))


def global_rate(per_step):
    """Arithmetic mean of step-objective totals."""
    if not per_step:
        raise ValueError("empty step-objective list")
    totals = tuple(s.total for s in per_step)
    return RateEstimate(mean_rate=float(np.mean(totals)), steps=len(totals),
                        per_step=totals)


def advantage(step, rate):
    """Mean-centered step objective."""
    return step.total - rate


def step_context(o, a, x_prev, future=None):
    return RecognitionContext(o=o, a=a, x_prev=x_prev, future=future)
