"""Dense per-step operators over the complete-state lattice.

Everything downstream (objectives, oracles, solvers, training) works with
a handful of arrays built here:

    prior     (N, L)            latent prior p(s1, s2, a1, a2 | x_prev)
    marg      (N, O, A)         observable marginal p(o, a | x_prev)
    belief    (N, O, A, L)      recognition belief per context
    cost      (N, O, A)         per-edge step objective (j + l + kl)
    P, Qc     (N, N)            one-step transition matrices

N is the complete-state count, L the latent-tuple count, O/A the
observation/action cardinalities. All builders take an explicit `tick`
flag; non-tick steps hold the slow latent deterministically. Complete
states are raveled row-major in (o, s1, s2, a, a1, a2) order and latent
tuples in (s1, s2, a1, a2) order.
"""

from dataclasses import dataclass

import numpy as np

from .logspace import safe_log
from .model import tick_at


class Lattice:
    """Cached index arrays for one ModelSpec."""

    _cache = {}

    def __init__(self, spec):
        self.spec = spec
        dims = spec.dims
        n = spec.n_states
        comps = np.unravel_index(np.arange(n), dims)
        self.o, self.s1, self.s2, self.a, self.a1, self.a2 = (
            c.astype(np.intp) for c in comps)
        lat = np.unravel_index(np.arange(spec.n_latents), spec.latent_dims)
        self.ls1, self.ls2, self.la1, self.la2 = (c.astype(np.intp) for c in lat)
        # latent index of each complete state, and state index of (o, latent, a)
        self.lat_of_state = np.ravel_multi_index(
            (self.s1, self.s2, self.a1, self.a2), spec.latent_dims)
        o_grid, l_grid, a_grid = np.meshgrid(
            np.arange(spec.card_o), np.arange(spec.n_latents),
            np.arange(spec.card_a), indexing="ij")
        self.state_of_ola = np.ravel_multi_index(
            (o_grid, self.ls1[l_grid], self.ls2[l_grid], a_grid,
             self.la1[l_grid], self.la2[l_grid]), dims)

    @classmethod
    def of(cls, spec):
        lat = cls._cache.get(spec)
        if lat is None:
            lat = cls._cache[spec] = cls(spec)
        return lat


def latent_prior(gen, tick):
    """p(s1, s2, a1, a2 | x_prev) for every x_prev, shape (N, L)."""
    spec = gen.spec
    lat = Lattice.of(spec)
    n = spec.n_states
    if tick:
        d2 = gen.dyn2.reshaped()[lat.s2, lat.a, :]            # (N, s2')
    else:
        d2 = np.zeros((n, spec.card_s2))
        d2[np.arange(n), lat.s2] = 1.0
    p2 = gen.pol2.reshaped()                                   # (s2', a2)
    d1 = gen.dyn1.reshaped()[lat.s1, :, lat.a, :]              # (N, s2', s1')
    p1 = gen.pol1.reshaped()                                   # (s1', a2, a1)
    prior = np.einsum("xX,XA,xXs,sAb->xsXbA", d2, p2, d1, p1, optimize=True)
    return prior.reshape(n, spec.n_latents)


def latent_prior_row(gen, x_prev, tick):
    """Latent prior for a single conditioning state, shape (L,)."""
    spec = gen.spec
    x_prev.validate(spec)
    if tick:
        d2 = gen.dyn2.reshaped()[x_prev.s2, x_prev.a]          # (s2',)
    else:
        d2 = np.zeros(spec.card_s2)
        d2[x_prev.s2] = 1.0
    p2 = gen.pol2.reshaped()
    d1 = gen.dyn1.reshaped()[x_prev.s1, :, x_prev.a, :]        # (s2', s1')
    p1 = gen.pol1.reshaped()
    prior = np.einsum("X,XA,Xs,sAb->sXbA", d2, p2, d1, p1)
    return prior.reshape(spec.n_latents)


def lik_over_latents(gen):
    """lik(o | a1(l), s1(l)), shape (L, O)."""
    lat = Lattice.of(gen.spec)
    return gen.lik.reshaped()[lat.la1, lat.ls1, :]


def pol0_over_latents(gen):
    """pol0(a | o, a1(l)), shape (L, O, A)."""
    lat = Lattice.of(gen.spec)
    return gen.pol0.reshaped()[:, lat.la1, :].transpose(1, 0, 2)


def obs_action_marginal(gen, tick, prior=None):
    """p(o, a | x_prev) = sum_l prior * lik * pol0, shape (N, O, A)."""
    if prior is None:
        prior = latent_prior(gen, tick)
    return np.einsum("xl,lo,loa->xoa", prior, lik_over_latents(gen),
                     pol0_over_latents(gen), optimize=True)


def belief_table(rec, tick, future=None):
    """Recognition belief q(latents | o, a, x_prev, future) for every
    (x_prev, o, a), shape (N, O, A, L). `future=None` is the sentinel."""
    spec = rec.spec
    lat = Lattice.of(spec)
    n = spec.n_states
    f = rec.future_sentinel if future is None else int(future)
    if tick:
        q_s2 = rec.tables["s2"][:, :, :, f]                    # (N, O, A, s2)
    else:
        hold = np.zeros((n, spec.card_s2))
        hold[np.arange(n), lat.s2] = 1.0
        q_s2 = np.broadcast_to(hold[:, None, None, :],
                               (n, spec.card_o, spec.card_a, spec.card_s2))
    q_a2 = rec.tables["a2"][:, :, :, f]                        # (N, O, A, s2, a2)
    q_s1 = rec.tables["s1"][:, :, :, f]                        # (N, O, A, s2, a2, s1)
    q_a1 = rec.tables["a1"][:, :, :, f]                        # (N, O, A, s1, a2, a1)
    joint = np.einsum("xowX,xowXA,xowXAs,xowsAb->xowsXbA",
                      q_s2, q_a2, q_s1, q_a1, optimize=True)
    return joint.reshape(n, spec.card_o, spec.card_a, spec.n_latents)


def reference_over_latents(ref):
    """-log R per latent tuple: shape (L, O); the o-dependent ref_o term plus
    the o-independent ref_s1 term."""
    lat = Lattice.of(ref.spec)
    j_o = -safe_log(ref.ref_o.reshaped()[lat.la1, :])          # (L, O)
    j_s1 = -safe_log(ref.ref_s1.reshaped()[lat.la2, lat.ls1])  # (L,)
    return j_o + j_s1[:, None]


@dataclass(frozen=True)
class EdgeCost:
    """Per-edge step objective, each field shaped (N, O, A)."""

    j: np.ndarray
    l: np.ndarray
    kl: np.ndarray

    @property
    def total(self):
        return self.j + self.l + self.kl


def edge_cost(gen, rec, ref, tick, prior=None, belief=None):
    """Step objective for a transition x_prev -> x', as a function of
    (x_prev, o(x'), a(x')): expected reference surprisal, expected
    observation surprisal, and KL from belief to latent prior, all under
    the filtering (sentinel) belief."""
    if prior is None:
        prior = latent_prior(gen, tick)
    if belief is None:
        belief = belief_table(rec, tick)
    j_lat = reference_over_latents(ref)                        # (L, O)
    l_lat = -safe_log(lik_over_latents(gen))                   # (L, O)
    with np.errstate(invalid="ignore"):
        j = np.where(belief > 0.0, belief * j_lat.T[None, :, None, :], 0.0).sum(axis=3)
        l = np.where(belief > 0.0, belief * l_lat.T[None, :, None, :], 0.0).sum(axis=3)
    log_q = safe_log(belief)
    log_prior = safe_log(prior)[:, None, None, :]
    with np.errstate(invalid="ignore"):
        integrand = np.where(belief > 0.0, belief * (log_q - log_prior), 0.0)
    kl = integrand.sum(axis=3)
    return EdgeCost(j=j, l=l, kl=kl)


def transition_matrix(gen, tick, prior=None):
    """One-step matrix P[x, x'] of the policy-embedded model, shape (N, N)."""
    spec = gen.spec
    lat = Lattice.of(spec)
    if prior is None:
        prior = latent_prior(gen, tick)
    t4 = np.einsum("xl,lo,loa->xola", prior, lik_over_latents(gen),
                   pol0_over_latents(gen), optimize=True)
    n = spec.n_states
    out = np.empty((n, n))
    out[:, lat.state_of_ola.reshape(-1)] = t4.reshape(n, n)
    return out


def transition_row(gen, x, tick):
    """One transition row p(x' | x) of the policy-embedded model, shape (N,)."""
    spec = gen.spec
    lat = Lattice.of(spec)
    prior = latent_prior_row(gen, x, tick)
    row4 = np.einsum("l,lo,loa->ola", prior, lik_over_latents(gen),
                     pol0_over_latents(gen))
    out = np.empty(spec.n_states)
    out[lat.state_of_ola.reshape(-1)] = row4.reshape(-1)
    return out


def qchain_matrix(gen, rec, tick, prior=None, belief=None):
    """One-step matrix of the recognition-controlled chain: observables from
    the model's marginal, latents from the filtering belief."""
    spec = gen.spec
    lat = Lattice.of(spec)
    if prior is None:
        prior = latent_prior(gen, tick)
    if belief is None:
        belief = belief_table(rec, tick)
    m = obs_action_marginal(gen, tick, prior=prior)
    q4 = np.einsum("xoa,xoal->xola", m, belief, optimize=True)
    n = spec.n_states
    out = np.empty((n, n))
    out[:, lat.state_of_ola.reshape(-1)] = q4.reshape(n, n)
    return out


def state_cost(gen, ref):
    """Realized per-state surprisal J(x) + L(x), shape (N,)."""
    lat = Lattice.of(gen.spec)
    j = (-safe_log(ref.ref_o.reshaped()[lat.a1, lat.o])
         - safe_log(ref.ref_s1.reshaped()[lat.a2, lat.s1]))
    l = -safe_log(gen.lik.reshaped()[lat.a1, lat.s1, lat.o])
    return j + l


def posterior_recognition_tables(gen, condition_on_action=True):
    """Recognition tables initialized at the exact one-step filtering
    posterior: q(latents | o, a, x_prev) propto prior * lik * pol0(a | o, a1)
    (drop the pol0 factor with condition_on_action=False). Every
    future-summary slice starts at the filtering posterior; training can
    move the smoothing slices away from it.

    Factored as (s2, a2 | s2, s1 | s2 a2, a1 | s1 a2); the last factor is
    exact because a1 is conditionally independent of s2 given (s1, a2).
    """
    spec = gen.spec
    n, c_o, c_a = spec.n_states, spec.card_o, spec.card_a
    s1c, s2c, a1c, a2c = spec.latent_dims
    prior = latent_prior(gen, True)
    joint = prior[:, None, None, :] * lik_over_latents(gen).T[None, :, None, :]
    if condition_on_action:
        joint = joint * pol0_over_latents(gen).transpose(1, 2, 0)[None]
    else:
        joint = np.ascontiguousarray(
            np.broadcast_to(joint, (n, c_o, c_a, spec.n_latents)))
    z = joint.sum(axis=3, keepdims=True)
    with np.errstate(invalid="ignore"):
        joint = np.where(z > 0.0, joint / z, 1.0 / joint.shape[3])
    joint = joint.reshape(n, c_o, c_a, s1c, s2c, a1c, a2c)

    def _norm(arr):
        s = arr.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore"):
            return np.where(s > 0.0, arr / s, 1.0 / arr.shape[-1])

    f_s2 = _norm(joint.sum(axis=(3, 5, 6)))                          # (.., s2)
    f_a2 = _norm(joint.sum(axis=(3, 5)))                             # (.., s2, a2)
    f_s1 = _norm(joint.sum(axis=5).transpose(0, 1, 2, 4, 5, 3))      # (.., s2, a2, s1)
    f_a1 = _norm(joint.sum(axis=4).transpose(0, 1, 2, 3, 5, 4))      # (.., s1, a2, a1)
    n_fut = c_o + 1
    expand = lambda a: np.broadcast_to(
        a[:, :, :, None], a.shape[:3] + (n_fut,) + a.shape[3:]).copy()
    return {"s2": expand(f_s2), "a2": expand(f_a2),
            "s1": expand(f_s1), "a1": expand(f_a1)}


def expected_edge_cost(marg, cost):
    """E over (o, a) of an edge cost, honoring that zero-probability edges
    contribute nothing even when their cost is infinite. Shapes (N, O, A)."""
    with np.errstate(invalid="ignore"):
        prod = np.where(marg > 0.0, marg * cost, 0.0)
    return prod.sum(axis=(1, 2))


def expand_edges(values_noa, spec):
    """Broadcast an (N, O, A) edge array to a dense (N, N) matrix indexed by
    the successor's observation/action components."""
    lat = Lattice.of(spec)
    return values_noa[:, lat.o, lat.a]


def step_matrices(builder, spec, T, t0=0):
    """List of per-step matrices for steps t0+1 .. t0+T, built once per
    distinct tick value. `builder(tick)` returns the matrix for one step."""
    by_tick = {}
    out = []
    for t in range(t0 + 1, t0 + T + 1):
        k = tick_at(t, spec)
        if k not in by_tick:
            by_tick[k] = builder(k)
        out.append(by_tick[k])
    return out
