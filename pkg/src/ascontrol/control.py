"""Solvers and estimators on the complete-state lattice.

Hard relative value iteration over the joint action tuple (a, a1, a2),
the closed-form reweighted transition density q*, its KL identity,
Monte Carlo path-integral estimation, the differential free energy, and
gradient training of recognition/policy logits.

The tick schedule makes the chain periodic in time, so all average-cost
machinery runs on the phase-product chain: a state at time t carries
phase t mod period, the transition out of phase 0 ticks, and value
tables hold one bias vector per phase.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import chains, oracle
from .errors import (ConvergenceError, DegenerateSupportError,
                     DegenerateWeightsError, NonFiniteObjectiveError)
from .logspace import NEG_INF, logsumexp, safe_log
from .model import (CompleteState, ConditionalTable, REC_FACTORS,
                    RecognitionModel, tick_at)

VALUE_FILE_VERSION = 1


# ---------------------------------------------------------------------------
# differential value


@dataclass(frozen=True)
class DifferentialValue:
    """Gain (average step objective) plus one bias table per phase, with the
    flat-index-0 state at phase 0 pinned to bias zero."""

    spec: object
    gain: float
    bias: np.ndarray              # (period, n_states)
    anchor_state: CompleteState
    greedy: np.ndarray = None     # (period, n_states) flat action tuples

    @property
    def period(self):
        return self.bias.shape[0]

    def bias_at_time(self, t):
        """Bias table for states occupied at time t."""
        return self.bias[t % self.period]

    def save(self, path):
        doc = {
            "version": VALUE_FILE_VERSION,
            "spec": self.spec.to_dict(),
            "gain": self.gain,
            "bias": self.bias.tolist(),
            "anchor": self.anchor_state.astuple(),
        }
        if self.greedy is not None:
            doc["greedy"] = self.greedy.tolist()
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        from .model import ModelSpec

        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != VALUE_FILE_VERSION:
            raise ValueError(f"unsupported value file version {doc.get('version')!r}")
        spec = ModelSpec.from_dict(doc["spec"])
        bias = np.array(doc["bias"], dtype=float)
        bias.setflags(write=False)
        greedy = None
        if "greedy" in doc:
            greedy = np.array(doc["greedy"], dtype=np.intp)
            greedy.setflags(write=False)
        return cls(spec=spec, gain=float(doc["gain"]), bias=bias,
                   anchor_state=CompleteState(*doc["anchor"]), greedy=greedy)


# ---------------------------------------------------------------------------
# hard Bellman machinery


def action_tuples(spec):
    """Flat row-major enumeration of the joint action tuple (a, a1, a2)."""
    n_u = spec.card_a * spec.card_a1 * spec.card_a2
    ua, ua1, ua2 = np.unravel_index(
        np.arange(n_u), (spec.card_a, spec.card_a1, spec.card_a2))
    return ua.astype(np.intp), ua1.astype(np.intp), ua2.astype(np.intp)


class _BellmanOps:
    """Per-phase pieces of the hard-min backup: nature's factors, edge costs,
    and successor indices per action tuple."""

    def __init__(self, gen, rec, ref, budget=None):
        budget = oracle._budget(budget)
        oracle._check_states(gen.spec, budget)
        spec = self.spec = gen.spec
        self.period = spec.tick_period_level2
        lat = chains.Lattice.of(spec)
        self.ua, self.ua1, self.ua2 = action_tuples(spec)
        self.n_u = self.ua.size
        self.likR = gen.lik.reshaped()                       # (a1, s1, o)
        d1 = gen.dyn1.reshaped()[lat.s1, :, lat.a, :]        # (N, s2', s1')
        self.base = {}
        self.cost = {}
        n = spec.n_states
        for tick in (True, False):
            if tick:
                d2 = gen.dyn2.reshaped()[lat.s2, lat.a, :]
            else:
                d2 = np.zeros((n, spec.card_s2))
                d2[np.arange(n), lat.s2] = 1.0
            self.base[tick] = np.einsum("xX,xXs->xXs", d2, d1)   # (N, s2', s1')
            self.cost[tick] = chains.edge_cost(gen, rec, ref, tick).total
        # successor state per (u, o', s1', s2')
        og, s1g, s2g = np.meshgrid(np.arange(spec.card_o), np.arange(spec.card_s1),
                                   np.arange(spec.card_s2), indexing="ij")
        self.succ = np.empty((self.n_u,) + og.shape, dtype=np.intp)
        for u in range(self.n_u):
            self.succ[u] = np.ravel_multi_index(
                (og, s1g, s2g, np.full_like(og, self.ua[u]),
                 np.full_like(og, self.ua1[u]), np.full_like(og, self.ua2[u])),
                spec.dims)

    def tick_of_phase(self, p):
        return p == 0

    def backup(self, p, h_next):
        """One hard-min backup out of phase p: returns (values, argmin) where
        values[x] = min_u E[cost + h_next(x')]."""
        tick = self.tick_of_phase(p)
        base, cost = self.base[tick], self.cost[tick]
        vals = np.empty((self.n_u, self.spec.n_states))
        for u in range(self.n_u):
            lik_u = self.likR[self.ua1[u]]                   # (s1', o)
            # expected edge cost: sum_world base * lik * cost[x, o', a_u]
            m1 = np.einsum("xXs,so->xo", base, lik_u)
            c_u = cost[:, :, self.ua[u]]
            with np.errstate(invalid="ignore"):
                c_term = np.where(m1 > 0.0, m1 * c_u, 0.0).sum(axis=1)
            # expected successor value
            hn = h_next[self.succ[u]]                        # (o', s1', s2')
            inner = np.einsum("so,osX->sX", lik_u, hn)
            h_term = np.einsum("xXs,sX->x", base, inner)
            vals[u] = c_term + h_term
        argmin = np.argmin(vals, axis=0)
        return vals[argmin, np.arange(self.spec.n_states)], argmin

    def greedy_operators(self, greedy):
        """Transition matrices and expected edge costs of the greedy policy,
        one per phase."""
        n = self.spec.n_states
        mats, costs = [], []
        for p in range(self.period):
            tick = self.tick_of_phase(p)
            base, cost = self.base[tick], self.cost[tick]
            mat = np.zeros((n, n))
            ecost = np.empty(n)
            for u in np.unique(greedy[p]):
                rows = np.nonzero(greedy[p] == u)[0]
                lik_u = self.likR[self.ua1[u]]
                w = np.einsum("xXs,so->xosX", base[rows], lik_u)  # (r, o, s1, s2)
                mat[rows[:, None], self.succ[u].reshape(1, -1)] = w.reshape(rows.size, -1)
                m1 = w.sum(axis=(2, 3))
                c_u = cost[rows][:, :, self.ua[u]]
                with np.errstate(invalid="ignore"):
                    ecost[rows] = np.where(m1 > 0.0, m1 * c_u, 0.0).sum(axis=1)
            mats.append(mat)
            costs.append(ecost)
        return mats, costs


def relative_value_iteration(gen, rec, ref, tol=1e-9, max_iter=200_000,
                             h0=None, tau=0.5, budget=None):
    """Solve the hard-min differential Bellman equation on the phase-product
    chain. Runs relative value iteration on the aperiodicity-transformed
    problem (lazy mixing tau), then verifies the original residual at the
    requested sup-norm tolerance."""
    ops = _BellmanOps(gen, rec, ref, budget=budget)
    spec = gen.spec
    n, period = spec.n_states, ops.period
    h = np.zeros((period, n)) if h0 is None else np.array(h0, dtype=float)
    h = h - h[0, 0]
    inner_tol = max(tol * (1.0 - tau) * 0.1, 1e-15)
    last_resid = np.inf
    check_every = 10
    for it in range(1, max_iter + 1):
        new = np.empty_like(h)
        for p in range(period):
            vals, _ = ops.backup(p, (1.0 - tau) * h[(p + 1) % period])
            new[p] = vals + tau * h[p]
        new -= new[0, 0]
        delta = float(np.max(np.abs(new - h)))
        h = new
        if delta <= inner_tol or it % check_every == 0:
            bias = (1.0 - tau) * h
            bias = bias - bias[0, 0]
            orig = np.empty_like(bias)
            greedy = np.empty((period, n), dtype=np.intp)
            for p in range(period):
                orig[p], greedy[p] = ops.backup(p, bias[(p + 1) % period])
            gain = float(orig[0, 0] - bias[0, 0])
            last_resid = float(np.max(np.abs(orig - gain - bias)))
            if last_resid <= tol:
                bias.setflags(write=False)
                greedy.setflags(write=False)
                return DifferentialValue(
                    spec=spec, gain=gain, bias=bias,
                    anchor_state=CompleteState.from_flat(0, spec), greedy=greedy)
            if delta <= inner_tol:
                inner_tol = max(inner_tol / 10.0, 1e-16)
    raise ConvergenceError(
        f"relative value iteration: residual {last_resid:.3e} > tol {tol:.3e} "
        f"after {max_iter} sweeps", residual=last_resid)


def greedy_stationary_rate(gen, rec, ref, value, budget=None):
    """Exact long-run average edge cost of the greedy policy extracted from a
    converged DifferentialValue."""
    if value.greedy is None:
        raise ValueError("DifferentialValue carries no greedy policy")
    ops = _BellmanOps(gen, rec, ref, budget=budget)
    mats, costs = ops.greedy_operators(np.asarray(value.greedy))
    return oracle.stationary_rate(mats, costs)


def greedy_rollout_rate(gen, rec, ref, value, x0, steps, seed, block=1000,
                        budget=None):
    """Seeded rollout under the greedy policy: mean edge cost and its
    batch-means standard error."""
    ops = _BellmanOps(gen, rec, ref, budget=budget)
    mats, costs_by_phase = ops.greedy_operators(np.asarray(value.greedy))
    spec = gen.spec
    period = ops.period
    cost_edge = [chains.expand_edges(ops.cost[ops.tick_of_phase(p)], spec)
                 for p in range(period)]
    cums = [np.cumsum(m, axis=1) for m in mats]
    rng = np.random.default_rng(seed)
    x = x0.flat(spec)
    vals = np.empty(steps)
    for t in range(steps):
        p = t % period
        nxt = int(np.searchsorted(cums[p][x], rng.random(), side="right"))
        nxt = min(nxt, spec.n_states - 1)
        vals[t] = cost_edge[p][x, nxt]
        x = nxt
    n_blocks = steps // block
    means = vals[:n_blocks * block].reshape(n_blocks, block).mean(axis=1)
    stderr = float(means.std(ddof=1) / np.sqrt(n_blocks)) if n_blocks > 1 else 0.0
    return float(vals.mean()), stderr


# ---------------------------------------------------------------------------
# optimal transition density and its KL identity


def optimal_transition(gen, value, x, t=0):
    """q*(x_{t+1} | x_t): the model's transition row reweighted by
    exp(-bias(x_{t+1})), normalized. `t` is the time index of the
    conditioning state, so the row describes the transition into step
    t + 1 (t=0 is the episode context; its outgoing transition ticks)."""
    spec = gen.spec
    x.validate(spec)
    row = chains.transition_row(gen, x, tick_at(t + 1, spec))
    bias_next = value.bias_at_time(t + 1)
    logw = safe_log(row) - bias_next
    log_z = logsumexp(logw)
    if log_z == NEG_INF:
        raise DegenerateSupportError(
            f"transition row from {x} has no support after reweighting")
    return np.exp(logw - log_z)


def kl_qstar_identity(gen, value, x, t=0):
    """Both sides of the feedback-vs-feedforward KL identity:
    lhs = KL(q* || p); rhs = -E_{q*}[bias'] - log E_p[exp(-bias')].
    `t` follows the optimal_transition convention."""
    spec = gen.spec
    x.validate(spec)
    row = chains.transition_row(gen, x, tick_at(t + 1, spec))
    bias_next = value.bias_at_time(t + 1)
    logp = safe_log(row)
    logw = logp - bias_next
    log_z = logsumexp(logw)
    if log_z == NEG_INF:
        raise DegenerateSupportError(
            f"transition row from {x} has no support after reweighting")
    q = np.exp(logw - log_z)
    mask = q > 0.0
    lhs = float(np.sum(q[mask] * (np.log(q[mask]) - logp[mask])))
    rhs = float(-(q @ bias_next) - log_z)
    return lhs, rhs


# ---------------------------------------------------------------------------
# Monte Carlo path-integral value and the differential free energy


def _rollout_ingredients(gen, rec, ref, mode):
    """Per-tick transition matrices, row CDFs, and edge costs for rollouts."""
    spec = gen.spec
    mats, cums, costs = {}, {}, {}
    for tick in (True, False):
        if mode == "feedforward":
            mats[tick] = chains.transition_matrix(gen, tick)
            costs[tick] = np.broadcast_to(chains.state_cost(gen, ref),
                                          (spec.n_states, spec.n_states))
        elif mode == "feedback":
            mats[tick] = chains.qchain_matrix(gen, rec, tick)
            costs[tick] = chains.expand_edges(
                chains.edge_cost(gen, rec, ref, tick).total, spec)
        else:
            raise ValueError(f"unknown rollout density {mode!r}")
        cums[tick] = np.cumsum(mats[tick], axis=1)
    return mats, cums, costs


def _rollout_path_costs(gen, rec, ref, x0, T, rate, mode, n_rollouts, seed):
    spec = gen.spec
    _, cums, costs = _rollout_ingredients(gen, rec, ref, mode)
    rng = np.random.default_rng(seed)
    states = np.full(n_rollouts, x0.flat(spec), dtype=np.intp)
    path_cost = np.zeros(n_rollouts)
    for t in range(1, T + 1):
        tick = tick_at(t, spec)
        r = rng.random(n_rollouts)
        rows = cums[tick][states]
        nxt = np.minimum((rows < r[:, None]).sum(axis=1), spec.n_states - 1)
        path_cost += costs[tick][states, nxt] - rate
        states = nxt
    return path_cost


def mc_path_integral_value(gen, rec, ref, x0, T, rate, mode="feedforward",
                           n_rollouts=1000, seed=0):
    """-log mean(exp(-path cost)) over seeded rollouts, with a delta-method
    standard error on the log scale."""
    if n_rollouts < 2:
        raise ValueError("n_rollouts must be >= 2")
    x0.validate(gen.spec)
    s = _rollout_path_costs(gen, rec, ref, x0, T, rate, mode, n_rollouts, seed)
    neg = -s
    m = float(np.max(neg))
    if m == NEG_INF:
        raise DegenerateWeightsError("every rollout carries zero weight")
    w = np.exp(neg - m)
    mean_w = float(w.mean())
    estimate = -(m + np.log(mean_w))
    stderr = float(w.std(ddof=1) / (mean_w * np.sqrt(n_rollouts)))
    return float(estimate), stderr


def differential_free_energy(gen, rec, ref, x0, T, rate, n_rollouts=None,
                             seed=None, budget=None):
    """Jensen bound on the feedback path-integral value:
    E_{chain}[sum_t (step objective - rate)]. Exact by forward propagation,
    or Monte Carlo when n_rollouts is given."""
    spec = gen.spec
    x0.validate(spec)
    if n_rollouts is not None:
        if n_rollouts < 2:
            raise ValueError("n_rollouts must be >= 2")
        s = _rollout_path_costs(gen, rec, ref, x0, T, rate, "feedback",
                                n_rollouts, seed or 0)
        return float(s.mean())
    budget = oracle._budget(budget)
    oracle._check_states(spec, budget)
    per_tick = {}
    for tick in (True, False):
        prior = chains.latent_prior(gen, tick)
        belief = chains.belief_table(rec, tick)
        marg = chains.obs_action_marginal(gen, tick, prior=prior)
        cost = chains.edge_cost(gen, rec, ref, tick, prior=prior, belief=belief)
        qc = chains.qchain_matrix(gen, rec, tick, prior=prior, belief=belief)
        ev = chains.expected_edge_cost(marg, cost.total)
        per_tick[tick] = (qc, ev)
    mu = np.zeros(spec.n_states)
    mu[x0.flat(spec)] = 1.0
    total = 0.0
    for t in range(1, T + 1):
        qc, ev = per_tick[tick_at(t, spec)]
        total += float(mu @ ev) - rate
        mu = qc.T @ mu
    return total


# ---------------------------------------------------------------------------
# trainable parameters and exact gradients


@dataclass
class TrainableParams:
    """Free logits: all recognition factors plus the selected policies."""

    q_logits: dict
    pol_logits: dict

    def copy(self):
        return TrainableParams({k: np.array(v) for k, v in self.q_logits.items()},
                               {k: np.array(v) for k, v in self.pol_logits.items()})

    def step(self, grads, lr):
        return TrainableParams(
            {k: self.q_logits[k] - lr * grads.q_logits[k] for k in self.q_logits},
            {k: self.pol_logits[k] - lr * grads.pol_logits[k] for k in self.pol_logits})

    def norm(self):
        sq = sum(float(np.sum(np.square(v))) for v in self.q_logits.values())
        sq += sum(float(np.sum(np.square(v))) for v in self.pol_logits.values())
        return float(np.sqrt(sq))


_POL_PARENTS = {
    "pol0": lambda s: ((s.card_o, s.card_a1), s.card_a),
    "pol1": lambda s: ((s.card_s1, s.card_a2), s.card_a1),
    "pol2": lambda s: ((s.card_s2,), s.card_a2),
}


def extract_params(gen, rec, trainable_policies=("pol0", "pol1", "pol2")):
    """Pull free logits out of existing models (policy logits are the log
    tables, which the softmax reproduces exactly)."""
    q = {k: np.array(rec.logits[k]) for k in REC_FACTORS}
    pol = {name: safe_log(getattr(gen, name).probs)
           for name in trainable_policies}
    return TrainableParams(q, pol)


def apply_params(gen, params):
    """Rebuild (generative-with-policies, recognition) from logits."""
    spec = gen.spec
    new_pols = {}
    for name, logits in params.pol_logits.items():
        parents, child = _POL_PARENTS[name](spec)
        new_pols[name] = ConditionalTable.from_logits(parents, child, logits)
    gen2 = gen.replace_policies(**new_pols)
    rec2 = RecognitionModel(spec, params.q_logits)
    return gen2, rec2


def _safe_div(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    return np.where(den > 0.0, out, 0.0)


def _softmax_grad_rows(probs, g):
    g = np.where(probs > 0.0, g, 0.0)
    inner = np.sum(g * probs, axis=-1, keepdims=True)
    return probs * (g - inner)


class _GradAccumulator:
    """Per-tick buckets of upstream gradients (G_m, G_q, dC), turned into
    logit gradients once at the end."""

    def __init__(self, gen, rec, ref, trained_pols):
        self.gen, self.rec, self.ref = gen, rec, ref
        self.trained_pols = tuple(trained_pols)
        spec = gen.spec
        shape_noa = (spec.n_states, spec.card_o, spec.card_a)
        self.buckets = {
            tick: {"G_m": np.zeros(shape_noa),
                   "G_q": np.zeros(shape_noa + (spec.n_latents,)),
                   "dC": np.zeros(shape_noa)}
            for tick in (True, False)
        }

    def finalize(self, pieces):
        gen, rec, ref = self.gen, self.rec, self.ref
        spec = gen.spec
        s1c, s2c, a1c, a2c = spec.latent_dims
        n, c_o, c_a = spec.n_states, spec.card_o, spec.card_a
        lik_lat = chains.lik_over_latents(gen)
        pol0_lat = chains.pol0_over_latents(gen)
        a_lat = chains.reference_over_latents(ref) - safe_log(lik_lat)
        sent = rec.future_sentinel

        g_q_logits = {k: np.zeros_like(rec.logits[k]) for k in REC_FACTORS}
        g_pol_tables = {k: np.zeros_like(getattr(gen, k).probs)
                        for k in self.trained_pols}

        for tick in (True, False):
            b = self.buckets[tick]
            if not (b["G_m"].any() or b["G_q"].any() or b["dC"].any()):
                continue
            prior, q = pieces[tick]["prior"], pieces[tick]["belief"]
            log_q = np.where(q > 0.0, safe_log(q), 0.0)
            log_prior = np.where(prior > 0.0, safe_log(prior), 0.0)
            # C = sum_l q (a_lat + log q - log prior); at q = 0 the cost's
            # one-sided derivative is taken as 0 (softmax boundary)
            with np.errstate(invalid="ignore"):
                g_q = b["G_q"] + np.where(
                    q > 0.0,
                    b["dC"][..., None] * (a_lat.T[None, :, None, :] + log_q
                                          + 1.0 - log_prior[:, None, None, :]),
                    0.0)
            ratio = _safe_div(q, prior[:, None, None, :])
            g_prior = (np.einsum("xoa,lo,loa->xl", b["G_m"], lik_lat, pol0_lat,
                                 optimize=True)
                       - np.einsum("xoa,xoal->xl", b["dC"], ratio, optimize=True))
            # recognition factors via the product-ratio trick
            rq = (g_q * q).reshape(n, c_o, c_a, s1c, s2c, a1c, a2c)
            if tick:
                g = _safe_div(rq.sum(axis=(3, 5, 6)),
                              rec.tables["s2"][:, :, :, sent])
                g_q_logits["s2"][:, :, :, sent] += g
            g = _safe_div(rq.sum(axis=(3, 5)), rec.tables["a2"][:, :, :, sent])
            g_q_logits["a2"][:, :, :, sent] += g
            g = _safe_div(rq.sum(axis=5).transpose(0, 1, 2, 4, 5, 3),
                          rec.tables["s1"][:, :, :, sent])
            g_q_logits["s1"][:, :, :, sent] += g
            g = _safe_div(rq.sum(axis=4).transpose(0, 1, 2, 3, 5, 4),
                          rec.tables["a1"][:, :, :, sent])
            g_q_logits["a1"][:, :, :, sent] += g
            # policy factors
            if "pol0" in g_pol_tables:
                g0 = np.einsum("xoa,xl,lo->loa", b["G_m"], prior, lik_lat,
                               optimize=True)
                g0 = g0.reshape(s1c, s2c, a1c, a2c, c_o, c_a).sum(axis=(0, 1, 3))
                g_pol_tables["pol0"] += g0.transpose(1, 0, 2).reshape(-1, c_a)
            r5 = (g_prior * prior).reshape(n, s1c, s2c, a1c, a2c)
            if "pol2" in g_pol_tables:
                g2 = _safe_div(r5.sum(axis=(0, 1, 3)), gen.pol2.reshaped())
                g_pol_tables["pol2"] += g2.reshape(-1, a2c)
            if "pol1" in g_pol_tables:
                g1 = _safe_div(r5.sum(axis=(0, 2)).transpose(0, 2, 1),
                               gen.pol1.reshaped())
                g_pol_tables["pol1"] += g1.reshape(-1, a1c)

        shapes = RecognitionModel.factor_shapes(spec)
        q_grads = {}
        for k in REC_FACTORS:
            child = shapes[k][-1]
            g = _softmax_grad_rows(rec.tables[k].reshape(-1, child),
                                   g_q_logits[k].reshape(-1, child))
            q_grads[k] = g.reshape(shapes[k])
        pol_grads = {k: _softmax_grad_rows(getattr(gen, k).probs, g_pol_tables[k])
                     for k in self.trained_pols}
        return TrainableParams(q_grads, pol_grads)


def _dfe_pieces(gen, rec, ref):
    pieces = {}
    for tick in (True, False):
        prior = chains.latent_prior(gen, tick)
        belief = chains.belief_table(rec, tick)
        marg = chains.obs_action_marginal(gen, tick, prior=prior)
        cost = chains.edge_cost(gen, rec, ref, tick, prior=prior, belief=belief)
        qc = chains.qchain_matrix(gen, rec, tick, prior=prior, belief=belief)
        pieces[tick] = {"prior": prior, "belief": belief, "marg": marg,
                        "cost": cost.total, "qc": qc,
                        "ev": chains.expected_edge_cost(marg, cost.total)}
    return pieces


def dfe_value_and_grad(gen, rec, ref, x0, T, rate,
                       trainable_policies=("pol0", "pol1", "pol2")):
    """Exact differential free energy and its gradient w.r.t. all trained
    logits, by forward propagation plus the adjoint recursion."""
    spec = gen.spec
    lat = chains.Lattice.of(spec)
    pieces = _dfe_pieces(gen, rec, ref)
    ticks = [tick_at(t, spec) for t in range(1, T + 1)]
    mus = [np.zeros(spec.n_states)]
    mus[0][x0.flat(spec)] = 1.0
    value = 0.0
    for t in range(T):
        pc = pieces[ticks[t]]
        value += float(mus[t] @ pc["ev"]) - rate
        mus.append(pc["qc"].T @ mus[t])
    lam = np.zeros(spec.n_states)
    acc = _GradAccumulator(gen, rec, ref, trainable_policies)
    for t in range(T - 1, -1, -1):
        pc = pieces[ticks[t]]
        bucket = acc.buckets[ticks[t]]
        lam_g = lam[lat.state_of_ola]                        # (o, L, a)
        c_tilde = pc["cost"] - rate
        # zero-probability edges may carry infinite cost; they contribute
        # nothing and their logits sit at the softmax boundary, so mask
        edge_p = pc["marg"][:, :, None, :] * pc["belief"].transpose(0, 1, 3, 2)
        with np.errstate(invalid="ignore"):
            dqc4 = np.where(edge_p > 0.0,
                            mus[t][:, None, None, None]
                            * (c_tilde[:, :, None, :] + lam_g[None]), 0.0)
        bucket["G_m"] += np.einsum("xola,xoal->xoa", dqc4, pc["belief"],
                                   optimize=True)
        bucket["G_q"] += dqc4.transpose(0, 1, 3, 2) * pc["marg"][..., None]
        bucket["dC"] += mus[t][:, None, None] * pc["marg"]
        lam = pc["ev"] - rate + pc["qc"] @ lam
    grads = acc.finalize(pieces)
    return value, grads


def score_function_grad(gen, rec, ref, x0, T, rate, n_rollouts, seed,
                        trainable_policies=("pol0", "pol1", "pol2")):
    """Monte Carlo gradient of the differential free energy: score-function
    term with cost-to-go (advantage) weights plus the direct cost term."""
    spec = gen.spec
    lat = chains.Lattice.of(spec)
    pieces = _dfe_pieces(gen, rec, ref)
    cums = {tick: np.cumsum(pieces[tick]["qc"], axis=1) for tick in (True, False)}
    rng = np.random.default_rng(seed)
    states = np.full(n_rollouts, x0.flat(spec), dtype=np.intp)
    path = [states]
    step_costs = []
    for t in range(1, T + 1):
        tick = tick_at(t, spec)
        r = rng.random(n_rollouts)
        rows = cums[tick][states]
        nxt = np.minimum((rows < r[:, None]).sum(axis=1), spec.n_states - 1)
        step_costs.append(
            pieces[tick]["cost"][states, lat.o[nxt], lat.a[nxt]] - rate)
        states = nxt
        path.append(states)
    step_costs = np.array(step_costs)                        # (T, n)
    togo = np.cumsum(step_costs[::-1], axis=0)[::-1]
    value = float(step_costs.sum(axis=0).mean())
    acc = _GradAccumulator(gen, rec, ref, trainable_policies)
    for t in range(T):
        tick = tick_at(t + 1, spec)
        pc, bucket = pieces[tick], acc.buckets[tick]
        xs, nxt = path[t], path[t + 1]
        oo, aa, ll = lat.o[nxt], lat.a[nxt], lat.lat_of_state[nxt]
        w = togo[t] / n_rollouts
        np.add.at(bucket["G_m"], (xs, oo, aa),
                  w / pc["marg"][xs, oo, aa])
        np.add.at(bucket["G_q"], (xs, oo, aa, ll),
                  w / pc["belief"][xs, oo, aa, ll])
        np.add.at(bucket["dC"], (xs, oo, aa), 1.0 / n_rollouts)
    grads = acc.finalize(pieces)
    return value, grads


def fd_gradients(gen, ref, params, x0, T, rate, step=1e-5, budget=None):
    """Central finite differences of the exact differential free energy over
    every logit in `params` (the independent check on the adjoint gradients)."""

    def objective(p):
        g2, r2 = apply_params(gen, p)
        return differential_free_energy(g2, r2, ref, x0, T, rate, budget=budget)

    out = TrainableParams({k: np.zeros_like(v) for k, v in params.q_logits.items()},
                          {k: np.zeros_like(v) for k, v in params.pol_logits.items()})
    for group_src, group_dst in ((params.q_logits, out.q_logits),
                                 (params.pol_logits, out.pol_logits)):
        for key, arr in group_src.items():
            flat = arr.reshape(-1)
            grad = group_dst[key].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = objective(params)
                flat[i] = orig - step
                lo = objective(params)
                flat[i] = orig
                grad[i] = (hi - lo) / (2.0 * step)
    return out


def gradient_relative_error(grads, fd, floor=1e-4):
    """Max over logits of |g - fd| / max(|g|, |fd|, floor)."""
    worst = 0.0
    for group, ref_group in ((grads.q_logits, fd.q_logits),
                             (grads.pol_logits, fd.pol_logits)):
        for key in group:
            g, f = group[key], ref_group[key]
            rel = np.abs(g - f) / np.maximum(np.maximum(np.abs(g), np.abs(f)), floor)
            worst = max(worst, float(rel.max(initial=0.0)))
    return worst


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    iterations: int
    objective_trace: list
    grad_norm_trace: list
    final_rate: float

    def to_dict(self):
        return {"iterations": self.iterations,
                "objective_trace": list(self.objective_trace),
                "grad_norm_trace": list(self.grad_norm_trace),
                "final_rate": self.final_rate}


def train(gen, rec, ref, x0, T, iters, lr=0.05, seed=0, rate_refresh=10,
          estimator="exact", n_rollouts=256,
          trainable_policies=("pol0", "pol1", "pol2"), halving=True,
          rate_chain="recognition", rate_horizon=(32, 16), budget=None):
    """Gradient descent on the differential free energy over the free logits.

    The rate input is re-estimated every `rate_refresh` iterations
    (block-coordinate; the rate shifts the objective but not its
    gradient). With `halving`, a step that increases the exact objective
    is retried at half the learning rate.
    """
    params = extract_params(gen, rec, trainable_policies)
    cur_gen, cur_rec = apply_params(gen, params)
    rate = oracle.exact_average_rate(cur_gen, cur_rec, ref, x0,
                                     rate_horizon[0], rate_horizon[1],
                                     chain=rate_chain, budget=budget)
    obj_trace, gnorm_trace = [], []
    step_lr = lr
    mc_seed = np.random.default_rng(seed)
    for it in range(iters):
        if estimator == "exact":
            value, grads = dfe_value_and_grad(cur_gen, cur_rec, ref, x0, T, rate,
                                              trainable_policies)
        elif estimator == "score":
            value, grads = score_function_grad(
                cur_gen, cur_rec, ref, x0, T, rate,
                n_rollouts, mc_seed.integers(2 ** 63), trainable_policies)
        else:
            raise ValueError(f"unknown estimator {estimator!r}")
        if not np.isfinite(value):
            raise NonFiniteObjectiveError(
                f"objective became non-finite at iteration {it}", iteration=it)
        gnorm = grads.norm()
        if not np.isfinite(gnorm):
            raise NonFiniteObjectiveError(
                f"gradient became non-finite at iteration {it}", iteration=it)
        obj_trace.append(value)
        gnorm_trace.append(gnorm)
        while True:
            cand = params.step(grads, step_lr)
            cand_gen, cand_rec = apply_params(gen, cand)
            if not halving or estimator != "exact":
                break
            cand_value = differential_free_energy(cand_gen, cand_rec, ref, x0,
                                                  T, rate, budget=budget)
            if cand_value <= value or step_lr < 1e-12:
                break
            step_lr *= 0.5
        params, cur_gen, cur_rec = cand, cand_gen, cand_rec
        if rate_refresh and (it + 1) % rate_refresh == 0:
            rate = oracle.exact_average_rate(cur_gen, cur_rec, ref, x0,
                                             rate_horizon[0], rate_horizon[1],
                                             chain=rate_chain, budget=budget)
    report = TrainReport(iterations=len(obj_trace), objective_trace=obj_trace,
                         grad_norm_trace=gnorm_trace, final_rate=rate)
    return report, cur_gen, cur_rec
