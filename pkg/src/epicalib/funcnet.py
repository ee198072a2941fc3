"""Function-network organization of per-compartment, per-time surrogates.

The network is a DAG over {x, y_S..y_R, g}: x feeds every compartment
node, compartment edges mirror the population flows (S -> I -> Q, with R
fed by I and Q), and metric edges mark which compartments the objective
reads. Surrogates come in two modes: ``composite`` ignores compartment
edges (every node sees x alone) while ``full`` appends each node's
parent values, at the same time index, to its input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError
from .gp import (
    DEGENERATE_SPAN,
    JITTER_REL_MIN,
    SIGNAL_SD_BOUNDS,
    KernelHyperparams,
    SurrogateNode,
    Transform,
    fit_pooled,
)
from .metrics import ObservationSet
from .ode import COMPARTMENTS, TimeGrid, Trajectory

COMPOSITE = "composite"
FULL = "full"


@dataclass(frozen=True)
class FunctionNetwork:
    """DAG over calibration input, compartment outputs, and the metric."""

    parent_map: dict[str, tuple[str, ...]]
    metric_edges: tuple[str, ...]

    def __post_init__(self):
        for c, parents in self.parent_map.items():
            if c not in COMPARTMENTS:
                raise ValueError(f"unknown compartment {c!r}")
            for p in parents:
                if p not in self.parent_map:
                    raise ValueError(f"parent {p!r} of {c!r} is not a node")
        if not set(self.metric_edges) <= set(self.parent_map):
            raise ValueError("metric edges must point from known compartments")
        self.topological_order()  # raises on cycles

    @classmethod
    def siqr(cls) -> "FunctionNetwork":
        """Default SIQR topology with all four metric edges present."""
        return cls(
            parent_map={"S": (), "I": ("S",), "Q": ("I",), "R": ("I", "Q")},
            metric_edges=("S", "I", "Q", "R"),
        )

    def topological_order(self) -> list[str]:
        order, seen, active = [], set(), set()

        def visit(c):
            if c in seen:
                return
            if c in active:
                raise ValueError("network contains a cycle")
            active.add(c)
            for p in self.parent_map[c]:
                visit(p)
            active.discard(c)
            seen.add(c)
            order.append(c)

        for c in COMPARTMENTS:
            if c in self.parent_map:
                visit(c)
        return order

    def ancestors(self, c: str) -> set[str]:
        out = set()
        stack = list(self.parent_map[c])
        while stack:
            p = stack.pop()
            if p not in out:
                out.add(p)
                stack.extend(self.parent_map[p])
        return out

    def metric_ancestors(self) -> set[str]:
        """All compartments with a directed path into the metric node."""
        out = set()
        for c in self.metric_edges:
            out.add(c)
            out |= self.ancestors(c)
        return out

    def to_json(self) -> str:
        nodes = ["x"] + [f"y_{c}" for c in self.parent_map] + ["g"]
        edges = [["x", f"y_{c}"] for c in self.parent_map]
        edges += [[f"y_{p}", f"y_{c}"] for c, ps in self.parent_map.items() for p in ps]
        edges += [[f"y_{c}", "g"] for c in self.metric_edges]
        return json.dumps({"nodes": nodes, "edges": edges}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FunctionNetwork":
        doc = json.loads(text)
        comps = [n[2:] for n in doc["nodes"] if n.startswith("y_")]
        parent_map = {c: [] for c in comps}
        metric = []
        for src, dst in doc["edges"]:
            if src == "x":
                continue
            if dst == "g":
                metric.append(src[2:])
            else:
                parent_map[dst[2:]].append(src[2:])
        return cls(
            parent_map={c: tuple(ps) for c, ps in parent_map.items()},
            metric_edges=tuple(metric),
        )


def prune_metric_edges(network: FunctionNetwork, obs_mask) -> FunctionNetwork:
    """Keep metric edges only for observed compartments.

    Compartment edges are untouched, so an unobserved compartment stays
    an ancestor of the metric whenever a descendant still feeds it.
    """
    obs_mask = np.asarray(obs_mask, dtype=bool)
    if obs_mask.shape != (4,):
        raise ValueError("observation mask must cover all four compartments")
    kept = tuple(c for c in network.metric_edges if obs_mask[COMPARTMENTS.index(c)])
    if not kept:
        raise EmptyMaskError("no compartment observed")
    pruned = FunctionNetwork(parent_map=network.parent_map, metric_edges=kept)
    for c in network.metric_edges:
        has_feeding_descendant = any(
            c == k or c in pruned.ancestors(k) for k in kept if k != c
        )
        if has_feeding_descendant:
            assert c in pruned.metric_ancestors()
    return pruned


class NetworkSurrogate:
    """Per-(compartment, time) GP nodes organized by a function network."""

    def __init__(self, network, mode, grid, time_indices, x_dim, compartments, nodes, parents):
        self.network = network
        self.mode = mode
        self.grid = grid
        self.time_indices = np.asarray(time_indices, dtype=int)
        self.x_dim = x_dim
        self.compartments = list(compartments)  # modeled, topologically ordered
        self.nodes = nodes  # {compartment: [SurrogateNode per time index]}
        self.parents = parents  # {compartment: tuple of modeled parent names}

    @property
    def n_times(self) -> int:
        return self.time_indices.size

    def hyper_of(self, c: str) -> KernelHyperparams:
        return self.nodes[c][0].hyperparams

    def comp_index(self, c: str) -> int:
        return COMPARTMENTS.index(c)


def fit_network(
    history,
    network: FunctionNetwork,
    mode: str = COMPOSITE,
    *,
    time_indices=None,
    restarts: int = 8,
    seed: int = 0,
) -> NetworkSurrogate:
    """Fit all surrogate nodes with pooled per-compartment hyperparameters.

    ``history`` is a list of (x, Trajectory) pairs. In ``full`` mode each
    node's training inputs append its parents' simulated values at the
    same time index; ``composite`` nodes see x alone.
    """
    if len(history) < 2:
        raise ValueError("need at least 2 history entries")
    if mode not in (COMPOSITE, FULL):
        raise ValueError(f"unknown mode {mode!r}")
    grid = history[0][1].grid
    if any(traj.grid != grid for _, traj in history):
        raise ValueError("history trajectories share one grid")
    if time_indices is None:
        time_indices = np.arange(grid.n_observations)
    time_indices = np.asarray(time_indices, dtype=int)

    xs = np.atleast_2d(np.array([np.asarray(x, dtype=float) for x, _ in history]))
    x_dim = xs.shape[1]
    # states stacked as (n_history, n_times, 4), restricted to modeled times
    states = np.stack([traj.states[time_indices] for _, traj in history])

    if mode == COMPOSITE:
        modeled = [c for c in network.topological_order() if c in network.metric_edges]
        parents = {c: () for c in modeled}
    else:
        keep = network.metric_ancestors()
        modeled = [c for c in network.topological_order() if c in keep]
        parents = {c: tuple(p for p in network.parent_map[c] if p in keep) for c in modeled}

    nodes = {}
    root = np.random.SeedSequence([seed, 0x5EED])
    comp_seeds = root.generate_state(len(modeled))
    for c, comp_seed in zip(modeled, comp_seeds):
        ci = COMPARTMENTS.index(c)
        targets = states[:, :, ci]  # (n, T)
        if parents[c]:
            pidx = [COMPARTMENTS.index(p) for p in parents[c]]
            inputs_t = [
                np.hstack([xs, states[:, ti, pidx]]) for ti in range(time_indices.size)
            ]
        else:
            inputs_t = [xs] * time_indices.size
        pooled_X = np.vstack(inputs_t)
        pooled_y = targets.T.ravel()
        tf = Transform.from_data(pooled_X, pooled_y)
        col_span = targets.max(axis=0) - targets.min(axis=0)
        if col_span.max() < DEGENERATE_SPAN:
            # Every node's targets are constant: flag the whole compartment
            # and pin each node's mean at its own constant so the posterior
            # mean is that constant everywhere.
            var = SIGNAL_SD_BOUNDS[0] ** 2
            din = inputs_t[0].shape[1]
            nodes[c] = [
                SurrogateNode(
                    inputs_t[ti],
                    targets[:, ti],
                    tf,
                    KernelHyperparams(
                        lengthscales=np.ones(din),
                        signal_variance=var,
                        mean_const=float(tf.y_to_norm(targets[0, ti])),
                        noise_jitter=JITTER_REL_MIN * var,
                        degenerate=True,
                    ),
                )
                for ti in range(time_indices.size)
            ]
            continue
        if parents[c]:
            blocks = [
                (tf.x_to_norm(inputs_t[ti]), tf.y_to_norm(targets[:, ti])[:, None])
                for ti in range(time_indices.size)
            ]
        else:
            blocks = [(tf.x_to_norm(xs), tf.y_to_norm(targets))]
        hyper = fit_pooled(blocks, restarts=restarts, seed=int(comp_seed))
        nodes[c] = [
            SurrogateNode(inputs_t[ti], targets[:, ti], tf, hyper)
            for ti in range(time_indices.size)
        ]
    return NetworkSurrogate(network, mode, grid, time_indices, x_dim, modeled, nodes, parents)


def sample_network(surrogate: NetworkSurrogate, x, epsilon_block, order=None) -> np.ndarray:
    """One reparametrized draw of all modeled node outputs.

    ``epsilon_block`` has shape (4, n_times); rows of unmodeled
    compartments are ignored. Returns a (4, n_times) array with NaN at
    unmodeled compartments.
    """
    batch = sample_network_batch(surrogate, x, np.asarray(epsilon_block)[None], order=order)
    return batch[0]


def sample_network_batch(surrogate: NetworkSurrogate, x, eps, order=None) -> np.ndarray:
    """Vectorized sample_network over a leading batch of epsilon blocks."""
    eps = np.asarray(eps, dtype=float)
    L = eps.shape[0]
    T = surrogate.n_times
    x = np.asarray(x, dtype=float)
    vals = np.full((L, 4, T), np.nan)
    order = list(surrogate.compartments) if order is None else list(order)
    if sorted(order) != sorted(surrogate.compartments):
        raise ValueError("order must enumerate the modeled compartments")
    for c in order:
        ci = surrogate.comp_index(c)
        pidx = [surrogate.comp_index(p) for p in surrogate.parents[c]]
        if pidx and np.isnan(vals[:, pidx, :]).any():
            raise ValueError("order visits a node before its parents")
        for ti in range(T):
            node = surrogate.nodes[c][ti]
            if pidx:
                Q = np.hstack([np.tile(x, (L, 1)), vals[:, pidx, ti]])
                m, v = node.posterior_batch(Q)
            else:
                m1, v1 = node.posterior(x)
                m = np.full(L, m1)
                v = np.full(L, v1)
            vals[:, ci, ti] = m + np.sqrt(v) * eps[:, ci, ti]
    return vals


def metric_of_samples(values, obs: ObservationSet, time_indices) -> np.ndarray:
    """Objective applied to sampled node outputs, batched over axis 0.

    ``values`` is (..., 4, n_times) in data units, aligned with
    ``time_indices`` rows of the observation grid.
    """
    time_indices = np.asarray(time_indices, dtype=int)
    rows = obs.observed_rows
    t_count = int(rows.sum())
    total = np.zeros(values.shape[:-2])
    for ti, t in enumerate(time_indices):
        if not rows[t]:
            continue
        mask = obs.mask[t]
        d = obs.values[t, mask]
        y = values[..., mask, ti]
        total += -np.sum((y - d) ** 2, axis=-1) / t_count
    return total


def expected_metric(surrogate: NetworkSurrogate, obs: ObservationSet, x, epsilon_blocks) -> float:
    """Monte-Carlo expected objective at x: mean of g over sampled networks."""
    _check_alignment(surrogate, obs)
    eps = np.asarray(epsilon_blocks, dtype=float)
    vals = sample_network_batch(surrogate, x, eps)
    return float(metric_of_samples(vals, obs, surrogate.time_indices).mean())


def _check_alignment(surrogate: NetworkSurrogate, obs: ObservationSet):
    if obs.grid != surrogate.grid:
        raise ValueError("observation grid differs from the surrogate grid")
    observed = np.flatnonzero(obs.observed_rows)
    if not set(observed) <= set(surrogate.time_indices.tolist()):
        raise ValueError("surrogate does not model every observed time point")
    for t in observed:
        for ci, c in enumerate(COMPARTMENTS):
            if obs.mask[t, ci] and c not in surrogate.compartments:
                raise ValueError(f"observed compartment {c} is not modeled")
