"""Single-player PUCT search with root Dirichlet noise, run in lockstep over many episodes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .environment import EnvState, Environment

# evaluator(states) -> (priors [n, n_actions], values [n]); priors need not be masked
Evaluator = Callable[[Sequence[EnvState]], tuple[np.ndarray, np.ndarray]]

ARGMAX_BELOW = 1e-3


@dataclass(frozen=True)
class SearchParams:
    simulations: int = 1000
    c_puct: float = 2.0
    dirichlet_alpha: float = 0.3
    dirichlet_weight: float = 0.25
    temperature: float = 1.25
    reuse_tree: bool = True

    def __post_init__(self):
        if self.simulations < 1:
            raise ValueError("simulations must be at least 1")
        if not 0.0 <= self.dirichlet_weight <= 1.0:
            raise ValueError("dirichlet_weight must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


class Node:
    """Search node; per-child statistics are stored in arrays indexed like ``acts``."""

    __slots__ = ("state", "acts", "P", "P0", "N", "W", "kids", "v")

    def __init__(self, state: EnvState):
        self.state = state
        self.acts: np.ndarray | None = None
        self.P = self.P0 = self.N = self.W = None
        self.kids: list[Node | None] = []
        self.v = 0.0

    @property
    def terminal(self) -> bool:
        return self.state.terminal

    @property
    def expanded(self) -> bool:
        return self.acts is not None

    def expand(self, legal: np.ndarray, priors: np.ndarray, value: float) -> None:
        acts = np.flatnonzero(legal)
        p = np.asarray(priors, dtype=np.float64)[acts]
        s = p.sum()
        p = p / s if s > 0 else np.full(len(acts), 1.0 / len(acts))
        self.acts, self.P, self.P0 = acts, p, p.copy()
        self.N = np.zeros(len(acts), dtype=np.int64)
        self.W = np.zeros(len(acts), dtype=np.float64)
        self.kids = [None] * len(acts)
        self.v = float(value)

    def select(self, c_puct: float) -> int:
        n = self.N
        q = np.divide(self.W, n, out=np.zeros_like(self.W), where=n > 0)
        u = c_puct * self.P * math.sqrt(1 + int(n.sum())) / (1 + n)
        return int(np.argmax(q + u))

    def child(self, env: Environment, i: int) -> "Node":
        kid = self.kids[i]
        if kid is None:
            kid = Node(env.step(self.state, int(self.acts[i])))
            self.kids[i] = kid
        return kid

    def visits(self, n_actions: int) -> np.ndarray:
        out = np.zeros(n_actions, dtype=np.float64)
        total = self.N.sum()
        if total > 0:
            out[self.acts] = self.N / total
        return out

    def child_for_action(self, a: int) -> "Node | None":
        if not self.expanded:
            return None
        hit = np.flatnonzero(self.acts == a)
        return self.kids[hit[0]] if len(hit) else None


def add_dirichlet(node: Node, alpha: float, weight: float, rng: np.random.Generator) -> None:
    if weight <= 0 or len(node.acts) < 2:
        node.P = node.P0.copy()
        return
    noise = rng.dirichlet(np.full(len(node.acts), alpha))
    node.P = (1 - weight) * node.P0 + weight * noise


def _expand(env: Environment, nodes: list[Node], evaluator: Evaluator) -> None:
    if not nodes:
        return
    priors, values = evaluator([n.state for n in nodes])
    for n, pr, v in zip(nodes, priors, values):
        n.expand(env.legal_actions(n.state), pr, v)


def search_many(
    env: Environment,
    roots: Sequence[Node],
    evaluator: Evaluator,
    params: SearchParams,
    rngs: Sequence[np.random.Generator],
    noise: bool = True,
) -> list[np.ndarray]:
    """Run ``params.simulations`` simulations on every root in lockstep; returns visit distributions.

    Leaves reached in the same simulation step are evaluated in one batch.
    """
    n_actions = env.vocab.n_actions
    _expand(env, [r for r in roots if not r.expanded and not r.terminal], evaluator)
    active = []
    for r, rng in zip(roots, rngs):
        if r.terminal:
            continue
        if noise:
            add_dirichlet(r, params.dirichlet_alpha, params.dirichlet_weight, rng)
        else:
            r.P = r.P0.copy()
        if len(r.acts) > 1:
            active.append(r)
        elif r.N.sum() == 0:
            r.N[0] = params.simulations  # a forced move needs no search

    for _ in range(params.simulations if active else 0):
        paths = []
        for r in active:
            node, path = r, []
            while node.expanded and not node.terminal:
                i = node.select(params.c_puct)
                path.append((node, i))
                node = node.child(env, i)
            paths.append((path, node))
        _expand(env, [leaf for _, leaf in paths if not leaf.terminal and not leaf.expanded], evaluator)
        for path, leaf in paths:
            v = leaf.state.value if leaf.terminal else leaf.v
            for node, i in path:
                node.N[i] += 1
                node.W[i] += v

    return [r.visits(n_actions) if not r.terminal else np.zeros(n_actions) for r in roots]


def search(env: Environment, root: EnvState | Node, evaluator: Evaluator, params: SearchParams, rng: np.random.Generator, noise: bool = True) -> np.ndarray:
    node = root if isinstance(root, Node) else Node(root)
    return search_many(env, [node], evaluator, params, [rng], noise)[0]


def temperature_scale(p: np.ndarray, temperature: float) -> np.ndarray:
    """q_i = p_i^(1/T) / sum_j p_j^(1/T); exact identity at T = 1, argmax one-hot below 1e-3."""
    p = np.asarray(p, dtype=np.float64)
    if temperature == 1.0:
        return p.copy()
    if temperature < ARGMAX_BELOW:
        q = np.zeros_like(p)
        q[int(np.argmax(p))] = 1.0
        return q
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf) / temperature
    logp -= logp.max()
    q = np.exp(logp)
    return q / q.sum()


def sample_action(visits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature < ARGMAX_BELOW:
        return int(np.argmax(visits))
    q = temperature_scale(visits, temperature)
    return int(rng.choice(len(q), p=q / q.sum()))


def uniform_evaluator(env: Environment, value: float = 0.0) -> Evaluator:
    """Priors uniform over legal actions and a constant value; handy for tests and baselines."""

    def ev(states):
        pri = np.stack([env.legal_actions(s).astype(np.float64) for s in states])
        pri /= np.maximum(pri.sum(axis=1, keepdims=True), 1)
        return pri, np.full(len(states), value)

    return ev
