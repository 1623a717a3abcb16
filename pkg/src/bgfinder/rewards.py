"""Reward pipeline: misID and kinematic factors, log shaping and the relevance bonus."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .catalog import Catalog
from .decays import MAX_LOST, MAX_RESONANCES, DecayTree, best_alignment, chain_br, lost_count, neutrino_count

MISID_FACTOR = 0.01
MISS_FACTOR = 0.1


class SignalNotInCatalog(ValueError):
    pass


@dataclass(frozen=True)
class RewardParams:
    k: float = 1.0
    alpha: float = 0.5
    r_eps: float = 0.05
    truncation_penalty: float = -0.3

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.r_eps <= 0:
            raise ValueError("r_eps must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    br_b: float
    br_s: float
    n_misid: int
    n_miss: int
    n_nu_s: int
    m_factor: float
    k_factor: float
    raw: float
    r: float
    final_R: float
    relevant: bool

    def to_dict(self) -> dict:
        return asdict(self)


def shaped_r(raw: float, k: float = 1.0) -> float:
    return math.log1p(k * raw)


def step(x: float) -> float:
    return 1.0 if x >= 0 else 0.0


def final_R(r: float, p: RewardParams) -> float:
    return p.alpha * r + (1.0 - p.alpha) * step(r - p.r_eps)


def truncation_reward(p: RewardParams) -> float:
    return p.truncation_penalty


def breakdown(br_b: float, br_s: float, n_misid: int, n_miss: int, n_nu_s: int, p: RewardParams) -> RewardBreakdown:
    m = MISID_FACTOR ** n_misid
    kf = MISS_FACTOR ** abs(n_miss - n_nu_s)
    raw = br_b / br_s * m * kf
    r = shaped_r(raw, p.k)
    relevant = r >= p.r_eps
    return RewardBreakdown(br_b, br_s, n_misid, n_miss, n_nu_s, m, kf, raw, r, final_R(r, p) if raw > 0 else 0.0, relevant and raw > 0)


def invalid_breakdown(br_b: float, br_s: float, n_miss: int, n_nu_s: int) -> RewardBreakdown:
    return RewardBreakdown(br_b, br_s, 0, n_miss, n_nu_s, 0.0, 0.0, 0.0, 0.0, 0.0, False)


def signal_br(signal: DecayTree, c: Catalog) -> float:
    br_s = chain_br(signal, c)
    if br_s <= 0:
        raise SignalNotInCatalog("signal decay is not built from catalog channels")
    return br_s


def evaluate(tree: DecayTree, signal: DecayTree, c: Catalog, p: RewardParams, br_s: float | None = None) -> RewardBreakdown:
    """Score a candidate background against a signal using the minimal-misID alignment."""
    if br_s is None:
        br_s = signal_br(signal, c)
    n_nu_s = neutrino_count(signal, c)
    al = best_alignment(tree, signal, c)
    if not al.valid or al.br_b <= 0 or tree.n_resonances > MAX_RESONANCES or lost_count(tree) > MAX_LOST:
        return invalid_breakdown(al.br_b, br_s, al.n_miss, n_nu_s)
    return breakdown(al.br_b, br_s, al.n_misid, al.n_miss, n_nu_s, p)
