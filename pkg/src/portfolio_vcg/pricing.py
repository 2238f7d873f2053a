"""Generalized VCG charges for portfolio allocations.

Each offer pays the harm its participation causes the others: the optimum
of the market with the offer pinned to zero, minus everyone else's value
at the chosen allocation.  A synthetic risk-aversion participant makes the
outcome selection equal portfolio optimization; its "charge" is the
expected revenue the publisher forgoes by not being risk-neutral.  That
charge is bookkeeping: nobody pays it, and publisher revenue is the sum of
the offer prices alone.

Offer prices can be negative: an offer whose covariance strongly reduces
portfolio variance is rewarded, never so much that any participant's
payoff turns negative.

All of the pinned subproblems are independent pure computations; they are
evaluated with identical solver configuration and tie-breaking, so the
schedule is deterministic regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import qp
from .allocation import (
    Allocation,
    QmapInstance,
    allocate,
    apportion,
    market_problem,
    qmap_allocate,
    qmap_problem,
    validate_qmap,
)
from .market import PER_RESPONSE, MarketInstance
from .qp import DEFAULT_CONFIG, SolverConfig


class QmapPricingError(ValueError):
    """Pricing is undefined for the given call-count instance."""


@dataclass(frozen=True)
class PriceSchedule:
    """VCG prices for one market, plus audit and conversion columns.

    ``offer_prices[i]`` is the per-allocation charge for offer i and
    ``risk_charge`` the (reported, unbilled) charge to the risk-aversion
    participant; it is None for call-count schedules, which define no such
    charge.  ``per_ad_call`` divides each price by the offer's ad-call
    volume and is NaN where the rounded allocation is below one call;
    ``per_response`` further divides by the response rate and is NaN for
    offers that do not pay per response.  ``restricted_objectives[i]`` is
    the optimum with offer i removed, retained for audit.
    """

    offer_prices: np.ndarray
    risk_charge: Optional[float]
    publisher_revenue: float
    per_ad_call: np.ndarray
    per_response: np.ndarray
    restricted_objectives: np.ndarray
    allocation: Allocation

    def __post_init__(self):
        for name in ("offer_prices", "per_ad_call", "per_response",
                     "restricted_objectives"):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def restricted_objective(market: MarketInstance, i: int,
                         config: SolverConfig = DEFAULT_CONFIG,
                         warm_start: Optional[np.ndarray] = None) -> float:
    """Optimum of the market with offer i pinned to zero.

    This is the pivot term in every offer's price; it depends only on the
    other participants' valuations.
    """
    problem = market_problem(market, zero_set=frozenset({int(i)}))
    return qp.solve(problem, config, warm_start=warm_start).objective_value


def price_offer(market: MarketInstance, alloc: Allocation, i: int,
                config: SolverConfig = DEFAULT_CONFIG) -> float:
    """VCG charge for offer i: pinned optimum minus the others' value.

    The others' value at the chosen allocation is the full objective minus
    offer i's own slice w_i * mu_i.  Requires ``alloc = allocate(market)``.
    """
    i = int(i)
    if not 0 <= i < market.n:
        raise IndexError(f"offer index {i} out of range for {market.n} offers")
    pinned = restricted_objective(market, i, config, warm_start=alloc.weights)
    others_at_optimum = alloc.objective_value - float(alloc.weights[i] * market.mu[i])
    return pinned - others_at_optimum


def price_risk_participant(market: MarketInstance, alloc: Allocation,
                           config: SolverConfig = DEFAULT_CONFIG) -> float:
    """Expected revenue the publisher forgoes due to risk aversion.

    Removing the risk participant makes the objective linear, so the
    risk-neutral optimum is the best vertex (or the capped greedy fill);
    the charge is that optimum minus the expected revenue of the actual
    allocation.  Always nonnegative.
    """
    if market.caps is None:
        risk_neutral = float(np.max(market.mu))
    else:
        linear = qp.QpProblem(linear=market.mu, quadratic=np.zeros_like(market.sigma),
                              risk=0.0, mass=1.0, caps=market.caps)
        risk_neutral = qp.solve(linear, config).objective_value
    return risk_neutral - float(alloc.weights @ market.mu)


def price_schedule(market: MarketInstance,
                   config: SolverConfig = DEFAULT_CONFIG) -> PriceSchedule:
    """Allocate once, run the n pinned solves, and assemble all charges."""
    if market.mu is None:
        raise ValueError("market must be validated before pricing")
    alloc = allocate(market, config)
    n = market.n

    prices = np.empty(n)
    pinned = np.empty(n)
    for i in range(n):
        pinned[i] = restricted_objective(market, i, config, warm_start=alloc.weights)
        others = alloc.objective_value - float(alloc.weights[i] * market.mu[i])
        prices[i] = pinned[i] - others

    per_ad_call = np.full(n, np.nan)
    per_response = np.full(n, np.nan)
    for i, offer in enumerate(market.offers):
        if alloc.call_counts[i] < 1:
            continue  # a price per call is meaningless without a call
        per_ad_call[i] = prices[i] / (alloc.weights[i] * market.pool_size)
        if offer.basis == PER_RESPONSE and offer.response_rate > 0.0:
            per_response[i] = per_ad_call[i] / offer.response_rate

    return PriceSchedule(
        offer_prices=prices,
        risk_charge=price_risk_participant(market, alloc, config),
        publisher_revenue=float(prices.sum()),
        per_ad_call=per_ad_call,
        per_response=per_response,
        restricted_objectives=pinned,
        allocation=alloc,
    )


def qmap_prices(instance: QmapInstance,
                config: SolverConfig = DEFAULT_CONFIG) -> PriceSchedule:
    """VCG offer prices for the max-form call-count program.

    p_i = [optimum with k_i = 0] - [c'k* - q(k*'Ak* + b'k*) - c_i k*_i].
    No risk-participant charge is defined for this formulation, so
    ``risk_charge`` is None.  Per-call conversions divide by the call
    counts themselves; response rates are unknown here, so the
    per-response column is entirely NaN.
    """
    validate_qmap(instance)
    n = instance.n
    if n < 2:
        raise QmapPricingError(
            f"pricing requires at least 2 offers, got {n}: removing the "
            "only offer empties the market"
        )
    alloc = qmap_allocate(instance, config)

    prices = np.empty(n)
    pinned = np.empty(n)
    for i in range(n):
        problem = qmap_problem(instance, zero_set=frozenset({i}))
        pinned[i] = qp.solve(problem, config,
                             warm_start=alloc.weights).objective_value
        others = alloc.objective_value - float(alloc.weights[i] * instance.c_vector[i])
        prices[i] = pinned[i] - others

    per_ad_call = np.full(n, np.nan)
    counts = apportion(alloc.weights, instance.m)
    positive = counts >= 1
    per_ad_call[positive] = prices[positive] / alloc.weights[positive]

    return PriceSchedule(
        offer_prices=prices,
        risk_charge=None,
        publisher_revenue=float(prices.sum()),
        per_ad_call=per_ad_call,
        per_response=np.full(n, np.nan),
        restricted_objectives=pinned,
        allocation=alloc,
    )
