"""Auction input model: offers, covariance, risk parameter, pool size.

An offer's expected value is its bid for pay-per-ad-call offers and
bid * response_rate for pay-per-response offers; in the portfolio
formulation this is the expected total revenue if the offer received the
entire pool (callers holding per-call values multiply by the pool size
before building the market).  Validation rejects rather than repairs:
a covariance matrix that fails the PSD check is returned to the caller,
because silently clipping eigenvalues would change prices.

All types are immutable after validation and safe to share across
concurrent tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .qp import min_eigenvalue, psd_slack

PER_AD_CALL = "per_ad_call"
PER_RESPONSE = "per_response"

SYM_TOL = 1e-10   # absolute; covariance estimates round-trip through text files
PSD_TOL = 1e-8    # relative to the largest diagonal entry


class MarketValidationError(ValueError):
    """A market violates its invariants.

    ``diagnostics`` holds one (code, message) pair per violated invariant
    so a caller can report every problem at once.
    """

    def __init__(self, diagnostics: Sequence[tuple[str, str]]):
        self.diagnostics = [tuple(d) for d in diagnostics]
        detail = "; ".join(f"{code}: {message}" for code, message in self.diagnostics)
        super().__init__(f"invalid market: {detail}")


@dataclass(frozen=True)
class Offer:
    """One advertiser's bid: money per payment event, plus payment basis.

    ``response_rate`` is required for per-response offers and fixed at 1
    for per-ad-call offers (passing it explicitly as 1.0 is accepted).
    """

    id: str
    bid: float
    basis: str = PER_AD_CALL
    response_rate: Optional[float] = None


@dataclass(frozen=True)
class MarketInstance:
    """The full auction input: offers, covariance, risk parameter, pool.

    ``mu`` is derived by ``validate_market``; a freshly constructed raw
    instance carries ``mu=None``.  ``caps`` optionally bounds each offer's
    fraction of the pool (extra linear constraints on the feasible set).
    """

    offers: tuple
    sigma: np.ndarray
    q: float
    pool_size: int
    caps: Optional[np.ndarray] = None
    mu: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "offers", tuple(self.offers))
        object.__setattr__(self, "sigma", _as_array(self.sigma))
        if self.caps is not None:
            object.__setattr__(self, "caps", _as_array(self.caps))
        if self.mu is not None:
            object.__setattr__(self, "mu", _as_array(self.mu))

    @property
    def n(self) -> int:
        return len(self.offers)


def _as_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def offer_problems(offer: Offer) -> list:
    """Diagnostics for a single offer; empty when the offer is valid."""
    problems = []
    prefix = f"offer {offer.id!r}"
    if offer.basis not in (PER_AD_CALL, PER_RESPONSE):
        problems.append(("unknown_basis",
                         f"{prefix}: basis must be {PER_AD_CALL!r} or "
                         f"{PER_RESPONSE!r}, got {offer.basis!r}"))
    if not np.isfinite(offer.bid) or offer.bid < 0:
        problems.append(("negative_bid",
                         f"{prefix}: bid must be finite and >= 0, got {offer.bid}"))
    rate = offer.response_rate
    if offer.basis == PER_RESPONSE:
        if rate is None:
            problems.append(("missing_response_rate",
                             f"{prefix}: per-response offers require a response_rate"))
        elif not np.isfinite(rate) or not 0.0 <= rate <= 1.0:
            problems.append(("response_rate_out_of_range",
                             f"{prefix}: response_rate must be in [0, 1], got {rate}"))
    elif rate is not None and rate != 1.0:
        problems.append(("response_rate_conflicts_with_basis",
                         f"{prefix}: per-ad-call offers have response_rate fixed "
                         f"at 1, got {rate}"))
    return problems


def expected_value(offer: Offer) -> float:
    """Expected revenue of the offer: bid times response rate.

    The rate is the stated one for per-response offers and 1 for
    per-ad-call offers.  Raises MarketValidationError for invalid offers,
    in particular a per-response offer missing its response_rate.
    """
    problems = offer_problems(offer)
    if problems:
        raise MarketValidationError(problems)
    if offer.basis == PER_RESPONSE:
        return float(offer.bid) * float(offer.response_rate)
    return float(offer.bid)


def validate_market(raw: MarketInstance) -> MarketInstance:
    """Check every market invariant and derive the expected-value vector.

    Returns a new instance with ``mu`` populated, or raises
    MarketValidationError carrying one named diagnostic per violated
    invariant (dimension mismatch, asymmetry, PSD failure, n < 2, q < 0,
    bad pool size, per-offer problems, infeasible caps).
    """
    problems = []
    n = raw.n
    if n < 2:
        problems.append(("too_few_offers",
                         f"pricing requires at least 2 offers, got {n}"))

    mu = np.zeros(n)
    seen_ids = set()
    for i, offer in enumerate(raw.offers):
        if offer.id in seen_ids:
            problems.append(("duplicate_offer_id",
                             f"offer id {offer.id!r} appears more than once"))
        seen_ids.add(offer.id)
        offer_issues = offer_problems(offer)
        problems.extend(offer_issues)
        if not offer_issues:
            mu[i] = expected_value(offer)

    sigma = raw.sigma
    if sigma.ndim != 2 or sigma.shape != (n, n):
        problems.append(("dimension_mismatch",
                         f"covariance shape {sigma.shape} does not match "
                         f"{n} offers"))
    elif not np.all(np.isfinite(sigma)):
        problems.append(("non_finite_covariance",
                         "covariance entries must be finite"))
    else:
        gap = np.abs(sigma - sigma.T)
        worst = np.unravel_index(int(np.argmax(gap)), gap.shape)
        if gap[worst] > SYM_TOL:
            i, j = worst
            problems.append(("asymmetric_covariance",
                             f"sigma[{i}][{j}]={float(sigma[i, j])!r} vs "
                             f"sigma[{j}][{i}]={float(sigma[j, i])!r} "
                             f"(gap {gap[worst]:.3e} > {SYM_TOL:.0e})"))
        lo = min_eigenvalue(sigma)
        if lo < -psd_slack(sigma):
            problems.append(("not_positive_semidefinite",
                             f"covariance has min eigenvalue {lo:.6g}; "
                             "input is rejected, not repaired"))

    if not np.isfinite(raw.q) or raw.q < 0:
        problems.append(("negative_risk_parameter",
                         f"risk parameter q must be >= 0, got {raw.q}"))
    if not isinstance(raw.pool_size, (int, np.integer)) or raw.pool_size <= 0:
        problems.append(("invalid_pool_size",
                         f"pool_size must be a positive integer, "
                         f"got {raw.pool_size!r}"))
    if raw.caps is not None:
        caps = raw.caps
        if caps.shape != (n,):
            problems.append(("caps_dimension_mismatch",
                             f"caps shape {caps.shape} does not match {n} offers"))
        elif np.any(caps < 0) or not np.all(np.isfinite(caps)):
            problems.append(("invalid_caps",
                             "caps must be finite and nonnegative"))
        elif float(caps.sum()) < 1.0 - 1e-12:
            problems.append(("infeasible_caps",
                             f"caps sum to {float(caps.sum()):.6g} < 1; "
                             "no feasible allocation"))

    if problems:
        raise MarketValidationError(problems)
    return replace(raw, mu=mu)


def make_market(offers: Sequence[Offer], sigma, q: float, pool_size: int,
                caps=None) -> MarketInstance:
    """Build and validate a market in one step."""
    return validate_market(MarketInstance(
        offers=tuple(offers),
        sigma=np.asarray(sigma, dtype=float),
        q=float(q),
        pool_size=pool_size,
        caps=None if caps is None else np.asarray(caps, dtype=float),
    ))


def market_from_mu(mu, sigma, q: float, pool_size: int = 1000,
                   caps=None) -> MarketInstance:
    """Market whose expected values equal ``mu``, via per-ad-call offers."""
    offers = [Offer(id=f"offer_{i}", bid=float(v)) for i, v in enumerate(mu)]
    return make_market(offers, sigma, q, pool_size, caps=caps)
