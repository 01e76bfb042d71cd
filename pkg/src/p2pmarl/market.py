"""Supply-demand-ratio (SDR) clearing of a peer-to-peer energy round.

Bids are signed kWh: positive sells, negative buys. A zero bid counts as a
sell of nothing. Money is in cents; nothing is rounded here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence


class MarketSuspended(Exception):
    """Raised when a round has no buyers, so the SDR is undefined."""


@dataclass(frozen=True)
class Bid:
    agent_id: int
    quantity: float


@dataclass(frozen=True)
class Tariffs:
    fit: float = 5.0
    ur: float = 14.0

    def __post_init__(self):
        if not self.fit < self.ur:
            raise ValueError(f"feed-in tariff ({self.fit}) must be below the utility rate ({self.ur})")


@dataclass
class ClearingResult:
    sdr: float
    price: float
    rewards: dict[int, float] = field(default_factory=dict)
    total_buy: float = 0.0
    total_sell: float = 0.0
    suspended: bool = False


def _totals(bids: Iterable[Bid]) -> tuple[float, float]:
    sell = 0.0
    buy = 0.0
    for b in bids:
        if b.quantity >= 0:
            sell += b.quantity
        else:
            buy -= b.quantity
    return sell, buy


def compute_sdr(bids: Sequence[Bid]) -> float:
    sell, buy = _totals(bids)
    if buy == 0:
        raise MarketSuspended("no buy bids in this round")
    return sell / buy


def clearing_price(sdr: float, tariffs: Tariffs) -> float:
    """Piecewise-linear price: UR at SDR 0 falling to FIT at SDR 1, flat after."""
    if sdr < 0:
        raise ValueError(f"negative supply-demand ratio {sdr}")
    if sdr > 1:
        return tariffs.fit
    return (tariffs.fit - tariffs.ur) * sdr + tariffs.ur


def settle(bids: Sequence[Bid], tariffs: Tariffs) -> ClearingResult:
    """Clear one round and return each agent's market reward in cents.

    Raises ``MarketSuspended`` when nobody bids to buy; see
    ``settle_suspended`` for how such a round is paid out.
    """
    sdr = compute_sdr(bids)
    sell, buy = _totals(bids)
    price = clearing_price(sdr, tariffs)
    rewards = {}
    for b in bids:
        q = b.quantity
        if sdr > 1:
            rewards[b.agent_id] = tariffs.fit * q
        elif q < 0:
            rewards[b.agent_id] = sdr * price * q + (1.0 - sdr) * tariffs.ur * q
        else:
            rewards[b.agent_id] = price * q
    return ClearingResult(sdr, price, rewards, buy, sell)


def settle_suspended(bids: Sequence[Bid], tariffs: Tariffs) -> ClearingResult:
    """All sell quantities go to the utility at FIT.

    The reported price is FIT when energy was offered and UR when every bid
    is zero (nothing traded; any consumption is served by the utility).
    """
    sell, buy = _totals(bids)
    rewards = {b.agent_id: tariffs.fit * b.quantity for b in bids}
    price = tariffs.fit if sell > 0 else tariffs.ur
    return ClearingResult(0.0, price, rewards, buy, sell, suspended=True)


def settle_no_p2p(bids: Sequence[Bid], tariffs: Tariffs) -> ClearingResult:
    """Baseline without a peer market: buy at UR, sell at FIT."""
    sell, buy = _totals(bids)
    rewards = {
        b.agent_id: (tariffs.ur if b.quantity < 0 else tariffs.fit) * b.quantity for b in bids
    }
    return ClearingResult(0.0, tariffs.ur, rewards, buy, sell)


def settle_imbalance(bid: float, physical_net: float, tariffs: Tariffs) -> float:
    """Cents owed for delivering ``physical_net`` kWh against a ``bid``.

    A shortfall is bought from the utility at UR, a surplus sold at FIT.
    """
    gap = physical_net - bid
    if gap < 0:
        return tariffs.ur * gap
    return tariffs.fit * gap


def admit_sell(bid: float, deliverable: float) -> float:
    """Cap a sell offer at the energy the seller actually exports this hour.

    Buy bids pass through unchanged.
    """
    if bid <= 0:
        return bid
    return min(bid, max(deliverable, 0.0))


def clear(bids: Sequence[Bid], tariffs: Tariffs, p2p: bool = True) -> ClearingResult:
    if not p2p:
        return settle_no_p2p(bids, tariffs)
    try:
        return settle(bids, tariffs)
    except MarketSuspended:
        return settle_suspended(bids, tariffs)
