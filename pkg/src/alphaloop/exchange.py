# This file is dual licensed under the terms of the Apache License, Version
# 2.0, and the BSD License. See the LICENSE file in the root of this repository
# for complete details.

"""
A daily-close exchange simulator.

Orders are queued between settlement steps and fill in full at the day's
close with no slippage. Two market profiles are built in: a CSI-like market
(T+1, long only, board lots of 100) and a US-like market (T+0, shorting on
a 20% initial margin with an 80% maintenance rule).
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import logging
import math
import os
from pathlib import Path
from typing import Any, Iterable, Mapping

import pandas as pd

from ._fileio import atomic_write_text
from .panel import MarketId

__all__ = [
    "CSI_PROFILE",
    "US_PROFILE",
    "Account",
    "Exchange",
    "Fill",
    "InsufficientAvailableShares",
    "InsufficientCash",
    "InsufficientMargin",
    "LotViolation",
    "MarketProfile",
    "MissingPrice",
    "NonPositiveNav",
    "Order",
    "OrderRejected",
    "OrderSide",
    "OrderStatus",
    "Settlement",
    "SettlementReport",
    "ShortNotAllowed",
    "fills_cash_delta",
    "get_profile",
    "nav",
    "net_position_rate",
]

logger = logging.getLogger(__name__)

EXPIRY_AGE = 7
PURGE_AGE = 14

TRADE_LOG_COLUMNS = (
    "day",
    "order_id",
    "asset",
    "side",
    "qty",
    "price",
    "commission",
    "status",
)


class OrderRejected(ValueError):
    """
    An order failed a check at submission time. ``order`` is the rejected
    order, already marked :attr:`OrderStatus.REJECTED`.
    """

    def __init__(self, message: str, order: Order | None = None) -> None:
        super().__init__(message)
        self.order = order


class ShortNotAllowed(OrderRejected):
    """
    A SHORT order was sent to a market profile that does not allow shorting.
    """


class LotViolation(OrderRejected):
    """
    The order quantity is not a positive multiple of the profile's lot size.
    """


class InsufficientAvailableShares(OrderRejected):
    """
    A SELL (or COVER) asks for more shares than are available to close.
    """


class InsufficientCash(OrderRejected):
    """
    A BUY (or COVER) would cost more than the account's uncommitted cash.
    """


class InsufficientMargin(OrderRejected):
    """
    A SHORT would need more initial margin than the account's uncommitted cash.
    """


class MissingPrice(ValueError):
    """
    No usable price was supplied for an asset the computation needs.
    """


class NonPositiveNav(ValueError):
    """
    The account's net asset value is zero or negative.
    """


class Settlement(enum.Enum):
    T_PLUS_1 = "T+1"
    T_PLUS_0 = "T+0"


@dataclasses.dataclass(frozen=True)
class MarketProfile:
    name: str
    settlement: Settlement
    allow_short: bool
    lot_size: int
    commission_rate: float
    initial_margin_rate: float
    maintenance_ratio: float
    days_per_year: int
    rf_annual: float
    # Net exposure bias the reference strategy uses unless configured.
    default_gamma: float

    def floor_to_lot(self, quantity: float) -> int:
        if not math.isfinite(quantity) or quantity <= 0:
            return 0
        return int(math.floor(quantity / self.lot_size + 1e-9)) * self.lot_size


CSI_PROFILE = MarketProfile(
    name="csi",
    settlement=Settlement.T_PLUS_1,
    allow_short=False,
    lot_size=100,
    commission_rate=0.0002,
    initial_margin_rate=0.0,
    maintenance_ratio=0.0,
    days_per_year=243,
    rf_annual=0.0125,
    default_gamma=1.0,
)

US_PROFILE = MarketProfile(
    name="us",
    settlement=Settlement.T_PLUS_0,
    allow_short=True,
    lot_size=1,
    commission_rate=0.0001,
    initial_margin_rate=0.20,
    maintenance_ratio=0.80,
    days_per_year=252,
    rf_annual=0.0381,
    default_gamma=0.5,
)


def get_profile(market: str | MarketId) -> MarketProfile:
    market = MarketId.parse(market)
    return CSI_PROFILE if market is MarketId.CSI_LIKE else US_PROFILE


class OrderSide(enum.Enum):
    BUY = "BUY"
    SELL = "SELL"
    SHORT = "SHORT"
    COVER = "COVER"

    @property
    def sign(self) -> int:
        """+1 when the fill adds shares to the book, -1 when it removes them."""
        return 1 if self in (OrderSide.BUY, OrderSide.COVER) else -1


class OrderStatus(enum.Enum):
    PENDING = "PENDING"
    FILLED = "FILLED"
    EXPIRED = "EXPIRED"
    REJECTED = "REJECTED"
    CANCELLED = "CANCELLED"


# Cash-raising sides settle before cash-consuming ones.
_FILL_PRIORITY = {
    OrderSide.SELL: 0,
    OrderSide.SHORT: 1,
    OrderSide.COVER: 2,
    OrderSide.BUY: 3,
}


@dataclasses.dataclass
class Order:
    asset: str
    side: OrderSide
    quantity: int
    limit_price: float | None = None
    order_id: str = ""
    submitted_day: datetime.date | None = None
    status: OrderStatus = OrderStatus.PENDING
    age_days: int = 0
    ref_price: float = 0.0
    reason: str = ""

    def __str__(self) -> str:
        limit = "" if self.limit_price is None else f" @ {self.limit_price:g}"
        return f"{self.order_id} {self.side.value} {self.quantity} {self.asset}{limit}"

    def fills_at(self, close: float) -> bool:
        if self.limit_price is None:
            return True
        if self.side in (OrderSide.BUY, OrderSide.COVER):
            return close <= self.limit_price
        return close >= self.limit_price


@dataclasses.dataclass
class LongPosition:
    qty: int = 0
    available: int = 0


@dataclasses.dataclass
class ShortPosition:
    qty: int = 0
    entry_price: float = 0.0


@dataclasses.dataclass
class Account:
    cash: float
    long_positions: dict[str, LongPosition] = dataclasses.field(default_factory=dict)
    short_positions: dict[str, ShortPosition] = dataclasses.field(default_factory=dict)
    reserved_margin: float = 0.0
    fee_paid_cumulative: float = 0.0

    @property
    def locked_proceeds(self) -> float:
        """Short-sale proceeds held against open shorts."""
        return sum(p.qty * p.entry_price for p in self.short_positions.values())

    def holdings(self) -> dict[str, int]:
        """Signed share counts, shorts negative."""
        held = {asset: p.qty for asset, p in self.long_positions.items() if p.qty}
        for asset, p in self.short_positions.items():
            if p.qty:
                held[asset] = held.get(asset, 0) - p.qty
        return held

    def copy(self) -> Account:
        return Account(
            cash=self.cash,
            long_positions={
                k: dataclasses.replace(v) for k, v in self.long_positions.items()
            },
            short_positions={
                k: dataclasses.replace(v) for k, v in self.short_positions.items()
            },
            reserved_margin=self.reserved_margin,
            fee_paid_cumulative=self.fee_paid_cumulative,
        )


@dataclasses.dataclass(frozen=True)
class Fill:
    day: datetime.date
    order_id: str
    asset: str
    side: OrderSide
    qty: int
    price: float
    commission: float

    @property
    def value(self) -> float:
        return self.qty * self.price

    @property
    def cash_delta(self) -> float:
        if self.side in (OrderSide.BUY, OrderSide.COVER):
            return -(self.value + self.commission)
        return self.value - self.commission


@dataclasses.dataclass(frozen=True)
class SettlementReport:
    day: datetime.date
    fills: tuple[Fill, ...] = ()
    expired: tuple[str, ...] = ()
    # (order_id, reason) for fills refused at settlement.
    refused: tuple[tuple[str, str], ...] = ()
    purged: tuple[str, ...] = ()
    margin_calls: tuple[Fill, ...] = ()


def _price(prices: Mapping[str, float], asset: str) -> float:
    price = prices.get(asset)
    if price is None or not math.isfinite(price) or price <= 0:
        raise MissingPrice(f"No price for {asset!r}")
    return float(price)


def _market_values(
    account: Account, prices: Mapping[str, float]
) -> tuple[float, float]:
    long_mv = sum(
        p.qty * _price(prices, asset)
        for asset, p in account.long_positions.items()
        if p.qty
    )
    short_mv = sum(
        p.qty * _price(prices, asset)
        for asset, p in account.short_positions.items()
        if p.qty
    )
    return long_mv, short_mv


def nav(account: Account, prices: Mapping[str, float]) -> float:
    """Cash plus long market value minus short market value."""
    long_mv, short_mv = _market_values(account, prices)
    return account.cash + long_mv - short_mv


def net_position_rate(account: Account, prices: Mapping[str, float]) -> float:
    """(long MV - short MV) / NAV."""
    long_mv, short_mv = _market_values(account, prices)
    total = account.cash + long_mv - short_mv
    if not total > 0:
        raise NonPositiveNav(f"NAV is {total:.2f}")
    return (long_mv - short_mv) / total


class Exchange:
    """One account trading against daily closes under a market profile.

    The exchange is a single-threaded state machine: call :meth:`open_day`,
    submit orders, then :meth:`settle_day` with that day's closes.
    """

    def __init__(
        self, profile: MarketProfile, initial_cash: float = 10_000_000.0
    ) -> None:
        self.profile = profile
        self.account = Account(cash=float(initial_cash))
        self.orders: dict[str, Order] = {}
        self.trade_log: list[dict[str, Any]] = []
        self.day: datetime.date | None = None
        self._settled: datetime.date | None = None
        self._next_id = 1

    # ----------------------------------------------------------------------------------
    # Day boundaries
    # ----------------------------------------------------------------------------------
    def open_day(self, day: datetime.date) -> None:
        """Start ``day``; shares bought before it become available to sell."""
        if self.day == day:
            return
        if self.day is not None and day < self.day:
            raise ValueError(f"Day {day} is before the current day {self.day}")
        self.day = day
        for position in self.account.long_positions.values():
            position.available = position.qty

    @property
    def pending(self) -> list[Order]:
        return [o for o in self.orders.values() if o.status is OrderStatus.PENDING]

    def free_cash(self) -> float:
        """Cash not tied up by shorts, margin or pending orders.

        Proceeds of pending market SELL orders count, since sells settle
        before buys.
        """
        account = self.account
        free = account.cash - account.locked_proceeds - account.reserved_margin
        rate = self.profile.commission_rate
        for order in self.pending:
            price = order.limit_price or order.ref_price
            if order.side is OrderSide.BUY:
                free -= order.quantity * price * (1 + rate)
            elif order.side is OrderSide.SHORT:
                free -= order.quantity * price * self.profile.initial_margin_rate
            elif order.side is OrderSide.COVER:
                free -= self._cover_shortfall(order.asset, order.quantity, price)
            elif order.limit_price is None:
                free += order.quantity * order.ref_price * (1 - rate)
        return free

    def _cover_shortfall(self, asset: str, qty: int, price: float) -> float:
        position = self.account.short_positions.get(asset, ShortPosition())
        cost = qty * price * (1 + self.profile.commission_rate)
        released = qty * position.entry_price * (1 + self.profile.initial_margin_rate)
        return max(0.0, cost - released)

    def _pending_qty(self, asset: str, side: OrderSide) -> int:
        return sum(
            o.quantity for o in self.pending if o.asset == asset and o.side is side
        )

    # ----------------------------------------------------------------------------------
    # Submission
    # ----------------------------------------------------------------------------------
    def submit_order(self, order: Order, ref_price: float) -> str:
        """Queue ``order`` as PENDING and return its id.

        ``ref_price`` is the last known close, used for the cash and margin
        checks. Raises an :class:`OrderRejected` subclass if a check fails.
        """
        if self.day is None:
            raise ValueError("Call open_day() before submitting orders")
        order.order_id = f"O{self._next_id:06d}"
        self._next_id += 1
        order.submitted_day = self.day
        order.ref_price = float(ref_price)
        order.age_days = 0
        try:
            self._check(order)
        except OrderRejected as e:
            order.status = OrderStatus.REJECTED
            order.reason = type(e).__name__
            e.order = order
            self.orders[order.order_id] = order
            self._log(order, status=OrderStatus.REJECTED)
            logger.debug("Rejected %s: %s", order, e)
            raise
        order.status = OrderStatus.PENDING
        self.orders[order.order_id] = order
        logger.debug("Queued %s", order)
        return order.order_id

    def _check(self, order: Order) -> None:
        profile = self.profile
        account = self.account
        if order.side in (OrderSide.SHORT, OrderSide.COVER) and not profile.allow_short:
            raise ShortNotAllowed(
                f"{profile.name} profile does not allow short selling"
            )
        if order.quantity <= 0 or order.quantity % profile.lot_size:
            raise LotViolation(
                f"Quantity {order.quantity} is not a positive multiple of "
                f"{profile.lot_size}"
            )
        if not order.ref_price > 0:
            raise MissingPrice(f"No reference price for {order.asset!r}")

        if order.side is OrderSide.SELL:
            position = account.long_positions.get(order.asset, LongPosition())
            held = (
                position.available
                if profile.settlement is Settlement.T_PLUS_1
                else position.qty
            )
            open_qty = held - self._pending_qty(order.asset, OrderSide.SELL)
            if order.quantity > open_qty:
                raise InsufficientAvailableShares(
                    f"SELL {order.quantity} {order.asset} but only {max(open_qty, 0)} "
                    "available"
                )
            return
        if order.side is OrderSide.COVER:
            short = account.short_positions.get(order.asset, ShortPosition())
            open_qty = short.qty - self._pending_qty(order.asset, OrderSide.COVER)
            if order.quantity > open_qty:
                raise InsufficientAvailableShares(
                    f"COVER {order.quantity} {order.asset} but only "
                    f"{max(open_qty, 0)} short"
                )
            price = order.limit_price or order.ref_price
            needed = self._cover_shortfall(order.asset, order.quantity, price)
            if needed > self.free_cash() + 1e-9:
                raise InsufficientCash(f"COVER needs {needed:.2f} of free cash")
            return

        free = self.free_cash()
        price = order.limit_price or order.ref_price
        if order.side is OrderSide.BUY:
            cost = order.quantity * price * (1 + profile.commission_rate)
            if cost > free + 1e-9:
                raise InsufficientCash(
                    f"BUY {order.quantity} {order.asset} costs up to {cost:.2f}; "
                    f"free cash is {free:.2f}"
                )
        else:
            margin = order.quantity * price * profile.initial_margin_rate
            if margin > free + 1e-9:
                raise InsufficientMargin(
                    f"SHORT {order.quantity} {order.asset} needs {margin:.2f} margin; "
                    f"free cash is {free:.2f}"
                )

    def cancel_order(self, order_id: str) -> None:
        order = self.orders[order_id]
        if order.status is not OrderStatus.PENDING:
            raise ValueError(f"{order_id} is {order.status.value}, not PENDING")
        order.status = OrderStatus.CANCELLED
        order.reason = "cancelled"
        self._log(order, status=OrderStatus.CANCELLED)

    # ----------------------------------------------------------------------------------
    # Settlement
    # ----------------------------------------------------------------------------------
    def settle_day(
        self, day: datetime.date, closes: Mapping[str, float]
    ) -> SettlementReport:
        """Fill, age, expire and purge orders at the close of ``day``."""
        if self._settled is not None and day <= self._settled:
            raise ValueError(f"Day {day} was already settled")
        self.open_day(day)

        fills: list[Fill] = []
        refused: list[tuple[str, str]] = []
        queue = sorted(
            self.pending, key=lambda o: (_FILL_PRIORITY[o.side], o.order_id)
        )
        for order in queue:
            close = closes.get(order.asset)
            if close is None or not math.isfinite(close) or close <= 0:
                continue
            if not order.fills_at(close):
                continue
            reason = self._cannot_fill(order, close)
            if reason:
                order.status = OrderStatus.CANCELLED
                order.reason = reason
                refused.append((order.order_id, reason))
                self._log(order, status=OrderStatus.CANCELLED)
                logger.warning("Refused fill of %s at %.4f: %s", order, close, reason)
                continue
            fills.append(
                self._fill(
                    order.order_id, order.asset, order.side, order.quantity, close
                )
            )
            order.status = OrderStatus.FILLED

        expired = []
        for order in self.orders.values():
            order.age_days += 1
            if order.status is OrderStatus.PENDING and order.age_days >= EXPIRY_AGE:
                order.status = OrderStatus.EXPIRED
                order.reason = "expired"
                expired.append(order.order_id)
                self._log(order, status=OrderStatus.EXPIRED)
        purged = [
            order_id
            for order_id, order in self.orders.items()
            if order.status is not OrderStatus.PENDING and order.age_days >= PURGE_AGE
        ]
        for order_id in purged:
            del self.orders[order_id]

        margin_calls = self._maintenance(closes) if self.profile.allow_short else []
        self._settled = day
        if fills or margin_calls:
            logger.debug(
                "Settled %s: %d fills, %d margin-call fills, cash %.2f",
                day,
                len(fills),
                len(margin_calls),
                self.account.cash,
            )
        return SettlementReport(
            day=day,
            fills=tuple(fills),
            expired=tuple(expired),
            refused=tuple(refused),
            purged=tuple(purged),
            margin_calls=tuple(margin_calls),
        )

    def _cannot_fill(self, order: Order, close: float) -> str:
        account = self.account
        profile = self.profile
        value = order.quantity * close
        commission = value * profile.commission_rate
        free = account.cash - account.locked_proceeds - account.reserved_margin
        if order.side is OrderSide.BUY and value + commission > free + 1e-9:
            return "insufficient cash at settlement"
        if order.side is OrderSide.SHORT:
            if value * profile.initial_margin_rate + commission > free + 1e-9:
                return "insufficient margin at settlement"
        if order.side is OrderSide.COVER:
            short = account.short_positions.get(order.asset, ShortPosition())
            if order.quantity > short.qty:
                return "short position smaller than cover"
            if value + commission > account.cash + 1e-9:
                return "insufficient cash at settlement"
        if order.side is OrderSide.SELL:
            position = account.long_positions.get(order.asset, LongPosition())
            if order.quantity > position.qty:
                return "position smaller than sell"
        return ""

    def _fill(
        self, order_id: str, asset: str, side: OrderSide, qty: int, price: float
    ) -> Fill:
        assert self.day is not None
        account = self.account
        profile = self.profile
        fill = Fill(
            day=self.day,
            order_id=order_id,
            asset=asset,
            side=side,
            qty=qty,
            price=price,
            commission=qty * price * profile.commission_rate,
        )
        account.cash += fill.cash_delta
        account.fee_paid_cumulative += fill.commission

        if side is OrderSide.BUY:
            position = account.long_positions.setdefault(asset, LongPosition())
            position.qty += qty
            if profile.settlement is Settlement.T_PLUS_0:
                position.available += qty
        elif side is OrderSide.SELL:
            position = account.long_positions[asset]
            position.qty -= qty
            position.available = max(0, min(position.available - qty, position.qty))
            if not position.qty:
                del account.long_positions[asset]
        elif side is OrderSide.SHORT:
            short = account.short_positions.setdefault(asset, ShortPosition())
            total = short.qty + qty
            short.entry_price = (short.qty * short.entry_price + qty * price) / total
            short.qty = total
        else:
            short = account.short_positions[asset]
            short.qty -= qty
            if not short.qty:
                del account.short_positions[asset]
        account.reserved_margin = profile.initial_margin_rate * account.locked_proceeds

        self.trade_log.append(
            {
                "day": fill.day.isoformat(),
                "order_id": order_id,
                "asset": asset,
                "side": side.value,
                "qty": qty,
                "price": price,
                "commission": fill.commission,
                "status": OrderStatus.FILLED.value,
            }
        )
        return fill

    def _maintenance(self, closes: Mapping[str, float]) -> list[Fill]:
        """Force-cover shorts, largest first, while equity is below the
        maintenance ratio times reserved margin."""
        account = self.account
        profile = self.profile
        forced: list[Fill] = []

        def marks() -> dict[str, float]:
            return {
                asset: float(closes[asset])
                for asset in (*account.long_positions, *account.short_positions)
                if asset in closes and math.isfinite(closes[asset])
            }

        def deficient() -> bool:
            if not account.short_positions or not account.reserved_margin > 0:
                return False
            try:
                equity = nav(account, marks())
            except MissingPrice:
                return False
            return equity < profile.maintenance_ratio * account.reserved_margin

        if not deficient():
            return forced
        logger.warning(
            "Margin call on %s: reserved margin %.2f", self.day, account.reserved_margin
        )
        rate = profile.commission_rate
        while deficient():
            prices = marks()
            shorts = sorted(
                (
                    (p.qty * prices[asset], asset)
                    for asset, p in account.short_positions.items()
                    if asset in prices
                ),
                key=lambda item: (-item[0], item[1]),
            )
            if not shorts:
                break
            _, asset = shorts[0]
            price = prices[asset]
            qty = account.short_positions[asset].qty
            # Raise cash from longs when the cover is unaffordable.
            for _, held in sorted(
                (
                    (p.qty * prices[a], a)
                    for a, p in account.long_positions.items()
                    if a in prices
                ),
                key=lambda item: (-item[0], item[1]),
            ):
                if account.cash >= qty * price * (1 + rate):
                    break
                fill = self._fill(
                    self._forced_id(), held, OrderSide.SELL,
                    account.long_positions[held].qty, prices[held],
                )
                forced.append(fill)
            affordable = min(qty, int(account.cash // (price * (1 + rate))))
            if affordable <= 0:
                break
            forced.append(
                self._fill(
                    self._forced_id(), asset, OrderSide.COVER, affordable, price
                )
            )
        return forced

    def _forced_id(self) -> str:
        order_id = f"M{self._next_id:06d}"
        self._next_id += 1
        return order_id

    def _log(self, order: Order, *, status: OrderStatus) -> None:
        day = self.day or order.submitted_day or datetime.date.min
        self.trade_log.append(
            {
                "day": day.isoformat(),
                "order_id": order.order_id,
                "asset": order.asset,
                "side": order.side.value,
                "qty": order.quantity,
                "price": None,
                "commission": 0.0,
                "status": status.value,
            }
        )

    # ----------------------------------------------------------------------------------
    # Reporting
    # ----------------------------------------------------------------------------------
    def nav(self, prices: Mapping[str, float]) -> float:
        return nav(self.account, prices)

    def net_position_rate(self, prices: Mapping[str, float]) -> float:
        return net_position_rate(self.account, prices)

    def snapshot(self, prices: Mapping[str, float]) -> dict[str, Any]:
        account = self.account
        total = self.nav(prices)
        return {
            "day": None if self.day is None else self.day.isoformat(),
            "cash": account.cash,
            "reserved_margin": account.reserved_margin,
            "fee_paid_cumulative": account.fee_paid_cumulative,
            "long": {
                asset: {"qty": p.qty, "available": p.available}
                for asset, p in sorted(account.long_positions.items())
            },
            "short": {
                asset: {"qty": p.qty, "entry_price": p.entry_price}
                for asset, p in sorted(account.short_positions.items())
            },
            "nav": total,
            "net_position_rate": self.net_position_rate(prices) if total > 0 else None,
        }

    def trade_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trade_log, columns=list(TRADE_LOG_COLUMNS))

    def write_trade_log(self, path: str | os.PathLike[str]) -> Path:
        return atomic_write_text(path, self.trade_frame().to_csv(index=False))


def fills_cash_delta(fills: Iterable[Fill]) -> float:
    return sum(fill.cash_delta for fill in fills)
