"""Currency balances.  Money only moves between accounts; it is never minted after setup."""

from __future__ import annotations

import math

from .errors import InsufficientFundsError

_TOL = 1e-9


class Accounts:
    def __init__(self, initial: dict[str, float] | None = None):
        self._balances: dict[str, float] = {}
        for who, amount in (initial or {}).items():
            self.open(who, amount)

    def open(self, who: str, amount: float = 0.0) -> None:
        if who in self._balances:
            raise ValueError(f"account {who!r} already exists")
        if not math.isfinite(amount) or amount < 0:
            raise ValueError("opening balance must be >= 0")
        self._balances[who] = float(amount)

    def balance(self, who: str) -> float:
        return self._balances.get(who, 0.0)

    def transfer(self, src: str, dst: str, amount: float) -> None:
        if not math.isfinite(amount) or amount < 0:
            raise ValueError("transfer amount must be finite and >= 0")
        have = self.balance(src)
        if amount > have + _TOL * max(1.0, amount):
            raise InsufficientFundsError(f"{src} holds {have}, cannot move {amount}")
        # absorb rounding dust so balances never go negative
        self._balances[src] = max(0.0, have - amount)
        self._balances[dst] = self.balance(dst) + amount

    def total(self, prefix: str | None = None) -> float:
        return math.fsum(v for k, v in self._balances.items()
                         if prefix is None or k.startswith(prefix))

    def snapshot(self) -> dict[str, float]:
        return dict(sorted(self._balances.items()))
