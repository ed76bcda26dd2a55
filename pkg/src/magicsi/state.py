from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass
class ChainState:
    """A point ``(data, beta_E, z_{-E})`` of the augmented space.

    ``data`` is the response ``y`` (Lasso), the asymptotic statistic ``T``
    (logistic), or the full matrix ``X`` (graphical).  For the graphical
    model ``beta_E`` and ``z_minus_E`` are ``p x p`` matrices whose column
    ``k`` holds node ``k``'s coefficients / subgradients (only the entries
    selected resp. not selected for node ``k`` are meaningful).

    ``held`` is the conditioned component of ``data`` when the chain moves
    under a sufficient-statistic constraint; it is carried by reference from
    state to state so the conditioned statistics never change.
    """

    data: np.ndarray
    beta_E: np.ndarray
    z_minus_E: np.ndarray
    held: np.ndarray | None = None
    cache: dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def replace(self, **changes) -> "ChainState":
        kw = dict(data=self.data, beta_E=self.beta_E, z_minus_E=self.z_minus_E,
                  held=self.held)
        kw.update(changes)
        return ChainState(**kw)

    def copy(self) -> "ChainState":
        return ChainState(np.array(self.data, copy=True),
                          np.array(self.beta_E, copy=True),
                          np.array(self.z_minus_E, copy=True),
                          self.held)
