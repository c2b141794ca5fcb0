"""Phase-one strata ``(y, delta, z)`` and their sampling counts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError
from .model import Cohort


class StratumKey(NamedTuple):
    time_index: int
    event: bool
    surrogate: tuple

    def serialize(self) -> str:
        codes = ",".join(str(int(c)) for c in self.surrogate)
        return f"y:{int(self.time_index)}|d:{int(bool(self.event))}|z:{codes}"

    @classmethod
    def parse(cls, text: str) -> "StratumKey":
        try:
            parts = dict(p.split(":", 1) for p in text.strip().split("|"))
            z = tuple(int(c) for c in parts["z"].split(",") if c != "")
            return cls(int(parts["y"]), bool(int(parts["d"])), z)
        except (KeyError, ValueError):
            raise DataError(f"malformed stratum key {text!r}") from None

    def __str__(self):
        return self.serialize()


def stratum_ids(cohort: Cohort):
    """Sorted stratum keys and the stratum id of every subject."""
    cols = np.column_stack([cohort.time_index, cohort.event.astype(np.int64), cohort.surrogate])
    if cohort.size == 0:
        return [], np.zeros(0, dtype=np.int64)
    uniq, inverse = np.unique(cols, axis=0, return_inverse=True)
    keys = [StratumKey(int(r[0]), bool(r[1]), tuple(int(v) for v in r[2:])) for r in uniq]
    return keys, inverse.reshape(-1)


@dataclass(frozen=True)
class StratumTable:
    """Phase-one counts ``N(s)``, phase-two counts ``n(s)`` and ``pi_hat = n/N``.

    ``ids`` maps every cohort subject to its stratum position in ``keys``;
    ``validated`` holds the sorted phase-two subject indices.
    """

    keys: list
    N: np.ndarray
    n: np.ndarray
    ids: np.ndarray
    validated: np.ndarray

    @property
    def pi_hat(self) -> np.ndarray:
        return self.n / self.N

    @property
    def total(self) -> int:
        return int(self.N.sum())

    def index(self, key) -> int:
        return self.keys.index(StratumKey(*key))

    def uncovered(self) -> list:
        """Strata with subjects in phase one but none validated."""
        return [k for k, N, n in zip(self.keys, self.N, self.n) if N > 0 and n == 0]

    def weights(self) -> np.ndarray:
        """Inverse sampling probabilities ``N(s)/n(s)`` for the validated subjects."""
        s = self.ids[self.validated]
        return self.N[s] / self.n[s]

    def as_dict(self) -> dict:
        return {k: (int(N), int(n)) for k, N, n in zip(self.keys, self.N, self.n)}


def build_strata(cohort: Cohort, validated=None) -> StratumTable:
    """Tally phase-one and validated counts per ``(y, delta, z)`` stratum."""
    keys, ids = stratum_ids(cohort)
    S = len(keys)
    if validated is None:
        validated = np.zeros(0, dtype=np.int64)
    validated = np.asarray(validated, dtype=np.int64).reshape(-1)
    if validated.size:
        if validated.min() < 0 or validated.max() >= cohort.size:
            raise DataError("validated index outside the cohort")
        if np.unique(validated).size != validated.size:
            raise DataError("validated index contains duplicates")
        missing = ~cohort.has_covariates()[validated]
        if np.any(missing):
            raise DataError(f"validated subjects without covariates: {validated[missing][:5].tolist()}")
    validated = np.sort(validated)
    N = np.bincount(ids, minlength=S).astype(np.int64)
    n = np.bincount(ids[validated], minlength=S).astype(np.int64)
    return StratumTable(keys, N, n, ids, validated)


def phase_one_counts(cohort: Cohort) -> dict:
    """``{StratumKey: N(s)}`` for the whole cohort."""
    keys, ids = stratum_ids(cohort)
    counts = np.bincount(ids, minlength=len(keys))
    return {k: int(c) for k, c in zip(keys, counts)}
