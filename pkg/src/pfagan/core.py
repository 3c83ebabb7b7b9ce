"""Age groups, gate vectors and condition tensors.

Groups are 1-based throughout the public API (group 1 is the youngest);
conversion to 0-based offsets happens only where arrays are indexed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

AGING = "aging"
REJUVENATION = "rejuvenation"
DIRECTIONS = (AGING, REJUVENATION)


@dataclass(frozen=True)
class AgeGroupPartition:
    """Ordered, disjoint age bins defined by inclusive upper cut ages.

    ``bounds=(30, 40, 50)`` gives the groups 30-, 31-40, 41-50 and 51+.
    An age equal to a cut belongs to the lower group.
    """

    bounds: tuple[int, ...] = (30, 40, 50)

    def __post_init__(self):
        bounds = tuple(int(b) for b in self.bounds)
        if len(bounds) == 0:
            raise ValueError("partition needs at least one cut age")
        if any(b < 0 for b in bounds):
            raise ValueError(f"cut ages must be non-negative, got {bounds}")
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError(f"cut ages must be strictly increasing, got {bounds}")
        object.__setattr__(self, "bounds", bounds)

    @property
    def n_groups(self) -> int:
        return len(self.bounds) + 1

    def group_of(self, age) -> int:
        return group_of(age, self)

    def labels(self) -> list[str]:
        out = [f"{self.bounds[0]}-"]
        for lo, hi in zip(self.bounds, self.bounds[1:]):
            out.append(f"{lo + 1}-{hi}")
        out.append(f"{self.bounds[-1] + 1}+")
        return out

    def midpoint(self, group: int, max_age: int = 100) -> float:
        check_group(group, self.n_groups)
        lo = 0 if group == 1 else self.bounds[group - 2] + 1
        hi = max_age if group == self.n_groups else self.bounds[group - 1]
        return (lo + hi) / 2.0


def round_age(age) -> int:
    """Round a (possibly fractional) age half-up to whole years."""
    return int(math.floor(float(age) + 0.5))


def group_of(age, partition: AgeGroupPartition) -> int:
    """Return the 1-based group index of ``age``."""
    if isinstance(age, float) and math.isnan(age):
        raise ValueError("age is NaN")
    if age < 0:
        raise ValueError(f"age must be non-negative, got {age}")
    years = round_age(age)
    # number of cuts strictly below the age
    return 1 + sum(1 for b in partition.bounds if years > b)


def check_group(group: int, n_groups: int, name: str = "group") -> int:
    if int(group) != group or not 1 <= group <= n_groups:
        raise ValueError(f"{name} must be an integer in 1..{n_groups}, got {group}")
    return int(group)


def build_gates(source: int, target: int, n_groups: int) -> np.ndarray:
    """Binary gate vector of length ``n_groups - 1`` engaging sub-networks source..target-1."""
    check_group(source, n_groups, "source")
    check_group(target, n_groups, "target")
    if source > target:
        raise ValueError(
            f"source group {source} is older than target group {target}; "
            "train over the reversed group order for rejuvenation"
        )
    gates = np.zeros(n_groups - 1, dtype=np.int64)
    gates[source - 1:target - 1] = 1
    return gates


def validate_gates(gates: Sequence[int], n_groups: int | None = None) -> np.ndarray:
    """Check that ``gates`` is binary and contiguous; return it as an int array."""
    arr = np.asarray(gates)
    if arr.ndim != 1:
        raise ValueError(f"gate vector must be 1-D, got shape {arr.shape}")
    if n_groups is not None and arr.shape[0] != n_groups - 1:
        raise ValueError(f"gate vector must have length {n_groups - 1}, got {arr.shape[0]}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"gates must be 0 or 1, got {arr.tolist()}")
    ones = np.flatnonzero(arr)
    if ones.size and ones[-1] - ones[0] + 1 != ones.size:
        raise ValueError(f"gates must be contiguous, got {arr.tolist()}")
    return arr.astype(np.int64)


def gates_to_span(gates: Sequence[int]) -> tuple[int, int] | None:
    """Inverse of :func:`build_gates` for non-empty gates: (source, target)."""
    ones = np.flatnonzero(validate_gates(gates))
    if ones.size == 0:
        return None
    return int(ones[0]) + 1, int(ones[-1]) + 2


def build_condition(target: int, n_groups: int, height: int, width: int,
                    dtype=torch.float32) -> torch.Tensor:
    """One-hot condition tensor of shape (n_groups, height, width)."""
    check_group(target, n_groups, "target")
    if height <= 0 or width <= 0:
        raise ValueError(f"condition size must be positive, got {height}x{width}")
    cond = torch.zeros(n_groups, height, width, dtype=dtype)
    cond[target - 1] = 1
    return cond


def build_condition_batch(targets: Iterable[int], n_groups: int, height: int, width: int,
                          dtype=torch.float32) -> torch.Tensor:
    targets = torch.as_tensor([check_group(t, n_groups, "target") for t in targets])
    onehot = torch.nn.functional.one_hot(targets - 1, n_groups).to(dtype)
    return onehot[:, :, None, None].expand(-1, -1, height, width).contiguous()


def orient(group: int, n_groups: int, direction: str = AGING) -> int:
    """Map a natural group index onto the chain order used by the generator.

    Rejuvenation reverses the order of the groups, so the oldest group
    becomes chain position 1. The map is its own inverse.
    """
    check_group(group, n_groups)
    if direction == AGING:
        return group
    if direction == REJUVENATION:
        return n_groups + 1 - group
    raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
