"""Planning and generation of the combinatorial family of degraded datasets.

A plan enumerates the Cartesian product of per-factor epsilon grids in
lexicographic order of factor declaration; generating applies each
combination to every source image, so the output count is
n_images * prod(levels per factor) (= n * rho^n_factors for uniform grids).
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .imageio import LabeledDataset, dataset_crc32
from .perturb import EpsilonGrid, PerturbationKind, stack_array


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationPlan:
    grids: tuple[EpsilonGrid, ...]
    n_i: int  # source image count
    combinations: tuple[tuple[float, ...], ...]

    @property
    def factor_names(self) -> tuple[str, ...]:
        return tuple(g.factor_name for g in self.grids)

    @property
    def rho(self) -> int | None:
        """Levels per factor when the grids are uniform-length, else None."""
        lengths = {len(g.levels) for g in self.grids}
        return lengths.pop() if len(lengths) == 1 else None

    @property
    def predicted_total(self) -> int:
        return self.n_i * len(self.combinations)

    def combination_count(self) -> int:
        return len(self.combinations)


def plan(grids, source_count: int) -> DegradationPlan:
    grids = tuple(grids)
    if not grids:
        raise PlanError("at least one factor grid is required")
    names = [g.factor_name for g in grids]
    if len(set(names)) != len(names):
        raise PlanError(f"duplicate factor names: {names}")
    combos = tuple(itertools.product(*(g.levels for g in grids)))
    return DegradationPlan(grids=grids, n_i=int(source_count), combinations=combos)


def dataset_id(factor_names, combo) -> str:
    parts = [f"{name}={eps:.4f}" for name, eps in zip(factor_names, combo)]
    return "d_" + "_".join(parts)


@dataclass
class DegradedDataset:
    """One perturbation assignment applied uniformly to the whole source set."""

    dataset_id: str
    source_checksum: int
    assignment: dict[str, float]  # factor -> epsilon, in application order
    order: tuple[str, ...]
    params: dict
    data: LabeledDataset
    crc32: int

    def metadata(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "source_checksum": self.source_checksum,
            "assignment": dict(self.assignment),
            "order": list(self.order),
            "params": dict(self.params),
            "count": len(self.data),
            "crc32": self.crc32,
        }


def _match_factors(plan_: DegradationPlan, factors) -> list[PerturbationKind]:
    by_name = {f.name: f for f in factors}
    missing = [n for n in plan_.factor_names if n not in by_name]
    if missing or len(by_name) != len(plan_.factor_names):
        raise PlanError(
            f"factor mismatch: plan has {list(plan_.factor_names)}, "
            f"kinds given for {sorted(by_name)}"
        )
    return [by_name[n] for n in plan_.factor_names]


def generate_one(source: LabeledDataset, plan_: DegradationPlan, factors,
                 combo_index: int) -> DegradedDataset:
    kinds = _match_factors(plan_, factors)
    combo = plan_.combinations[combo_index]
    stacked = stack_array(source.pixels, list(zip(kinds, combo)))
    data = LabeledDataset(stacked, source.labels, k=source.k, class_names=source.class_names)
    params = {k.name: k.params() for k in kinds}
    return DegradedDataset(
        dataset_id=dataset_id(plan_.factor_names, combo),
        source_checksum=dataset_crc32(source),
        assignment=dict(zip(plan_.factor_names, combo)),
        order=plan_.factor_names,
        params=params,
        data=data,
        crc32=dataset_crc32(data),
    )


def generate(source: LabeledDataset, plan_: DegradationPlan, factors,
             workers: int = 1) -> list[DegradedDataset]:
    """Materialize every combination; output order follows the plan.

    Each combination is a pure function of (source, assignment), so results
    are identical no matter how many workers run them.
    """
    if plan_.n_i != len(source):
        raise PlanError(f"plan was made for {plan_.n_i} images, source has {len(source)}")
    _match_factors(plan_, factors)  # fail fast before spawning workers
    indices = range(len(plan_.combinations))
    if workers <= 1:
        return [generate_one(source, plan_, factors, i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: generate_one(source, plan_, factors, i), indices))
