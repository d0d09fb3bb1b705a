"""Constrained sampling: alternating Gibbs and gradient-descent phases
under a simulated-annealing acceptance rule.

Each outer iteration runs a block of descent steps on the structural
costs, then several Gibbs blocks each followed by a single interleaved
descent step. The resulting candidate is kept only if two independent
uniform draws fall below the annealing keep probabilities for the
standardized free energy and the standardized cost; otherwise the
previous solution is restored. The best solution by mean standardized
score is tracked across all iterations.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import StructureTemplate, gd_step, total_cost_grad
from .crbm import CrbmParams, free_energy, gibbs_step
from .errors import DimensionError

TEMPERATURE_FLOOR = 1e-6
STD_FLOOR = 1e-9
DEFAULT_WARMUP_ITERS = 30


@dataclass(frozen=True)
class SamplerConfig:
    outer_iters: int = 250
    inner_iters: int = 15
    gd_phase_steps: int = 20
    gd_phase_lr: float = 10.0
    gs_block_steps: int = 100
    interleaved_gd_lr: float = 5.0
    warmup_iters: int = DEFAULT_WARMUP_ITERS
    rng_seed: int = 0


@dataclass(frozen=True)
class Standardizer:
    """Affine maps bringing observed free energy and cost to roughly zero
    mean and unit variance; stds are floored away from zero."""

    fe_mean: float
    fe_std: float
    cost_mean: float
    cost_std: float

    def __post_init__(self):
        if self.fe_std <= 0 or self.cost_std <= 0:
            raise ValueError("standardizer stds must be positive")

    def fe(self, value: float) -> float:
        return (value - self.fe_mean) / self.fe_std

    def cost(self, value: float) -> float:
        return (value - self.cost_mean) / self.cost_std


@dataclass(frozen=True)
class TraceRow:
    """State after the accept/revert decision of one outer iteration."""

    iteration: int
    free_energy: float
    cost: float
    std_free_energy: float
    std_cost: float
    accepted: bool
    best_score: float


@dataclass
class SolutionState:
    current: np.ndarray
    previous: np.ndarray
    best: np.ndarray
    best_score: float
    trace: list[TraceRow] = field(default_factory=list)


def temperature(iteration: int, outer_iters: int) -> float:
    """Linear annealing schedule, floored to stay positive at the end."""
    return max(1.0 - iteration / outer_iters, TEMPERATURE_FLOOR)


def sa_keep_probability(f_new: float, f_old: float, temp: float) -> float:
    """exp(-(f_new - f_old)/temp), capped at 1; improvements are certain."""
    if f_new <= f_old:
        return 1.0
    return math.exp(-(f_new - f_old) / temp)


def sa_accept(fe_new: float, fe_old: float, cost_new: float, cost_old: float,
              temp: float, rng: np.random.Generator) -> bool:
    """Two independent uniform draws, one per score; the candidate is kept
    only when both fall below their keep probabilities."""
    p_fe = sa_keep_probability(fe_new, fe_old, temp)
    p_cost = sa_keep_probability(cost_new, cost_old, temp)
    r_fe = rng.random()
    r_cost = rng.random()
    return r_fe < p_fe and r_cost < p_cost


def _check_compatible(params: CrbmParams, template: StructureTemplate) -> None:
    if params.pitch_count != template.pitch_count:
        raise DimensionError(
            f"model P={params.pitch_count} vs template P={template.pitch_count}")
    if template.t_steps % params.stride != 0:
        raise DimensionError(
            f"stride {params.stride} does not divide template T={template.t_steps}")


def _cs_iteration(v: np.ndarray, params: CrbmParams, template: StructureTemplate,
                  config: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    for _ in range(config.gd_phase_steps):
        v = gd_step(v, template, config.gd_phase_lr)
    for _ in range(config.inner_iters):
        for _ in range(config.gs_block_steps):
            v = gibbs_step(v, params, rng)
        v = gd_step(v, template, config.interleaved_gd_lr)
    return v


def _scores(v: np.ndarray, params: CrbmParams,
            template: StructureTemplate) -> tuple[float, float]:
    breakdown, _ = total_cost_grad(template, v)
    return free_energy(v, params), breakdown.total


def calibrate_standardizer(params: CrbmParams, template: StructureTemplate,
                           config: SamplerConfig,
                           rng: np.random.Generator) -> Standardizer:
    """Warm-up run of the sampling schedule with every candidate kept;
    the observed free energies and costs set the standardization."""
    _check_compatible(params, template)
    v = rng.random((template.t_steps, template.pitch_count))
    fes = np.empty(config.warmup_iters)
    costs = np.empty(config.warmup_iters)
    for i in range(config.warmup_iters):
        v = _cs_iteration(v, params, template, config, rng)
        fes[i], costs[i] = _scores(v, params, template)
    return Standardizer(
        fe_mean=float(fes.mean()),
        fe_std=max(float(fes.std()), STD_FLOOR),
        cost_mean=float(costs.mean()),
        cost_std=max(float(costs.std()), STD_FLOOR),
    )


def constrained_sample(params: CrbmParams, template: StructureTemplate,
                       config: SamplerConfig, standardizer: Standardizer,
                       rng: np.random.Generator | None = None,
                       ) -> tuple[np.ndarray, list[TraceRow]]:
    """Run the full constrained sampling loop from uniform noise.

    Returns the best roll seen (by mean of the standardized free energy
    and cost) and one trace row per outer iteration.
    """
    _check_compatible(params, template)
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)

    v = rng.random((template.t_steps, template.pitch_count))
    fe_raw, cost_raw = _scores(v, params, template)
    fe_std, cost_std = standardizer.fe(fe_raw), standardizer.cost(cost_raw)
    state = SolutionState(
        current=v, previous=v, best=v.copy(),
        best_score=(fe_std + cost_std) / 2.0,
    )

    for i in range(1, config.outer_iters + 1):
        state.previous = state.current
        prev_fe_std, prev_cost_std = fe_std, cost_std
        prev_raw = (fe_raw, cost_raw)

        candidate = _cs_iteration(state.current, params, template, config, rng)
        cand_fe, cand_cost = _scores(candidate, params, template)
        cand_fe_std = standardizer.fe(cand_fe)
        cand_cost_std = standardizer.cost(cand_cost)

        accepted = sa_accept(cand_fe_std, prev_fe_std, cand_cost_std,
                             prev_cost_std, temperature(i, config.outer_iters), rng)
        if accepted:
            state.current = candidate
            fe_raw, cost_raw = cand_fe, cand_cost
            fe_std, cost_std = cand_fe_std, cand_cost_std
        else:
            state.current = state.previous
            fe_raw, cost_raw = prev_raw
            fe_std, cost_std = prev_fe_std, prev_cost_std

        score = (fe_std + cost_std) / 2.0
        if score < state.best_score:
            state.best_score = score
            state.best = state.current.copy()
        state.trace.append(TraceRow(i, fe_raw, cost_raw, fe_std, cost_std,
                                    accepted, state.best_score))
    return state.best, state.trace


@dataclass(frozen=True)
class ChainResult:
    chain_index: int
    best_roll: np.ndarray
    best_score: float
    trace: list[TraceRow]


def run_chains(params: CrbmParams, template: StructureTemplate,
               config: SamplerConfig, n_chains: int,
               threads: int = 1) -> list[ChainResult]:
    """Run independent chains with seeds split off the configured seed and
    one shared calibration; results come back sorted by best score."""
    seeds = np.random.SeedSequence(config.rng_seed).spawn(n_chains + 1)
    standardizer = calibrate_standardizer(params, template, config,
                                          np.random.default_rng(seeds[0]))

    def one(index: int) -> ChainResult:
        rng = np.random.default_rng(seeds[index + 1])
        roll, trace = constrained_sample(params, template, config, standardizer, rng)
        return ChainResult(index, roll, trace[-1].best_score if trace
                           else math.inf, trace)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_chains)))
    else:
        results = [one(i) for i in range(n_chains)]
    results.sort(key=lambda r: (r.best_score, r.chain_index))
    return results


def batch_sample(params: CrbmParams, template: StructureTemplate,
                 config: SamplerConfig, n_solutions: int, select_k: int,
                 threads: int = 1) -> list[np.ndarray]:
    """Top ``select_k`` rolls out of ``n_solutions`` independent chains."""
    results = run_chains(params, template, config, n_solutions, threads)
    return [r.best_roll for r in results[:select_k]]


TRACE_HEADER = ["iter", "free_energy", "cost", "std_free_energy", "std_cost",
                "accepted", "best_score"]


def write_trace_csv(path, trace: list[TraceRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for row in trace:
            writer.writerow([row.iteration, repr(row.free_energy), repr(row.cost),
                             repr(row.std_free_energy), repr(row.std_cost),
                             int(row.accepted), repr(row.best_score)])
