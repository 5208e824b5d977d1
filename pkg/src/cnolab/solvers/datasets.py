"""Paired (initial condition, solution at T) datasets written as tensor containers."""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..fields import load_tensor, relative_l1, save_tensor
from .equations import Equation, SolverParams, solve_brusselator, solve_ks, solve_ns
from .etdrk4 import SolverDivergenceError
from .initial_conditions import NsIcSpec, SineIcSpec, sample_ns_ic, sample_sine_ic

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
SPLITS = ("train", "val", "test")
CHUNK = 4  # small batches keep the FFT working set in cache
SELF_CONVERGENCE_TOL = 0.05  # percent relative L1 between dt and dt/2
MAX_HALVINGS = 4


class DatasetGenerationError(RuntimeError):
    def __init__(self, split: str, index: int, seed: int, cause: Exception):
        self.split, self.index, self.seed = split, index, seed
        super().__init__(f"sample diverged (split={split}, index={index}, seed={seed}): {cause}")


@dataclass
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray
    split: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape != self.outputs.shape:
            raise ValueError("inputs and outputs must have equal shapes")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def resolution(self) -> int:
        return self.inputs.shape[-1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        meta = dict(self.metadata)
        if "seeds" in meta:
            meta["seeds"] = [meta["seeds"][i] for i in indices]
        return Dataset(self.inputs[indices], self.outputs[indices], self.split, meta)


def derive_seed(master_seed: int, split: str, index: int) -> int:
    """64-bit seed from a keyed hash of ``(master_seed, split, index)``."""
    key = f"{int(master_seed)}/{split}/{int(index)}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def solver_params(equation: Equation | str, generator_params: Mapping[str, Any], dt: float | None = None) -> SolverParams:
    equation = Equation(equation)
    overrides: dict[str, Any] = {}
    if dt is not None:
        overrides["dt"] = dt
    if equation is Equation.NS:
        overrides["nu"] = float(generator_params["nu"])
    return SolverParams.default(equation, **overrides)


def sample_initial_condition(equation: Equation, generator_params: Mapping[str, Any], seed: int, resolution: int) -> np.ndarray:
    if equation is Equation.NS:
        spec = NsIcSpec(
            seed=seed,
            resolution=resolution,
            mode_cutoff=int(generator_params.get("mode_cutoff", 5)),
            amplitude_std=float(generator_params.get("amplitude_std", 1.0)),
        )
        return sample_ns_ic(spec)
    return sample_sine_ic(SineIcSpec(K=int(generator_params["K"]), seed=seed, resolution=resolution))


def solve(equation: Equation, inputs: np.ndarray, params: SolverParams) -> np.ndarray:
    """Map input fields to the dataset's output channel at T."""
    if equation is Equation.KS:
        return solve_ks(inputs, params)
    if equation is Equation.BRUSSELATOR:
        return solve_brusselator(np.ones_like(inputs), inputs, params)[1]
    return solve_ns(inputs, params)


def select_time_step(equation: Equation, generator_params: Mapping[str, Any], probe: np.ndarray, dt: float | None = None) -> SolverParams:
    """Halve dt until a dt vs dt/2 comparison on ``probe`` is within tolerance."""
    params = solver_params(equation, generator_params, dt)
    for _ in range(MAX_HALVINGS + 1):
        coarse = solve(equation, probe, params)
        fine = solve(equation, probe, params.halved())
        diff = float(np.max(relative_l1(coarse, fine)))
        if diff < SELF_CONVERGENCE_TOL:
            return params
        log.info("dt=%g self-convergence %.3g%% above tolerance, halving", params.dt, diff)
        params = params.halved()
    raise RuntimeError(f"no time step met the self-convergence tolerance (last dt={params.dt})")


def _solve_chunk(args):
    equation, generator_params, seeds, resolution, params = args
    inputs = np.stack([sample_initial_condition(equation, generator_params, s, resolution) for s in seeds])
    try:
        return inputs, solve(equation, inputs, params), None
    except SolverDivergenceError:
        for i, s in enumerate(seeds):
            try:
                solve(equation, inputs[i : i + 1], params)
            except SolverDivergenceError as err:
                return inputs, None, (i, err)
        raise


def worker_count() -> int:
    return max(1, int(os.environ.get("CNOLAB_WORKERS", "1")))


def _run_split(equation, generator_params, split, seeds, resolution, params, workers):
    chunks = [seeds[i : i + CHUNK] for i in range(0, len(seeds), CHUNK)]
    jobs = [(equation, dict(generator_params), c, resolution, params) for c in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_chunk, jobs))
    else:
        results = [_solve_chunk(j) for j in jobs]
    ins, outs = [], []
    for k, (inp, out, failure) in enumerate(results):
        if failure is not None:
            i, err = failure
            index = k * CHUNK + i
            raise DatasetGenerationError(split, index, seeds[index], err)
        ins.append(inp)
        outs.append(out)
    return np.concatenate(ins), np.concatenate(outs)


def dataset_paths(directory: str | Path, name: str, split: str) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{name}_{split}_inputs.cnot", directory / f"{name}_{split}_outputs.cnot"


def generate_dataset(
    equation: Equation | str,
    generator_params: Mapping[str, Any],
    split_sizes: Sequence[int],
    master_seed: int,
    resolution: int,
    directory: str | Path,
    name: str,
    dt: float | None = None,
    auto_dt: bool = True,
    workers: int | None = None,
) -> dict[str, tuple[Path, Path]]:
    """Sample, solve and write train/val/test splits.

    Returns the ``(inputs, outputs)`` paths for every split. Identical
    arguments produce byte-identical files regardless of the worker count.
    """
    equation = Equation(equation)
    if len(split_sizes) != len(SPLITS) or any(int(n) < 1 for n in split_sizes):
        raise ValueError(f"split_sizes must be three positive integers, got {split_sizes}")
    if equation is Equation.NS and "nu" not in generator_params:
        raise ValueError("Navier-Stokes datasets need 'nu'")
    if equation is not Equation.NS and "K" not in generator_params:
        raise ValueError(f"{equation.value} datasets need 'K'")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    workers = worker_count() if workers is None else workers

    seeds = {split: [derive_seed(master_seed, split, i) for i in range(int(n))] for split, n in zip(SPLITS, split_sizes)}
    flat = [s for split in SPLITS for s in seeds[split]]
    if len(set(flat)) != len(flat):
        raise RuntimeError("per-sample seed collision")

    if auto_dt:
        probe = sample_initial_condition(equation, generator_params, seeds["train"][0], resolution)[None]
        params = select_time_step(equation, generator_params, probe, dt)
    else:
        params = solver_params(equation, generator_params, dt)

    paths = {}
    for split in SPLITS:
        inputs, outputs = _run_split(equation, generator_params, split, seeds[split], resolution, params, workers)
        meta = {
            "equation": equation.value,
            "split": split,
            "T": params.T,
            "dt": params.dt,
            "resolution": resolution,
            "master_seed": int(master_seed),
            "seeds": seeds[split],
            "generator_version": GENERATOR_VERSION,
            **{k: generator_params[k] for k in sorted(generator_params)},
        }
        in_path, out_path = dataset_paths(directory, name, split)
        save_tensor(in_path, inputs, {**meta, "role": "inputs"})
        save_tensor(out_path, outputs, {**meta, "role": "outputs"})
        paths[split] = (in_path, out_path)
        log.info("wrote %s %s split (%d samples)", name, split, len(inputs))
    return paths


def load_dataset(directory: str | Path, name: str, split: str) -> Dataset:
    in_path, out_path = dataset_paths(directory, name, split)
    if not in_path.exists() or not out_path.exists():
        raise FileNotFoundError(f"dataset {name!r} split {split!r} not found in {directory}")
    inputs, meta = load_tensor(in_path)
    outputs, _ = load_tensor(out_path)
    meta.pop("role", None)
    return Dataset(inputs, outputs, split, meta)
