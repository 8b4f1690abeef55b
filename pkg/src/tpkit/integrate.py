"""Euler-Maruyama time stepping and the randomness contract.

Random number streams
---------------------
Every stochastic routine takes a 64-bit ``seed`` and a ``stream_id``.  The
per-stream generator state is derived by a splitmix-style 64-bit mix of the
pair,

    z = seed XOR (stream_id * 0x9E3779B97F4A7C15)
    z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z XOR (z >> 27)) * 0x94D049BB133111EB
    z = z XOR (z >> 31)

(all mod 2^64), and the mixed value keys a PCG64 bit generator.  Normal
variates come from numpy's ``Generator.standard_normal`` (ziggurat).  The
derivation makes ensembles reproducible and parallelizable: a trajectory is
a pure function of (model, x0, dt, n, seed, stream_id), bit-identical
whether simulated alone or as a lane of a vectorized ensemble, because the
ensemble consumes each lane's stream in the same order and applies the same
elementwise arithmetic.

Hitting times are detected sample-wise: a region is hit at the first sample
inside its closure.  Crossings between samples are missed, an O(sqrt(dt))
bias shared by every empirical statistic downstream; acceptance runs repeat
at two dt values instead of applying bridge corrections.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from tpkit.model import DiffusionModel, Region

__all__ = [
    "mix64",
    "stream_generator",
    "BoxExitError",
    "Trajectory",
    "simulate",
    "simulate_until",
    "simulate_ensemble",
    "ensemble_hit",
]

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


class BoxExitError(RuntimeError):
    """Trajectory left the bounding box; carries the offending step index."""

    def __init__(self, step: int, stream_id: int = 0):
        super().__init__(
            f"trajectory exited the bounding box at step {step} (stream {stream_id});"
            " enlarge the box or reduce dt")
        self.step = step
        self.stream_id = stream_id


def mix64(seed: int, stream_id: int) -> int:
    """Splitmix64-style finalizer of (seed, stream_id) -> 64-bit key."""
    z = (int(seed) ^ (int(stream_id) * _GOLDEN)) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def stream_generator(seed: int, stream_id: int) -> np.random.Generator:
    """The named generator of the randomness contract: PCG64 keyed by mix64."""
    return np.random.Generator(np.random.PCG64(mix64(seed, stream_id)))


class _NoiseBlocks:
    """Block-prefetched standard normals, one consumer per stream.

    Consumption order is one (d,)-vector per request, regardless of block
    size, which is what keeps scalar and vectorized drivers bit-identical.
    """

    def __init__(self, seed: int, stream_id: int, dim: int, block: int = 8192):
        self.gen = stream_generator(seed, stream_id)
        self.dim = dim
        self.block = block

    def take_block(self, n: int) -> np.ndarray:
        """Next n variate vectors, shape (n, d)."""
        return self.gen.standard_normal((n, self.dim))


@dataclass
class Trajectory:
    """Uniformly sampled path of the base SDE."""

    dt: float
    states: np.ndarray        # (n+1, d)
    seed: int
    stream_id: int

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] < 1:
            raise ValueError("trajectory needs at least one state")

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.states.shape[0])


def _check_start(model: DiffusionModel, x0: np.ndarray, dt: float) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size != model.dim:
        raise ValueError(f"x0 has dimension {x0.size}, model is {model.dim}D")
    if not model.box.contains(x0):
        raise BoxExitError(0)
    b0 = np.linalg.norm(model.drift(x0[None, :])[0])
    if dt * b0 > 0.1 * model.box.diameter:
        warnings.warn(f"dt*|b(x0)| = {dt * b0:.3g} exceeds 10% of the box diameter;"
                      " the step size is likely too large", stacklevel=3)
    return x0


def simulate_ensemble(model: DiffusionModel, x0, dt: float, n_steps: int, seed: int,
                      stream_ids: Sequence[int], block: int = 8192) -> np.ndarray:
    """Simulate independent lanes together; returns states (n_steps+1, L, d).

    Lane ``j`` reproduces ``simulate(model, x0[j], dt, n_steps, seed,
    stream_ids[j])`` bit for bit.
    """
    stream_ids = list(stream_ids)
    L = len(stream_ids)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (L, model.dim)).copy()
    if x0.shape != (L, model.dim):
        raise ValueError("x0 must have shape (n_lanes, dim) or (dim,)")
    for j in range(L):
        _check_start(model, x0[j], dt)

    noise = [_NoiseBlocks(seed, sid, model.dim, block) for sid in stream_ids]
    states = np.empty((n_steps + 1, L, model.dim))
    states[0] = x0
    x = x0.copy()
    c = np.sqrt(2.0 * dt) * model.sigma
    lo, hi = model.box.lo, model.box.hi

    k = 0
    while k < n_steps:
        nb = min(block, n_steps - k)
        blk = np.stack([ns.take_block(nb) for ns in noise], axis=1)  # (nb, L, d)
        for j in range(nb):
            x = x + model.drift(x) * dt + c * blk[j]
            k += 1
            states[k] = x
        chunk = states[k - nb + 1: k + 1]
        bad = (chunk < lo) | (chunk > hi)
        if bad.any():
            step_off, lane, _ = np.unravel_index(int(np.argmax(bad)), bad.shape)
            raise BoxExitError(k - nb + 1 + int(step_off), stream_ids[int(lane)])
    return states


def simulate(model: DiffusionModel, x0, dt: float, n_steps: int, seed: int,
             stream_id: int = 0) -> Trajectory:
    """Euler-Maruyama path: X_{k+1} = X_k + b(X_k) dt + sqrt(2 dt) sigma xi_k."""
    states = simulate_ensemble(model, np.atleast_1d(np.asarray(x0, float))[None, :],
                               dt, n_steps, seed, [stream_id])
    return Trajectory(dt, states[:, 0, :], seed, stream_id)


def simulate_until(model: DiffusionModel, x0, dt: float,
                   stop: Union[Region, Callable[[np.ndarray], np.ndarray]],
                   max_steps: int, seed: int, stream_id: int = 0):
    """Run until the first sampled state hits ``stop`` (closure for regions).

    Returns (Trajectory, hit_index or None); the trajectory ends at the
    hitting sample, or after max_steps if no hit occurred.
    """
    x0 = _check_start(model, np.atleast_1d(np.asarray(x0, float)), dt)
    pred = stop.inside_closure if isinstance(stop, Region) else stop
    if bool(np.atleast_1d(pred(x0[None, :]))[0]):
        return Trajectory(dt, x0[None, :], seed, stream_id), 0

    noise = _NoiseBlocks(seed, stream_id, model.dim)
    c = np.sqrt(2.0 * dt) * model.sigma
    lo, hi = model.box.lo, model.box.hi
    chunks = [x0[None, :]]
    x = x0[None, :].copy()
    k = 0
    while k < max_steps:
        nb = min(noise.block, max_steps - k)
        blk = noise.take_block(nb)
        buf = np.empty((nb, model.dim))
        hit_local = -1
        for j in range(nb):
            x = x + model.drift(x) * dt + c * blk[j][None, :]
            buf[j] = x[0]
            k += 1
            if np.any((x[0] < lo) | (x[0] > hi)):
                raise BoxExitError(k, stream_id)
            if bool(np.atleast_1d(pred(x))[0]):
                hit_local = j
                break
        if hit_local >= 0:
            chunks.append(buf[: hit_local + 1])
            states = np.concatenate(chunks, axis=0)
            return Trajectory(dt, states, seed, stream_id), states.shape[0] - 1
        chunks.append(buf)
    return Trajectory(dt, np.concatenate(chunks, axis=0), seed, stream_id), None


def ensemble_hit(model: DiffusionModel, x0, dt: float, region_a: Region, region_b: Region,
                 max_steps: int, seed: int, stream_offset: int = 0, block: int = 2048):
    """Vectorized first-hit of two absorbing regions for a batch of starts.

    Returns ``labels`` (0 = hit A first, 1 = hit B first, -1 = no hit within
    max_steps) and ``hit_steps`` (the absorbing sample index, or -1).  States
    are not stored; lane j consumes stream ``stream_offset + j``.
    """
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    L = x.shape[0]
    labels = np.full(L, -1, dtype=np.int64)
    hit_steps = np.full(L, -1, dtype=np.int64)

    in_a = region_a.inside_closure(x)
    in_b = region_b.inside_closure(x)
    labels[in_a] = 0
    labels[in_b] = 1
    hit_steps[in_a | in_b] = 0
    active = np.where(labels < 0)[0]

    noise = [_NoiseBlocks(seed, stream_offset + j, model.dim, block) for j in range(L)]
    c = np.sqrt(2.0 * dt) * model.sigma
    lo, hi = model.box.lo, model.box.hi
    k = 0
    while active.size and k < max_steps:
        nb = min(block, max_steps - k)
        blk = np.stack([noise[j].take_block(nb) for j in active], axis=1)
        xa = x[active]
        done_any = False
        for j in range(nb):
            xa = xa + model.drift(xa) * dt + c * blk[j]
            k_here = k + j + 1
            if np.any((xa < lo) | (xa > hi)):
                lane = int(np.argmax(np.any((xa < lo) | (xa > hi), axis=1)))
                raise BoxExitError(k_here, stream_offset + int(active[lane]))
            hit_a = region_a.inside_closure(xa)
            hit_b = region_b.inside_closure(xa)
            hit = hit_a | hit_b
            if np.any(hit):
                gl = active[hit]
                labels[gl] = np.where(hit_b[hit], 1, 0)
                hit_steps[gl] = k_here
                done_any = True
                keep = ~hit
                x[active] = xa
                active = active[keep]
                xa = xa[keep]
                blk = blk[:, keep]
                if active.size == 0:
                    break
        x[active] = xa
        k += nb
        if done_any and active.size:
            # reorder noise consumption is lane-local, nothing to do
            pass
    return labels, hit_steps
