"""In-process simulation of K data-parallel training workers.

Two strategies are modelled:

``replicated``
    every worker holds a full model copy; gradients are averaged with an
    all-reduce and each replica applies the same optimizer step.
``sharded``
    the flat parameter vector is split into K contiguous shards. Each step
    all-gathers the shards into full parameters, runs forward/backward on the
    worker's batch slice, reduce-scatters the gradients so each worker holds
    only its shard's averaged gradient, and steps its shard locally.

All reductions follow a fixed binary-tree order over worker ids, so results
do not depend on how worker computation is scheduled.
"""
from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .optim import STEP_FNS, OptimSpec, Optimizer, decays, init_state


class ReplicaDriftError(RuntimeError):
    pass


class ShardCoverageError(ValueError):
    pass


def tree_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise sum in a fixed tree: ((0+1)+(2+3))+... ; an odd tail is carried up."""
    level = [np.asarray(a) for a in arrays]
    if not level:
        raise ValueError("nothing to reduce")
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def all_reduce_mean(grads: Sequence[np.ndarray]) -> np.ndarray:
    shapes = {np.shape(g) for g in grads}
    if len(shapes) != 1:
        raise ValueError(f"all_reduce_mean: workers disagree on shape: {sorted(shapes)}")
    return tree_sum(grads) / len(grads)


@dataclass(frozen=True)
class ShardMap:
    """K contiguous ranges partitioning ``[0, P)``; sizes differ by at most one."""

    size: int
    k: int
    ranges: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        if not self.ranges:
            base, extra = divmod(self.size, self.k)
            out, start = [], 0
            for i in range(self.k):
                end = start + base + (1 if i < extra else 0)
                out.append((start, end))
                start = end
            object.__setattr__(self, "ranges", tuple(out))
        self.validate()

    def validate(self) -> None:
        if len(self.ranges) != self.k:
            raise ShardCoverageError(f"{len(self.ranges)} ranges for {self.k} workers")
        pos = 0
        for s, e in self.ranges:
            if s != pos or e < s:
                raise ShardCoverageError(f"ranges {self.ranges} do not tile [0, {self.size}) contiguously")
            pos = e
        if pos != self.size:
            raise ShardCoverageError(f"ranges cover [0, {pos}) but parameter vector has {self.size} entries")
        sizes = [e - s for s, e in self.ranges]
        if max(sizes) - min(sizes) > 1:
            raise ShardCoverageError(f"unbalanced shard sizes {sizes}")


def reduce_scatter_mean(flat_grads: Sequence[np.ndarray], smap: ShardMap) -> list[np.ndarray]:
    k = len(flat_grads)
    return [tree_sum([g[s:e] for g in flat_grads]) / k for s, e in smap.ranges]


def all_gather(shards: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(shards)


class FlatLayout:
    """Maps a list of named tensors onto one flat vector."""

    def __init__(self, named):
        self.names = [n for n, _ in named]
        self.shapes = [p.shape for _, p in named]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.total = int(self.offsets[-1])

    def flatten(self, arrays) -> np.ndarray:
        return np.concatenate([np.asarray(a).reshape(-1) for a in arrays])

    def unflatten(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[self.offsets[i]:self.offsets[i + 1]].reshape(self.shapes[i]) for i in range(len(self.names))]

    def pieces(self, start: int, end: int):
        """Tensor segments overlapping ``[start, end)`` as (tensor index, lo, hi) in global coords."""
        out = []
        for i in range(len(self.names)):
            lo, hi = max(start, self.offsets[i]), min(end, self.offsets[i + 1])
            if lo < hi:
                out.append((i, int(lo), int(hi)))
        return out


def checksum(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


LossFn = Callable[[object, tuple, np.ndarray], object]


class WorkerGroup:
    """K logical workers sharing one training job.

    ``make_model()`` must return identically initialised models on every call.
    ``loss_fn(model, batch_slice, sample_ids)`` returns a scalar Tensor equal to
    the *mean* loss over the slice, so that averaging worker gradients gives
    the gradient of the global batch mean.
    """

    def __init__(self, make_model: Callable[[], object], loss_fn: LossFn, k: int, strategy: str,
                 optim: OptimSpec, lr_scales: dict[str, float] | None = None, threads: int = 1):
        if k < 1:
            raise ValueError("need at least one worker")
        if strategy not in ("replicated", "sharded"):
            raise ValueError(f"unknown strategy {strategy!r}")
        if strategy == "sharded" and optim.kind == "lars":
            raise ValueError("sharded strategy needs an elementwise optimizer (adamw or sgd); LARS uses whole-tensor norms")
        self.k, self.strategy, self.optim_spec = k, strategy, optim
        self.loss_fn = loss_fn
        self.threads = max(1, threads)
        self.models = [make_model() for _ in range(k)]
        named = list(self.models[0].named_parameters())
        self.layout = FlatLayout(named)
        self.itemsize = named[0][1].data.dtype.itemsize
        self.steps = 0
        self.samples = 0
        self.comm_bytes = 0
        scales = lr_scales or {}
        self._scales = [float(scales.get(n, 1.0)) for n in self.layout.names]
        self._decay = [decays(n, p.data) for n, p in named]
        if strategy == "replicated":
            self.optims = [Optimizer(list(m.named_parameters()), optim, scales) for m in self.models]
            self._check_replicas()
        else:
            self.shard_map = ShardMap(self.layout.total, k)
            flat = self.layout.flatten([p.data for _, p in named])
            self.shards = [flat[s:e].copy() for s, e in self.shard_map.ranges]
            self._pieces = [self.layout.pieces(s, e) for s, e in self.shard_map.ranges]
            self.shard_states = [init_state([np.empty(hi - lo, dtype=flat.dtype) for _, lo, hi in pcs])
                                 for pcs in self._pieces]

    # -- helpers -----------------------------------------------------------
    def _params(self, worker: int) -> list[np.ndarray]:
        return [p.data for p in self.models[worker].parameters()]

    def flat_params(self) -> np.ndarray:
        if self.strategy == "sharded":
            return all_gather(self.shards)
        return self.layout.flatten(self._params(0))

    def _check_replicas(self) -> None:
        sums = {checksum(self._params(i)) for i in range(self.k)}
        if len(sums) != 1:
            raise ReplicaDriftError(f"{len(sums)} distinct parameter checksums across {self.k} replicas")

    def _worker_grads(self, batch: tuple, ids: np.ndarray) -> tuple[list[list[np.ndarray]], list[float]]:
        n = len(ids)
        if n % self.k:
            raise ValueError(f"global batch {n} not divisible by {self.k} workers")
        per = n // self.k

        def run(w):
            sl = slice(w * per, (w + 1) * per)
            model = self.models[w]
            model.zero_grad()
            loss = self.loss_fn(model, tuple(b[sl] for b in batch), ids[sl])
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in model.parameters()]
            return grads, loss.item()

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                results = list(ex.map(run, range(self.k)))
        else:
            results = [run(w) for w in range(self.k)]
        return [r[0] for r in results], [r[1] for r in results]

    def _comm_per_worker(self) -> int:
        return 2 * (self.k - 1) * self.layout.total * self.itemsize // self.k

    def optimizer_state(self) -> dict[str, np.ndarray]:
        """Full-size optimizer arrays keyed like :meth:`Optimizer.state_arrays`."""
        if self.strategy == "replicated":
            return self.optims[0].state_arrays()
        m = np.zeros(self.layout.total, dtype=self.shards[0].dtype)
        v = np.zeros_like(m)
        for w, pcs in enumerate(self._pieces):
            for j, (_, lo, hi) in enumerate(pcs):
                m[lo:hi] = self.shard_states[w]["m"][j]
                v[lo:hi] = self.shard_states[w]["v"][j]
        out = {"optim/step": np.array([self.shard_states[0]["step"]], dtype=np.int64)}
        for n, mm, vv in zip(self.layout.names, self.layout.unflatten(m), self.layout.unflatten(v)):
            out[f"optim/m/{n}"] = mm
            out[f"optim/v/{n}"] = vv
        return out

    def load_state(self, params: dict[str, np.ndarray], optim: dict[str, np.ndarray] | None = None) -> None:
        for model in self.models:
            model.load_state_dict(params)
        if self.strategy == "replicated":
            if optim is not None:
                for opt in self.optims:
                    opt.load_state_arrays(optim)
            self._check_replicas()
            return
        flat = self.layout.flatten([params[n] for n in self.layout.names])
        self.shards = [flat[s:e].copy() for s, e in self.shard_map.ranges]
        if optim is None:
            return
        m = self.layout.flatten([optim[f"optim/m/{n}"] for n in self.layout.names])
        v = self.layout.flatten([optim[f"optim/v/{n}"] for n in self.layout.names])
        for w, pcs in enumerate(self._pieces):
            st = self.shard_states[w]
            st["step"] = int(optim["optim/step"][0])
            for j, (_, lo, hi) in enumerate(pcs):
                st["m"][j][...] = m[lo:hi]
                st["v"][j][...] = v[lo:hi]

    # -- steps -------------------------------------------------------------
    def step(self, batch: tuple, ids: np.ndarray, lr: float) -> float:
        if self.strategy == "replicated":
            return train_step_replicated(self, batch, ids, lr)
        return train_step_sharded(self, batch, ids, lr)


def train_step_replicated(group: WorkerGroup, batch: tuple, ids: np.ndarray, lr: float) -> float:
    grads, losses = group._worker_grads(batch, np.asarray(ids))
    reduced = [all_reduce_mean([g[i] for g in grads]) for i in range(len(group.layout.names))]
    for model, opt in zip(group.models, group.optims):
        for p, g in zip(model.parameters(), reduced):
            p.grad = g.copy()
        opt.step(lr)
    group._check_replicas()
    group.steps += 1
    group.samples += len(ids)
    group.comm_bytes += group.k * group._comm_per_worker()
    return float(all_reduce_mean(np.asarray(losses)[:, None])[0])


def train_step_sharded(group: WorkerGroup, batch: tuple, ids: np.ndarray, lr: float) -> float:
    full = group.layout.unflatten(all_gather(group.shards))
    for model in group.models:
        for p, arr in zip(model.parameters(), full):
            p.data = arr.copy()
    grads, losses = group._worker_grads(batch, np.asarray(ids))
    flat_grads = [group.layout.flatten(g) for g in grads]
    shard_grads = reduce_scatter_mean(flat_grads, group.shard_map)
    step_fn = STEP_FNS[group.optim_spec.kind]
    for w, (s, _) in enumerate(group.shard_map.ranges):
        pcs = group._pieces[w]
        views = [group.shards[w][lo - s:hi - s] for _, lo, hi in pcs]
        gviews = [shard_grads[w][lo - s:hi - s] for _, lo, hi in pcs]
        step_fn(views, gviews, group.shard_states[w], group.optim_spec, lr,
                [group._scales[i] for i, _, _ in pcs], [group._decay[i] for i, _, _ in pcs],
                [group.layout.names[i] for i, _, _ in pcs])
    for model in group.models:
        for p, arr in zip(model.parameters(), group.layout.unflatten(all_gather(group.shards))):
            p.data = arr.copy()
    group.steps += 1
    group.samples += len(ids)
    group.comm_bytes += group.k * group._comm_per_worker()
    return float(all_reduce_mean(np.asarray(losses)[:, None])[0])


@dataclass
class ThroughputReport:
    strategy: str
    workers: int
    params: int
    steps: int
    samples_per_sec: float
    bytes_per_step_per_worker: int
    bytes_per_step_total: int

    def to_dict(self) -> dict:
        return dict(vars(self))


def comm_bytes_per_step(strategy: str, k: int, params: int, itemsize: int = 4) -> int:
    """Bytes each worker sends per step.

    replicated: ring all-reduce, i.e. a reduce-scatter plus an all-gather
    phase, each moving ``P (K-1)/K`` elements. sharded: one parameter
    all-gather plus one gradient reduce-scatter, the same volume.
    """
    if strategy not in ("replicated", "sharded"):
        raise ValueError(f"unknown strategy {strategy!r}")
    return 2 * (k - 1) * params * itemsize // k


def throughput_report(group: WorkerGroup, steps: int, wallclock: float) -> ThroughputReport:
    if steps < 1:
        raise ValueError("need at least one timed step")
    per = comm_bytes_per_step(group.strategy, group.k, group.layout.total, group.itemsize)
    samples = group.samples / max(group.steps, 1) * steps
    return ThroughputReport(group.strategy, group.k, group.layout.total, steps,
                            samples / max(wallclock, 1e-12), per, per * group.k)


def timed_steps(group: WorkerGroup, batches, lr: float) -> ThroughputReport:
    """Run ``batches`` (iterable of (batch, ids)) and report throughput."""
    t0 = time.perf_counter()
    n = 0
    for batch, ids in batches:
        group.step(batch, ids, lr)
        n += 1
    return throughput_report(group, n, time.perf_counter() - t0)

