"""The multi-task training loop.

Each iteration samples a task index from Cat(k, alpha), draws a batch from
that task's dataset, runs the shared encoder plus the sampled task's
decoder, and applies Adam to the encoder group and that decoder group
only. Every iteration derives its own RNG stream from (seed, t), so runs
are reproducible and checkpoint-resume continues bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .diagnostics import GradTrace
from .model import (EncoderModel, ParamStore, build_classification_decoder,
                    build_segmentation_decoder, forward_task_logits)
from .optim import AdamState, adam_init, adam_step
from .tasks import KIND_CLASSIFICATION, KIND_INSTANCE_SEG, TaskDataset, sample_batch
from .tensorio import BlockWriter, read_file

CHECKPOINT_MAGIC = b"MTLC"
CHECKPOINT_VERSION = 1
TRACE_MAGIC = b"MTLG"
TRACE_VERSION = 1

_ITER_STREAM = 100  # spawn-key tag for per-iteration RNG streams


class TrainError(RuntimeError):
    """Training failure; carries the 1-based iteration index."""

    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {cause}")


@dataclass
class SamplerConfig:
    """Probability vector over the k tasks; normalized on construction."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("alpha must be a non-empty 1-D probability vector")
        if (a < 0).any():
            raise ValueError("alpha entries must be >= 0")
        total = a.sum()
        if total <= 0:
            raise ValueError("alpha must have positive mass")
        self.alpha = a / total

    @property
    def k(self) -> int:
        return self.alpha.size

    @classmethod
    def uniform(cls, k: int) -> "SamplerConfig":
        return cls(np.full(k, 1.0 / k))


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 8
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0   # 0 disables periodic checkpoints
    diagnostics: str = "off"    # off | exact | sketch
    sketch_dim: int = 4096

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.diagnostics not in ("off", "exact", "sketch"):
            raise ValueError(f"diagnostics must be off/exact/sketch, got {self.diagnostics!r}")


@dataclass(frozen=True)
class TrainRecord:
    t: int
    task: int
    loss: float


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)
    trace: GradTrace | None = None


def sample_task(sampler: SamplerConfig, rng) -> int:
    """Inverse-CDF draw over alpha with index-ascending cumulative order."""
    u = rng.random()
    acc = 0.0
    for i, p in enumerate(sampler.alpha):
        acc += p
        if u < acc:
            return i
    return sampler.k - 1  # u landed in the last bin's rounding slack


def iteration_rng(seed: int, t: int):
    """The dedicated RNG stream for iteration t of a run with this seed."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_ITER_STREAM, t)))


def build_decoders(tasks: list[TaskDataset], encoder: EncoderModel,
                   store: ParamStore, rng) -> list:
    """One decoder per task, sized from the task spec and encoder geometry."""
    decoders = []
    for ds in tasks:
        spec = ds.spec
        if spec.kind == KIND_CLASSIFICATION:
            decoders.append(build_classification_decoder(
                spec.task_id, encoder.feature_dim, spec.num_classes, "softmax",
                store, rng))
        else:
            # instance tasks predict K classes plus background per pixel
            k = spec.num_classes + 1 if spec.kind == KIND_INSTANCE_SEG else 1
            c, h, w = encoder.map_shape
            ih, iw = spec.input_shape[-2:]
            factors = []
            while h * int(np.prod(factors or [1])) * 2 <= ih:
                factors.append(2)
            decoders.append(build_segmentation_decoder(
                spec.task_id, encoder.map_shape, k, factors, (ih, iw), store, rng))
    return decoders


def init_adam_states(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                     beta2: float = 0.999, eps: float = 1e-8) -> dict[str, AdamState]:
    return {g: adam_init(store.group(g), lr=lr, beta1=beta1, beta2=beta2, eps=eps)
            for g in store.group_names()}


def _task_loss(decoder, logits: Tensor, y) -> Tensor:
    if decoder.kind == "classification":
        if decoder.nonlinearity == "softmax":
            return ad.cross_entropy(logits, y)
        targets = np.asarray(y, dtype=np.float64)
        if targets.ndim == 1:
            k = decoder.num_classes
            targets = np.eye(k)[np.asarray(y, dtype=np.int64)] if k > 1 else targets[:, None]
        return ad.binary_cross_entropy(logits, targets)
    if decoder.nonlinearity == "softmax":
        return ad.cross_entropy(logits, np.asarray(y, dtype=np.int64))
    return ad.binary_cross_entropy(logits, np.asarray(y, dtype=np.float64)[:, None, :, :])


def flatten_group_grads(store: ParamStore, group: str,
                        grads: dict[str, Tensor]) -> np.ndarray:
    """Gradients of one group as a flat vector in sorted parameter-id order.

    Parameters missing from the GradMap contribute zeros so the vector
    dimension is the same on every iteration.
    """
    parts = []
    for pid in store.sorted_ids(group):
        g = grads.get(pid)
        parts.append(np.ravel(g.data) if g is not None else np.zeros(store.get(pid).size))
    return np.concatenate(parts) if parts else np.zeros(0)


def train_step(encoder: EncoderModel, decoders: list, store: ParamStore,
               adam_states: dict[str, AdamState], task: int, batch):
    """One optimization step on the sampled task.

    Updates the encoder group and the sampled decoder group; all other
    decoder groups stay bit-identical. Returns (loss value, encoder
    GradMap) with the raw pre-update gradients for diagnostics.
    """
    x, y = batch
    decoder = decoders[task]
    graph = Graph()
    logits = forward_task_logits(encoder, decoder, x, graph)
    loss = _task_loss(decoder, logits, y)
    grads = ad.backward(loss)

    enc_grads = {pid: g for pid, g in grads.items()
                 if store.owner(pid) == encoder.group}
    dec_grads = {pid: g for pid, g in grads.items()
                 if store.owner(pid) == decoder.group}
    if enc_grads:
        adam_step(adam_states[encoder.group], store.group(encoder.group), enc_grads)
    if dec_grads:
        adam_step(adam_states[decoder.group], store.group(decoder.group), dec_grads)
    return loss.item(), enc_grads


def train(tasks: list[TaskDataset], encoder: EncoderModel, decoders: list,
          store: ParamStore, adam_states: dict[str, AdamState],
          sampler: SamplerConfig, config: TrainConfig, start_t: int = 0,
          checkpoint_path=None, log: TrainLog | None = None) -> TrainLog:
    """Run iterations start_t+1 .. iterations of the sampled-task loop.

    Fully deterministic given (seed, config, datasets): the task sequence,
    batches, and final parameters are reproducible, and resuming from a
    checkpoint at any t matches the uninterrupted run bit-exactly.
    """
    k = len(tasks)
    if not (k == len(decoders) == sampler.k):
        raise ValueError(
            f"task/decoder/alpha counts differ: {k}/{len(decoders)}/{sampler.k}")
    if log is None:
        log = TrainLog()
        if config.diagnostics != "off":
            dim = store.total_size(encoder.group)
            log.trace = GradTrace(num_tasks=k, dim=dim, mode=config.diagnostics,
                                  sketch_dim=config.sketch_dim,
                                  sketch_seed=config.seed)

    for t in range(start_t + 1, config.iterations + 1):
        try:
            rng = iteration_rng(config.seed, t)
            i = sample_task(sampler, rng)
            x, y = sample_batch(tasks[i], "train", config.batch_size, rng)
            loss, enc_grads = train_step(encoder, decoders, store, adam_states, i, (x, y))
        except Exception as exc:  # attach the failing iteration index
            raise TrainError(t, exc) from exc
        log.records.append(TrainRecord(t, i, loss))
        if log.trace is not None:
            log.trace.append(t, i, flatten_group_grads(store, encoder.group, enc_grads))
        if (checkpoint_path and config.checkpoint_every
                and t % config.checkpoint_every == 0):
            save_checkpoint(checkpoint_path, store, adam_states, config.seed, t)
    return log


# ---------------------------------------------------------------------------
# checkpointing

@dataclass
class Checkpoint:
    seed: int
    t: int
    groups: dict[str, dict]  # name -> {hyper, t, params: {id: (theta, m, v)}}


def save_checkpoint(path, store: ParamStore, adam_states: dict[str, AdamState],
                    seed: int, t: int) -> None:
    """Everything needed to resume: parameters, Adam moments and counters,
    and the RNG state, which under per-iteration derived streams is just
    (seed, t)."""
    w = BlockWriter(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    w.u64(seed)
    w.u64(t)
    groups = store.group_names()
    w.u16(len(groups))
    for name in groups:
        st = adam_states[name]
        w.string(name)
        w.f64(st.lr)
        w.f64(st.beta1)
        w.f64(st.beta2)
        w.f64(st.eps)
        w.u64(st.t)
        ids = store.sorted_ids(name)
        w.u32(len(ids))
        for pid in ids:
            w.string(pid)
            w.tensor(store.get(pid).data)
            w.tensor(st.m[pid])
            w.tensor(st.v[pid])
    w.save(path)


def load_checkpoint(path) -> Checkpoint:
    r = read_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    seed = r.u64()
    t = r.u64()
    groups = {}
    for _ in range(r.u16()):
        name = r.string()
        hyper = dict(lr=r.f64(), beta1=r.f64(), beta2=r.f64(), eps=r.f64())
        gt = r.u64()
        params = {}
        for _ in range(r.u32()):
            pid = r.string()
            params[pid] = (r.tensor(), r.tensor(), r.tensor())
        groups[name] = dict(hyper=hyper, t=gt, params=params)
    r.finish()
    return Checkpoint(seed=seed, t=t, groups=groups)


def apply_checkpoint(ck: Checkpoint, store: ParamStore,
                     adam_states: dict[str, AdamState]) -> None:
    """Overwrite freshly built models/states with checkpointed values."""
    if set(ck.groups) != set(store.group_names()):
        raise ValueError(
            f"checkpoint groups {sorted(ck.groups)} do not match model groups "
            f"{store.group_names()}")
    for name, gdata in ck.groups.items():
        if set(gdata["params"]) != set(store.sorted_ids(name)):
            raise ValueError(f"checkpoint parameters for group {name!r} do not "
                             f"match the model")
        st = adam_states[name]
        st.lr = gdata["hyper"]["lr"]
        st.beta1 = gdata["hyper"]["beta1"]
        st.beta2 = gdata["hyper"]["beta2"]
        st.eps = gdata["hyper"]["eps"]
        st.t = gdata["t"]
        for pid, (theta, m, v) in gdata["params"].items():
            store.set(pid, Tensor(theta))
            st.m[pid] = m
            st.v[pid] = v


# ---------------------------------------------------------------------------
# gradient-trace persistence (exact or sketch vectors for cmd_diagnose)

def save_trace(path, trace: GradTrace) -> None:
    w = BlockWriter(TRACE_MAGIC, TRACE_VERSION)
    w.u16(trace.num_tasks)
    w.u32(trace.dim)
    w.string(trace.mode)
    w.u32(trace.sketch_dim)
    w.u64(trace.sketch_seed)
    w.u32(len(trace.entries))
    ts = np.array([e[0] for e in trace.entries], dtype=np.int32)
    tasks = np.array([e[1] for e in trace.entries], dtype=np.int32)
    w.tensor(ts)
    w.tensor(tasks)
    vecs = np.stack([e[2] for e in trace.entries]) if trace.entries else \
        np.zeros((0, trace.stored_dim))
    w.tensor(vecs)
    w.save(path)


def load_trace(path) -> GradTrace:
    r = read_file(path, TRACE_MAGIC, TRACE_VERSION)
    num_tasks = r.u16()
    dim = r.u32()
    mode = r.string()
    sketch_dim = r.u32()
    sketch_seed = r.u64()
    n = r.u32()
    ts = r.tensor()
    tasks = r.tensor()
    vecs = r.tensor()
    r.finish()
    trace = GradTrace(num_tasks=num_tasks, dim=dim, mode=mode,
                      sketch_dim=sketch_dim, sketch_seed=sketch_seed)
    trace.entries = [(int(ts[i]), int(tasks[i]), vecs[i]) for i in range(n)]
    return trace
