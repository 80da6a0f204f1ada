"""Synthetic task generators, the sampleable dataset abstraction, file formats.

Classification tasks are Gaussian-textured class prototypes plus per-example
noise scaled by a difficulty knob; segmentation tasks are non-overlapping
bright rectangles/disks on a dark noisy background, kept one pixel apart so
connected components recover the instances exactly. Generation derives one
RNG stream per example from (seed, example index), so parallel and serial
generation produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .metrics import InstanceMask
from .tensorio import BlockWriter, read_file

DATASET_MAGIC = b"MTLD"
DATASET_VERSION = 1
MASK_MAGIC = b"MTLM"
MASK_VERSION = 1

KIND_CLASSIFICATION = "classification"
KIND_BINARY_SEG = "binary-segmentation"
KIND_INSTANCE_SEG = "instance-segmentation"

_KIND_CODES = {KIND_CLASSIFICATION: 0, KIND_BINARY_SEG: 1, KIND_INSTANCE_SEG: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

# kind -> (loss, metric); the only consistent combinations
_KIND_TABLE = {
    KIND_CLASSIFICATION: ("softmax-ce", "accuracy"),
    KIND_BINARY_SEG: ("sigmoid-bce", "PQ"),
    KIND_INSTANCE_SEG: ("pixel-softmax-ce", "PQ"),
}

TRAIN, EVAL = 0, 1


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    kind: str
    num_classes: int
    input_shape: tuple[int, ...]
    loss: str = ""
    metric: str = ""

    def __post_init__(self):
        if self.kind not in _KIND_TABLE:
            raise ValueError(f"unknown task kind {self.kind!r}")
        loss, metric = _KIND_TABLE[self.kind]
        object.__setattr__(self, "loss", self.loss or loss)
        object.__setattr__(self, "metric", self.metric or metric)
        if (self.loss, self.metric) != (loss, metric):
            raise ValueError(
                f"inconsistent task spec: kind {self.kind} requires loss {loss} "
                f"and metric {metric}, got {self.loss}/{self.metric}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))


@dataclass
class InstanceTargets:
    """Instance id maps plus, per example, the class of each id (ids 1..k)."""

    id_maps: np.ndarray               # (n, H, W) int32
    class_tables: list[np.ndarray]    # each (k_e,) int32

    def class_map(self, idx: int) -> np.ndarray:
        lut = np.concatenate([[0], self.class_tables[idx]]).astype(np.int32)
        return lut[self.id_maps[idx]]

    def mask(self, idx: int) -> InstanceMask:
        table = self.class_tables[idx]
        return InstanceMask(self.id_maps[idx],
                            {i + 1: int(c) for i, c in enumerate(table)})


@dataclass
class TaskDataset:
    """One task's sampleable example store with disjoint train/eval splits."""

    spec: TaskSpec
    inputs: np.ndarray     # (n, *input_shape) float64
    targets: np.ndarray | InstanceTargets
    split: np.ndarray      # (n,) int32, 0 = train, 1 = eval
    seed: int
    _train_idx: np.ndarray = field(init=False, repr=False)
    _eval_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.split = np.ascontiguousarray(self.split, dtype=np.int32)
        self._train_idx = np.flatnonzero(self.split == TRAIN)
        self._eval_idx = np.flatnonzero(self.split == EVAL)
        self._validate_targets()

    def _validate_targets(self):
        k = self.spec.num_classes
        if self.spec.kind == KIND_CLASSIFICATION:
            if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= k):
                raise ValueError(f"label out of range for {k} classes")
        elif self.spec.kind == KIND_BINARY_SEG:
            if not np.isin(self.targets, (0.0, 1.0)).all():
                raise ValueError("binary masks must be 0/1 valued")
        else:
            for table in self.targets.class_tables:
                if table.size and (table.min() < 1 or table.max() > k):
                    raise ValueError(f"instance class out of range for {k} classes")

    def indices(self, split: str) -> np.ndarray:
        if split == "train":
            return self._train_idx
        if split == "eval":
            return self._eval_idx
        raise ValueError(f"unknown split {split!r}")

    def gt_mask(self, idx: int) -> InstanceMask:
        """Ground-truth instances for one example of a segmentation task."""
        if self.spec.kind == KIND_INSTANCE_SEG:
            return self.targets.mask(idx)
        if self.spec.kind == KIND_BINARY_SEG:
            from .metrics import connected_components
            return connected_components(self.targets[idx])
        raise ValueError("classification tasks have no instance masks")

    def batch_targets(self, idx: np.ndarray):
        if self.spec.kind == KIND_CLASSIFICATION:
            return self.targets[idx]
        if self.spec.kind == KIND_BINARY_SEG:
            return self.targets[idx]
        return np.stack([self.targets.class_map(i) for i in idx])

    def equals(self, other: "TaskDataset") -> bool:
        if self.spec != other.spec or self.seed != other.seed:
            return False
        if not (np.array_equal(self.split, other.split)
                and np.array_equal(self.inputs, other.inputs)):
            return False
        if self.spec.kind == KIND_INSTANCE_SEG:
            return (np.array_equal(self.targets.id_maps, other.targets.id_maps)
                    and len(self.targets.class_tables) == len(other.targets.class_tables)
                    and all(np.array_equal(a, b) for a, b in
                            zip(self.targets.class_tables, other.targets.class_tables)))
        return np.array_equal(self.targets, other.targets)


def sample_batch(ds: TaskDataset, split: str, batch_size: int, rng):
    """Uniform sampling with replacement from one split.

    Returns (inputs tensor, targets); targets are integer labels, 0/1 float
    masks, or per-pixel class maps depending on the task kind.
    """
    idx = ds.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} of task {ds.spec.task_id} is empty")
    chosen = idx[np.asarray(rng.integers(0, idx.size, size=batch_size))]
    return Tensor(ds.inputs[chosen]), ds.batch_targets(chosen)


# ---------------------------------------------------------------------------
# generators

def _example_rng(seed: int, stream: int, idx: int = 0):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, idx)))


def gen_classification_task(num_classes: int, input_shape, n_train: int, n_eval: int,
                            difficulty: float, seed: int, task_id: int = 0,
                            name: str | None = None) -> TaskDataset:
    """K Gaussian-textured prototypes plus white noise scaled by difficulty.

    At difficulty 0 every example equals its class prototype, so the task is
    exactly separable. Labels are balanced within one count per split.
    """
    if num_classes < 2:
        raise ValueError("classification needs at least 2 classes")
    if n_train < num_classes or n_eval < 1:
        raise ValueError("need at least one example per class in train, one in eval")
    input_shape = tuple(int(d) for d in input_shape)
    spec = TaskSpec(task_id, name or f"patch_k{num_classes}_t{task_id}",
                    KIND_CLASSIFICATION, num_classes, input_shape)

    proto_rng = _example_rng(seed, 0)
    sigma = (0,) * (len(input_shape) - 2) + (2.0, 2.0)
    protos = []
    for _ in range(num_classes):
        p = ndimage.gaussian_filter(proto_rng.standard_normal(input_shape), sigma=sigma)
        protos.append(p / p.std())
    protos = np.stack(protos)

    n = n_train + n_eval
    labels = np.empty(n, dtype=np.int32)
    labels[:n_train] = np.arange(n_train) % num_classes
    labels[n_train:] = np.arange(n_eval) % num_classes
    shuffle_rng = _example_rng(seed, 2)
    labels[:n_train] = labels[:n_train][shuffle_rng.permutation(n_train)]
    labels[n_train:] = labels[n_train:][shuffle_rng.permutation(n_eval)]

    inputs = np.empty((n,) + input_shape)
    for i in range(n):
        noise = _example_rng(seed, 1, i).standard_normal(input_shape)
        inputs[i] = protos[labels[i]] + difficulty * noise

    split = np.concatenate([np.full(n_train, TRAIN, np.int32),
                            np.full(n_eval, EVAL, np.int32)])
    return TaskDataset(spec, inputs, labels, split, seed)


def _class_colors(num_classes: int, channels: int, rng) -> np.ndarray:
    """Distinct per-class colors, pairwise separated for pixel-wise learnability."""
    colors = []
    while len(colors) < num_classes:
        c = rng.uniform(0.35, 1.0, size=channels)
        if all(np.abs(c - prev).max() >= 0.25 for prev in colors):
            colors.append(c)
    return np.stack(colors)


def _place_instances(rng, size: int, max_instances: int):
    """Non-overlapping shape footprints with a one-pixel gap between them."""
    ids = np.zeros((size, size), dtype=np.int32)
    occupied = np.zeros((size, size), dtype=bool)
    n_want = int(rng.integers(1, max_instances + 1))
    placed = 0
    for _ in range(n_want):
        for _attempt in range(40):
            side = int(rng.integers(6, max(8, size // 3) + 1))
            r = int(rng.integers(0, size - side + 1))
            c = int(rng.integers(0, size - side + 1))
            grown = occupied[max(0, r - 1):r + side + 1, max(0, c - 1):c + side + 1]
            if grown.any():
                continue
            footprint = np.zeros((side, side), dtype=bool)
            if rng.random() < 0.5:
                footprint[:] = True  # rectangle
            else:
                yy, xx = np.ogrid[:side, :side]
                rad = side / 2.0
                footprint[(yy - rad + 0.5) ** 2 + (xx - rad + 0.5) ** 2 <= rad * rad] = True
            placed += 1
            ids[r:r + side, c:c + side][footprint] = placed
            occupied[r:r + side, c:c + side] |= footprint
            break
    return ids, placed


def gen_segmentation_task(kind: str, image_size: int, max_instances: int,
                          num_classes: int, n_train: int, n_eval: int, seed: int,
                          task_id: int = 0, name: str | None = None) -> TaskDataset:
    """Bright non-overlapping shapes on a dark noisy background.

    Instance tasks color each shape by its class so a per-pixel classifier
    can recover the labels; binary tasks store the 0/1 foreground mask.
    """
    if kind not in (KIND_BINARY_SEG, KIND_INSTANCE_SEG):
        raise ValueError(f"kind must be a segmentation kind, got {kind!r}")
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    if max_instances < 1:
        raise ValueError("max_instances must be >= 1")
    channels = 3
    k = 1 if kind == KIND_BINARY_SEG else num_classes
    word = "binary" if kind == KIND_BINARY_SEG else "instance"
    spec = TaskSpec(task_id, name or f"shapes_{word}_t{task_id}",
                    kind, k, (channels, image_size, image_size))
    colors = _class_colors(k, channels, _example_rng(seed, 0))

    n = n_train + n_eval
    inputs = np.empty((n, channels, image_size, image_size))
    id_maps = np.empty((n, image_size, image_size), dtype=np.int32)
    class_tables = []
    for i in range(n):
        rng = _example_rng(seed, 1, i)
        ids, placed = _place_instances(rng, image_size, max_instances)
        table = rng.integers(1, k + 1, size=placed).astype(np.int32)
        img = 0.08 + 0.03 * rng.standard_normal((channels, image_size, image_size))
        for inst in range(1, placed + 1):
            shade = rng.uniform(0.75, 1.0)
            mask = ids == inst
            img[:, mask] = colors[table[inst - 1] - 1][:, None] * shade
        img += 0.02 * rng.standard_normal(img.shape)
        inputs[i] = img
        id_maps[i] = ids
        class_tables.append(table)

    split = np.concatenate([np.full(n_train, TRAIN, np.int32),
                            np.full(n_eval, EVAL, np.int32)])
    if kind == KIND_BINARY_SEG:
        targets = (id_maps > 0).astype(np.float64)
        return TaskDataset(spec, inputs, targets, split, seed)
    return TaskDataset(spec, inputs, InstanceTargets(id_maps, class_tables), split, seed)


# paper-style task mix: seven classification arities plus four segmentation tasks
CLASSIFICATION_ARITIES = (2, 9, 6, 3, 4, 3, 5)
DEFAULT_INPUT_SHAPE = (3, 32, 32)
DEFAULT_DIFFICULTY = 0.35


def default_suite(seed: int, n_train: int = 128, n_eval: int = 64) -> list[TaskDataset]:
    """The default eleven-task suite: 7 classification + 1 instance + 3 binary."""
    tasks = []
    for tid, k in enumerate(CLASSIFICATION_ARITIES):
        tasks.append(gen_classification_task(
            k, DEFAULT_INPUT_SHAPE, n_train, n_eval, DEFAULT_DIFFICULTY,
            seed=_task_seed(seed, tid), task_id=tid, name=f"patch_k{k}_t{tid}"))
    size = DEFAULT_INPUT_SHAPE[1]
    tasks.append(gen_segmentation_task(
        KIND_INSTANCE_SEG, size, 3, 3, n_train, n_eval,
        seed=_task_seed(seed, 7), task_id=7, name="shapes_instance"))
    for j in range(3):
        tid = 8 + j
        tasks.append(gen_segmentation_task(
            KIND_BINARY_SEG, size, 3, 1, n_train, n_eval,
            seed=_task_seed(seed, tid), task_id=tid, name=f"shapes_binary_{j}"))
    return tasks


def _task_seed(seed: int, task_id: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(task_id,))
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# file format

def save_dataset(path, ds: TaskDataset) -> None:
    w = BlockWriter(DATASET_MAGIC, DATASET_VERSION)
    w.u16(ds.spec.task_id)
    w.string(ds.spec.name)
    w.u8(_KIND_CODES[ds.spec.kind])
    w.u16(ds.spec.num_classes)
    w.u8(len(ds.spec.input_shape))
    for d in ds.spec.input_shape:
        w.u32(d)
    w.u64(ds.seed)
    w.u32(len(ds.inputs))
    w.tensor(ds.split)
    w.tensor(ds.inputs)
    if ds.spec.kind == KIND_CLASSIFICATION:
        w.tensor(np.asarray(ds.targets, dtype=np.int32))
    elif ds.spec.kind == KIND_BINARY_SEG:
        w.tensor(ds.targets)
    else:
        w.tensor(ds.targets.id_maps)
        for table in ds.targets.class_tables:
            w.tensor(table)
    w.save(path)


def load_dataset(path) -> TaskDataset:
    r = read_file(path, DATASET_MAGIC, DATASET_VERSION)
    task_id = r.u16()
    name = r.string()
    kind = _KIND_NAMES[r.u8()]
    k = r.u16()
    ndim = r.u8()
    input_shape = tuple(r.u32() for _ in range(ndim))
    seed = r.u64()
    n = r.u32()
    split = r.tensor()
    inputs = r.tensor()
    if kind == KIND_CLASSIFICATION:
        targets = r.tensor()
    elif kind == KIND_BINARY_SEG:
        targets = r.tensor()
    else:
        id_maps = r.tensor()
        tables = [r.tensor() for _ in range(n)]
        targets = InstanceTargets(id_maps, tables)
    r.finish()
    spec = TaskSpec(task_id, name, kind, k, input_shape)
    return TaskDataset(spec, inputs, targets, split, seed)


def save_mask(path, mask: InstanceMask) -> None:
    """Instance mask container: id map plus (id, class) pairs."""
    w = BlockWriter(MASK_MAGIC, MASK_VERSION)
    w.tensor(mask.ids)
    pairs = np.array(sorted(mask.classes.items()), dtype=np.int32).reshape(-1, 2)
    w.tensor(pairs)
    w.save(path)


def load_mask(path) -> InstanceMask:
    r = read_file(path, MASK_MAGIC, MASK_VERSION)
    ids = r.tensor()
    pairs = r.tensor()
    r.finish()
    return InstanceMask(ids, {int(i): int(c) for i, c in pairs})
