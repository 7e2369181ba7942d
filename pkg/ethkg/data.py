"""
Temporal knowledge graph datasets: loading, inverse augmentation, snapshots,
history windows and synthetic generators.

Quadruples travel as int64 arrays of shape (n, 4) with columns
subject, relation, object, timestamp.
"""

from collections import defaultdict
from dataclasses import (
    dataclass,
    field,
)
import logging
from pathlib import Path
from typing import (
    Dict,
    Iterable,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from ethkg.errors import (
    DataError,
    InvalidArgumentError,
)


logger = logging.getLogger("ethkg.data")

PathLike = Union[str, Path]


class Quadruple(NamedTuple):
    """One timestamped fact"""

    subject: int
    relation: int
    object: int
    timestamp: int


@dataclass(frozen=True)
class Vocab:
    """Entity and relation id spaces; relation ids double after augmentation"""

    num_entities: int
    num_relations: int
    entity_names: Dict[int, str] = field(default_factory=dict, compare=False)
    relation_names: Dict[int, str] = field(default_factory=dict, compare=False)

    @property
    def num_relation_ids(self) -> int:
        """Relation ids including inverses"""
        return 2 * self.num_relations


@dataclass(frozen=True, eq=False)
class Snapshot:
    """All (s, r, o) triples sharing one timestamp, inverses included"""

    time: int
    triples: np.ndarray

    @property
    def subjects(self) -> np.ndarray:
        return self.triples[:, 0]

    @property
    def relations(self) -> np.ndarray:
        return self.triples[:, 1]

    @property
    def objects(self) -> np.ndarray:
        return self.triples[:, 2]

    def __len__(self) -> int:
        return int(self.triples.shape[0])

    def adjacency(self) -> Dict[int, List[Tuple[int, int]]]:
        """Neighbor lists N_o = [(s, r), ...] keyed by object, duplicates kept."""
        neighbors: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
        for s, r, o in self.triples.tolist():
            neighbors[o].append((s, r))
        return dict(neighbors)


@dataclass(frozen=True)
class HistoryWindow:
    """The m most recent snapshots strictly before a target snapshot"""

    snapshots: Tuple[Snapshot, ...]
    target: Snapshot


@dataclass
class TkgDataset:
    """Vocabulary plus the three chronological splits (raw, not augmented)"""

    vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    name: str = "dataset"

    def augmented(self, split: str) -> np.ndarray:
        return add_inverses(getattr(self, split), self.vocab)

    def snapshots(self, split: str) -> List[Snapshot]:
        """Snapshots of one split, inverse triples included"""
        return build_snapshots(self.augmented(split))

    def all_snapshots(self) -> List[Snapshot]:
        """Ground-truth snapshots of every split merged by timestamp"""
        quads = np.concatenate([self.train, self.valid, self.test], axis=0)
        return build_snapshots(add_inverses(quads, self.vocab))


def _empty_quads() -> np.ndarray:
    return np.zeros((0, 4), dtype=np.int64)


def read_quadruples(path: PathLike) -> np.ndarray:
    """Parse ``s r o t [ignored...]`` lines into an (n, 4) array."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    rows: List[Quadruple] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 4:
                raise DataError(
                    f"{path}:{line_no}: expected 's r o t', got {line.strip()!r}"
                )
            try:
                rows.append(Quadruple(*(int(p) for p in parts[:4])))
            except ValueError as e:
                raise DataError(f"{path}:{line_no}: non-integer field ({e})") from e
    if not rows:
        return _empty_quads()
    return np.asarray(rows, dtype=np.int64)


def read_stat(path: PathLike) -> Tuple[int, int]:
    """First line of the stat file: entity count and relation count."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing stat file: {path}")
    with open(path, encoding="utf-8") as f:
        parts = f.readline().split()
    try:
        return int(parts[0]), int(parts[1])
    except (IndexError, ValueError) as e:
        raise DataError(f"{path}:1: expected '|V| |E|'") from e


def _read_names(path: Path) -> Dict[int, str]:
    names: Dict[int, str] = {}
    if not path.exists():
        return names
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 2 and parts[1].strip().lstrip("-").isdigit():
                names[int(parts[1])] = parts[0]
    return names


def _validate_ids(quads: np.ndarray, vocab: Vocab, label: str) -> None:
    if quads.size == 0:
        return
    if quads[:, [0, 2]].min() < 0 or quads[:, [0, 2]].max() >= vocab.num_entities:
        raise DataError(
            f"{label}: entity id out of bounds (|V|={vocab.num_entities})"
        )
    if quads[:, 1].min() < 0 or quads[:, 1].max() >= vocab.num_relations:
        raise DataError(
            f"{label}: relation id out of bounds (|E|={vocab.num_relations})"
        )
    if quads[:, 3].min() < 0:
        raise DataError(f"{label}: negative timestamp")


def normalize_timestamps(splits: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Map raw timestamps to dense indices 0, 1, 2, ... shared by all splits."""
    stamps = np.unique(np.concatenate([s[:, 3] for s in splits]))
    out = []
    for split in splits:
        split = split.copy()
        split[:, 3] = np.searchsorted(stamps, split[:, 3])
        out.append(split)
    return out


def load_dataset(
    train_path: PathLike,
    valid_path: PathLike,
    test_path: PathLike,
    stat_path: PathLike,
) -> Tuple[Vocab, np.ndarray, np.ndarray, np.ndarray]:
    """Read the three splits and the stat file.

    Returns the vocabulary and the train/valid/test quadruple arrays with
    timestamps normalized to dense order-preserving indices.
    """
    num_entities, num_relations = read_stat(stat_path)
    root = Path(stat_path).parent
    vocab = Vocab(
        num_entities,
        num_relations,
        entity_names=_read_names(root / "entity2id.txt"),
        relation_names=_read_names(root / "relation2id.txt"),
    )
    splits = []
    named = (("train", train_path), ("valid", valid_path), ("test", test_path))
    for label, path in named:
        quads = read_quadruples(path)
        if label == "train" and quads.shape[0] == 0:
            raise DataError(f"{path}: empty split")
        _validate_ids(quads, vocab, str(path))
        splits.append(quads)
    train, valid, test = normalize_timestamps(splits)
    logger.info(
        f"Loaded |V|={num_entities} |E|={num_relations} "
        f"train={len(train)} valid={len(valid)} test={len(test)}"
    )
    return vocab, train, valid, test


def load_dataset_dir(path: PathLike, name: Optional[str] = None) -> TkgDataset:
    """Load ``train.txt valid.txt test.txt stat.txt`` from one directory."""
    root = Path(path)
    vocab, train, valid, test = load_dataset(
        root / "train.txt", root / "valid.txt", root / "test.txt", root / "stat.txt"
    )
    return TkgDataset(vocab, train, valid, test, name=name or root.name)


def iter_quadruples(quads: np.ndarray) -> Iterator[Quadruple]:
    """Rows of an (n, 4) array as Quadruple tuples of Python ints."""
    for row in np.asarray(quads, dtype=np.int64).tolist():
        yield Quadruple(*row)


def write_quadruples(path: PathLike, quads: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for fact in iter_quadruples(quads):
            f.write("\t".join(map(str, fact)) + "\n")


def write_dataset(path: PathLike, dataset: TkgDataset) -> Path:
    """Write a dataset in the directory layout ``load_dataset_dir`` reads."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_quadruples(root / "train.txt", dataset.train)
    write_quadruples(root / "valid.txt", dataset.valid)
    write_quadruples(root / "test.txt", dataset.test)
    with open(root / "stat.txt", "w", encoding="utf-8") as f:
        f.write(f"{dataset.vocab.num_entities}\t{dataset.vocab.num_relations}\n")
    return root


def add_inverses(quads: np.ndarray, vocab: Vocab) -> np.ndarray:
    """Append (o, r + |E|, s, t) for every (s, r, o, t)."""
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    if quads.size and quads[:, 1].max() >= vocab.num_relations:
        raise InvalidArgumentError(
            "relation ids already reach |E|; quadruples look inverse-augmented"
        )
    inverse = quads[:, [2, 1, 0, 3]].copy()
    inverse[:, 1] += vocab.num_relations
    return np.concatenate([quads, inverse], axis=0)


def build_snapshots(quads: np.ndarray) -> List[Snapshot]:
    """Group augmented quadruples by timestamp, ascending."""
    quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    if quads.shape[0] == 0:
        return []
    order = np.argsort(quads[:, 3], kind="stable")
    ordered = quads[order]
    times, starts = np.unique(ordered[:, 3], return_index=True)
    bounds = list(starts[1:]) + [ordered.shape[0]]
    return [
        Snapshot(int(t), ordered[start:end, :3].copy())
        for t, start, end in zip(times, starts, bounds)
    ]


def history_windows(
    snapshots: Sequence[Snapshot], m: int, targets: Iterable[Snapshot]
) -> Iterator[HistoryWindow]:
    """Yield, per target, up to m ground-truth snapshots that precede it."""
    if m < 1:
        raise InvalidArgumentError("history length m must be >= 1")
    pool = sorted(snapshots, key=lambda s: s.time)
    times = np.asarray([s.time for s in pool], dtype=np.int64)
    for target in targets:
        end = int(np.searchsorted(times, target.time, side="left"))
        start = max(0, end - m)
        yield HistoryWindow(tuple(pool[start:end]), target)


def split_chronological(
    quads: np.ndarray, valid_times: int, test_times: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Last ``test_times`` timestamps are test, the ``valid_times`` before valid."""
    times = np.unique(quads[:, 3])
    if len(times) <= valid_times + test_times:
        raise InvalidArgumentError("not enough timestamps for the requested split")
    test_start = times[len(times) - test_times]
    valid_start = times[len(times) - test_times - valid_times]
    t = quads[:, 3]
    return (
        quads[t < valid_start],
        quads[(t >= valid_start) & (t < test_start)],
        quads[t >= test_start],
    )


def _split_sizes(
    n_times: int, valid_times: Optional[int], test_times: Optional[int]
) -> Tuple[int, int]:
    if n_times < 3:
        raise InvalidArgumentError("synthetic datasets need at least 3 timestamps")
    default = max(1, n_times // 6)
    return (
        default if valid_times is None else valid_times,
        default if test_times is None else test_times,
    )


def synth_cycle(
    n_entities: int = 20,
    n_relations: int = 4,
    n_times: int = 60,
    shift_rule: int = 3,
    valid_times: Optional[int] = None,
    test_times: Optional[int] = None,
) -> TkgDataset:
    """Periodic TKG: at time t, i --(i mod R)--> (i + 1 + t mod shift) mod N.

    Unless given, the validation and test splits each take the last sixth of
    the timestamps (at least one each).
    """
    if n_entities < 4:
        raise InvalidArgumentError("synth_cycle needs at least 4 entities")
    if n_relations < 1 or shift_rule < 1:
        raise InvalidArgumentError("synth_cycle sizes must be positive")
    valid_times, test_times = _split_sizes(n_times, valid_times, test_times)
    entities = np.arange(n_entities, dtype=np.int64)
    rows = []
    for t in range(n_times):
        objects = (entities + 1 + (t % shift_rule)) % n_entities
        rows.append(
            np.stack(
                [entities, entities % n_relations, objects, np.full_like(entities, t)],
                axis=1,
            )
        )
    quads = np.concatenate(rows, axis=0)
    train, valid, test = split_chronological(quads, valid_times, test_times)
    return TkgDataset(
        Vocab(n_entities, n_relations),
        train,
        valid,
        test,
        name=f"cycle-{n_entities}-{n_relations}-{n_times}-{shift_rule}",
    )


def synth_chain(
    n_entities: int = 12,
    n_times: int = 20,
    valid_times: Optional[int] = None,
    test_times: Optional[int] = None,
) -> TkgDataset:
    """Every snapshot is a directed chain over a time-rotated entity order."""
    if n_entities < 2:
        raise InvalidArgumentError("synth_chain needs at least 2 entities")
    valid_times, test_times = _split_sizes(n_times, valid_times, test_times)
    rows = []
    for t in range(n_times):
        order = np.roll(np.arange(n_entities, dtype=np.int64), t)
        for a, b in zip(order[:-1], order[1:]):
            rows.append([int(a), 0, int(b), t])
    quads = np.asarray(rows, dtype=np.int64)
    train, valid, test = split_chronological(quads, valid_times, test_times)
    return TkgDataset(Vocab(n_entities, 1), train, valid, test, name="chain")


def parse_synthetic_spec(spec: str) -> TkgDataset:
    """Build a synthetic dataset from ``cycle[:n,r,T,shift]`` or ``chain[:n,T]``."""
    kind, _, args = spec.partition(":")
    try:
        values = [int(v) for v in args.split(",")] if args else []
    except ValueError as e:
        raise InvalidArgumentError(f"bad synthetic spec '{spec}'") from e
    if kind == "cycle":
        if len(values) not in (0, 4):
            raise InvalidArgumentError("cycle spec takes n,r,T,shift")
        return synth_cycle(*values)
    if kind == "chain":
        if len(values) not in (0, 2):
            raise InvalidArgumentError("chain spec takes n,T")
        return synth_chain(*values)
    raise InvalidArgumentError(f"unknown synthetic dataset '{kind}'")
