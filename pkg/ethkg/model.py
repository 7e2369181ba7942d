"""
ETH forward pass: Euclidean history encoder, tangent-space transforms and the
hybrid hyperbolic/Euclidean scoring head, plus parameter checkpoints.

Row-vector convention: a linear map is ``x @ W`` with W of shape (d_in, d_out).
Per-entity and per-relation scalars (biases, curvatures, learned betas) are
stored as (n, 1) columns.
"""

from dataclasses import (
    dataclass,
    field,
)
import json
import logging
import math
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Optional,
    Tuple,
    Union,
)
import zipfile

import numpy as np

from ethkg import (
    diffcore as dc,
    diffgeometry as dg,
)
from ethkg.data import (
    HistoryWindow,
    Snapshot,
    Vocab,
)
from ethkg.diffcore import (
    Node,
    Tape,
)
from ethkg.errors import (
    CheckpointError,
    InvalidArgumentError,
)
from ethkg.system_config import (
    RRELU_LOWER,
    RRELU_UPPER,
    BetaMode,
    EthConfig,
    GammaKind,
)


logger = logging.getLogger("ethkg.model")

CHECKPOINT_FORMAT = "ethkg-checkpoint/1"
# softplus^{-1}(1): curvature starts at c_r = 1
CURVATURE_INIT = math.log(math.e - 1.0)

Bound = Dict[str, Node]


def parameter_shapes(
    config: EthConfig, vocab: Vocab
) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    """Name -> (shape, initializer) for every learnable tensor of a config."""
    d, w = config.d, config.w
    n_ent, n_rel = vocab.num_entities, vocab.num_relation_ids
    shapes: Dict[str, Tuple[Tuple[int, ...], str]] = {
        "entity_emb": ((n_ent, d), "normal"),
        "rel_emb_euclid": ((n_rel, d), "normal"),
        "rel_emb_hyp": ((n_rel, d), "normal"),
    }
    if config.enable_semantic_encoder:
        for i in range(config.layers):
            shapes[f"rgcn_w1_{i}"] = ((d, d), "glorot")
            shapes[f"rgcn_w2_{i}"] = ((d, d), "glorot")
        for gate in ("z", "r", "n"):
            shapes[f"gru_w_{gate}"] = ((d, d), "glorot")
            shapes[f"gru_u_{gate}"] = ((d, d), "glorot")
            shapes[f"gru_b_{gate}"] = ((d,), "zeros")
    shapes.update(
        {
            "w1_e": ((d, d), "glorot"),
            "b1_e": ((d,), "zeros"),
            "w2_e": ((2 * d, d), "glorot"),
            "b2_e": ((d,), "zeros"),
            "w_g": ((d, d), "glorot"),
            "w1_g": ((d, d), "glorot"),
            "w2_g": ((d, d), "glorot"),
            "curvature_raw": ((n_rel, 1), "curvature"),
            "bias_q": ((n_ent, 1), "zeros"),
            "bias_a": ((n_ent, 1), "zeros"),
        }
    )
    if config.beta_mode is BetaMode.QUERY_SPECIFIC:
        shapes["s_q"] = ((n_ent, w), "glorot")
        shapes["s_r"] = ((n_rel, w), "glorot")
    elif config.beta_mode is BetaMode.PER_RELATION_LEARNED:
        shapes["beta_raw"] = ((n_rel, 1), "zeros")
    return shapes


def _initialize(
    shape: Tuple[int, ...], kind: str, d: int, rng: np.random.Generator
) -> np.ndarray:
    if kind == "glorot":
        limit = math.sqrt(6.0 / (shape[0] + shape[-1]))
        return rng.uniform(-limit, limit, size=shape)
    if kind == "normal":
        return rng.normal(0.0, 1.0 / math.sqrt(d), size=shape)
    if kind == "curvature":
        return np.full(shape, CURVATURE_INIT)
    return np.zeros(shape)


@dataclass
class EthParams:
    """Every learnable tensor of one ETH model, keyed by name"""

    config: EthConfig
    vocab: Vocab
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: EthConfig, vocab: Vocab, seed: int = 0) -> "EthParams":
        """Draw a fresh parameter set; the seed fixes every value."""
        rng = np.random.default_rng(seed)
        tensors = {
            name: _initialize(shape, kind, config.d, rng)
            for name, (shape, kind) in parameter_shapes(config, vocab).items()
        }
        return cls(config, vocab, tensors)

    def copy(self) -> "EthParams":
        tensors = {k: v.copy() for k, v in self.tensors.items()}
        return EthParams(self.config, self.vocab, tensors)

    def bind(self, tape: Tape, requires_grad: bool = True) -> Bound:
        """Put every tensor on a tape as a named leaf."""
        return {
            name: tape.leaf(value, requires_grad=requires_grad, name=name)
            for name, value in self.tensors.items()
        }

    def curvatures(self) -> np.ndarray:
        """c_r = softplus(raw) for every relation id, shape (2|E|,)"""
        return np.logaddexp(0.0, self.tensors["curvature_raw"][:, 0])

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(v))) for v in self.tensors.values())


@dataclass
class QueryBatch:
    """Queries (q, r, ?) at one target time, with gold objects when known"""

    entities: np.ndarray
    relations: np.ndarray
    time: int = 0
    targets: Optional[np.ndarray] = None

    @classmethod
    def from_snapshot(cls, snapshot: Snapshot) -> "QueryBatch":
        """One query per triple of the snapshot, inverses included."""
        return cls(
            snapshot.subjects.copy(),
            snapshot.relations.copy(),
            snapshot.time,
            snapshot.objects.copy(),
        )

    def __len__(self) -> int:
        return int(self.entities.shape[0])

    def validate(self, vocab: Vocab) -> None:
        if self.entities.shape != self.relations.shape:
            raise InvalidArgumentError(
                "query entity and relation arrays differ in length"
            )
        if len(self) == 0:
            return
        if self.entities.min() < 0 or self.entities.max() >= vocab.num_entities:
            raise InvalidArgumentError("query entity id out of range")
        if self.relations.min() < 0 or self.relations.max() >= vocab.num_relation_ids:
            raise InvalidArgumentError("query relation id out of range")
        if self.targets is not None and (
            self.targets.min() < 0 or self.targets.max() >= vocab.num_entities
        ):
            raise InvalidArgumentError("gold entity id out of range")


@dataclass
class ForwardResult:
    """Nodes produced by one forward pass"""

    logits: Node
    scores: Node
    score_euclid: Node
    score_hyp: Node
    beta: Node
    h_t: Node
    h_a_g: Node
    h_q_g: Node
    normalized: List[Node] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Euclidean encoder


def normalize_sqrt_d(x: Node) -> Node:
    """Layer norm scaled by 1/sqrt(d): every row ends up with L2 norm ~1."""
    d = x.shape[-1]
    if d < 2:
        raise InvalidArgumentError("normalize_sqrt_d needs d >= 2")
    return dc.scale_by_constant(dc.layer_norm(x), 1.0 / math.sqrt(d))


def rgcn_layer(
    h_in: Node,
    snapshot: Snapshot,
    v_e: Node,
    w1: Node,
    w2: Node,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    """One relation-aware graph convolution over a snapshot.

    Each object averages W1(h_s + v_r) over its neighbor multiset and adds the
    self term W2 h_o, which every entity receives.
    """
    self_term = dc.matmul(h_in, w2)
    if len(snapshot):
        messages = dc.gather_rows(h_in, snapshot.subjects) + dc.gather_rows(
            v_e, snapshot.relations
        )
        mean = dc.scatter_mean_rows(messages, snapshot.objects, h_in.shape[0])
        pre = dc.matmul(mean, w1) + self_term
    else:
        pre = self_term
    return dc.rrelu(pre, RRELU_LOWER, RRELU_UPPER, training, rng)


def gru_cell(h_prev: Node, x: Node, p: Bound) -> Node:
    z = dc.sigmoid(x @ p["gru_w_z"] + h_prev @ p["gru_u_z"] + p["gru_b_z"])
    r = dc.sigmoid(x @ p["gru_w_r"] + h_prev @ p["gru_u_r"] + p["gru_b_r"])
    n = dc.tanh(x @ p["gru_w_n"] + r * (h_prev @ p["gru_u_n"]) + p["gru_b_n"])
    return n + z * (h_prev - n)


def encode_history(
    history: HistoryWindow,
    p: Bound,
    config: EthConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    normalized: Optional[List[Node]] = None,
) -> Node:
    """Evolve entity embeddings through the history window.

    Appends every normalized intermediate to ``normalized`` when given.
    """
    trace = normalized if normalized is not None else []
    h = normalize_sqrt_d(p["entity_emb"])
    trace.append(h)
    for snapshot in history.snapshots:
        v_e = normalize_sqrt_d(p["rel_emb_euclid"])
        x = h
        for i in range(config.layers):
            w1, w2 = p[f"rgcn_w1_{i}"], p[f"rgcn_w2_{i}"]
            x = rgcn_layer(x, snapshot, v_e, w1, w2, training, rng)
        x = normalize_sqrt_d(x)
        h = normalize_sqrt_d(gru_cell(h, x, p))
        trace.extend([v_e, x, h])
    return h


# ---------------------------------------------------------------------------
# Tangent-space transforms


def _gamma(x: Node, config: EthConfig) -> Node:
    if config.gamma_kind is GammaKind.RELU:
        return dc.relu(x)
    return x


def candidate_transform(h_t: Node, p: Bound, config: EthConfig) -> Tuple[Node, Node]:
    """Candidate embeddings in Euclidean space (h_a^e) and tangent space (h_a^g)."""
    h_a_e = h_t @ p["w1_e"] + p["b1_e"]
    if not config.enable_tangent_transform:
        return h_a_e, h_t
    h_a_g = _gamma((dc.tanh(h_a_e) * h_t) @ p["w_g"], config) @ p["w1_g"]
    return h_a_e, h_a_g


def query_transform(
    h_t: Node, queries: QueryBatch, p: Bound, config: EthConfig
) -> Tuple[Node, Node]:
    """Query embeddings in Euclidean space (h_q^e) and tangent space (h_q^g)."""
    n_rel = p["rel_emb_euclid"].shape[0]
    relations = queries.relations
    if len(queries) and (relations.min() < 0 or relations.max() >= n_rel):
        raise InvalidArgumentError("query relation id out of range")
    h_q = dc.gather_rows(h_t, queries.entities)
    v_r = dc.gather_rows(normalize_sqrt_d(p["rel_emb_euclid"]), queries.relations)
    if not config.enable_query_transform:
        combined = h_q + v_r
        return combined, combined
    h_q_e = dc.concat_rows(h_q, v_r) @ p["w2_e"] + p["b2_e"]
    if not config.enable_tangent_transform:
        return h_q_e, h_q
    h_q_g = _gamma((dc.tanh(h_q_e) * h_q) @ p["w_g"], config) @ p["w2_g"]
    return h_q_e, h_q_g


# ---------------------------------------------------------------------------
# Scoring


def score_euclidean(h_q_e: Node, h_a_e: Node) -> Node:
    """S^e[q, a] = <h_q^e, h_a^e>"""
    if h_q_e.shape[-1] != h_a_e.shape[-1]:
        raise InvalidArgumentError("query and candidate dimensions differ")
    return dc.matmul(h_q_e, dc.transpose(h_a_e))


def relation_curvature(queries: QueryBatch, p: Bound) -> Node:
    """c_r per query row, (Q, 1), positive through softplus."""
    return dc.softplus(dc.gather_rows(p["curvature_raw"], queries.relations))


def score_hyperbolic(h_q_g: Node, h_a_g: Node, queries: QueryBatch, p: Bound) -> Node:
    """S^b[q, a] = -d^{c_r}(h_q^b (+) v_r^b, h_a^b)^2 + b_q + b_a"""
    num_q, num_a = h_q_g.shape[0], h_a_g.shape[0]
    c = relation_curvature(queries, p)
    h_q_b = dg.exp_map_zero(h_q_g, c)
    v_r_b = dg.exp_map_zero(dc.gather_rows(p["rel_emb_hyp"], queries.relations), c)
    shifted = dg.mobius_add(h_q_b, v_r_b, c)
    sq_dist = dg.pairwise_sq_distance(shifted, h_a_g, c)
    b_q = dc.broadcast_col(dc.gather_rows(p["bias_q"], queries.entities), num_a)
    b_a = dc.broadcast_row(dc.transpose(p["bias_a"]), num_q)
    return -sq_dist + b_q + b_a


def mixing_coefficient(
    queries: QueryBatch, p: Bound, config: EthConfig, tape: Tape
) -> Node:
    """beta per query row, (Q, 1)."""
    mode = config.beta_mode
    if mode is BetaMode.FIXED_ZERO:
        return tape.constant(np.zeros((len(queries), 1)))
    if mode is BetaMode.FIXED_ONE:
        return tape.constant(np.ones((len(queries), 1)))
    if mode is BetaMode.PER_RELATION_LEARNED:
        return dc.sigmoid(dc.gather_rows(p["beta_raw"], queries.relations))
    s_q = dc.gather_rows(p["s_q"], queries.entities)
    s_r = dc.gather_rows(p["s_r"], queries.relations)
    return dc.sigmoid(dc.scale_by_constant(dc.row_sum(s_q * s_r), 1.0 / config.w))


def score_hybrid(s_b: Node, s_e: Node, beta: Node) -> Tuple[Node, Node]:
    """Logits z = beta S^b + (1 - beta) S^e and scores sigma(z)."""
    if s_b.shape != s_e.shape:
        raise InvalidArgumentError("hyperbolic and Euclidean score shapes differ")
    weight = dc.broadcast_col(beta, s_b.shape[1])
    logits = weight * s_b + (1.0 - weight) * s_e
    return logits, dc.sigmoid(logits)


def forward(
    params: EthParams,
    history: HistoryWindow,
    queries: QueryBatch,
    tape: Optional[Tape] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    bound: Optional[Bound] = None,
) -> ForwardResult:
    """Score every entity as the answer of every query in the batch."""
    config = params.config
    queries.validate(params.vocab)
    tape = tape if tape is not None else Tape()
    p = bound if bound is not None else params.bind(tape, requires_grad=training)

    normalized: List[Node] = []
    if config.enable_semantic_encoder:
        h_t = encode_history(history, p, config, training, rng, normalized)
    else:
        h_t = p["entity_emb"]

    h_a_e, h_a_g = candidate_transform(h_t, p, config)
    h_q_e, h_q_g = query_transform(h_t, queries, p, config)
    s_e = score_euclidean(h_q_e, h_a_e)
    s_b = score_hyperbolic(h_q_g, h_a_g, queries, p)
    beta = mixing_coefficient(queries, p, config, tape)
    logits, scores = score_hybrid(s_b, s_e, beta)
    return ForwardResult(logits, scores, s_e, s_b, beta, h_t, h_a_g, h_q_g, normalized)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path: Union[str, Path], params: EthParams, extra: Optional[Dict[str, Any]] = None
) -> Path:
    """Write config, vocab sizes and every tensor to one .npz file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "num_entities": params.vocab.num_entities,
        "num_relations": params.vocab.num_relations,
        "tensors": sorted(params.tensors),
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta)), **params.tensors)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path], vocab: Optional[Vocab] = None
) -> Tuple[EthParams, Dict[str, Any]]:
    """Read a checkpoint; optionally check it against the dataset vocabulary."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            tensors = {
                name: archive[name].astype(np.float64) for name in meta["tensors"]
            }
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except (
        OSError,
        ValueError,
        KeyError,
        zipfile.BadZipFile,
        json.JSONDecodeError,
    ) as e:
        raise CheckpointError(f"corrupted checkpoint {path}: {e}") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: unknown checkpoint format {meta.get('format')!r}"
        )

    config = EthConfig.from_dict(meta["config"])
    stored_vocab = Vocab(int(meta["num_entities"]), int(meta["num_relations"]))
    if vocab is not None and (
        vocab.num_entities != stored_vocab.num_entities
        or vocab.num_relations != stored_vocab.num_relations
    ):
        raise CheckpointError(
            f"{path}: checkpoint vocab |V|={stored_vocab.num_entities} "
            f"|E|={stored_vocab.num_relations} does not match dataset "
            f"|V|={vocab.num_entities} |E|={vocab.num_relations}"
        )
    expected = parameter_shapes(config, stored_vocab)
    for name, (shape, _) in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            raise CheckpointError(f"{path}: tensor '{name}' missing or has wrong shape")
    params = EthParams(config, vocab or stored_vocab, tensors)
    return params, meta.get("extra", {})
