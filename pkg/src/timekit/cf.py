"""Base collaborative-filtering algorithms that produce embedding snapshots."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from timekit import numgrad as ng

log = logging.getLogger(__name__)

BASES = ("bprmf", "lightgcn")


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class EmbeddingSnapshot:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    period_index: int = 0
    base_algorithm: str = ""

    @property
    def dim(self) -> int:
        return self.user_embeddings.shape[1]

    def __post_init__(self):
        if self.user_embeddings.shape[1] != self.item_embeddings.shape[1]:
            raise ValueError(
                f"user/item embedding widths differ: {self.user_embeddings.shape} vs {self.item_embeddings.shape}"
            )


@dataclass(frozen=True)
class BaseConfig:
    dim: int = 64
    epochs: int = 500
    batch_size: int = 2048
    lr: float = 1e-3
    weight_decay: float = 1e-4
    layers: int = 3
    init_std: float = 0.1


@dataclass(frozen=True)
class BaseResult:
    """Output of one base-training call.

    ``snapshot`` holds the embeddings used for scoring (e^Last); ``ego`` holds
    the trainable layer-0 embeddings that seed the next period.  They coincide
    for BPR-MF.
    """

    snapshot: EmbeddingSnapshot
    ego: EmbeddingSnapshot
    losses: list[float]


def random_snapshot(num_users: int, num_items: int, dim: int, rng: np.random.Generator, std: float = 0.1) -> EmbeddingSnapshot:
    return EmbeddingSnapshot(
        rng.normal(0.0, std, size=(num_users, dim)),
        rng.normal(0.0, std, size=(num_items, dim)),
    )


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class UserItemGraph:
    users: np.ndarray
    items: np.ndarray
    num_users: int
    num_items: int

    @property
    def user_degree(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    @property
    def item_degree(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def adjacency(self) -> sp.csr_matrix:
        """Bipartite adjacency over nodes [users..., items...]."""
        n = self.num_users + self.num_items
        rows = np.concatenate([self.users, self.items + self.num_users])
        cols = np.concatenate([self.items + self.num_users, self.users])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def normalized_adjacency(self) -> sp.csr_matrix:
        """D^-1/2 A D^-1/2; isolated nodes get zero rows."""
        adj = self.adjacency()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        inv = np.zeros_like(deg)
        nz = deg > 0
        inv[nz] = 1.0 / np.sqrt(deg[nz])
        d = sp.diags(inv)
        return (d @ adj @ d).tocsr()


def build_graph(users, items, num_users: int, num_items: int) -> UserItemGraph:
    code = np.unique(np.asarray(users) * num_items + np.asarray(items))
    return UserItemGraph(code // num_items, code % num_items, num_users, num_items)


def linear_propagate(snapshot: EmbeddingSnapshot, graph: UserItemGraph, layers: int) -> list[EmbeddingSnapshot]:
    """Layer embeddings e^0..e^K under e^k = A_hat e^(k-1)."""
    if layers < 1:
        raise ValueError(f"number of layers must be >= 1, got {layers}")
    if snapshot.user_embeddings.shape[0] != graph.num_users or snapshot.item_embeddings.shape[0] != graph.num_items:
        raise ValueError("graph and snapshot disagree on user/item counts")
    adj = graph.normalized_adjacency()
    e = np.vstack([snapshot.user_embeddings, snapshot.item_embeddings])
    out = [snapshot]
    for _ in range(layers):
        e = adj @ e
        out.append(replace(snapshot, user_embeddings=e[: graph.num_users], item_embeddings=e[graph.num_users :]))
    return out


def uniform_weights(layers: int) -> np.ndarray:
    return np.full(layers + 1, 1.0 / (layers + 1))


def residual_combine(layer_embeddings: list[EmbeddingSnapshot], weights) -> EmbeddingSnapshot:
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(layer_embeddings):
        raise ValueError(f"{len(weights)} weights for {len(layer_embeddings)} layers (layer 0 included)")
    users = sum(w * s.user_embeddings for w, s in zip(weights, layer_embeddings))
    items = sum(w * s.item_embeddings for w, s in zip(weights, layer_embeddings))
    return replace(layer_embeddings[0], user_embeddings=users, item_embeddings=items)


def predict_scores(user_rows: np.ndarray, item_rows: np.ndarray) -> np.ndarray:
    user_rows = np.atleast_2d(user_rows)
    item_rows = np.atleast_2d(item_rows)
    if user_rows.shape[1] != item_rows.shape[1]:
        raise ValueError(f"embedding widths differ: {user_rows.shape} vs {item_rows.shape}")
    return user_rows @ item_rows.T


# ---------------------------------------------------------------------------
# training


class NegativeSampler:
    """Uniform negatives over items the user has not interacted with."""

    def __init__(self, users, items, num_items: int):
        self.num_items = num_items
        self.codes = np.unique(np.asarray(users) * num_items + np.asarray(items))
        counts = np.bincount(np.asarray(users), minlength=int(np.max(users)) + 1)
        self.full_users = np.flatnonzero(counts >= num_items)

    def _taken(self, users, cand):
        code = users * self.num_items + cand
        pos = np.searchsorted(self.codes, code)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == code

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if len(self.full_users) and np.isin(users, self.full_users).any():
            raise ValueError("a user has interacted with every item; no negative exists")
        neg = rng.integers(0, self.num_items, size=len(users))
        bad = self._taken(users, neg)
        while bad.any():
            neg[bad] = rng.integers(0, self.num_items, size=int(bad.sum()))
            bad[bad] = self._taken(users[bad], neg[bad])
        return neg


def _bpr_loss(eu, ev, ew, reg_rows, weight_decay: float, batch: int):
    diff = ng.rowdot(eu, ev) - ng.rowdot(eu, ew)
    loss = ng.scale(ng.sum_(ng.log_sigmoid(diff)), -1.0 / batch)
    if weight_decay:
        reg = sum(ng.sum_(ng.hadamard(r, r)) for r in reg_rows)
        loss = loss + ng.scale(reg, 0.5 * weight_decay / batch)
    return loss


def _train(users, items, num_users, num_items, init: EmbeddingSnapshot, config: BaseConfig, rng, propagate):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(users) == 0:
        raise ValueError("no interactions to train on")
    if init.dim != config.dim:
        raise ValueError(f"init embedding width {init.dim} != configured dim {config.dim}")
    pu = ng.parameter(init.user_embeddings, "users")
    pi = ng.parameter(init.item_embeddings, "items")
    params = [pu, pi]
    state = ng.AdamState.for_params(params)
    sampler = NegativeSampler(users, items, num_items)
    n = len(users)
    batch = config.batch_size
    if batch > n:
        log.warning("batch size %d exceeds %d training pairs; clamping", batch, n)
        batch = n
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        negs = sampler.sample(users[order], rng)
        total = 0.0
        for start in range(0, n, batch):
            sel = order[start : start + batch]
            bu, bv, bw = users[sel], items[sel], negs[start : start + batch]
            with ng.fresh_tape():
                fu, fi = propagate(pu, pi)
                eu, ev, ew = ng.gather(fu, bu), ng.gather(fi, bv), ng.gather(fi, bw)
                if fu is pu:
                    reg = (eu, ev, ew)
                else:
                    reg = (ng.gather(pu, bu), ng.gather(pi, bv), ng.gather(pi, bw))
                loss = _bpr_loss(eu, ev, ew, reg, config.weight_decay, len(sel))
                ng.backward(loss, params)
            ng.adam_step(params, state, config.lr)
            total += loss.item() * len(sel)
        losses.append(total / n)
    return pu.value.copy(), pi.value.copy(), losses


def bpr_train(users, items, num_users: int, num_items: int, init: EmbeddingSnapshot | None, config: BaseConfig, rng: np.random.Generator) -> BaseResult:
    if init is None:
        init = random_snapshot(num_users, num_items, config.dim, rng, config.init_std)
    ue, ie, losses = _train(users, items, num_users, num_items, init, config, rng, lambda pu, pi: (pu, pi))
    snap = EmbeddingSnapshot(ue, ie, init.period_index, "bprmf")
    return BaseResult(snap, snap, losses)


def lightgcn_train(users, items, num_users: int, num_items: int, init: EmbeddingSnapshot | None, config: BaseConfig, rng: np.random.Generator, weights=None) -> BaseResult:
    """BPR on residual-combined propagated scores; only layer 0 is trained."""
    if init is None:
        init = random_snapshot(num_users, num_items, config.dim, rng, config.init_std)
    weights = uniform_weights(config.layers) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(weights) != config.layers + 1:
        raise ValueError(f"{len(weights)} weights for {config.layers + 1} layers (layer 0 included)")
    graph = build_graph(users, items, num_users, num_items)
    adj = graph.normalized_adjacency()

    def propagate(pu, pi):
        e = ng.concat([pu, pi], axis=0)
        out = ng.scale(e, weights[0])
        for k in range(1, config.layers + 1):
            e = ng.spmm(adj, e)
            out = out + ng.scale(e, weights[k])
        return ng.slice_(out, slice(0, num_users)), ng.slice_(out, slice(num_users, None))

    ue, ie, losses = _train(users, items, num_users, num_items, init, config, rng, propagate)
    ego = EmbeddingSnapshot(ue, ie, init.period_index, "lightgcn")
    combined = residual_combine(linear_propagate(ego, graph, config.layers), weights)
    return BaseResult(combined, ego, losses)


def train_base(base: str, users, items, num_users, num_items, init, config: BaseConfig, rng) -> BaseResult:
    if base == "bprmf":
        return bpr_train(users, items, num_users, num_items, init, config, rng)
    if base == "lightgcn":
        return lightgcn_train(users, items, num_users, num_items, init, config, rng)
    raise ValueError(f"unknown base algorithm {base!r}; expected one of {BASES}")


# ---------------------------------------------------------------------------
# checkpoints

EMB_MAGIC = "timekit-emb"
EMB_VERSION = "v1"


def encode_matrix(matrix: np.ndarray, extra: str = "") -> bytes:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, cols = matrix.shape
    header = f"{EMB_MAGIC} {EMB_VERSION} {rows} {cols}" + (f" {extra}" if extra else "") + "\n"
    return header.encode("ascii") + matrix.astype("<f8").tobytes()


def decode_matrix(buf: bytes, offset: int = 0, source: str = "<buffer>") -> tuple[np.ndarray, list[str], int]:
    end = buf.find(b"\n", offset)
    if end < 0:
        raise CheckpointError(f"{source}: missing header line")
    parts = buf[offset:end].decode("ascii", errors="replace").split()
    if len(parts) < 4 or parts[0] != EMB_MAGIC or parts[1] != EMB_VERSION:
        raise CheckpointError(f"{source}: bad header {buf[offset:end][:60]!r}")
    try:
        rows, cols = int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise CheckpointError(f"{source}: bad header dimensions") from exc
    nbytes = rows * cols * 8
    start = end + 1
    if len(buf) - start < nbytes:
        raise CheckpointError(f"{source}: truncated payload ({len(buf) - start} of {nbytes} bytes)")
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start).reshape(rows, cols).astype(np.float64)
    return data, parts[4:], start + nbytes


def write_embeddings(path, matrix: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_matrix(matrix))
    tmp.replace(path)


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    data, _, end = decode_matrix(buf, 0, str(path))
    if end != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - end} trailing bytes")
    return data


def save_snapshot(directory, snapshot: EmbeddingSnapshot, prefix: str = "") -> None:
    directory = Path(directory)
    write_embeddings(directory / f"users{prefix}.emb", snapshot.user_embeddings)
    write_embeddings(directory / f"items{prefix}.emb", snapshot.item_embeddings)


def load_snapshot(directory, period_index: int = 0, base: str = "", prefix: str = "") -> EmbeddingSnapshot:
    directory = Path(directory)
    return EmbeddingSnapshot(
        read_embeddings(directory / f"users{prefix}.emb"),
        read_embeddings(directory / f"items{prefix}.emb"),
        period_index,
        base,
    )
