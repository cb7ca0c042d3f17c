"""GRU and neural-CDE many-to-one embedding forecasters."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from timekit import numgrad as ng
from timekit.cf import CheckpointError, EmbeddingSnapshot, decode_matrix, encode_matrix
from timekit.pipeline import ForecastWindowSet
from timekit.solver import SolveConfig, integrate
from timekit.spline import fit_natural_cubic

log = logging.getLogger(__name__)

KINDS = ("gru", "ncde")
PAIRINGS = {"gru-gru": ("gru", "gru"), "ncde-ncde": ("ncde", "ncde"), "gru-ncde": ("gru", "ncde")}


class ForecastDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 300
    seed: int = 0
    steps_per_interval: int = 4  # NCDE only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")


def default_config(kind: str, **overrides) -> TrainConfig:
    if kind == "gru":
        base = dict(epochs=300, batch_size=32)
    elif kind == "ncde":
        base = dict(epochs=100, batch_size=64)
    else:
        raise ValueError(f"unknown forecaster kind {kind!r}")
    base.update(overrides)
    return TrainConfig(**base)


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Forecaster:
    kind = ""

    def __init__(self, params: dict[str, ng.Tensor]):
        self.params = params

    @property
    def param_list(self) -> list[ng.Tensor]:
        return list(self.params.values())

    @property
    def dim(self) -> int:
        return self.params["out_w"].shape[1]

    @property
    def hidden(self) -> int:
        return self.params["out_w"].shape[0]

    def forward(self, windows: np.ndarray) -> ng.Tensor:
        raise NotImplementedError

    def predict(self, windows: np.ndarray, chunk: int = 1024) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        with ng.no_grad():
            parts = [self.forward(windows[i : i + chunk]).value for i in range(0, len(windows), chunk)]
        return np.concatenate(parts, axis=0) if parts else np.empty((0, self.dim))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k}: shape {v.shape} vs {self.params[k].shape}")
            self.params[k].value = np.array(v, dtype=np.float64)

    def _check_input(self, windows):
        if windows.ndim != 3 or windows.shape[2] != self.dim:
            raise ng.ShapeError(f"{self.kind}: expected windows (B, R, {self.dim}), got {windows.shape}")


class GruForecaster(Forecaster):
    """Zero-initialised GRU over the window, linear read-out of the last state.

    Gate layout in the stacked weights is [reset, update, candidate]:

        r = sigmoid(x Wx_r + bx_r + h Wh_r + bh_r)
        z = sigmoid(x Wx_z + bx_z + h Wh_z + bh_z)
        n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
        h' = (1 - z) * n + z * h
    """

    kind = "gru"

    @classmethod
    def create(cls, dim: int, hidden: int, rng: np.random.Generator) -> "GruForecaster":
        h = hidden
        wx = np.hstack([_glorot(rng, dim, h) for _ in range(3)])
        wh = np.hstack([_glorot(rng, h, h) for _ in range(3)])
        return cls(
            {
                "wx": ng.parameter(wx, "wx"),
                "wh": ng.parameter(wh, "wh"),
                "bx": ng.parameter(np.zeros(3 * h), "bx"),
                "bh": ng.parameter(np.zeros(3 * h), "bh"),
                "out_w": ng.parameter(_glorot(rng, h, dim), "out_w"),
                "out_b": ng.parameter(np.zeros(dim), "out_b"),
            }
        )

    def cell(self, h: ng.Tensor, x: ng.Tensor) -> ng.Tensor:
        p = self.params
        k = self.hidden
        gx = ng.linear(x, p["wx"], p["bx"])
        gh = ng.linear(h, p["wh"], p["bh"])
        r = ng.sigmoid(ng.slice_(gx, np.s_[:, :k]) + ng.slice_(gh, np.s_[:, :k]))
        z = ng.sigmoid(ng.slice_(gx, np.s_[:, k : 2 * k]) + ng.slice_(gh, np.s_[:, k : 2 * k]))
        n = ng.tanh(ng.slice_(gx, np.s_[:, 2 * k :]) + r * ng.slice_(gh, np.s_[:, 2 * k :]))
        return n + z * (h - n)

    def forward(self, windows: np.ndarray) -> ng.Tensor:
        windows = np.asarray(windows, dtype=np.float64)
        self._check_input(windows)
        h = ng.Tensor(np.zeros((windows.shape[0], self.hidden)))
        for j in range(windows.shape[1]):
            h = self.cell(h, ng.Tensor(windows[:, j]))
        return ng.linear(h, self.params["out_w"], self.params["out_b"])


class NcdeForecaster(Forecaster):
    """Neural CDE driven by a natural cubic spline through the window.

    z(0) = xi(x_first); dz = tanh(FC2(tanh(FC1(z)))) reshaped to (h, D) times
    dX/dt; the forecast is a linear read-out of z at the last knot.
    """

    kind = "ncde"

    def __init__(self, params, steps_per_interval: int = 4):
        super().__init__(params)
        self.steps_per_interval = steps_per_interval

    @classmethod
    def create(cls, dim: int, hidden: int, rng: np.random.Generator, steps_per_interval: int = 4) -> "NcdeForecaster":
        h = hidden
        return cls(
            {
                "xi_w": ng.parameter(_glorot(rng, dim, h), "xi_w"),
                "xi_b": ng.parameter(np.zeros(h), "xi_b"),
                "fc1_w": ng.parameter(_glorot(rng, h, h), "fc1_w"),
                "fc1_b": ng.parameter(np.zeros(h), "fc1_b"),
                "fc2_w": ng.parameter(rng.normal(0.0, 0.01, size=(h, h * dim)), "fc2_w"),
                "fc2_b": ng.parameter(np.zeros(h * dim), "fc2_b"),
                "out_w": ng.parameter(_glorot(rng, h, dim), "out_w"),
                "out_b": ng.parameter(np.zeros(dim), "out_b"),
            },
            steps_per_interval,
        )

    def field(self, z: ng.Tensor, t: float) -> ng.Tensor:
        p = self.params
        a = ng.tanh(ng.linear(z, p["fc1_w"], p["fc1_b"]))
        f = ng.tanh(ng.linear(a, p["fc2_w"], p["fc2_b"]))
        return ng.reshape(f, (z.shape[0], self.hidden, self.dim))

    def forward(self, windows: np.ndarray) -> ng.Tensor:
        windows = np.asarray(windows, dtype=np.float64)
        self._check_input(windows)
        r = windows.shape[1]
        if r < 2:
            raise ValueError("NCDE forecaster needs a window of at least 2 periods")
        times = np.arange(r, dtype=np.float64)
        path = fit_natural_cubic(times, np.transpose(windows, (1, 0, 2)))
        p = self.params
        z0 = ng.linear(ng.Tensor(windows[:, 0]), p["xi_w"], p["xi_b"])
        cfg = SolveConfig.from_steps(0.0, float(r - 1), self.steps_per_interval)
        z = integrate(self.field, z0, cfg, path)
        return ng.linear(z, p["out_w"], p["out_b"])


def create_model(kind: str, dim: int, config: TrainConfig) -> Forecaster:
    rng = ng.make_rng([config.seed, 7])
    if kind == "gru":
        return GruForecaster.create(dim, config.hidden, rng)
    if kind == "ncde":
        return NcdeForecaster.create(dim, config.hidden, rng, config.steps_per_interval)
    raise ValueError(f"unknown forecaster kind {kind!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = float("inf")


def evaluate_mse(model: Forecaster, windows: ForecastWindowSet) -> float:
    pred = model.predict(windows.inputs)
    return float(np.mean((pred - windows.targets) ** 2))


def entity_batches(entities: np.ndarray, batch_entities: int, rng: np.random.Generator):
    """Yield sample-index arrays covering ``batch_entities`` shuffled entities each."""
    order = np.argsort(entities, kind="stable")
    uniq, starts = np.unique(entities[order], return_index=True)
    groups = np.split(order, starts[1:])
    perm = rng.permutation(len(uniq))
    for s in range(0, len(perm), batch_entities):
        yield np.concatenate([groups[g] for g in perm[s : s + batch_entities]])


def train_forecaster(train: ForecastWindowSet, valid: ForecastWindowSet, kind: str, config: TrainConfig, model: Forecaster | None = None):
    """Adam on window MSE with best-on-validation checkpointing."""
    if len(train) == 0:
        raise ValueError("no training windows")
    dim = train.inputs.shape[2]
    model = model if model is not None else create_model(kind, dim, config)
    params = model.param_list
    state = ng.AdamState.for_params(params)
    rng = ng.make_rng([config.seed, 11])
    hist = TrainHistory()
    best = model.state_dict()
    for epoch in range(config.epochs):
        total = 0.0
        try:
            for idx in entity_batches(train.entities, config.batch_size, rng):
                with ng.fresh_tape():
                    loss = ng.mean_squared_error(model.forward(train.inputs[idx]), train.targets[idx])
                    ng.backward(loss, params)
                ng.adam_step(params, state, config.lr, config.weight_decay)
                total += loss.item() * len(idx)
            vloss = evaluate_mse(model, valid) if len(valid) else total / len(train)
        except (ng.NonFiniteError, FloatingPointError) as exc:
            raise ForecastDivergence(f"{kind} forecaster diverged at epoch {epoch}: {exc}") from exc
        hist.train_loss.append(total / len(train))
        hist.valid_loss.append(vloss)
        if vloss < hist.best_valid:
            hist.best_valid, hist.best_epoch = vloss, epoch
            best = model.state_dict()
    model.load_state_dict(best)
    log.info("%s forecaster: best valid MSE %.3g at epoch %d", kind, hist.best_valid, hist.best_epoch)
    return model, hist


def forecast_all(user_model: Forecaster, item_model: Forecaster, user_windows: ForecastWindowSet, item_windows: ForecastWindowSet, period_index: int = 0) -> EmbeddingSnapshot:
    for name, model, w in (("user", user_model, user_windows), ("item", item_model, item_windows)):
        if w.inputs.shape[2] != model.dim:
            raise ng.ShapeError(f"{name} model width {model.dim} does not match embedding width {w.inputs.shape[2]}")
    users = user_model.predict(user_windows.inputs)
    items = item_model.predict(item_windows.inputs)
    return EmbeddingSnapshot(users, items, period_index, f"{user_model.kind}-{item_model.kind}")


# ---------------------------------------------------------------------------
# checkpoints

MODEL_MAGIC = "timekit-model"


def save_model(path, model: Forecaster) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = f" {model.steps_per_interval}" if isinstance(model, NcdeForecaster) else ""
    head = f"{MODEL_MAGIC} v1 {model.kind} {len(model.params)}{extra}\n".encode("ascii")
    body = b"".join(encode_matrix(p.value.reshape(p.shape[0], -1) if p.value.ndim == 2 else p.value[None, :], name) for name, p in model.params.items())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(head + body)
    tmp.replace(path)


def load_model(path) -> Forecaster:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    end = buf.find(b"\n")
    parts = buf[:end].decode("ascii", errors="replace").split() if end > 0 else []
    if len(parts) < 4 or parts[0] != MODEL_MAGIC or parts[1] != "v1" or parts[2] not in KINDS:
        raise CheckpointError(f"{path}: bad model header")
    kind, count = parts[2], int(parts[3])
    offset = end + 1
    params = {}
    for _ in range(count):
        mat, extra, offset = decode_matrix(buf, offset, str(path))
        if not extra:
            raise CheckpointError(f"{path}: unnamed parameter section")
        name = extra[0]
        params[name] = ng.parameter(mat[0] if name.endswith("_b") or name in ("bx", "bh") else mat, name)
    if offset != len(buf):
        raise CheckpointError(f"{path}: trailing bytes")
    if kind == "gru":
        return GruForecaster(params)
    return NcdeForecaster(params, int(parts[4]) if len(parts) > 4 else 4)
