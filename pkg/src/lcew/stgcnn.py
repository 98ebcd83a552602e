"""Graph-convolutional trajectory predictor with a temporal-extrapolation decoder.

Array layout used throughout: node features are ``T x N x D`` (time, vehicle,
feature). The encoder applies, per time step, ``PReLU(A_norm @ V_t @ W)``;
the decoder treats time as convolution channels and convolves along the
feature axis, then a linear head emits per-step displacements that are
accumulated from each vehicle's last observed position.

Gradients are computed by an explicit reverse pass over the values recorded
during the forward pass (the :class:`Tape`), in double precision.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import graphkernels as gk
from .errors import DataError, TrainingDiverged

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    T: int = 20
    F: int = 20
    d_in: int = 2
    d_hidden: int = 8
    gcn_layers: int = 1
    txp_layers: int = 3
    txp_kernel: int = 3
    prelu_init: float = 0.25
    epochs: int = 100
    lr: float = 0.01
    lr_late: float = 0.002
    lr_drop_epoch: int = 50
    grad_clip: float = 10.0
    momentum: float = 0.9
    nesterov: bool = False
    gcn_residual: bool = True
    accumulate: int = 1
    init_scale: float = 1.0
    mi_bins: int = gk.DEFAULT_BINS
    seed: int = 0

    def __post_init__(self):
        if self.txp_kernel % 2 != 1:
            raise ValueError("txp_kernel must be odd")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("T", "F", "d_in", "d_hidden", "gcn_layers", "txp_layers", "txp_kernel", "accumulate"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch number."""
        return self.lr if epoch <= self.lr_drop_epoch else self.lr_late

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Named parameter arrays plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        expected = _shapes(config)
        if list(self.tensors) != list(expected):
            raise DataError(f"parameter names {list(self.tensors)} do not match config")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DataError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)

    @classmethod
    def init(cls, config: ModelConfig, seed: int | None = None) -> "ModelParams":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        s = config.init_scale
        tensors = {}
        for name, shape in _shapes(config).items():
            if name.endswith(".alpha"):
                tensors[name] = np.full(shape, config.prelu_init)
            elif name.endswith(".b"):
                tensors[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if name.startswith("txp") else shape[0]
                tensors[name] = rng.normal(0.0, s / np.sqrt(fan_in), size=shape)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, {k: np.zeros(v) for k, v in _shapes(config).items()})


def _shapes(c: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    d = c.d_in
    for l in range(c.gcn_layers):
        shapes[f"gcn{l}.w"] = (d, c.d_hidden)
        if c.gcn_residual:
            shapes[f"gcn{l}.r"] = (d, c.d_hidden)
        shapes[f"gcn{l}.alpha"] = (1,)
        d = c.d_hidden
    for l in range(c.txp_layers):
        c_in = c.T if l == 0 else c.F
        shapes[f"txp{l}.k"] = (c.F, c_in, c.txp_kernel)
        shapes[f"txp{l}.b"] = (c.F,)
        shapes[f"txp{l}.alpha"] = (1,)
    shapes["head.w"] = (c.d_hidden, 2)
    shapes["head.b"] = (2,)
    return shapes


@dataclass
class Tape:
    """Intermediate values from a forward pass, consumed by the reverse pass."""

    adj: np.ndarray = None
    gcn: list = field(default_factory=list)  # (layer input, A @ H, pre-activation)
    txp: list = field(default_factory=list)  # (padded patches, pre-activation)
    decoded: np.ndarray = None


# ---------------------------------------------------------------------------
# building blocks


def prelu(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x > 0, x, alpha * x)


def _prelu_back(g: np.ndarray, x: np.ndarray, alpha: float) -> tuple[np.ndarray, float]:
    pos = x > 0
    return np.where(pos, g, alpha * g), float(np.sum(np.where(pos, 0.0, g * x)))


def features_from_history(history: np.ndarray) -> np.ndarray:
    """Per-step displacements as node features, ``T x 2 x N`` -> ``T x N x 2``.

    The first step has no predecessor and gets a zero displacement.
    """
    h = np.asarray(history, dtype=float)
    disp = np.zeros_like(h)
    disp[1:] = h[1:] - h[:-1]
    return disp.transpose(0, 2, 1)


def gcn_forward(V: np.ndarray, A_norm: np.ndarray, W: np.ndarray, alpha: float,
                tape: Tape | None = None, R: np.ndarray | None = None) -> np.ndarray:
    """One graph-convolution layer over every time step.

    Args:
        V: node features, ``T x N x D``.
        A_norm: normalized adjacency per step, ``T x N x N``.
        W: feature weights, ``D x D_hidden``.
        alpha: PReLU slope.

    Returns:
        ``T x N x D_hidden`` activations.
    """
    V = np.asarray(V, dtype=float)
    A_norm = np.asarray(A_norm, dtype=float)
    if V.ndim != 3 or A_norm.shape != (V.shape[0], V.shape[1], V.shape[1]) or W.shape[0] != V.shape[2]:
        raise DataError(f"shape mismatch: V {V.shape}, A {A_norm.shape}, W {W.shape}")
    AV = A_norm @ V
    Z = AV @ W
    if R is not None:
        Z = Z + V @ R
    if tape is not None:
        tape.gcn.append((V, AV, Z))
    return prelu(Z, alpha)


def _conv_patches(E: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    Ep = np.pad(E, ((0, 0), (0, 0), (pad, pad)))
    return sliding_window_view(Ep, k, axis=2)  # C x N x D x k


def _conv(P: np.ndarray, K: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("fck,cndk->fnd", K, P, optimize=True) + b[:, None, None]


def _conv_back(dY: np.ndarray, P: np.ndarray, K: np.ndarray):
    dK = np.einsum("fnd,cndk->fck", dY, P, optimize=True)
    db = dY.sum(axis=(1, 2))
    dP = np.einsum("fnd,fck->cndk", dY, K, optimize=True)
    k = K.shape[2]
    pad = k // 2
    c, n, d = dP.shape[:3]
    dEp = np.zeros((c, n, d + 2 * pad))
    for j in range(k):
        dEp[:, :, j:j + d] += dP[..., j]
    return dEp[:, :, pad:pad + d], dK, db


def encode(params: ModelParams, X: np.ndarray, A_norm: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """Stacked graph convolutions; returns the ``T x N x D_hidden`` embedding."""
    H = X
    for l in range(params.config.gcn_layers):
        H = gcn_forward(H, A_norm, params[f"gcn{l}.w"], float(params[f"gcn{l}.alpha"][0]), tape,
                        R=params.tensors.get(f"gcn{l}.r"))
    return H


def txpcnn_decode(embedding: np.ndarray, params: ModelParams, last_pos: np.ndarray,
                  tape: Tape | None = None) -> np.ndarray:
    """Decode a ``T x N x D_hidden`` embedding into ``F x 2 x N`` absolute positions.

    ``last_pos`` is ``2 x N``: the last observed positions that the decoded
    displacements are accumulated from.
    """
    c = params.config
    E = np.asarray(embedding, dtype=float)
    if E.ndim != 3 or E.shape[0] != c.T or E.shape[2] != c.d_hidden:
        raise DataError(f"embedding shape {E.shape} does not match T={c.T}, D_hidden={c.d_hidden}")
    k = c.txp_kernel
    U = None
    for l in range(c.txp_layers):
        src = E if l == 0 else U
        P = _conv_patches(src, k)
        Y = _conv(P, params[f"txp{l}.k"], params[f"txp{l}.b"])
        act = prelu(Y, float(params[f"txp{l}.alpha"][0]))
        U = act if l == 0 else U + act
        if tape is not None:
            tape.txp.append((P, Y))
    if tape is not None:
        tape.decoded = U
    disp = U @ params["head.w"] + params["head.b"]  # F x N x 2
    pos = np.asarray(last_pos, dtype=float).T[None] + np.cumsum(disp, axis=0)
    return pos.transpose(0, 2, 1)


def forward(params: ModelParams, history: np.ndarray, A_norm: np.ndarray,
            tape: Tape | None = None) -> np.ndarray:
    """Full model on one scene: history ``T x 2 x N`` -> prediction ``F x 2 x N``."""
    history = np.asarray(history, dtype=float)
    if history.shape[0] != params.config.T:
        raise DataError(f"history has {history.shape[0]} steps, model expects T={params.config.T}")
    if tape is not None:
        tape.adj = A_norm
    X = features_from_history(history)
    E = encode(params, X, A_norm, tape)
    return txpcnn_decode(E, params, history[-1], tape)


def mse_loss_and_grad(pred: np.ndarray, truth: np.ndarray, params: ModelParams,
                      tape: Tape) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over all ``F * 2 * N`` entries and its exact parameter gradient.

    ``tape`` must come from the :func:`forward` call that produced ``pred``.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} vs truth {truth.shape}")
    diff = pred - truth
    loss = float(np.mean(diff**2))
    c = params.config
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    g = (2.0 / diff.size) * diff.transpose(0, 2, 1)  # F x N x 2
    d_disp = np.cumsum(g[::-1], axis=0)[::-1]
    U = tape.decoded
    grads["head.b"] = d_disp.sum(axis=(0, 1))
    grads["head.w"] = np.einsum("fnd,fne->de", U, d_disp)
    dU = d_disp @ params["head.w"].T

    for l in range(c.txp_layers - 1, -1, -1):
        P, Y = tape.txp[l]
        alpha = float(params[f"txp{l}.alpha"][0])
        dY, dalpha = _prelu_back(dU, Y, alpha)
        dsrc, dK, db = _conv_back(dY, P, params[f"txp{l}.k"])
        grads[f"txp{l}.k"] = dK
        grads[f"txp{l}.b"] = db
        grads[f"txp{l}.alpha"] = np.array([dalpha])
        dU = dsrc if l == 0 else dU + dsrc

    dH = dU
    A = tape.adj
    At = A.transpose(0, 2, 1)
    for l in range(c.gcn_layers - 1, -1, -1):
        H_in, AH, Z = tape.gcn[l]
        W = params[f"gcn{l}.w"]
        dZ, dalpha = _prelu_back(dH, Z, float(params[f"gcn{l}.alpha"][0]))
        grads[f"gcn{l}.w"] = np.einsum("tnd,tne->de", AH, dZ)
        grads[f"gcn{l}.alpha"] = np.array([dalpha])
        if c.gcn_residual:
            grads[f"gcn{l}.r"] = np.einsum("tnd,tne->de", H_in, dZ)
        if l > 0:
            dH = At @ (dZ @ W.T)
            if c.gcn_residual:
                dH = dH + dZ @ params[f"gcn{l}.r"].T
    return loss, grads


# ---------------------------------------------------------------------------
# prediction and training


def scene_adjacency(scene, kind, bins: int = gk.DEFAULT_BINS) -> np.ndarray:
    """Normalized ``T x N x N`` adjacency sequence of a scene's history."""
    return gk.normalize_stack(gk.adjacency_stack(scene, kind, bins))


def predict(scene, params: ModelParams, kind, A_norm: np.ndarray | None = None) -> np.ndarray:
    """Predict ``F x 2 x N`` future positions for every vehicle of a scene."""
    history = np.asarray(getattr(scene, "history", scene), dtype=float)
    if history.shape[2] < 2:
        raise DataError("prediction needs at least two vehicles")
    if A_norm is None:
        A_norm = scene_adjacency(history, kind, params.config.mi_bins)
    return forward(params, history, A_norm)


def persistence(scene, F: int) -> np.ndarray:
    """Baseline that keeps every vehicle at its last observed position."""
    history = np.asarray(getattr(scene, "history", scene), dtype=float)
    return np.repeat(history[-1][None], F, axis=0)


@dataclass
class TrainReport:
    config: dict
    kind: str
    seed: int
    epochs: list = field(default_factory=list)  # {"epoch", "lr", "train_loss", "val_loss", "steps"}
    steps: int = 0
    conv_axis: str = "feature"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Prepared:
    history: np.ndarray
    truth: np.ndarray
    adj: np.ndarray


def adjacency_key(scene, kind, mi_bins) -> tuple:
    """Cache key for a scene's normalized adjacency; it depends on the history only."""
    return (scene.history.shape, scene.history.tobytes(), gk.KernelKind.parse(kind), mi_bins)


def _prepare(scenes, kind, config: ModelConfig, cache: dict | None) -> list[_Prepared]:
    out = []
    for sc in scenes:
        if sc.T != config.T or sc.F < config.F:
            raise DataError(f"scene {sc.scene_id!r} is {sc.T}+{sc.F} steps, model needs {config.T}+{config.F}")
        key = adjacency_key(sc, kind, config.mi_bins)
        if cache is not None and key in cache:
            adj = cache[key]
        else:
            adj = scene_adjacency(sc, kind, config.mi_bins)
            if cache is not None:
                cache[key] = adj
        out.append(_Prepared(sc.history, sc.future[:config.F], adj))
    return out


def _loss(params: ModelParams, prepared: list[_Prepared]) -> float:
    if not prepared:
        return float("nan")
    return float(np.mean([np.mean((forward(params, p.history, p.adj) - p.truth) ** 2) for p in prepared]))


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def train(scenes, kind, config: ModelConfig, validation=None, max_steps: int | None = None,
          adjacency_cache: dict | None = None, init: ModelParams | None = None
          ) -> tuple[ModelParams, TrainReport]:
    """Per-scene SGD with a step learning-rate schedule.

    Scenes are visited in a freshly shuffled order each epoch (one scene per
    update unless ``config.accumulate > 1``). Validation loss is reported,
    never used for early stopping.

    Raises:
        TrainingDiverged: a non-finite loss; carries the last finite parameters.
    """
    kind = gk.KernelKind.parse(kind)
    if not scenes:
        raise DataError("training needs at least one scene")
    ss = np.random.SeedSequence(config.seed)
    init_seq, order_seq = ss.spawn(2)
    params = init.copy() if init is not None else ModelParams.init(
        config, seed=int(init_seq.generate_state(1)[0]))
    order_rng = np.random.default_rng(order_seq)
    train_set = _prepare(scenes, kind, config, adjacency_cache)
    val_set = _prepare(validation or [], kind, config, adjacency_cache)
    report = TrainReport(config=config.to_dict(), kind=kind.value, seed=config.seed)
    last_good = params.copy()

    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    steps = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        losses = []
        acc = None
        pending = 0
        for idx in order_rng.permutation(len(train_set)):
            if max_steps is not None and steps >= max_steps:
                break
            p = train_set[idx]
            tape = Tape()
            pred = forward(params, p.history, p.adj, tape)
            loss, grads = mse_loss_and_grad(pred, p.truth, params, tape)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}",
                                       params=last_good, report=report)
            losses.append(loss)
            if acc is None:
                acc = grads
            else:
                for k in acc:
                    acc[k] += grads[k]
            pending += 1
            if pending == config.accumulate:
                _apply(params, acc, pending, lr, config, velocity)
                acc, pending = None, 0
                steps += 1
                if params.is_finite():
                    last_good = params.copy()
        if pending:
            _apply(params, acc, pending, lr, config, velocity)
            steps += 1
        if not params.is_finite():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", params=last_good, report=report)
        if not losses:
            break
        report.epochs.append({
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_loss": _loss(params, val_set) if val_set else None,
            "steps": steps,
        })
        logger.debug("epoch %d lr %.4g train %.6g", epoch, lr, report.epochs[-1]["train_loss"])
    report.steps = steps
    return params, report


def _apply(params: ModelParams, grads: dict, count: int, lr: float, config: ModelConfig,
           velocity: dict) -> None:
    if count > 1:
        for g in grads.values():
            g /= count
    _clip(grads, config.grad_clip)
    for k, g in grads.items():
        if config.momentum:
            velocity[k] = config.momentum * velocity[k] + g
            g = g + config.momentum * velocity[k] if config.nesterov else velocity[k]
        params.tensors[k] -= lr * g


def gradient_check(params: ModelParams, history: np.ndarray, A_norm: np.ndarray, truth: np.ndarray,
                   h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients over every parameter."""
    tape = Tape()
    pred = forward(params, history, A_norm, tape)
    _, grads = mse_loss_and_grad(pred, truth, params, tape)
    worst = 0.0
    for name, arr in params.tensors.items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = np.mean((forward(params, history, A_norm) - truth) ** 2)
            arr[idx] = orig - h
            down = np.mean((forward(params, history, A_norm) - truth) ** 2)
            arr[idx] = orig
            num = (up - down) / (2 * h)
            ana = grads[name][idx]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst
