"""Toy visual-foresight policy: shared backbone, image head, Gaussian action head.

The backbone is a single tanh layer over [image; instruction; query]. Its
hidden units are partitioned into instruction / image / action feature
groups, and a second tanh layer mixes the image features into the action
features, so the action pathway depends on the image pathway by
construction. The image head predicts the observation a fixed gap ahead
(with a diagonal residual gate on the current frame); the action head is a
Gaussian with state-dependent scale, trained by negative log-likelihood.

Everything is plain numpy with hand-written reverse-mode gradients; the
tests check them against central finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields as dataclass_fields
from typing import Callable, Sequence

import numpy as np

from .env import Observation

__all__ = [
    "ModelDims",
    "ModelParams",
    "Features",
    "TrainSample",
    "PretrainConfig",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointDimensionError",
    "init_params",
    "forward",
    "predict_image",
    "sample_actions",
    "loss_train",
    "grad_train",
    "grad_query_image",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    """Layer sizes; the three feature groups must tile the hidden layer."""

    image_dim: int = 256
    instr_dim: int = 8
    query_dim: int = 16
    hidden_dim: int = 64
    feat_instr: int = 16
    feat_image: int = 24
    feat_action: int = 24
    mix_dim: int = 24
    action_dim: int = 2

    def __post_init__(self):
        if self.feat_instr + self.feat_image + self.feat_action != self.hidden_dim:
            raise ValueError("feature groups must partition hidden_dim")
        for f in dataclass_fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.image_dim + self.instr_dim + self.query_dim


# Learnable tensor fields, in serialization order. `query` is last: it is
# the only field test-time training may touch.
PARAM_FIELDS = (
    "w_in",
    "b_in",
    "w_mix",
    "b_mix",
    "w_img",
    "res_gate",
    "b_img",
    "w_act",
    "b_act",
    "w_scale",
    "b_scale",
    "query",
)


@dataclass
class ModelParams:
    """All learnable tensors plus the dimension record they conform to."""

    dims: ModelDims
    w_in: np.ndarray
    b_in: np.ndarray
    w_mix: np.ndarray
    b_mix: np.ndarray
    w_img: np.ndarray
    res_gate: np.ndarray
    b_img: np.ndarray
    w_act: np.ndarray
    b_act: np.ndarray
    w_scale: np.ndarray
    b_scale: np.ndarray
    query: np.ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(
            dims=self.dims,
            **{name: getattr(self, name).copy() for name in PARAM_FIELDS},
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def equal(self, other: "ModelParams") -> bool:
        return self.dims == other.dims and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_FIELDS
        )


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    return {
        "w_in": (dims.hidden_dim, dims.input_dim),
        "b_in": (dims.hidden_dim,),
        "w_mix": (dims.mix_dim, dims.feat_image + dims.feat_action),
        "b_mix": (dims.mix_dim,),
        "w_img": (dims.image_dim, dims.feat_instr + dims.feat_image),
        "res_gate": (dims.image_dim,),
        "b_img": (dims.image_dim,),
        "w_act": (dims.action_dim, dims.mix_dim),
        "b_act": (dims.action_dim,),
        "w_scale": (dims.mix_dim,),
        "b_scale": (),
        "query": (dims.query_dim,),
    }


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Uniform(-0.1, 0.1) weights from the seed; the query starts at zero."""
    rng = np.random.default_rng([seed, 0])
    arrays = {}
    for name, shape in param_shapes(dims).items():
        if name == "query":
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-0.1, 0.1, size=shape)
    return ModelParams(dims=dims, **arrays)


@dataclass
class Features:
    """Backbone features: per-group splits plus the image-conditioned mix."""

    inst: np.ndarray
    img: np.ndarray
    act: np.ndarray
    mix: np.ndarray


@dataclass
class TrainSample:
    """One supervised tuple: observation, expert action, image ``gap`` ahead."""

    obs: Observation
    expert: np.ndarray
    future_image: np.ndarray


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _forward_arrays(params: ModelParams, img: np.ndarray, ins: np.ndarray) -> dict:
    """Batched forward pass; returns every intermediate the backward needs.

    img: (N, image_dim), ins: (N, instr_dim). The query vector is shared
    across the batch.
    """
    d = params.dims
    n = img.shape[0]
    x = np.concatenate(
        [img, ins, np.broadcast_to(params.query, (n, d.query_dim))], axis=1
    )
    h = np.tanh(x @ params.w_in.T + params.b_in)
    h_inst = h[:, : d.feat_instr]
    h_img = h[:, d.feat_instr : d.feat_instr + d.feat_image]
    h_act = h[:, d.feat_instr + d.feat_image :]
    u = np.concatenate([h_img, h_act], axis=1)
    mix = np.tanh(u @ params.w_mix.T + params.b_mix)
    v = np.concatenate([h_inst, h_img], axis=1)
    pred = _sigmoid(v @ params.w_img.T + img * params.res_gate + params.b_img)
    mu = mix @ params.w_act.T + params.b_act
    z_scale = mix @ params.w_scale + params.b_scale
    scale = _softplus(z_scale)
    return {
        "x": x, "h": h, "h_inst": h_inst, "h_img": h_img, "h_act": h_act,
        "u": u, "mix": mix, "v": v, "pred": pred, "mu": mu,
        "z_scale": z_scale, "scale": scale,
    }


def forward(params: ModelParams, obs: Observation) -> Features:
    """Extract the feature groups for one observation."""
    cache = _forward_arrays(params, obs.image[None, :], obs.instruction[None, :])
    return Features(
        inst=cache["h_inst"][0],
        img=cache["h_img"][0],
        act=cache["h_act"][0],
        mix=cache["mix"][0],
    )


def predict_image(
    params: ModelParams, features: Features, obs: Observation
) -> np.ndarray:
    """Predicted future frame; sigmoid keeps every pixel inside (0, 1)."""
    v = np.concatenate([features.inst, features.img])
    return _sigmoid(params.w_img @ v + params.res_gate * obs.image + params.b_img)


def action_stats(params: ModelParams, features: Features) -> tuple[np.ndarray, float]:
    """Gaussian head parameters (mean, scale) for the given features."""
    mu = params.w_act @ features.mix + params.b_act
    scale = float(_softplus(params.w_scale @ features.mix + params.b_scale))
    return mu, scale


def sample_actions(
    params: ModelParams,
    features: Features,
    k: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Draw ``k`` actions from the Gaussian head of one backbone forward.

    Returns (samples of shape (k, action_dim), mean, scale).
    """
    if k < 1:
        raise ValueError("need at least one action sample")
    mu, scale = action_stats(params, features)
    samples = mu + scale * rng.standard_normal((k, params.dims.action_dim))
    return samples, mu, scale


def _stack_batch(
    batch: Sequence[TrainSample],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    img = np.stack([s.obs.image for s in batch])
    ins = np.stack([s.obs.instruction for s in batch])
    act = np.stack([s.expert for s in batch])
    fut = np.stack([s.future_image for s in batch])
    return img, ins, act, fut


def _loss_arrays(cache: dict, act: np.ndarray, fut: np.ndarray, lam: float) -> float:
    pred, mu, scale = cache["pred"], cache["mu"], cache["scale"]
    l_img = np.mean((pred - fut) ** 2, axis=1)
    resid = np.sum((act - mu) ** 2, axis=1)
    l_act = resid / (2.0 * scale**2) + 2.0 * np.log(scale)
    return float(np.mean(l_img + lam * l_act))


def loss_train(params: ModelParams, sample: TrainSample, lam: float) -> float:
    """Image MSE plus lam * Gaussian action NLL (constants dropped)."""
    img, ins, act, fut = _stack_batch([sample])
    return _loss_arrays(_forward_arrays(params, img, ins), act, fut, lam)


def batch_loss(params: ModelParams, batch: Sequence[TrainSample], lam: float) -> float:
    img, ins, act, fut = _stack_batch(batch)
    return _loss_arrays(_forward_arrays(params, img, ins), act, fut, lam)


def _backprop_hidden(
    params: ModelParams, cache: dict, d_h: np.ndarray, grads: dict | None
) -> np.ndarray:
    """Push a gradient at the hidden layer back to the query (and w_in/b_in).

    If ``grads`` is given, the input-layer weight gradients are accumulated
    into it; either way the query gradient is returned.
    """
    d = params.dims
    d_z1 = d_h * (1.0 - cache["h"] ** 2)
    if grads is not None:
        grads["w_in"] += d_z1.T @ cache["x"]
        grads["b_in"] += d_z1.sum(axis=0)
    return d_z1 @ params.w_in[:, d.image_dim + d.instr_dim :]


def _image_loss_backward(
    params: ModelParams, cache: dict, fut: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Gradient pieces of mean-over-batch image loss w.r.t. heads and h."""
    d = params.dims
    n = fut.shape[0]
    pred = cache["pred"]
    d_pred = 2.0 * (pred - fut) / (d.image_dim * n)
    d_zimg = d_pred * pred * (1.0 - pred)
    d_v = d_zimg @ params.w_img
    d_h = np.zeros_like(cache["h"])
    d_h[:, : d.feat_instr] += d_v[:, : d.feat_instr]
    d_h[:, d.feat_instr : d.feat_instr + d.feat_image] += d_v[:, d.feat_instr :]
    head = {
        "w_img": d_zimg.T @ cache["v"],
        "b_img": d_zimg.sum(axis=0),
        "res_gate": (d_zimg * cache["x"][:, : d.image_dim]).sum(axis=0),
    }
    return d_h, head


def grad_train(
    params: ModelParams, batch: Sequence[TrainSample], lam: float
) -> dict[str, np.ndarray]:
    """Analytic gradient of the batch-mean training loss, every tensor field."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    d = params.dims
    img, ins, act, fut = _stack_batch(batch)
    n = img.shape[0]
    cache = _forward_arrays(params, img, ins)
    grads = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}

    # Image head.
    d_h, head = _image_loss_backward(params, cache, fut)
    for name, g in head.items():
        grads[name] += g

    # Action head: NLL of mean and scale.
    mu, scale, mix = cache["mu"], cache["scale"], cache["mix"]
    resid = act - mu
    d_mu = lam * (mu - act) / (scale**2)[:, None] / n
    d_scale = lam * (-np.sum(resid**2, axis=1) / scale**3 + 2.0 / scale) / n
    d_zscale = d_scale * _sigmoid(cache["z_scale"])
    grads["w_act"] += d_mu.T @ mix
    grads["b_act"] += d_mu.sum(axis=0)
    grads["w_scale"] += mix.T @ d_zscale
    grads["b_scale"] += np.array(d_zscale.sum())

    # Through the mixing layer into the action feature group.
    d_mix = d_mu @ params.w_act + d_zscale[:, None] * params.w_scale
    d_z2 = d_mix * (1.0 - mix**2)
    grads["w_mix"] += d_z2.T @ cache["u"]
    grads["b_mix"] += d_z2.sum(axis=0)
    d_u = d_z2 @ params.w_mix
    d_h[:, d.feat_instr : d.feat_instr + d.feat_image] += d_u[:, : d.feat_image]
    d_h[:, d.feat_instr + d.feat_image :] += d_u[:, d.feat_image :]

    grads["query"] += _backprop_hidden(params, cache, d_h, grads).sum(axis=0)
    return grads


def grad_query_image(
    params: ModelParams,
    inputs: Sequence[Observation],
    targets: Sequence[np.ndarray],
) -> np.ndarray:
    """Gradient of the mean image loss w.r.t. the query vector only.

    The forward pass is recomputed under the current parameters, so the
    gradient is taken at the query being updated rather than at whatever
    value produced the stored prediction.
    """
    if len(inputs) == 0 or len(inputs) != len(targets):
        raise ValueError("inputs and targets must be equal-length and nonempty")
    img = np.stack([o.image for o in inputs])
    ins = np.stack([o.instruction for o in inputs])
    fut = np.stack(list(targets))
    cache = _forward_arrays(params, img, ins)
    d_h, _ = _image_loss_backward(params, cache, fut)
    return _backprop_hidden(params, cache, d_h, None).sum(axis=0)


def image_loss(
    params: ModelParams,
    inputs: Sequence[Observation],
    targets: Sequence[np.ndarray],
) -> float:
    """Mean image loss over predicted/attained pairs, under current params."""
    img = np.stack([o.image for o in inputs])
    ins = np.stack([o.instruction for o in inputs])
    fut = np.stack(list(targets))
    cache = _forward_arrays(params, img, ins)
    return float(np.mean(np.mean((cache["pred"] - fut) ** 2, axis=1)))


@dataclass(frozen=True)
class PretrainConfig:
    """Adam pretraining hyperparameters."""

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    loss_balance: float = 1.0
    seed: int = 0

    def as_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "loss_balance": self.loss_balance,
            "seed": self.seed,
        }


def pretrain(
    dataset: Sequence[TrainSample],
    dims: ModelDims,
    hyper: PretrainConfig = PretrainConfig(),
    epoch_callback: Callable[[int, float], None] | None = None,
) -> ModelParams:
    """Train all parameters with Adam; deterministic given dataset and seed."""
    if len(dataset) == 0:
        raise ValueError("pretraining dataset is empty")
    params = init_params(dims, hyper.seed)
    shuffle_rng = np.random.default_rng([hyper.seed, 1])
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    v = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    t = 0
    n = len(dataset)
    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        num_batches = 0
        for start in range(0, n, hyper.batch_size):
            batch = [dataset[i] for i in order[start : start + hyper.batch_size]]
            grads = grad_train(params, batch, hyper.loss_balance)
            epoch_loss += batch_loss(params, batch, hyper.loss_balance)
            num_batches += 1
            t += 1
            for name in PARAM_FIELDS:
                g = grads[name]
                m[name] = beta1 * m[name] + (1.0 - beta1) * g
                v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
                m_hat = m[name] / (1.0 - beta1**t)
                v_hat = v[name] / (1.0 - beta2**t)
                updated = getattr(params, name) - hyper.learning_rate * m_hat / (
                    np.sqrt(v_hat) + eps
                )
                setattr(params, name, updated)
        if epoch_callback is not None:
            epoch_callback(epoch, epoch_loss / num_batches)
    return params


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    """File is not a well-formed checkpoint document."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint schema version is not supported."""


class CheckpointDimensionError(CheckpointError):
    """Stored arrays do not match the stored dimensions."""


def _emit_json(obj, parts: list[str]) -> None:
    # Floats are written with 17 significant digits so the decimal text
    # round-trips to the identical float64.
    if isinstance(obj, dict):
        parts.append("{")
        for i, (key, val) in enumerate(obj.items()):
            if i:
                parts.append(",")
            parts.append(json.dumps(key))
            parts.append(":")
            _emit_json(val, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, val in enumerate(obj):
            if i:
                parts.append(",")
            _emit_json(val, parts)
        parts.append("]")
    elif isinstance(obj, bool):
        parts.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(format(float(obj), ".17g"))
    elif obj is None:
        parts.append("null")
    else:
        parts.append(json.dumps(obj))


def dumps_full_precision(obj) -> str:
    """Serialize to JSON text with exact-round-trip decimal floats."""
    parts: list[str] = []
    _emit_json(obj, parts)
    return "".join(parts)


def checkpoint_text(
    params: ModelParams, hyper: dict | None = None, seed: int | None = None
) -> str:
    d = params.dims
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "dims": {f.name: getattr(d, f.name) for f in dataclass_fields(d)},
        "hyper": hyper or {},
        "seed": seed,
        "arrays": {
            name: np.asarray(arr, dtype=float).tolist()
            for name, arr in params.tensors().items()
        },
    }
    return dumps_full_precision(doc) + "\n"


def save_checkpoint(
    params: ModelParams,
    path,
    hyper: dict | None = None,
    seed: int | None = None,
) -> None:
    """Write the self-describing checkpoint document."""
    with open(path, "w") as fh:
        fh.write(checkpoint_text(params, hyper, seed))


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint; raises a distinct error per failure mode."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"not a valid checkpoint document: {exc}") from exc
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise CheckpointFormatError("missing schema_version")
    if doc["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointVersionError(
            f"unsupported schema_version {doc['schema_version']}"
        )
    try:
        dims = ModelDims(**doc["dims"])
        raw = doc["arrays"]
        arrays = {
            name: np.asarray(raw[name], dtype=float) for name in PARAM_FIELDS
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"incomplete checkpoint: {exc}") from exc
    for name, shape in param_shapes(dims).items():
        if arrays[name].shape != shape:
            raise CheckpointDimensionError(
                f"array {name} has shape {arrays[name].shape}, expected {shape}"
            )
    return ModelParams(dims=dims, **arrays)


def checkpoint_metadata(path) -> dict:
    """Hyperparameters and seed recorded in a checkpoint file."""
    with open(path) as fh:
        doc = json.load(fh)
    return {"hyper": doc.get("hyper", {}), "seed": doc.get("seed")}
