"""Joint visual-semantic embedding: two affine projections into a shared
d-dimensional space trained so matched image/caption pairs sit close in L2.

The default objective for a pair is the squared L2 distance between the two
projected vectors, averaged over the batch. That objective has a known
degenerate minimum - both projections can collapse onto a single point -
so the trainer always reports an embedding-variance diagnostic and warns
when it detects collapse. An optional hinge variant with in-batch negatives
(``margin_mode``) is provided as an extension for users who want to rule the
collapse out.

Checkpoint layout (DSKM, little-endian):

    magic    4 bytes  b"DSKM"
    version  u32      1
    d, image_dim, text_dim  u32 each
    w_v (d x image_dim), b_v (d), w_u (d x text_dim), b_u (d)  f64 row-major
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, IntegrityError, ShapeError
from .numerics import AdamState, Rng, adam_step, clip_gradients

log = logging.getLogger(__name__)

MAGIC = b"DSKM"
VERSION = 1


@dataclass
class ProjectionLayer:
    """Affine map z -> w @ z + b into the shared space."""

    w: np.ndarray  # (d, input_dim)
    b: np.ndarray  # (d,)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.ndim != 1 or self.w.shape[0] != self.b.shape[0]:
            raise ShapeError(
                f"projection shapes inconsistent: w {self.w.shape}, b {self.b.shape}"
            )

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise ShapeError(
                f"projection expects dim {self.input_dim}, got vector of shape {x.shape}"
            )
        return self.w @ x + self.b

    def apply_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[1] != self.input_dim:
            raise ShapeError(
                f"projection expects (n, {self.input_dim}), got {xs.shape}"
            )
        return xs @ self.w.T + self.b


@dataclass
class JointEmbeddingModel:
    image_proj: ProjectionLayer
    text_proj: ProjectionLayer

    def __post_init__(self):
        if self.image_proj.d != self.text_proj.d:
            raise ShapeError(
                f"projection output dims differ: {self.image_proj.d} vs {self.text_proj.d}"
            )

    @property
    def d(self) -> int:
        return self.image_proj.d

    @property
    def image_dim(self) -> int:
        return self.image_proj.input_dim

    @property
    def text_dim(self) -> int:
        return self.text_proj.input_dim

    def embed_image(self, v: np.ndarray) -> np.ndarray:
        return self.image_proj.apply(v)

    def embed_text(self, u: np.ndarray) -> np.ndarray:
        return self.text_proj.apply(u)

    def embed_images(self, vs: np.ndarray) -> np.ndarray:
        return self.image_proj.apply_batch(vs)

    def embed_texts(self, us: np.ndarray) -> np.ndarray:
        return self.text_proj.apply_batch(us)

    def params(self) -> dict[str, np.ndarray]:
        return {
            "w_v": self.image_proj.w,
            "b_v": self.image_proj.b,
            "w_u": self.text_proj.w,
            "b_u": self.text_proj.b,
        }

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> "JointEmbeddingModel":
        return cls(
            image_proj=ProjectionLayer(params["w_v"], params["b_v"]),
            text_proj=ProjectionLayer(params["w_u"], params["b_u"]),
        )


@dataclass
class PairBatch:
    """Parallel (image feature, caption feature) pairs; an image with k
    captions contributes k rows."""

    image_features: np.ndarray  # (n, image_dim)
    text_features: np.ndarray  # (n, text_dim)

    def __post_init__(self):
        self.image_features = np.atleast_2d(np.asarray(self.image_features, dtype=np.float64))
        self.text_features = np.atleast_2d(np.asarray(self.text_features, dtype=np.float64))
        if self.image_features.shape[0] != self.text_features.shape[0]:
            raise ShapeError(
                f"pair counts differ: {self.image_features.shape[0]} images vs "
                f"{self.text_features.shape[0]} texts"
            )

    def __len__(self) -> int:
        return self.image_features.shape[0]


@dataclass
class TrainConfig:
    epochs: int
    d: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 128
    grad_clip: float = 10.0
    seed: int = 42
    freeze_image_side: bool = False
    margin_mode: bool = False
    margin: float = 0.2

    def __post_init__(self):
        if self.epochs < 0 or self.d < 1 or self.batch_size < 1:
            raise DataError("epochs must be >= 0; d and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.grad_clip <= 0 or self.margin <= 0:
            raise DataError("learning_rate, grad_clip and margin must be positive")


@dataclass
class TrainResult:
    model: JointEmbeddingModel
    loss_history: list[float]
    diagnostics: dict = field(default_factory=dict)


def pair_loss(e_u: np.ndarray, e_v: np.ndarray) -> float:
    """Squared L2 distance between one text embedding and one image embedding."""
    e_u = np.asarray(e_u, dtype=np.float64)
    e_v = np.asarray(e_v, dtype=np.float64)
    if e_u.shape != e_v.shape:
        raise ShapeError(f"embedding shapes differ: {e_u.shape} vs {e_v.shape}")
    diff = e_u - e_v
    return float(diff @ diff)


def loss_gradients(model: JointEmbeddingModel, batch: PairBatch):
    """Mean pair loss over the batch and its analytic gradients.

    With r_i = e_u_i - e_v_i the gradients are
        dw_u = (2/n) sum r_i u_i^T     db_u = (2/n) sum r_i
        dw_v = -(2/n) sum r_i v_i^T    db_v = -(2/n) sum r_i
    """
    n = len(batch)
    if n == 0:
        raise DataError("empty pair batch")
    vs = batch.image_features
    us = batch.text_features
    e_v = model.embed_images(vs)
    e_u = model.embed_texts(us)
    r = e_u - e_v  # (n, d)
    loss = float(np.sum(r * r)) / n
    coef = 2.0 / n
    grads = {
        "w_u": coef * (r.T @ us),
        "b_u": coef * r.sum(axis=0),
        "w_v": -coef * (r.T @ vs),
        "b_v": -coef * r.sum(axis=0),
    }
    return loss, grads


def margin_loss_gradients(model: JointEmbeddingModel, batch: PairBatch, margin: float):
    """Hinge objective with in-batch negatives (extension, not the default).

    Per pair i, with the negative image taken one position down the batch
    (wrapping): max(0, |e_u_i - e_v_i|^2 - |e_u_i - e_v_neg(i)|^2 + margin),
    averaged over the batch.
    """
    n = len(batch)
    if n == 0:
        raise DataError("empty pair batch")
    vs = batch.image_features
    us = batch.text_features
    e_v = model.embed_images(vs)
    e_u = model.embed_texts(us)
    neg = np.roll(np.arange(n), -1)
    r_pos = e_u - e_v
    r_neg = e_u - e_v[neg]
    per_pair = np.sum(r_pos * r_pos, axis=1) - np.sum(r_neg * r_neg, axis=1) + margin
    active = per_pair > 0.0
    loss = float(np.sum(np.where(active, per_pair, 0.0))) / n

    mask = active.astype(np.float64)[:, None]
    coef = 2.0 / n
    d_eu = coef * mask * (r_pos - r_neg)
    d_ev = -coef * mask * r_pos  # from the positive term
    d_ev_neg = coef * mask * r_neg  # from the negative term, lands on e_v[neg]
    d_ev_total = d_ev.copy()
    np.add.at(d_ev_total, neg, d_ev_neg)
    grads = {
        "w_u": d_eu.T @ us,
        "b_u": d_eu.sum(axis=0),
        "w_v": d_ev_total.T @ vs,
        "b_v": d_ev_total.sum(axis=0),
    }
    return loss, grads


def init_model(image_dim: int, text_dim: int, d: int, seed: int) -> JointEmbeddingModel:
    """Uniform fan-based init: weights in [-s, s], s = sqrt(6/(fan_in+fan_out)),
    biases zero. Image side is drawn first, then the text side."""
    if image_dim < 1 or text_dim < 1 or d < 1:
        raise DataError(
            f"dims must be positive: image_dim={image_dim}, text_dim={text_dim}, d={d}"
        )
    rng = Rng(seed)
    s_v = np.sqrt(6.0 / (image_dim + d))
    s_u = np.sqrt(6.0 / (text_dim + d))
    w_v = rng.uniform(-s_v, s_v, size=(d, image_dim))
    w_u = rng.uniform(-s_u, s_u, size=(d, text_dim))
    return JointEmbeddingModel(
        image_proj=ProjectionLayer(w_v, np.zeros(d)),
        text_proj=ProjectionLayer(w_u, np.zeros(d)),
    )


def embedding_variance(model: JointEmbeddingModel, batch: PairBatch) -> float:
    """Mean per-coordinate variance of all embedded outputs (both sides).

    Values near zero mean every projection lands on one point - the
    degenerate minimum of the pairwise objective.
    """
    stacked = np.vstack([model.embed_images(batch.image_features),
                         model.embed_texts(batch.text_features)])
    return float(np.var(stacked, axis=0).mean())


COLLAPSE_LOSS = 1e-3
COLLAPSE_VARIANCE = 1e-2


def train(model: JointEmbeddingModel, dataset: PairBatch, config: TrainConfig) -> TrainResult:
    """Mini-batch Adam on the pairwise objective.

    Shuffling is seeded and the last partial batch is kept, so a given
    (dataset, config) always produces bit-identical parameters. Loss
    history holds one mean-loss entry per epoch.
    """
    n = len(dataset)
    if n == 0:
        raise DataError("empty training dataset")
    if dataset.image_features.shape[1] != model.image_dim:
        raise ShapeError(
            f"image features have dim {dataset.image_features.shape[1]}, "
            f"model expects {model.image_dim}"
        )
    if dataset.text_features.shape[1] != model.text_dim:
        raise ShapeError(
            f"text features have dim {dataset.text_features.shape[1]}, "
            f"model expects {model.text_dim}"
        )

    params = {k: p.copy() for k, p in model.params().items()}
    trainable = sorted(params)
    if config.freeze_image_side:
        trainable = [k for k in trainable if k not in ("w_v", "b_v")]

    opt = AdamState.for_params(
        {k: params[k] for k in trainable}, learning_rate=config.learning_rate
    )
    rng = Rng(config.seed)
    history: list[float] = []
    plateau = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            sub = PairBatch(dataset.image_features[idx], dataset.text_features[idx])
            current = JointEmbeddingModel.from_params(params)
            if config.margin_mode:
                loss, grads = margin_loss_gradients(current, sub, config.margin)
            else:
                loss, grads = loss_gradients(current, sub)
            if not np.isfinite(loss):
                raise DataError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}"
                )
            total += loss * len(sub)
            step_grads = clip_gradients({k: grads[k] for k in trainable}, config.grad_clip)
            updated = adam_step(opt, {k: params[k] for k in trainable}, step_grads)
            params.update(updated)
        history.append(total / n)
        if len(history) >= 2 and abs(history[-1] - history[-2]) < 1e-12:
            plateau += 1
            log.info("loss plateau at epoch %d (mean loss %.6g)", epoch, history[-1])

    final_model = JointEmbeddingModel.from_params(params)
    variance = embedding_variance(final_model, dataset)
    final_loss = history[-1] if history else None
    collapsed = (
        final_loss is not None
        and final_loss < COLLAPSE_LOSS
        and variance < COLLAPSE_VARIANCE
    )
    if collapsed:
        log.warning(
            "embedding collapse detected: mean loss %.3g with embedding variance %.3g "
            "- all projections are converging to a single point",
            final_loss, variance,
        )
    return TrainResult(
        model=final_model,
        loss_history=history,
        diagnostics={
            "final_loss": final_loss,
            "embedding_variance": variance,
            "collapse": collapsed,
            "plateau_epochs": plateau,
        },
    )


# ---------------------------------------------------------------------------
# DSKM checkpoints
# ---------------------------------------------------------------------------

def save_model(model: JointEmbeddingModel, path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIII", VERSION, model.d, model.image_dim, model.text_dim)
    for arr in (model.image_proj.w, model.image_proj.b,
                model.text_proj.w, model.text_proj.b):
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_model(path) -> JointEmbeddingModel:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise IntegrityError(f"model checkpoint truncated: {len(data)} bytes")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, d, image_dim, text_dim = struct.unpack_from("<IIII", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported model checkpoint version {version}")
    offset = 20
    expected = 8 * (d * image_dim + d + d * text_dim + d)
    if len(data) - offset != expected:
        raise IntegrityError(
            f"model checkpoint has {len(data) - offset} parameter bytes, expected {expected}"
        )

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return arr.astype(np.float64)

    w_v = take((d, image_dim))
    b_v = take((d,))
    w_u = take((d, text_dim))
    b_u = take((d,))
    return JointEmbeddingModel(
        image_proj=ProjectionLayer(w_v, b_v),
        text_proj=ProjectionLayer(w_u, b_u),
    )
