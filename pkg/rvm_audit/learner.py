"""Compact convolutional binary classifier, written against numpy.

Architecture: blocks of [conv kxk (same padding) -> bias -> ReLU -> 2x2 mean-pool],
then a global mean-pool and one logistic output unit.  The default descriptor
(channels 8/16/32/64) has about 24k parameters and stands in for ResNet-18 in the
audit protocol.  All arithmetic is float64; reductions run in a fixed order so a
fixed seed reproduces parameters and reports bit for bit.
"""
import logging
import math
import struct
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, model_validator
from scipy.special import expit

from rvm_audit.metrics import PredictionSet, SingleClassError, auc_roc
from rvm_audit.transforms import AugmentSpec, augment_array

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


class TrainingDataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ArchSpec(BaseModel):
    in_channels: int = Field(default=1, ge=1, description="1 for vessel maps, 3 for fundus images")
    channels: List[int] = Field(default=[8, 16, 32, 64], min_length=1,
                                description="Output channels of each conv block")
    kernel: int = Field(default=3, ge=1, description="Odd conv kernel size")
    input_size: int = Field(default=224, ge=1, description="Square input side in pixels")

    @model_validator(mode='after')
    def _consistent(self):
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd, got %d" % self.kernel)
        if min(self.channels) < 1:
            raise ValueError("channel widths must be positive")
        if self.input_size < 2 ** len(self.channels):
            raise ValueError("input_size %d is too small for %d pooling stages"
                             % (self.input_size, len(self.channels)))
        return self

    def shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        out = []
        cin = self.in_channels
        for k, cout in enumerate(self.channels):
            out.append(("conv%d.weight" % k, (cout, cin, self.kernel, self.kernel)))
            out.append(("conv%d.bias" % k, (cout,)))
            cin = cout
        out.append(("fc.weight", (cin,)))
        out.append(("fc.bias", (1,)))
        return out


TOY_ARCH = ArchSpec(channels=[2, 3], input_size=8)


class ClassifierParams:
    """Immutable snapshot of network tensors in descriptor order"""

    def __init__(self, arch: ArchSpec, tensors: Sequence[np.ndarray]):
        shapes = arch.shapes()
        if len(tensors) != len(shapes):
            raise ShapeError("expected %d tensors, got %d" % (len(shapes), len(tensors)))
        checked = []
        for (name, shape), t in zip(shapes, tensors):
            t = np.array(t, dtype=np.float64)
            if t.shape != shape:
                raise ShapeError("%s has shape %s, expected %s" % (name, t.shape, shape))
            if not np.isfinite(t).all():
                raise ValueError("%s holds non-finite values" % name)
            t.setflags(write=False)
            checked.append(t)
        self.arch = arch
        self.tensors = checked

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.arch.shapes()]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors)

    def zeros_like(self):
        return ClassifierParams(self.arch, [np.zeros_like(t) for t in self.tensors])

    def __eq__(self, other):
        return (isinstance(other, ClassifierParams) and self.arch == other.arch
                and all(np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors)))

    def __repr__(self):
        return "ClassifierParams(channels=%s, n_params=%d)" % (self.arch.channels, self.n_params)


def build_model(arch: Optional[ArchSpec] = None, seed: int = 0) -> ClassifierParams:
    """He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases zero"""
    arch = arch or ArchSpec()
    rng = np.random.default_rng(seed)
    tensors = []
    for name, shape in arch.shapes():
        if name.endswith('bias'):
            tensors.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = math.sqrt(6.0 / fan_in)
        tensors.append(rng.uniform(-bound, bound, size=shape))
    params = ClassifierParams(arch, tensors)
    logger.debug("built %s from seed %d", params, seed)
    return params


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _conv_forward(x, weight, bias):
    n, c, h, w = x.shape
    cout, _, k, _ = weight.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
    out = cols @ weight.reshape(cout, -1).T + bias
    return out.reshape(n, h, w, cout).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, x_shape, weight, need_dx=True):
    n, c, h, w = x_shape
    cout, _, k, _ = weight.shape
    p = k // 2
    d = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dweight = (d.T @ cols).reshape(weight.shape)
    dbias = d.sum(axis=0)
    if not need_dx:
        return dweight, dbias, None
    dcols = (d @ weight.reshape(cout, -1)).reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dweight, dbias, dxp[:, :, p:p + h, p:p + w]


def _pool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def _pool_backward(dout, x_shape):
    h2, w2 = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape)
    dx[:, :, :2 * h2, :2 * w2] = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0
    return dx


def _as_batch(params: ClassifierParams, batch):
    x = np.asarray(batch, dtype=np.float64)
    arch = params.arch
    if x.ndim == 3 and arch.in_channels == 1:
        x = x[:, None]
    expected = (arch.in_channels, arch.input_size, arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError("batch shape %s does not match (N, %d, %d, %d)"
                         % ((x.shape,) + expected))
    return x


def _forward(params: ClassifierParams, x):
    t = params.tensors
    n_blocks = len(params.arch.channels)
    caches = []
    h = x
    for blk in range(n_blocks):
        z, cols = _conv_forward(h, t[2 * blk], t[2 * blk + 1])
        a = np.maximum(z, 0.0)
        caches.append((h.shape, cols, z))
        h = _pool_forward(a)
    pooled = h.mean(axis=(2, 3))
    logits = pooled @ t[-2] + t[-1][0]
    return logits, (caches, h.shape, pooled)


def _backward(params: ClassifierParams, dlogits, cache):
    caches, last_shape, pooled = cache
    t = params.tensors
    grads = [None] * len(t)
    grads[-2] = pooled.T @ dlogits
    grads[-1] = np.array([dlogits.sum()])
    hw = last_shape[2] * last_shape[3]
    dh = np.broadcast_to((np.outer(dlogits, t[-2]) / hw)[:, :, None, None], last_shape)
    for blk in reversed(range(len(caches))):
        in_shape, cols, z = caches[blk]
        da = _pool_backward(dh, z.shape)
        dz = da * (z > 0)
        dw, db, dh = _conv_backward(dz, cols, in_shape, t[2 * blk], need_dx=blk > 0)
        grads[2 * blk] = dw
        grads[2 * blk + 1] = db
    return grads


def forward_logits(params: ClassifierParams, batch, chunk: int = 32):
    x = _as_batch(params, batch)
    out = [_forward(params, x[s:s + chunk])[0] for s in range(0, x.shape[0], chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def forward(params: ClassifierParams, batch, chunk: int = 32):
    """Probability of the positive class per image"""
    return expit(forward_logits(params, batch, chunk))


def preactivations(params: ClassifierParams, batch) -> List[np.ndarray]:
    """Conv outputs before each ReLU"""
    _, (caches, _, _) = _forward(params, _as_batch(params, batch))
    return [z for _, _, z in caches]


def _check_labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError("got %d labels for a batch of %d" % (labels.size, n))
    if not np.isin(labels, (0, 1)).all():
        raise LabelError("labels must be 0 or 1")
    return labels.astype(np.int64)


def bce_from_logits(logits, labels, class_weights=(1.0, 1.0)):
    """Mean weighted binary cross-entropy"""
    labels = np.asarray(labels)
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    return float(np.sum(w * (np.logaddexp(0.0, logits) - labels * logits)) / labels.size)


def loss_and_grad(params: ClassifierParams, batch, labels, class_weights=(1.0, 1.0),
                  micro_batch: Optional[int] = None):
    """Mean weighted BCE and its gradient, accumulated over micro-batches in order"""
    x = _as_batch(params, batch)
    n = x.shape[0]
    labels = _check_labels(labels, n)
    weights = np.asarray(class_weights, dtype=np.float64)
    step = micro_batch or n
    loss = 0.0
    grads = [np.zeros_like(t) for t in params.tensors]
    for s in range(0, n, step):
        xb, yb = x[s:s + step], labels[s:s + step]
        logits, cache = _forward(params, xb)
        wb = weights[yb]
        loss += float(np.sum(wb * (np.logaddexp(0.0, logits) - yb * logits))) / n
        dlogits = wb * (expit(logits) - yb) / n
        for g, part in zip(grads, _backward(params, dlogits, cache)):
            g += part
    return loss, ClassifierParams(params.arch, grads)


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ClassifierParams, grad: ClassifierParams) -> ClassifierParams:
        return ClassifierParams(params.arch, [p - self.lr * g for p, g in zip(params.tensors, grad.tensors)])


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: ClassifierParams, grad: ClassifierParams) -> ClassifierParams:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params.tensors]
            self.v = [np.zeros_like(p) for p in params.tensors]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for k, (p, g) in enumerate(zip(params.tensors, grad.tensors)):
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            out.append(p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return ClassifierParams(params.arch, out)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainConfig(BaseModel):
    batch_size: int = Field(default=64, ge=1, description="Images per optimisation step")
    lr: float = Field(default=0.001, gt=0, description="SGD learning rate")
    max_epochs: int = Field(default=10, ge=1, description="Epoch ceiling")
    patience: int = Field(default=5, ge=0, description="Non-improving epochs tolerated")
    optimizer: Literal['sgd', 'adam'] = Field(default='sgd')
    adam_lr: float = Field(default=0.0001, gt=0, description="Adam learning rate")
    adam_betas: Tuple[float, float] = Field(default=(0.9, 0.999))
    adam_eps: float = Field(default=1e-8, gt=0)
    weighted_sampling: bool = Field(default=False,
                                    description="Draw each class with probability 1/class frequency")
    class_weights: Tuple[float, float] = Field(default=(1.0, 1.0),
                                               description="Loss weights for labels 0 and 1")
    monitor: Literal['val_loss', 'val_auc_roc'] = Field(default='val_loss',
                                                        description="Early stopping / selection metric")
    input_size: int = Field(default=224, ge=1, description="Square network input side")
    channels: List[int] = Field(default=[8, 16, 32, 64], min_length=1)
    augment: AugmentSpec = Field(default_factory=AugmentSpec)
    micro_batch: int = Field(default=16, ge=1, description="Gradient accumulation chunk")
    seed: int = Field(default=0)

    @model_validator(mode='after')
    def _patience_within_epochs(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience (%d) exceeds max_epochs (%d)" % (self.patience, self.max_epochs))
        return self


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_auc_roc: float


class TrainReport(BaseModel):
    epochs: List[EpochRecord] = Field(default_factory=list)
    best_epoch: int = Field(default=0, description="1-based epoch whose parameters were returned")
    stop_reason: Literal['max_epochs', 'early_stop'] = 'max_epochs'
    monitor: str = 'val_loss'

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.model_dump() for e in self.epochs],
                            columns=['epoch', 'train_loss', 'val_loss', 'val_auc_roc'])

    def write(self, path) -> None:
        self.frame().to_csv(path, index=False, float_format='%.10g')


def weighted_sample_indices(labels, n: int, rng: np.random.Generator):
    """n indices drawn with replacement, each class carrying half the mass"""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=2)
    if (counts == 0).any():
        raise TrainingDataError("weighted sampling needs both classes")
    p = 1.0 / counts[labels]
    return rng.choice(labels.size, size=n, replace=True, p=p / p.sum())


def _validation_scores(params, x_val, y_val):
    logits = forward_logits(params, x_val)
    val_loss = bce_from_logits(logits, y_val)
    try:
        val_auc = auc_roc(PredictionSet.from_arrays(y_val, expit(logits)))
    except SingleClassError:
        val_auc = float('nan')
    return val_loss, val_auc


def train(x_train, y_train, x_val, y_val, config: Optional[TrainConfig] = None):
    """Fit the classifier; returns (parameters of the best epoch, TrainReport)

    x_*: arrays (N, C, S, S) or (N, S, S) scaled to [0, 1], S = config.input_size
    """
    config = config or TrainConfig()
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    if x_train.ndim == 3:
        x_train = x_train[:, None]
    if x_val.ndim == 3:
        x_val = x_val[:, None]
    y_train = _check_labels(y_train, x_train.shape[0])
    if x_val.shape[0] == 0:
        raise TrainingDataError("validation partition is empty")
    y_val = _check_labels(y_val, x_val.shape[0])
    if np.unique(y_train).size < 2:
        raise TrainingDataError("training partition holds a single class")

    arch = ArchSpec(in_channels=x_train.shape[1], channels=config.channels,
                    input_size=config.input_size)
    params = build_model(arch, seed=config.seed)
    optimizer = (Adam(config.adam_lr, config.adam_betas, config.adam_eps)
                 if config.optimizer == 'adam' else SGD(config.lr))
    order_rng = np.random.default_rng([config.seed, 1])
    augment_rng = np.random.default_rng([config.seed, 2])

    n = x_train.shape[0]
    report = TrainReport(monitor=config.monitor)
    best_params, best_metric, wait = params, None, 0
    for epoch in range(1, config.max_epochs + 1):
        if config.weighted_sampling:
            order = weighted_sample_indices(y_train, n, order_rng)
        else:
            order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = np.stack([augment_array(x_train[i], config.augment, augment_rng) for i in idx])
            loss, grad = loss_and_grad(params, xb, y_train[idx], config.class_weights, config.micro_batch)
            params = optimizer.step(params, grad)
            total += loss * idx.size
        val_loss, val_auc = _validation_scores(params, x_val, y_val)
        report.epochs.append(EpochRecord(epoch=epoch, train_loss=total / n, val_loss=val_loss,
                                         val_auc_roc=val_auc))
        logger.info("epoch %d/%d train_loss %.4f val_loss %.4f val_auc_roc %.4f",
                    epoch, config.max_epochs, total / n, val_loss, val_auc)

        metric = val_loss if config.monitor == 'val_loss' else -val_auc
        if best_metric is None or metric < best_metric:
            best_params, best_metric, wait = params, metric, 0
            report.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                report.stop_reason = 'early_stop'
                logger.info("early stop after epoch %d, best epoch %d", epoch, report.best_epoch)
                break
    if report.best_epoch == 0:
        # monitored metric undefined every epoch (single-class validation AUC)
        logger.warning("no epoch produced a comparable %s; keeping the last parameters", config.monitor)
        best_params, report.best_epoch = params, len(report.epochs)
    return best_params, report


def predict(params: ClassifierParams, x, image_ids: Sequence[str], subject_ids: Sequence[str],
            labels) -> PredictionSet:
    return PredictionSet.from_arrays(labels, forward(params, x), image_ids, subject_ids)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b'RVMCKPT\x00'
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ClassifierParams, path) -> None:
    """magic | u16 version | u32 descriptor length | descriptor JSON | float64 LE tensors"""
    descriptor = params.arch.model_dump_json().encode('utf-8')
    parts = [CHECKPOINT_MAGIC, struct.pack('<HI', CHECKPOINT_VERSION, len(descriptor)), descriptor]
    parts.extend(t.astype('<f8').tobytes() for t in params.tensors)
    Path(path).write_bytes(b''.join(parts))


def load_checkpoint(path) -> ClassifierParams:
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if data[:head] != CHECKPOINT_MAGIC:
        raise CheckpointError("%s is not a classifier checkpoint" % path)
    if len(data) < head + 6:
        raise CheckpointError("checkpoint header truncated")
    version, length = struct.unpack('<HI', data[head:head + 6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version %d" % version)
    pos = head + 6
    arch = ArchSpec.model_validate_json(data[pos:pos + length])
    pos += length
    tensors = []
    for name, shape in arch.shapes():
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise CheckpointError("checkpoint truncated inside %s" % name)
        tensors.append(np.frombuffer(data[pos:pos + size], dtype='<f8').reshape(shape))
        pos += size
    if pos != len(data):
        raise CheckpointError("%d trailing bytes after the last tensor" % (len(data) - pos))
    return ClassifierParams(arch, tensors)
