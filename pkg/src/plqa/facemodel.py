"""Embedding model, the toy-16 reference network, its trainer and weight files."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numgrad as ng
from .errors import FormatError, InputError, PlqError, ShapeError
from .seeding import stream

MAGIC = b"PLQM"
VERSION = 1


@dataclass
class EmbeddingModel:
    layers: List[ng.Layer]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = list(self.layers)
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if prev.out_shape != cur.in_shape:
                raise ShapeError(cur.kind, prev.out_shape, cur.in_shape, layer_index=i)
        sites = [i for i, layer in enumerate(self.layers) if isinstance(layer, ng.DropoutSite)]
        if len(sites) != 1:
            raise ValueError(f"a model needs exactly one DropoutSite, found {len(sites)}")
        d = sites[0]
        fcs = [i for i, layer in enumerate(self.layers) if isinstance(layer, ng.FullyConnected)]
        if d + 1 >= len(self.layers) or not fcs or fcs[-1] != d + 1:
            raise ValueError("the DropoutSite must sit immediately before the final FullyConnected layer")
        if any(not isinstance(layer, ng.ReLU) for layer in self.layers[d + 2:]):
            raise ValueError("only ReLU may follow the embedding layer")
        self.dropout_index = d

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].out_shape[0]

    @property
    def dropout_p(self) -> float:
        return self.layers[self.dropout_index].p

    def check_image(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.input_shape:
            raise ShapeError("input image", self.input_shape, image.shape)
        if not np.all(np.isfinite(image)):
            raise InputError("image contains non-finite values")
        return image

    def run(self, x, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Deterministic forward pass through ``layers[start:stop]``."""
        stop = len(self.layers) if stop is None else stop
        for i in range(start, stop):
            x = ng.forward(self.layers[i], x, index=i)
        return x

    def trace(self, x) -> List[np.ndarray]:
        """Inputs to every layer followed by the final output (deterministic mode)."""
        acts = [np.asarray(x, dtype=np.float64)]
        for i, layer in enumerate(self.layers):
            acts.append(ng.forward(layer, acts[-1], index=i))
        return acts


def toy16(seed: Optional[int] = None, dropout_p: float = 0.5, input_shape=(32, 32, 3), embedding_dim: int = 16):
    """Reference architecture. ``seed=None`` leaves every weight at zero."""
    h, w, c = input_shape
    layers: List[ng.Layer] = [
        ng.Conv2D((h, w, c), 8, kernel_size=3, padding=1),
        ng.ReLU((h, w, 8)),
        ng.AvgPool2x2((h, w, 8)),
        ng.Conv2D((h // 2, w // 2, 8), 16, kernel_size=3, padding=1),
        ng.ReLU((h // 2, w // 2, 16)),
        ng.AvgPool2x2((h // 2, w // 2, 16)),
        ng.Flatten((h // 4, w // 4, 16)),
        ng.FullyConnected((h // 4) * (w // 4) * 16, 64),
        ng.ReLU((64,)),
        ng.DropoutSite((64,), dropout_p),
        ng.FullyConnected(64, embedding_dim),
        ng.ReLU((embedding_dim,)),
    ]
    model = EmbeddingModel(layers, {"architecture": "toy-16"})
    if seed is not None:
        model.layers = init_weights(model.layers, stream(seed, "init"))
    return model


def init_weights(layers: Sequence[ng.Layer], rng: np.random.Generator) -> List[ng.Layer]:
    out = []
    for layer in layers:
        if isinstance(layer, ng.Conv2D):
            k2 = layer.kernel_size**2
            wgt = ng.glorot_uniform(rng, layer.weight.shape, k2 * layer.in_shape[2], k2 * layer.out_channels)
            layer = layer.with_params(wgt, np.zeros_like(layer.bias))
        elif isinstance(layer, ng.FullyConnected):
            wgt = ng.glorot_uniform(rng, layer.weight.shape, layer.in_shape[0], layer.out_features)
            layer = layer.with_params(wgt, np.zeros_like(layer.bias))
        out.append(layer)
    return out


def embed(model: EmbeddingModel, image) -> np.ndarray:
    """Deterministic embedding e_I (dropout disabled)."""
    return model.run(model.check_image(image))


def dropout_mask(seed: int, k: int, n: int, p: float) -> np.ndarray:
    """Keep-mask for stochastic pass ``k``: Bernoulli(1 - p) drawn from stream hash(seed, k)."""
    return (stream(seed, k).random(n) >= p).astype(np.float64)


def stochastic_embed(model: EmbeddingModel, image, m: int, seed: int, p: Optional[float] = None) -> np.ndarray:
    """``m x D`` matrix of embeddings, one per independent dropout pattern.

    The network up to the dropout site is evaluated once; only the tail is
    repeated. Row ``k`` uses the mask from stream hash(seed, k). ``p``
    overrides the model's drop probability; ``p=0`` gives all-ones masks.
    """
    if m < 2:
        raise ValueError(f"need at least 2 stochastic passes, got m={m}")
    p = model.dropout_p if p is None else float(p)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {p}")
    d = model.dropout_index
    site = model.layers[d]
    h = model.run(model.check_image(image), 0, d)
    # one row at a time: a batched matmul may round differently from the single-pass path
    rows = [model.run(site.forward(h, dropout_mask(seed, k, h.shape[-1], p), p=p), d + 1) for k in range(m)]
    return np.stack(rows)


# ---------------------------------------------------------------- training


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _occlude(batch, prob, rng):
    batch = batch.copy()
    n, h, w = batch.shape[:3]
    side = min(h, w)
    for i in range(n):
        hit = rng.random() < prob
        s = int(rng.integers(max(1, side // 10), side // 2 + 1))
        top, left = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
        if hit:
            batch[i, top:top + s, left:left + s] = 0.0
    return batch


def train_toy(
    dataset: Sequence[Tuple[np.ndarray, object]],
    epochs: int = 30,
    lr: float = 0.003,
    seed: int = 0,
    batch_size: int = 16,
    betas: Tuple[float, float] = (0.9, 0.999),
    dropout_p: float = 0.5,
    embedding_dim: int = 16,
    occlusion_p: float = 0.0,
    schedule: str = "constant",
    log=None,
) -> EmbeddingModel:
    """Train toy-16 with softmax cross-entropy through a temporary classifier.

    ``dataset`` holds ``(image, label)`` pairs. The classifier sits on top of
    the (ReLU) embedding and is discarded afterwards; dropout is active at the
    dropout site during training. Parameters are updated with Adam. Final training accuracy (dropout off) is
    stored in ``model.metadata["train_accuracy"]``.

    With ``occlusion_p > 0`` each training image is, with that probability,
    covered by a black square (side 10-50% of the shorter image side) at a
    random position before the forward pass.

    ``schedule="cosine"`` anneals the step size from ``lr`` to zero over the
    run, so the final weights settle instead of oscillating around a minimum.
    """
    if schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown schedule {schedule!r}")
    if not dataset:
        raise ValueError("empty training set")
    images = np.stack([np.asarray(img, dtype=np.float64) for img, _ in dataset])
    raw = [lab for _, lab in dataset]
    classes = sorted(set(raw), key=repr)
    if len(classes) < 2:
        raise ValueError("training needs at least 2 identities")
    counts = {c: raw.count(c) for c in classes}
    if min(counts.values()) < 4:
        raise ValueError(f"training needs at least 4 samples per identity, got {min(counts.values())}")
    index = {c: i for i, c in enumerate(classes)}
    labels = np.array([index[c] for c in raw])

    model = toy16(seed, dropout_p, images.shape[1:], embedding_dim)
    head = ng.FullyConnected(embedding_dim, len(classes))
    head = init_weights([head], stream(seed, "classifier"))[0]
    layers = model.layers + [head]
    m1 = [[np.zeros_like(p) for p in layer.params] for layer in layers]
    m2 = [[np.zeros_like(p) for p in layer.params] for layer in layers]
    b1, b2 = betas
    eps = 1e-8
    t = 0
    d = model.dropout_index
    n = len(images)

    for epoch in range(epochs):
        rate = lr if schedule == "constant" else 0.5 * lr * (1 + np.cos(np.pi * epoch / epochs))
        order = stream(seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            mask = (stream(seed, "dropout", epoch, b).random((len(idx), layers[d].in_shape[0])) >= dropout_p)
            mask = mask.astype(np.float64)
            batch = images[idx]
            if occlusion_p > 0:
                batch = _occlude(batch, occlusion_p, stream(seed, "occlude", epoch, b))
            acts = [batch]
            for i, layer in enumerate(layers):
                acts.append(layer.forward(acts[-1], mask if i == d else None))
            loss, g = _softmax_xent(acts[-1], labels[idx])
            total += loss * len(idx)
            t += 1
            grads = [None] * len(layers)
            for i in range(len(layers) - 1, -1, -1):
                grads[i] = layers[i].backward_weights(acts[i], g)
                if i:
                    g = layers[i].backward_input(acts[i], g, mask if i == d else None)
            for i, layer in enumerate(layers):
                if not layer.params:
                    continue
                new = []
                for j, (param, grad) in enumerate(zip(layer.params, grads[i])):
                    m1[i][j] = b1 * m1[i][j] + (1 - b1) * grad
                    m2[i][j] = b2 * m2[i][j] + (1 - b2) * grad * grad
                    step = rate * (m1[i][j] / (1 - b1**t)) / (np.sqrt(m2[i][j] / (1 - b2**t)) + eps)
                    new.append(param - step)
                layers[i] = layer.with_params(*new)
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {total / n:.4f}")

    logits = images
    for layer in layers:
        logits = layer.forward(logits)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    out = EmbeddingModel(layers[:-1], {"architecture": "toy-16", "train_accuracy": acc, "epochs": epochs, "seed": seed, "schedule": schedule})
    return out


# ---------------------------------------------------------------- weight file


def save(model: EmbeddingModel, path) -> None:
    header = {
        "layers": [layer.config() for layer in model.layers],
        "params": [[list(p.shape) for p in layer.params] for layer in model.layers],
        "metadata": model.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes() for layer in model.layers for p in layer.params
    )
    Path(path).write_bytes(MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload)


def load(path) -> EmbeddingModel:
    return loads(Path(path).read_bytes())


def loads(data: bytes) -> EmbeddingModel:
    if len(data) < 12:
        raise FormatError(f"file too short for a PLQM preamble: {len(data)} bytes, need 12", offset=len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}", offset=4)
    if 12 + hlen > len(data):
        raise FormatError(f"header declares {hlen} bytes but only {len(data) - 12} follow", offset=12)
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        configs = header["layers"]
        shapes = header["params"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise FormatError(f"malformed header: {err}", offset=12) from None
    if len(shapes) != len(configs):
        raise FormatError(f"header lists {len(configs)} layers but {len(shapes)} parameter groups", offset=12)
    try:
        layers = [ng.layer_from_config(cfg) for cfg in configs]
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"bad layer description: {err}", offset=12) from None

    offset = 12 + hlen
    declared = sum(int(np.prod(s)) for group in shapes for s in group)
    actual = len(data) - offset
    if actual != 8 * declared:
        raise FormatError(
            f"payload holds {actual} bytes but the header declares {declared} weights = {8 * declared} bytes",
            offset=offset,
        )
    out = []
    for i, (layer, group) in enumerate(zip(layers, shapes)):
        expected = [list(p.shape) for p in layer.params]
        if [list(s) for s in group] != expected:
            raise FormatError(f"layer {i} declares parameter shapes {group}, {layer.kind} needs {expected}", offset=12)
        arrays = []
        for shape in group:
            count = int(np.prod(shape))
            arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
            offset += 8 * count
        out.append(layer.with_params(*arrays) if arrays else layer)
    try:
        return EmbeddingModel(out, header.get("metadata", {}))
    except (ValueError, PlqError) as err:
        raise FormatError(f"layers do not form a valid model: {err}", offset=12) from None
