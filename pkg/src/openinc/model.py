"""MLP encoder, projection head and linear classifier, plus teacher snapshots.

Weights are stored as ``(fan_in, fan_out)`` arrays and biases as
``(1, fan_out)`` rows so that a layer is ``x @ W + 1 b``.  Forward passes
take an optional :class:`~openinc.autodiff.Tape`; when one is given the
parameters are watched on it and their gradients can be read back with
``tape.grad(array)``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import InvalidCount, ShapeMismatch


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class Dense:
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int) -> "Dense":
        return cls(glorot_uniform(rng, fan_in, fan_out), np.zeros((1, fan_out)))

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, tape: Tape | None) -> Tensor:
        w = tape.watch(self.weight) if tape else Tensor(self.weight)
        b = tape.watch(self.bias) if tape else Tensor(self.bias)
        ones = Tensor(np.ones((x.shape[0], 1)))
        return ad.add(ad.matmul(x, w), ad.matmul(ones, b))


@dataclass
class EncoderParams:
    layers: list[Dense]

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].fan_out


@dataclass
class HeadParams:
    layers: list[Dense]

    @property
    def proj_dim(self) -> int:
        return self.layers[-1].fan_out


@dataclass
class ClassifierParams:
    layer: Dense

    @property
    def width(self) -> int:
        return self.layer.fan_out


@dataclass
class Teacher:
    encoder: EncoderParams
    head: HeadParams
    classifier: ClassifierParams


@dataclass
class ModelState:
    encoder: EncoderParams
    head: HeadParams
    classifier: ClassifierParams
    rng: np.random.Generator = field(repr=False)
    seed: int = 0
    teacher: Teacher | None = None

    def backbone_params(self) -> list[np.ndarray]:
        out = []
        for layer in self.encoder.layers + self.head.layers:
            out.extend(layer.params())
        return out

    def classifier_params(self) -> list[np.ndarray]:
        return self.classifier.layer.params()

    def named_layers(self) -> list[tuple[str, np.ndarray]]:
        named = []
        for prefix, layers in (("encoder", self.encoder.layers), ("head", self.head.layers)):
            for i, layer in enumerate(layers):
                named.append((f"{prefix}.{i}.weight", layer.weight))
                named.append((f"{prefix}.{i}.bias", layer.bias))
        named.append(("classifier.weight", self.classifier.layer.weight))
        named.append(("classifier.bias", self.classifier.layer.bias))
        return named

    @property
    def dims(self) -> dict:
        return {
            "input_dim": self.encoder.input_dim,
            "hidden_dims": [layer.fan_out for layer in self.encoder.layers[:-1]],
            "feature_dim": self.encoder.feature_dim,
            "proj_dim": self.head.proj_dim,
            "num_classes": self.classifier.width,
        }


def init_model(
    input_dim: int,
    hidden_dims: tuple[int, ...] = (64, 64),
    feature_dim: int = 16,
    proj_dim: int = 8,
    num_classes: int = 0,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> ModelState:
    rng = np.random.default_rng(seed) if rng is None else rng
    sizes = [input_dim, *hidden_dims, feature_dim]
    encoder = EncoderParams([Dense.init(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])])
    head = HeadParams([Dense.init(rng, feature_dim, feature_dim), Dense.init(rng, feature_dim, proj_dim)])
    classifier = ClassifierParams(Dense.init(rng, feature_dim, num_classes))
    return ModelState(encoder, head, classifier, rng=rng, seed=seed)


def _as_input(x, width: int) -> Tensor:
    if not isinstance(x, Tensor):
        arr = np.asarray(x, dtype=np.float64)
        x = Tensor(arr.reshape(0, width) if arr.size == 0 else arr)
    if x.data.ndim != 2 or x.shape[1] != width:
        raise ShapeMismatch(f"expected input of width {width}, got shape {x.shape}")
    return x


def _mlp(layers: list[Dense], x: Tensor, tape: Tape | None) -> Tensor:
    h = x
    for i, layer in enumerate(layers):
        h = layer(h, tape)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def encode(state: ModelState, x, tape: Tape | None = None) -> Tensor:
    """Encoder features; the last layer is linear (no relu)."""
    return _mlp(state.encoder.layers, _as_input(x, state.encoder.input_dim), tape)


def project(state: ModelState, z, tape: Tape | None = None) -> Tensor:
    """linear -> relu -> linear, then unit-normalize each row."""
    h = _mlp(state.head.layers, _as_input(z, state.encoder.feature_dim), tape)
    return ad.l2_normalize(h)


def classify(state: ModelState, z, tape: Tape | None = None) -> Tensor:
    """Raw logits over the currently observed classes."""
    return state.classifier.layer(_as_input(z, state.encoder.feature_dim), tape)


def teacher_encode(state: ModelState, x) -> Tensor:
    if state.teacher is None:
        raise ValueError("no teacher snapshot")
    return _mlp(state.teacher.encoder.layers, _as_input(x, state.encoder.input_dim), None)


def teacher_classify(state: ModelState, z) -> Tensor:
    if state.teacher is None:
        raise ValueError("no teacher snapshot")
    return state.teacher.classifier.layer(_as_input(z, state.encoder.feature_dim), None)


def snapshot_teacher(state: ModelState) -> ModelState:
    """Freeze a deep copy of the current networks as the teacher (replacing any old one)."""
    state.teacher = Teacher(
        copy.deepcopy(state.encoder), copy.deepcopy(state.head), copy.deepcopy(state.classifier)
    )
    return state


def expand_classifier(state: ModelState, c_new: int) -> ModelState:
    """Append ``c_new`` output units; existing units are kept bit-for-bit."""
    if c_new < 1:
        raise InvalidCount(f"c_new must be >= 1, got {c_new}")
    layer = state.classifier.layer
    fan_in = layer.fan_in
    new_w = glorot_uniform(state.rng, fan_in, c_new)
    state.classifier = ClassifierParams(
        Dense(np.concatenate([layer.weight, new_w], axis=1), np.concatenate([layer.bias, np.zeros((1, c_new))], axis=1))
    )
    return state


def save_model(state: ModelState, path, session: int | None = None) -> None:
    doc = {
        "meta": {"dims": state.dims, "seed": state.seed, "session": session},
        "layers": [
            {"name": name, "shape": list(arr.shape), "values": arr.ravel().tolist()}
            for name, arr in state.named_layers()
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_model(path) -> ModelState:
    doc = json.loads(Path(path).read_text())
    arrays = {
        layer["name"]: np.array(layer["values"], dtype=np.float64).reshape(layer["shape"])
        for layer in doc["layers"]
    }

    def dense(prefix: str) -> Dense:
        return Dense(arrays[f"{prefix}.weight"], arrays[f"{prefix}.bias"])

    n_enc = sum(1 for name in arrays if name.startswith("encoder.") and name.endswith(".weight"))
    n_head = sum(1 for name in arrays if name.startswith("head.") and name.endswith(".weight"))
    seed = doc["meta"].get("seed", 0)
    return ModelState(
        encoder=EncoderParams([dense(f"encoder.{i}") for i in range(n_enc)]),
        head=HeadParams([dense(f"head.{i}") for i in range(n_head)]),
        classifier=ClassifierParams(dense("classifier")),
        rng=np.random.default_rng(seed),
        seed=seed,
    )
