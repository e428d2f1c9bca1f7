"""Loss gradients with respect to the input image.

All gradients are stored in the *ascent* convention: moving the image along
``AdvGradient.data`` increases the adversarial objective. Untargeted
gradients are ``+grad L(z, true_label)``; targeted ones are
``-grad L(z, target)`` (descending the target loss raises its probability).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import Image, ImageIOError, read_tensor, vectorize_all, write_tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
MODES = ("untargeted", "targeted")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class AdvGradient:
    data: np.ndarray
    mode: str
    label: int
    true_label: int | None = None
    sign_convention: str = "ascent"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        arr = np.asarray(self.data, dtype=np.float64).ravel()
        if not np.all(np.isfinite(arr)):
            raise ValueError("gradient contains non-finite values")
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, size: int, mode: str = "untargeted", label: int = 0) -> "AdvGradient":
        return cls(np.zeros(size), mode, label, label)


# --- classifier ------------------------------------------------------------------


def _softmax(logits):
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


@dataclass
class TinyClassifier:
    """Softmax classifier on the flattened planar image.

    Linear when ``hidden_W`` is None, otherwise one tanh hidden layer:
    ``logits = W tanh(hidden_W x + hidden_b) + b``.
    """

    W: np.ndarray
    b: np.ndarray
    hidden_W: np.ndarray | None = None
    hidden_b: np.ndarray | None = None
    input_shape: tuple[int, int, int] | None = None
    info: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def num_inputs(self) -> int:
        return (self.hidden_W if self.hidden_W is not None else self.W).shape[1]

    @property
    def arch(self) -> str:
        return "linear" if self.hidden_W is None else "mlp"

    @property
    def num_parameters(self) -> int:
        n = self.W.size + self.b.size
        if self.hidden_W is not None:
            n += self.hidden_W.size + self.hidden_b.size
        return n

    @classmethod
    def init(cls, num_inputs, num_classes, hidden=None, seed=0, scale=0.01, input_shape=None):
        rng = np.random.default_rng(seed)
        if hidden:
            hW = rng.standard_normal((hidden, num_inputs)) * (1.0 / np.sqrt(num_inputs))
            return cls(
                rng.standard_normal((num_classes, hidden)) * scale,
                np.zeros(num_classes),
                hW,
                np.zeros(hidden),
                input_shape,
            )
        return cls(rng.standard_normal((num_classes, num_inputs)) * scale, np.zeros(num_classes),
                   input_shape=input_shape)

    def copy(self) -> "TinyClassifier":
        cp = lambda a: None if a is None else a.copy()
        return TinyClassifier(self.W.copy(), self.b.copy(), cp(self.hidden_W), cp(self.hidden_b),
                              self.input_shape, dict(self.info))

    def _features(self, X):
        if self.hidden_W is None:
            return X
        return np.tanh(X @ self.hidden_W.T + self.hidden_b)

    def logits(self, X):
        return self._features(X) @ self.W.T + self.b

    def probabilities(self, X):
        return _softmax(self.logits(X))

    def loss(self, X, labels):
        """Mean cross-entropy (scalar) over rows of ``X``."""
        X = np.atleast_2d(X)
        labels = np.atleast_1d(labels)
        z = self.logits(X)
        zmax = np.max(z, axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
        return float(np.mean(lse - z[np.arange(len(labels)), labels]))

    def input_gradient(self, x, label):
        """Exact gradient of the cross-entropy at one flattened input."""
        x = np.asarray(x, dtype=np.float64)
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label} outside [0, {self.num_classes})")
        a = self._features(x)
        resid = _softmax(a @ self.W.T + self.b)
        resid[label] -= 1.0
        grad_a = self.W.T @ resid
        if self.hidden_W is None:
            return grad_a
        return self.hidden_W.T @ ((1.0 - a * a) * grad_a)

    def parameter_gradients(self, X, labels):
        """Mean-loss gradients for all parameters over a batch."""
        n = X.shape[0]
        a = self._features(X)
        resid = _softmax(a @ self.W.T + self.b)
        resid[np.arange(n), labels] -= 1.0
        resid /= n
        grads = {"W": resid.T @ a, "b": resid.sum(axis=0)}
        if self.hidden_W is not None:
            back = (resid @ self.W) * (1.0 - a * a)
            grads["hidden_W"] = back.T @ X
            grads["hidden_b"] = back.sum(axis=0)
        return grads

    def accuracy(self, X, labels) -> float:
        return float(np.mean(np.argmax(self.logits(X), axis=1) == labels))


def input_gradient(clf: TinyClassifier, img: Image, label: int) -> np.ndarray:
    """``grad_z L(z, label)`` for the planar vector ``z`` of ``img``."""
    z = vectorize_all(img)
    if z.size != clf.num_inputs:
        raise ValueError(f"image has {z.size} inputs, classifier expects {clf.num_inputs}")
    return clf.input_gradient(z, label)


def auto_target(clf: TinyClassifier, img: Image, true_label: int) -> int:
    """The incorrect class the model is most confident in."""
    p = clf.probabilities(vectorize_all(img)[None])[0].copy()
    p[true_label] = -np.inf
    return int(np.argmax(p))


def build_adv_gradient(
    clf: TinyClassifier,
    img: Image,
    true_label: int,
    mode: str = "untargeted",
    target: int | None = None,
) -> AdvGradient:
    if mode == "untargeted":
        return AdvGradient(input_gradient(clf, img, true_label), mode, true_label, true_label)
    if mode != "targeted":
        raise ValueError(f"unknown gradient mode {mode!r}")
    if target is None:
        target = auto_target(clf, img, true_label)
    if target == true_label:
        raise ValueError("targeted gradient needs a target different from the true label")
    return AdvGradient(-input_gradient(clf, img, target), mode, target, true_label)


# --- gradient files ----------------------------------------------------------------


def save_gradient(g: AdvGradient, path, shape: tuple[int, int]) -> None:
    m, n = shape
    write_tensor(path, g.data.reshape(-1, m, n))


def load_gradient(path, expected_dims, mode: str = "untargeted", label: int = 0) -> AdvGradient:
    """Read a gradient file and check it against ``(channels, m, n)``."""
    arr = read_tensor(path)
    if tuple(arr.shape) != tuple(expected_dims):
        raise ValueError(f"{path}: gradient dims {tuple(arr.shape)} != expected {tuple(expected_dims)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: gradient contains non-finite values")
    return AdvGradient(arr.ravel(), mode, label, label)


# --- training --------------------------------------------------------------------


def train_tiny(
    X,
    labels,
    epochs: int = 200,
    lr: float = 0.5,
    hidden: int | None = None,
    num_classes: int | None = None,
    seed: int = 0,
    momentum: float = 0.9,
    input_shape=None,
    init: TinyClassifier | None = None,
) -> TinyClassifier:
    """Full-batch gradient descent (heavy-ball momentum) on mean cross-entropy.

    Raises:
        TrainingError: if the loss becomes non-finite.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels, dtype=np.intp)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    clf = init.copy() if init is not None else TinyClassifier.init(
        X.shape[1], num_classes, hidden, seed, input_shape=input_shape)
    velocity = {}
    history = []
    for epoch in range(epochs):
        loss = clf.loss(X, labels)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at epoch {epoch} (lr={lr})")
        history.append(loss)
        for name, grad in clf.parameter_gradients(X, labels).items():
            v = momentum * velocity.get(name, 0.0) - lr * grad
            velocity[name] = v
            setattr(clf, name, getattr(clf, name) + v)
    final = clf.loss(X, labels)
    if not np.isfinite(final):
        raise TrainingError(f"non-finite final loss {final}")
    history.append(final)
    clf.info = {
        "train_accuracy": clf.accuracy(X, labels),
        "final_loss": final,
        "loss_history": history,
        "epochs": epochs,
        "lr": lr,
    }
    log.info("trained %s classifier: loss %.4g, accuracy %.3f", clf.arch, final, clf.info["train_accuracy"])
    return clf


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(clf: TinyClassifier, directory) -> None:
    """Write weights as SAUG blobs plus a ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {"W": clf.W, "b": clf.b}
    if clf.hidden_W is not None:
        blobs["hidden_W"] = clf.hidden_W
        blobs["hidden_b"] = clf.hidden_b
    for name, arr in blobs.items():
        write_tensor(directory / f"{name}.saug", np.atleast_2d(arr)[None])
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "arch": clf.arch,
        "num_classes": clf.num_classes,
        "num_inputs": clf.num_inputs,
        "input_shape": list(clf.input_shape) if clf.input_shape else None,
        "blobs": {k: list(np.shape(v)) for k, v in blobs.items()},
        "train_accuracy": clf.info.get("train_accuracy"),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(directory) -> TinyClassifier:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ImageIOError(f"cannot read checkpoint manifest in {directory}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ImageIOError(f"unsupported checkpoint format {manifest.get('format')}")
    arrays = {}
    for name, shape in manifest["blobs"].items():
        arrays[name] = read_tensor(directory / f"{name}.saug")[0].reshape(shape)
    shape = manifest.get("input_shape")
    return TinyClassifier(
        arrays["W"], arrays["b"], arrays.get("hidden_W"), arrays.get("hidden_b"),
        tuple(shape) if shape else None,
        {"train_accuracy": manifest.get("train_accuracy")},
    )
