"""MLP vector fields for neural ODEs, their Jacobians and the model file format.

Weights follow the out-by-in convention: layer ``l`` maps ``z`` to
``act_l(W[l] @ z + b[l])``. Layer indices are zero-based, so layer 0 is the
first (input) layer and ``n_layers - 1`` the output layer. With
``cubic_lift`` the network sees ``x**3`` instead of ``x``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .numerics import DualVector

FORMAT_NAME = "invprop-model"
FORMAT_VERSION = 1

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _tanhshrink(s):
    return s - np.tanh(s)


def _gelu(s):
    return s * ndtr(s)


ACTIVATIONS = {
    "identity": (lambda s: s, lambda s: np.ones_like(s)),
    "tanh": (np.tanh, lambda s: 1.0 - np.tanh(s) ** 2),
    "tanhshrink": (_tanhshrink, lambda s: np.tanh(s) ** 2),
    "gelu": (_gelu, lambda s: ndtr(s) + s * np.exp(-0.5 * s * s) / _SQRT_2PI),
}


class NonlinearOutputLayer(ValueError):
    """The output layer has an activation, so it is not affine in its weights."""


class ModelFormatError(ValueError):
    pass


class CorruptModel(ModelFormatError):
    pass


class VersionMismatch(ModelFormatError):
    pass


def _activate(s, tag):
    fn, dfn = ACTIVATIONS[tag]
    if isinstance(s, DualVector):
        return s.apply(fn, dfn)
    return fn(s)


@dataclass
class ParamSelection:
    """Weight entries of one layer that invariance propagation may move.

    ``coords`` are (row, col) pairs in row-major order; flattening the
    selected weights in that order gives the parameter vector.
    """

    layer: int
    coords: list[tuple[int, int]]

    def __post_init__(self):
        coords = sorted({(int(r), int(c)) for r, c in self.coords})
        if len(coords) != len(self.coords):
            raise ValueError("duplicate coordinates in selection")
        self.coords = coords

    @property
    def size(self) -> int:
        return len(self.coords)

    @property
    def rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.coords], dtype=int)

    @property
    def cols(self) -> np.ndarray:
        return np.array([c for _, c in self.coords], dtype=int)

    @classmethod
    def columns(cls, layer: int, cols: Sequence[int], n_rows: int) -> "ParamSelection":
        return cls(layer, [(r, c) for r in range(n_rows) for c in cols])

    @classmethod
    def from_rows(cls, layer: int, rows: Sequence[int], n_cols: int) -> "ParamSelection":
        return cls(layer, [(r, c) for r in rows for c in range(n_cols)])

    def validate(self, model: "MlpOde"):
        if not 0 <= self.layer < model.n_layers:
            raise IndexError(f"layer {self.layer} out of range")
        rows, cols = model.weights[self.layer].shape
        for r, c in self.coords:
            if not (0 <= r < rows and 0 <= c < cols):
                raise IndexError(f"coordinate {(r, c)} outside layer {self.layer} {(rows, cols)}")

    def to_dict(self) -> dict:
        return {"layer": self.layer, "coords": [list(rc) for rc in self.coords]}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSelection":
        return cls(int(d["layer"]), [tuple(rc) for rc in d["coords"]])


def select_params(model: "MlpOde", layer: int, count: int, seed: int = 0) -> ParamSelection:
    """Random selection of ``count`` weights that touches every output.

    On the output layer whole columns are taken (every output row gets a
    handle); on hidden layers whole rows (neurons), each carrying all of its
    incoming weights.
    """
    layer = layer % model.n_layers
    rows, cols = model.weights[layer].shape
    rng = np.random.default_rng(seed)
    if layer == model.n_layers - 1:
        if count % rows:
            raise ValueError(f"output-layer selection must be a multiple of {rows}")
        picked = np.sort(rng.choice(cols, size=count // rows, replace=False))
        return ParamSelection.columns(layer, picked.tolist(), rows)
    if count % cols:
        raise ValueError(f"hidden-layer selection must be a multiple of {cols}")
    picked = np.sort(rng.choice(rows, size=count // cols, replace=False))
    return ParamSelection.from_rows(layer, picked.tolist(), cols)


@dataclass
class AffineSplit:
    """Output written as ``basis @ theta_p + constant``.

    ``basis[i, j]`` is the penultimate activation feeding selected weight j
    into output i (zero when weight j sits in another row); ``constant``
    holds the unselected weights' contribution plus the output bias.
    """

    z: np.ndarray
    basis: np.ndarray
    theta_p: np.ndarray
    constant: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.basis @ self.theta_p + self.constant


@dataclass
class MlpOde:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    cubic_lift: bool = False
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.array(w, dtype=float) for w in self.weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in self.biases]
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise ValueError(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input {w.shape[1]} != previous output")

    @classmethod
    def init(
        cls,
        layer_dims: Sequence[int],
        activations: Sequence[str],
        seed: int = 0,
        cubic_lift: bool = False,
    ) -> "MlpOde":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        if len(activations) != len(layer_dims) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(n_in)
            ws.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            bs.append(rng.uniform(-bound, bound, size=n_out))
        return cls(ws, bs, list(activations), cubic_lift=cubic_lift, seed=seed)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpOde":
        return MlpOde(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            self.cubic_lift,
            self.seed,
            dict(self.meta),
        )

    def _check_input(self, x):
        if len(x) != self.n_in:
            raise ValueError(f"expected input of dimension {self.n_in}, got {len(x)}")

    def _lift(self, x):
        return x**3 if self.cubic_lift else x

    def forward(self, x):
        """f(x); accepts an ndarray or a DualVector."""
        if not isinstance(x, DualVector):
            x = np.asarray(x, dtype=float)
        self._check_input(x)
        z = self._lift(x)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = _activate(w @ z + b, act)
        return z

    __call__ = forward

    def hidden_state(self, x, k: int) -> np.ndarray:
        """Input to layer ``k`` (zero-based): the lifted input for k=0,
        the penultimate activations for k = n_layers - 1."""
        if not 0 <= k < self.n_layers:
            raise IndexError(f"hidden layer index {k} out of range")
        x = np.asarray(x, dtype=float)
        self._check_input(x)
        z = self._lift(x)
        for l in range(k):
            z = _activate(self.weights[l] @ z + self.biases[l], self.activations[l])
        return z

    def apply_from(self, z, k: int) -> np.ndarray:
        """Run layers k.. on an intermediate state."""
        for l in range(k, self.n_layers):
            z = _activate(self.weights[l] @ z + self.biases[l], self.activations[l])
        return z

    def _forward_cache(self, x):
        x = np.asarray(x, dtype=float)
        self._check_input(x)
        zs, ss = [self._lift(x)], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            s = w @ zs[-1] + b
            ss.append(s)
            zs.append(ACTIVATIONS[act][0](s))
        return zs, ss

    def jacobian_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        zs, ss = self._forward_cache(x)
        J = np.diag(3.0 * x**2) if self.cubic_lift else np.eye(x.shape[0])
        for w, s, act in zip(self.weights, ss, self.activations):
            J = ACTIVATIONS[act][1](s)[:, None] * (w @ J)
        return J

    def _upstream(self, ss, layer):
        """d f / d s_layer, where s_layer is the pre-activation of ``layer``."""
        D = np.diag(ACTIVATIONS[self.activations[-1]][1](ss[-1]))
        for l in range(self.n_layers - 2, layer - 1, -1):
            D = (D @ self.weights[l + 1]) * ACTIVATIONS[self.activations[l]][1](ss[l])[None, :]
        return D

    def jacobian_theta(self, x, sel: ParamSelection) -> np.ndarray:
        """n_out x sel.size Jacobian w.r.t. the selected weights, in selection order."""
        zs, ss = self._forward_cache(x)
        D = self._upstream(ss, sel.layer)
        return D[:, sel.rows] * zs[sel.layer][sel.cols][None, :]

    def jacobian_theta_and_x(self, x, sel: ParamSelection):
        """Both Jacobians and f(x) from one forward pass."""
        x = np.asarray(x, dtype=float)
        zs, ss = self._forward_cache(x)
        J = np.diag(3.0 * x**2) if self.cubic_lift else np.eye(x.shape[0])
        for w, s, act in zip(self.weights, ss, self.activations):
            J = ACTIVATIONS[act][1](s)[:, None] * (w @ J)
        D = self._upstream(ss, sel.layer)
        Jt = D[:, sel.rows] * zs[sel.layer][sel.cols][None, :]
        return zs[-1], J, Jt

    def get_params(self, sel: ParamSelection) -> np.ndarray:
        return self.weights[sel.layer][sel.rows, sel.cols].copy()

    def set_params(self, sel: ParamSelection, values) -> None:
        self.weights[sel.layer][sel.rows, sel.cols] = values

    def affine_output_decomposition(self, x, sel: ParamSelection) -> AffineSplit:
        last = self.n_layers - 1
        if self.activations[last] != "identity":
            raise NonlinearOutputLayer("output layer must be linear for the affine split")
        if sel.size and sel.layer != last:
            raise ValueError("selection must target the output layer")
        z = self.hidden_state(x, last)
        W = self.weights[last]
        theta_p = W[sel.rows, sel.cols] if sel.size else np.zeros(0)
        basis = np.zeros((self.n_out, sel.size))
        if sel.size:
            basis[sel.rows, np.arange(sel.size)] = z[sel.cols]
        masked = W.copy()
        if sel.size:
            masked[sel.rows, sel.cols] = 0.0
        constant = masked @ z + self.biases[last]
        return AffineSplit(z=z, basis=basis, theta_p=theta_p, constant=constant)

    def to_dict(
        self, selection: ParamSelection | None = None, class_k_gains: Sequence[float] | None = None
    ) -> dict:
        def blob(a):
            return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")

        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "layer_dims": self.layer_dims,
            "activations": list(self.activations),
            "cubic_lift": self.cubic_lift,
            "seed": self.seed,
            "selection": selection.to_dict() if selection is not None else None,
            "class_k_gains": list(class_k_gains) if class_k_gains is not None else None,
            "weights": [blob(w) for w in self.weights],
            "biases": [blob(b) for b in self.biases],
            "meta": self.meta,
        }


def serialize(
    model: MlpOde,
    selection: ParamSelection | None = None,
    class_k_gains: Sequence[float] | None = None,
) -> bytes:
    return json.dumps(model.to_dict(selection, class_k_gains), indent=1).encode("utf-8")


@dataclass
class LoadedModel:
    model: MlpOde
    selection: ParamSelection | None
    class_k_gains: list[float] | None


def deserialize(data: bytes) -> LoadedModel:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptModel(f"model payload is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise CorruptModel("not an invprop model file")
    if "version" not in doc:
        raise CorruptModel("missing version field")
    if doc["version"] != FORMAT_VERSION:
        raise VersionMismatch(f"model version {doc['version']} != supported {FORMAT_VERSION}")
    try:
        dims = [int(d) for d in doc["layer_dims"]]

        def unblob(s, shape):
            raw = base64.b64decode(s.encode("ascii"), validate=True)
            arr = np.frombuffer(raw, dtype="<f8")
            if arr.size != int(np.prod(shape)):
                raise CorruptModel(f"weight blob has {arr.size} values, expected {shape}")
            return arr.reshape(shape).astype(float)

        ws = [unblob(s, (o, i)) for s, i, o in zip(doc["weights"], dims[:-1], dims[1:])]
        bs = [unblob(s, (o,)) for s, o in zip(doc["biases"], dims[1:])]
        if len(ws) != len(dims) - 1 or len(bs) != len(dims) - 1:
            raise CorruptModel("layer count does not match layer_dims")
        model = MlpOde(
            ws, bs, doc["activations"], bool(doc.get("cubic_lift", False)), doc.get("seed"),
            doc.get("meta") or {},
        )
        sel = doc.get("selection")
        gains = doc.get("class_k_gains")
    except CorruptModel:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModel(f"malformed model file: {exc}") from exc
    return LoadedModel(
        model,
        ParamSelection.from_dict(sel) if sel else None,
        [float(g) for g in gains] if gains is not None else None,
    )


def save_model(path, model: MlpOde, selection=None, class_k_gains=None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model, selection, class_k_gains))


def load_model(path) -> LoadedModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


@dataclass
class ExternalInputMlp:
    """Input-affine field x' = f(x) + g(x) I, with g(x) reshaped to n x n_inputs."""

    f_head: MlpOde
    g_head: MlpOde
    n_inputs: int

    def __post_init__(self):
        n = self.f_head.n_out
        if self.g_head.n_out != n * self.n_inputs:
            raise ValueError(f"g head must output {n}*{self.n_inputs} values")
        if self.g_head.n_in != self.f_head.n_in:
            raise ValueError("heads must share the state input")

    @property
    def n(self) -> int:
        return self.f_head.n_out

    def drift(self, x) -> np.ndarray:
        return self.f_head.forward(x)

    def input_matrix(self, x) -> np.ndarray:
        return np.asarray(self.g_head.forward(x)).reshape(self.n, self.n_inputs)

    def forward(self, x, inputs) -> np.ndarray:
        return self.drift(x) + self.input_matrix(x) @ np.asarray(inputs, dtype=float)
