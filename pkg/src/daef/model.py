"""The DAEF network: training, prediction and the model file format.

Data matrices are laid out one sample per column, shape ``(m0, n)``. The
encoder is the rank-``m1`` left factor of the (distributed) SVD of the
training data. Every decoder hidden layer is derived from an auxiliary
autoencoder whose first half is fixed by a seeded Xavier-Glorot draw and
whose second half is solved in closed form; the last layer is solved
directly against the input data with a linear activation.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from daef import rolann
from daef.data import StandardScaler
from daef.errors import (
    CorruptPayload,
    InsufficientSamples,
    InvalidArchitecture,
    SchemaError,
    ShapeMismatch,
    TooManyPartitions,
    VersionMismatch,
    with_context,
)
from daef.linalg import SvdThin, dsvd_merge, svd_thin, truncate
from daef.rolann import Activation, RolannPartial
from daef.threshold import FittedThreshold

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Layer widths ``[m0, m1, ..., mL]`` and the training hyperparameters.

    ``m0 == mL`` because the network reproduces its input, ``1 <= m1 <= m0``
    and at least one decoder layer follows the encoder.
    """

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "sigmoid"
    lambda_hidden: float = 0.1
    lambda_last: float = 0.1
    clamp_eps: float = rolann.DEFAULT_CLAMP_EPS
    init_seed: int = 0

    def __post_init__(self) -> None:
        sizes = tuple(int(m) for m in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise InvalidArchitecture(
                f"need at least [m0, m1, m0] (encoder + one decoder layer), got {list(sizes)}"
            )
        if any(m < 1 for m in sizes):
            raise InvalidArchitecture(f"layer sizes must be positive, got {list(sizes)}")
        if sizes[0] != sizes[-1]:
            raise InvalidArchitecture(
                f"first and last layer sizes must match (autoencoder), got {sizes[0]} and {sizes[-1]}"
            )
        if sizes[1] > sizes[0]:
            raise InvalidArchitecture(
                f"latent size m1={sizes[1]} exceeds input size m0={sizes[0]}"
            )
        try:
            rolann.get_activation(self.hidden_activation)
        except ValueError as exc:
            raise InvalidArchitecture(str(exc)) from None
        if not (self.lambda_hidden > 0 and self.lambda_last > 0):
            raise InvalidArchitecture("lambda_hidden and lambda_last must be > 0")
        if not 0.0 < self.clamp_eps <= 0.1:
            raise InvalidArchitecture(f"clamp_eps must lie in (0, 0.1], got {self.clamp_eps}")
        if not 0 <= int(self.init_seed) < 2**64:
            raise InvalidArchitecture("init_seed must be an unsigned 64-bit integer")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def latent(self) -> int:
        return self.layer_sizes[1]

    @property
    def activation(self) -> Activation:
        return rolann.get_activation(self.hidden_activation)

    @property
    def hidden_transitions(self) -> list[tuple[int, int]]:
        """(m_l, m_{l+1}) for every decoder layer trained with an auxiliary network."""
        s = self.layer_sizes
        return [(s[i], s[i + 1]) for i in range(1, len(s) - 2)]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "lambda_hidden": self.lambda_hidden,
            "lambda_last": self.lambda_last,
            "clamp_eps": self.clamp_eps,
            "init_seed": int(self.init_seed),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Architecture":
        return cls(
            layer_sizes=tuple(doc["layer_sizes"]),
            hidden_activation=doc.get("hidden_activation", "sigmoid"),
            lambda_hidden=float(doc["lambda_hidden"]),
            lambda_last=float(doc["lambda_last"]),
            clamp_eps=float(doc.get("clamp_eps", rolann.DEFAULT_CLAMP_EPS)),
            init_seed=int(doc.get("init_seed", 0)),
        )


@dataclass
class DaefModel:
    arch: Architecture
    encoder_weights: np.ndarray
    encoder_knowledge: SvdThin
    decoder_weights: list[np.ndarray]
    decoder_biases: list[np.ndarray]
    layer_knowledge: list[list[RolannPartial]]
    threshold: FittedThreshold | None = None
    scaler: StandardScaler | None = field(default=None)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self, x)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return encode(self, x)

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps(self)).hexdigest()


# -- initialization ---------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def draw_auxiliary(rng: np.random.Generator, m_l: int, m_next: int):
    """Fixed first half of an auxiliary autoencoder: weights, then bias."""
    w_c1 = xavier_uniform(rng, m_l, m_next)
    b_c1 = rng.standard_normal(m_next)
    return w_c1, b_c1


def auxiliary_parameters(arch: Architecture) -> list[tuple[np.ndarray, np.ndarray]]:
    """All auxiliary draws for ``arch``, consumed layer by layer from one seeded
    stream. Every federated node calling this gets identical values."""
    rng = np.random.default_rng(int(arch.init_seed))
    return [draw_auxiliary(rng, m_l, m_next) for m_l, m_next in arch.hidden_transitions]


# -- per-stage building blocks (shared with the federation layer) ----------


def layer_forward(h: np.ndarray, weights: np.ndarray, bias: np.ndarray | None, act) -> np.ndarray:
    z = weights.T @ h
    if bias is not None:
        z = z + bias[:, None]
    return rolann.get_activation(act)(z)


def auxiliary_hidden(h_prev: np.ndarray, w_c1: np.ndarray, b_c1: np.ndarray, act) -> np.ndarray:
    return layer_forward(h_prev, w_c1, b_c1, act)


def decoder_layer_partials(
    h_prev: np.ndarray,
    w_c1: np.ndarray,
    b_c1: np.ndarray,
    act,
    clamp_eps: float,
    workers: int = 1,
) -> list[RolannPartial]:
    """Knowledge for the auxiliary network's output layer (targets = ``h_prev``)."""
    if h_prev.shape[1] == 0:
        return [rolann.zero_partial(w_c1.shape[1]) for _ in range(h_prev.shape[0])]
    h_c1 = auxiliary_hidden(h_prev, w_c1, b_c1, act)
    return rolann.layer_partials(h_c1, h_prev, act, clamp_eps, workers)


def last_layer_partials(
    h_prev: np.ndarray, x: np.ndarray, clamp_eps: float, workers: int = 1
) -> list[RolannPartial]:
    if h_prev.shape[1] == 0:
        return [rolann.zero_partial(h_prev.shape[0]) for _ in range(x.shape[0])]
    return rolann.layer_partials(h_prev, x, rolann.LINEAR, clamp_eps, workers)


def merge_neurons(per_source: Sequence[Sequence[RolannPartial]]) -> list[RolannPartial]:
    """Merge lists of per-neuron partials coming from several sources."""
    n_neurons = {len(p) for p in per_source}
    if len(n_neurons) != 1:
        raise ShapeMismatch(f"sources disagree on neuron count: {sorted(n_neurons)}")
    return [rolann.merge_many([src[j] for src in per_source]) for j in range(n_neurons.pop())]


def decoder_layer_from_knowledge(
    partials: Sequence[RolannPartial], b_c1: np.ndarray, lam: float, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """The layer takes the transposed auxiliary output weights and the
    auxiliary hidden bias (the only bias with the layer's width)."""
    w_c2, _ = rolann.solve_layer(partials, lam, workers)
    return np.ascontiguousarray(w_c2.T), b_c1.copy()


def encoder_from_knowledge(knowledge: SvdThin, latent: int) -> np.ndarray:
    return truncate(knowledge, latent).u


def rebuild(
    arch: Architecture,
    encoder_knowledge: SvdThin,
    layer_knowledge: list[list[RolannPartial]],
    workers: int = 1,
) -> DaefModel:
    """Solve every weight from stored knowledge alone, no data needed."""
    aux = auxiliary_parameters(arch)
    if len(layer_knowledge) != len(aux) + 1:
        raise ShapeMismatch(
            f"expected knowledge for {len(aux) + 1} decoder layers, got {len(layer_knowledge)}"
        )
    weights, biases = [], []
    for (_, b_c1), partials in zip(aux, layer_knowledge[:-1]):
        w, b = decoder_layer_from_knowledge(partials, b_c1, arch.lambda_hidden, workers)
        weights.append(w)
        biases.append(b)
    w, b = rolann.solve_layer(layer_knowledge[-1], arch.lambda_last, workers)
    weights.append(w)
    biases.append(b)
    return DaefModel(
        arch=arch,
        encoder_weights=encoder_from_knowledge(encoder_knowledge, arch.latent),
        encoder_knowledge=encoder_knowledge,
        decoder_weights=weights,
        decoder_biases=biases,
        layer_knowledge=[list(p) for p in layer_knowledge],
    )


# -- algorithms -------------------------------------------------------------


def _check_input(x: np.ndarray, m0: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != m0:
        raise ShapeMismatch(f"expected {m0} rows (features), got shape {x.shape}")
    return x


def train_decoder_layer(
    h_prev: np.ndarray,
    m_next: int,
    lam: float,
    act,
    seed_stream: np.random.Generator,
    workers: int = 1,
    clamp_eps: float = rolann.DEFAULT_CLAMP_EPS,
):
    """Train one decoder layer through an auxiliary autoencoder.

    Returns ``(weights (m_l, m_next), bias (m_next,), h_next, partials)``.
    """
    h_prev = np.asarray(h_prev, dtype=np.float64)
    w_c1, b_c1 = draw_auxiliary(seed_stream, h_prev.shape[0], m_next)
    partials = decoder_layer_partials(h_prev, w_c1, b_c1, act, clamp_eps, workers)
    weights, bias = decoder_layer_from_knowledge(partials, b_c1, lam, workers)
    return weights, bias, layer_forward(h_prev, weights, bias, act), partials


def train(x: np.ndarray, arch: Architecture, partitions: int = 1, workers: int = 1) -> DaefModel:
    """Train DAEF on ``x`` (``m0 x n``, one sample per column).

    ``partitions`` splits the samples into contiguous column blocks whose
    knowledge is computed separately and merged; the result does not depend
    on it beyond floating-point rounding.
    """
    x = _check_input(x, arch.n_inputs)
    n = x.shape[1]
    if n < arch.latent:
        raise InsufficientSamples(f"{n} samples cannot support a latent size of {arch.latent}")
    if not 1 <= partitions <= n:
        raise TooManyPartitions(f"cannot split {n} samples into {partitions} partitions")
    act = arch.activation
    blocks = np.array_split(x, partitions, axis=1)

    encoder_knowledge = dsvd_merge([svd_thin(b) for b in blocks])
    w1 = encoder_from_knowledge(encoder_knowledge, arch.latent)
    hs = [layer_forward(b, w1, None, act) for b in blocks]

    weights, biases, knowledge = [], [], []
    for layer, (w_c1, b_c1) in enumerate(auxiliary_parameters(arch), start=1):
        try:
            per_block = [
                decoder_layer_partials(h, w_c1, b_c1, act, arch.clamp_eps, workers) for h in hs
            ]
            partials = merge_neurons(per_block)
            w, b = decoder_layer_from_knowledge(partials, b_c1, arch.lambda_hidden, workers)
        except Exception as exc:
            raise with_context(exc, f"decoder layer {layer}", layer=layer) from exc
        hs = [layer_forward(h, w, b, act) for h in hs]
        weights.append(w)
        biases.append(b)
        knowledge.append(partials)

    try:
        per_block = [last_layer_partials(h, b, arch.clamp_eps, workers) for h, b in zip(hs, blocks)]
        partials = merge_neurons(per_block)
        w, b = rolann.solve_layer(partials, arch.lambda_last, workers)
    except Exception as exc:
        last = len(arch.layer_sizes) - 2
        raise with_context(exc, f"decoder layer {last} (last)", layer=last) from exc
    weights.append(w)
    biases.append(b)
    knowledge.append(partials)

    return DaefModel(
        arch=arch,
        encoder_weights=w1,
        encoder_knowledge=encoder_knowledge,
        decoder_weights=weights,
        decoder_biases=biases,
        layer_knowledge=knowledge,
    )


def encode(model: DaefModel, x: np.ndarray) -> np.ndarray:
    x = _check_input(x, model.arch.n_inputs)
    return layer_forward(x, model.encoder_weights, None, model.arch.activation)


def predict(model: DaefModel, x: np.ndarray) -> np.ndarray:
    h = encode(model, x)
    act = model.arch.activation
    for w, b in zip(model.decoder_weights[:-1], model.decoder_biases[:-1]):
        h = layer_forward(h, w, b, act)
    return layer_forward(h, model.decoder_weights[-1], model.decoder_biases[-1], rolann.LINEAR)


# -- serialization ----------------------------------------------------------


def _matrix(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def partial_to_dict(p: RolannPartial) -> dict:
    return {"m": _matrix(p.m), "u": _matrix(p.u), "s": _matrix(p.s), "count": int(p.count)}


def _array(value, ndim: int, what: str) -> np.ndarray:
    try:
        a = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{what}: not a numeric array ({exc})") from None
    if ndim == 2 and a.size == 0 and a.ndim == 1:
        raise SchemaError(f"{what}: empty matrix has no shape")
    if a.ndim != ndim:
        raise SchemaError(f"{what}: expected {ndim}-D array, got {a.ndim}-D")
    if not np.all(np.isfinite(a)):
        raise SchemaError(f"{what}: non-finite values")
    return a


def partial_from_dict(doc: dict, what: str = "partial") -> RolannPartial:
    try:
        m = _array(doc["m"], 1, f"{what}.m")
        s = _array(doc["s"], 1, f"{what}.s")
        u = np.array(doc["u"], dtype=np.float64)
        if s.size == 0:
            u = u.reshape(m.shape[0], 0)
        elif u.ndim != 2:
            raise SchemaError(f"{what}.u: expected 2-D array")
        return RolannPartial(m=m, u=u, s=s, count=int(doc.get("count", 0)))
    except KeyError as exc:
        raise SchemaError(f"{what}: missing field {exc}") from None
    except ShapeMismatch as exc:
        raise SchemaError(f"{what}: {exc}") from None


def to_document(model: DaefModel) -> dict:
    decoder = []
    for w, b, parts in zip(model.decoder_weights, model.decoder_biases, model.layer_knowledge):
        decoder.append(
            {
                "weights": _matrix(w),
                "bias": _matrix(b),
                "knowledge": [partial_to_dict(p) for p in parts],
            }
        )
    return {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch.to_dict(),
        "encoder": {
            "weights": _matrix(model.encoder_weights),
            "u": _matrix(model.encoder_knowledge.u),
            "s": _matrix(model.encoder_knowledge.s),
        },
        "decoder": decoder,
        "threshold": model.threshold.to_dict() if model.threshold else None,
        "scaler": model.scaler.to_dict() if model.scaler else None,
    }


def from_document(doc: dict) -> DaefModel:
    from daef.schemas import validate

    if not isinstance(doc, dict):
        raise SchemaError("model document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format_version {version!r}, this library reads {FORMAT_VERSION}")
    validate(doc, "model")
    try:
        arch = Architecture.from_dict(doc["architecture"])
    except InvalidArchitecture as exc:
        raise SchemaError(f"architecture: {exc}") from None

    enc = doc["encoder"]
    try:
        knowledge = SvdThin(u=_array(enc["u"], 2, "encoder.u"), s=_array(enc["s"], 1, "encoder.s"))
    except ShapeMismatch as exc:
        raise SchemaError(f"encoder: {exc}") from None
    w1 = _array(enc["weights"], 2, "encoder.weights")
    sizes = arch.layer_sizes
    if w1.shape != (sizes[0], sizes[1]):
        raise SchemaError(f"encoder.weights has shape {w1.shape}, expected {(sizes[0], sizes[1])}")
    if len(doc["decoder"]) != len(sizes) - 2:
        raise SchemaError(f"expected {len(sizes) - 2} decoder layers, got {len(doc['decoder'])}")

    weights, biases, layer_knowledge = [], [], []
    for i, layer in enumerate(doc["decoder"]):
        m_in, m_out = sizes[i + 1], sizes[i + 2]
        w = _array(layer["weights"], 2, f"decoder[{i}].weights")
        b = _array(layer["bias"], 1, f"decoder[{i}].bias")
        if w.shape != (m_in, m_out) or b.shape != (m_out,):
            raise SchemaError(f"decoder[{i}] weights/bias do not chain {m_in} -> {m_out}")
        parts = [partial_from_dict(p, f"decoder[{i}].knowledge[{j}]") for j, p in enumerate(layer["knowledge"])]
        weights.append(w)
        biases.append(b)
        layer_knowledge.append(parts)

    return DaefModel(
        arch=arch,
        encoder_weights=w1,
        encoder_knowledge=knowledge,
        decoder_weights=weights,
        decoder_biases=biases,
        layer_knowledge=layer_knowledge,
        threshold=FittedThreshold.from_dict(doc["threshold"]) if doc.get("threshold") else None,
        scaler=StandardScaler.from_dict(doc["scaler"]) if doc.get("scaler") else None,
    )


def dumps(model: DaefModel) -> bytes:
    # json writes floats with repr(), the shortest string that round-trips
    return json.dumps(to_document(model), separators=(",", ":")).encode("utf-8")


def loads(payload: bytes | str) -> DaefModel:
    try:
        if isinstance(payload, bytes):
            payload = payload.decode("utf-8")
        doc = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"model file is not valid JSON: {exc}") from None
    return from_document(doc)


def save(model: DaefModel, sink: str | os.PathLike | BinaryIO) -> None:
    """Write ``model``; paths are written to a temp file and renamed into place."""
    payload = dumps(model)
    if isinstance(sink, (str, os.PathLike)):
        path = Path(sink)
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    else:
        sink.write(payload)


def load(source: str | os.PathLike | BinaryIO | io.BytesIO) -> DaefModel:
    if isinstance(source, (str, os.PathLike)):
        payload = Path(source).read_bytes()
    else:
        payload = source.read()
    return loads(payload)
