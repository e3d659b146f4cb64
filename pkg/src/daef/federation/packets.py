"""Knowledge packets exchanged between nodes and their JSON wire codec.

Payloads are kept in JSON-native form (nested lists) so that a decoded
packet compares equal to the one that was encoded. Only summaries whose
shape is fixed by the architecture ever appear in a payload: ``u diag(s)``
products, per-neuron ``(m, u, s)`` partials, solved weights and the
architecture itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from daef.errors import CorruptPayload, SchemaError, ShapeMismatch, VersionMismatch
from daef.linalg import SvdThin, svd_thin
from daef.model import Architecture, partial_from_dict, partial_to_dict
from daef.rolann import RolannPartial
from daef import schemas

FORMAT_VERSION = 1
KINDS = ("init", "encoder_stats", "layer_partials", "model_broadcast")


@dataclass(frozen=True)
class KnowledgePacket:
    session_id: str
    node_id: str
    kind: str
    payload: dict
    sequence: int
    layer_index: int | None = None
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        doc = {
            "format_version": self.format_version,
            "session_id": self.session_id,
            "node_id": self.node_id,
            "sequence": self.sequence,
            "kind": self.kind,
            "payload": self.payload,
        }
        if self.layer_index is not None:
            doc["layer_index"] = self.layer_index
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "KnowledgePacket":
        if not isinstance(doc, dict):
            raise SchemaError("packet must be a JSON object")
        if doc.get("format_version") != FORMAT_VERSION:
            raise VersionMismatch(
                f"packet format_version {doc.get('format_version')!r}, expected {FORMAT_VERSION}"
            )
        schemas.validate(doc, "packet")
        check_numeric(doc["payload"])
        return cls(
            session_id=doc["session_id"],
            node_id=doc["node_id"],
            kind=doc["kind"],
            payload=doc["payload"],
            sequence=doc["sequence"],
            layer_index=doc.get("layer_index"),
        )


def check_numeric(payload: dict) -> None:
    """Every numeric array in ``payload`` must be rectangular and finite.

    The schema fixes the structure; checking the numbers in bulk here is much
    faster than element-by-element schema validation.
    """

    def walk(value, path):
        if isinstance(value, dict):
            for k, v in value.items():
                walk(v, f"{path}.{k}")
            return
        if not isinstance(value, list) or not value:
            return
        if all(isinstance(v, str) for v in value):
            return
        if all(isinstance(v, (dict, list)) for v in value) and any(
            isinstance(v, dict) or (isinstance(v, list) and v and isinstance(v[0], dict)) for v in value
        ):
            for i, v in enumerate(value):
                walk(v, f"{path}[{i}]")
            return
        try:
            a = np.array(value)
        except ValueError:
            raise SchemaError(f"{path}: not a rectangular numeric array") from None
        if a.dtype.kind not in "iuf":
            raise SchemaError(f"{path}: expected numbers, got {a.dtype}")
        if a.dtype.kind == "f" and not np.all(np.isfinite(a)):
            raise SchemaError(f"{path}: non-finite values")

    walk(payload, "payload")


def encode(packet: KnowledgePacket) -> bytes:
    doc = packet.to_dict()
    schemas.validate(doc, "packet")
    check_numeric(doc["payload"])
    try:
        text = json.dumps(doc, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise SchemaError(f"packet holds non-finite numbers: {exc}") from None
    return text.encode("utf-8")


def decode(data: bytes) -> KnowledgePacket:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"packet is not valid UTF-8 JSON: {exc}") from None
    return KnowledgePacket.from_dict(doc)


# -- payload builders and readers ------------------------------------------


@dataclass(frozen=True)
class EncoderStats:
    us_product: np.ndarray
    sample_count: int

    @property
    def rows(self) -> int:
        return int(self.us_product.shape[0])

    def as_svd(self) -> SvdThin:
        """View the product as a factorization with unit singular values.

        Only ``u diag(s)`` enters the merge, so this is exact for merging.
        """
        return SvdThin(u=self.us_product, s=np.ones(self.us_product.shape[1]))


def local_encoder_stats(x_p: np.ndarray) -> EncoderStats:
    x_p = np.asarray(x_p, dtype=np.float64)
    if x_p.ndim == 2 and x_p.shape[1] == 0:
        return EncoderStats(np.zeros((x_p.shape[0], 0)), 0)
    return EncoderStats(svd_thin(x_p).scaled(), int(x_p.shape[1]))


def _matrix_payload(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def _read_matrix(value, rows: int, what: str) -> np.ndarray:
    a = np.array(value, dtype=np.float64)
    if a.size == 0:
        return a.reshape(rows, 0)
    if a.ndim != 2 or a.shape[0] != rows:
        raise ShapeMismatch(f"{what}: expected {rows} rows, got shape {a.shape}")
    return a


def init_payload(arch: Architecture, roster: list[str], aggregator: str, mode: str) -> dict:
    return {"architecture": arch.to_dict(), "roster": list(roster),
            "aggregator": aggregator, "mode": mode}


def encoder_payload(stats: EncoderStats) -> dict:
    return {"us_product": _matrix_payload(stats.us_product), "sample_count": stats.sample_count}


def read_encoder_stats(packet: KnowledgePacket, m0: int) -> EncoderStats:
    p = packet.payload
    return EncoderStats(_read_matrix(p["us_product"], m0, "us_product"), int(p["sample_count"]))


def partials_payload(partials: list[RolannPartial]) -> dict:
    return {"partials": [partial_to_dict(p) for p in partials]}


def read_partials(packet: KnowledgePacket) -> list[RolannPartial]:
    return [partial_from_dict(d, f"partials[{j}]") for j, d in enumerate(packet.payload["partials"])]


def layer_payload(stage: str, weights: np.ndarray, bias: np.ndarray) -> dict:
    return {"stage": stage, "weights": _matrix_payload(weights), "bias": _matrix_payload(bias)}


def knowledge_payload(encoder: SvdThin, layers: list[list[RolannPartial]]) -> dict:
    return {
        "stage": "knowledge",
        "encoder": {"u": _matrix_payload(encoder.u), "s": _matrix_payload(encoder.s)},
        "layers": [[partial_to_dict(p) for p in layer] for layer in layers],
    }


def read_knowledge(packet: KnowledgePacket, m0: int) -> tuple[SvdThin, list[list[RolannPartial]]]:
    enc = packet.payload["encoder"]
    u = _read_matrix(enc["u"], m0, "encoder.u")
    encoder = SvdThin(u=u, s=np.array(enc["s"], dtype=np.float64).reshape(u.shape[1]))
    layers = [
        [partial_from_dict(d, f"layers[{i}][{j}]") for j, d in enumerate(layer)]
        for i, layer in enumerate(packet.payload["layers"])
    ]
    return encoder, layers


# -- structural privacy check ----------------------------------------------


def _shape(value) -> tuple[int, ...]:
    return np.array(value, dtype=np.float64).shape


def _check_bound(shape: tuple[int, ...], limits: tuple[int, ...], what: str) -> None:
    if shape == (0,) and len(limits) == 2:
        return  # an empty matrix serializes as []
    if len(shape) != len(limits) or any(d > lim for d, lim in zip(shape, limits)):
        raise SchemaError(f"{what}: shape {shape} exceeds architecture bound {limits}")


def _check_partial(d: dict, m_in: int, what: str) -> None:
    k = m_in + 1
    if _shape(d["m"]) != (k,):
        raise SchemaError(f"{what}.m: expected length {k}, got shape {_shape(d['m'])}")
    _check_bound(_shape(d["s"]), (k,), f"{what}.s")
    _check_bound(_shape(d["u"]), (k, k), f"{what}.u")


def layer_io(arch: Architecture, layer: int) -> tuple[int, int]:
    """``(solver inputs, neurons)`` of the knowledge for decoder layer ``layer``.

    Decoder layer ``l`` maps width ``m_l`` to ``m_{l+1}``. Hidden layers are
    solved as the output half of an auxiliary network (inputs ``m_{l+1}``,
    ``m_l`` neurons); the last layer is solved directly.
    """
    sizes = arch.layer_sizes
    last = len(sizes) - 2
    if not 1 <= layer <= last:
        raise SchemaError(f"layer_index {layer} outside [1, {last}]")
    if layer == last:
        return sizes[-2], sizes[-1]
    return sizes[layer + 1], sizes[layer]


def check_dimensions(packet: KnowledgePacket, arch: Architecture) -> None:
    """Reject payload arrays whose size is not fixed by the architecture.

    Every legitimate array is bounded by the layer widths, so a payload that
    grows with a node's sample count fails here.
    """
    sizes = arch.layer_sizes
    m0 = sizes[0]
    p = packet.payload
    if packet.kind == "encoder_stats":
        _check_bound(_shape(p["us_product"]), (m0, m0), "us_product")
    elif packet.kind == "layer_partials":
        m_in, n_out = layer_io(arch, packet.layer_index)
        if len(p["partials"]) != n_out:
            raise SchemaError(f"expected {n_out} partials, got {len(p['partials'])}")
        for j, d in enumerate(p["partials"]):
            _check_partial(d, m_in, f"partials[{j}]")
    elif packet.kind == "model_broadcast":
        widest = max(sizes)
        if "weights" in p:
            _check_bound(_shape(p["weights"]), (widest, widest), "weights")
        if "bias" in p:
            _check_bound(_shape(p["bias"]), (widest,), "bias")
        if "encoder" in p:
            _check_bound(_shape(p["encoder"]["u"]), (m0, m0), "encoder.u")
            _check_bound(_shape(p["encoder"]["s"]), (m0,), "encoder.s")
        for i, layer in enumerate(p.get("layers", [])):
            m_in, n_out = layer_io(arch, i + 1)
            if len(layer) != n_out:
                raise SchemaError(f"layers[{i}]: expected {n_out} partials, got {len(layer)}")
            for j, d in enumerate(layer):
                _check_partial(d, m_in, f"layers[{i}][{j}]")
