"""Federated training sessions.

``layer_sync`` runs one exchange round per layer: nodes publish summaries of
their local data, an aggregator merges them and broadcasts the solved
weights, and every node moves its local hidden outputs forward before the
next round. Because every merge is exact, the result matches training on
the pooled data.

``post_hoc`` trains each node alone and then merges the stored knowledge in
one exchange. Each node's decoder knowledge was gathered under its own
encoder, so the merged model only approximates pooled training.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from daef import rolann
from daef.errors import (
    ArchitectureMismatch,
    NodeTimeout,
    SeedMismatch,
    SessionAborted,
    ShapeMismatch,
)
from daef.federation import packets as pk
from daef.federation.broker import Broker, Deduplicator, Subscription, topic
from daef.linalg import SvdThin, dsvd_merge, truncate
from daef.model import (
    Architecture,
    DaefModel,
    auxiliary_parameters,
    decoder_layer_from_knowledge,
    decoder_layer_partials,
    last_layer_partials,
    layer_forward,
    merge_neurons,
    rebuild,
    train,
)

MODES = ("layer_sync", "post_hoc")
DEFAULT_TIMEOUT = 30.0
_POLL = 0.05


@dataclass
class FedSession:
    session_id: str
    arch: Architecture
    roster: list[str]
    mode: str = "layer_sync"
    aggregator: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    workers: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.roster or len(set(self.roster)) != len(self.roster):
            raise ValueError("roster must list distinct node ids")
        if self.aggregator is None:
            self.aggregator = self.roster[0]
        if self.aggregator not in self.roster:
            raise ValueError(f"aggregator {self.aggregator!r} is not in the roster")

    @classmethod
    def create(cls, session_id: str, arch: Architecture, nodes: int, **kw) -> "FedSession":
        return cls(session_id, arch, [f"node{i}" for i in range(nodes)], **kw)


@dataclass
class FedOutcome:
    model: DaefModel
    node_models: dict[str, DaefModel]
    packets: int = 0
    payload_bytes: int = 0
    rounds: int = 0
    wall_time: float = 0.0


def encoder_stats_merge(stats: Sequence[pk.EncoderStats], m1: int) -> tuple[np.ndarray, SvdThin]:
    """Global encoder weights and factorization from every node's ``u diag(s)``."""
    rows = {s.rows for s in stats}
    if len(rows) != 1:
        raise ShapeMismatch(f"nodes disagree on feature count: {sorted(rows)}")
    merged = dsvd_merge([s.as_svd() for s in stats if s.sample_count > 0])
    return truncate(merged, m1).u, merged


aggregate_encoder = encoder_stats_merge


class _Endpoint:
    """A node's view of the broker: numbered publishing and filtered receiving."""

    def __init__(self, broker: Broker, session: FedSession, node_id: str, abort: threading.Event):
        self.broker = broker
        self.session = session
        self.node_id = node_id
        self.abort = abort
        self._seq: dict[str, int] = {}
        self._dedup = Deduplicator()
        self.sent = 0
        self.sent_bytes = 0

    def publish(self, name: str, kind: str, payload: dict, layer_index=None, retain=False) -> None:
        seq = self._seq.get(name, 0)
        self._seq[name] = seq + 1
        packet = pk.KnowledgePacket(self.session.session_id, self.node_id, kind, payload, seq, layer_index)
        data = pk.encode(packet)
        self.sent += 1
        self.sent_bytes += len(data)
        self.broker.publish(name, data, retain=retain)

    def receive(self, sub: Subscription, deadline: float) -> tuple[str, pk.KnowledgePacket]:
        while True:
            if self.abort.is_set():
                raise SessionAborted("another participant failed")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise NodeTimeout(f"{self.node_id}: timed out waiting on {sub.pattern!r}")
            try:
                name, packet = sub.get(timeout=min(_POLL, remaining))
            except NodeTimeout:
                continue
            if packet.session_id == self.session.session_id and self._dedup.accept(name, packet):
                return name, packet

    def collect(self, sub: Subscription, kind: str, layer_index=None) -> list[pk.KnowledgePacket]:
        """One packet from every roster node, returned in roster order."""
        deadline = time.monotonic() + self.session.timeout
        got: dict[str, pk.KnowledgePacket] = {}
        while len(got) < len(self.session.roster):
            _, packet = self.receive(sub, deadline)
            if packet.kind != kind or packet.layer_index != layer_index:
                continue
            if packet.node_id not in self.session.roster:
                continue
            pk.check_dimensions(packet, self.session.arch)
            got.setdefault(packet.node_id, packet)
        return [got[n] for n in self.session.roster]

    def await_broadcast(self, sub: Subscription, stage: str, layer_index=None) -> pk.KnowledgePacket:
        deadline = time.monotonic() + self.session.timeout
        while True:
            _, packet = self.receive(sub, deadline)
            if (packet.kind == "model_broadcast" and packet.payload["stage"] == stage
                    and packet.layer_index == layer_index
                    and packet.node_id == self.session.aggregator):
                pk.check_dimensions(packet, self.session.arch)
                return packet


def _broadcast_arrays(packet: pk.KnowledgePacket, rows: int, cols: int):
    w = np.array(packet.payload["weights"], dtype=np.float64).reshape(rows, cols)
    b = np.array(packet.payload["bias"], dtype=np.float64).reshape(cols)
    return w, b


def _agree(session: FedSession, init: pk.KnowledgePacket) -> Architecture:
    """A node adopts the broadcast architecture only if it matches its own."""
    arch = Architecture.from_dict(init.payload["architecture"])
    if arch.init_seed != session.arch.init_seed:
        raise SeedMismatch(f"initiator seed {arch.init_seed}, local seed {session.arch.init_seed}")
    if arch != session.arch:
        raise ArchitectureMismatch("initiator architecture differs from the local one")
    return arch


# -- layer-synchronous training ----------------------------------------------


def _sync_participant(ep: _Endpoint, subs: dict, x: np.ndarray) -> DaefModel:
    sid = ep.session.session_id
    _, init = ep.receive(subs["init"], time.monotonic() + ep.session.timeout)
    arch = _agree(ep.session, init)
    act = arch.activation
    sizes = arch.layer_sizes

    ep.publish(topic(sid, "encoder"), "encoder_stats", pk.encoder_payload(pk.local_encoder_stats(x)))
    packet = ep.await_broadcast(subs["model"], "encoder")
    w1 = np.array(packet.payload["weights"], dtype=np.float64).reshape(sizes[0], sizes[1])
    h = layer_forward(x, w1, None, act)

    for layer, (w_c1, b_c1) in enumerate(auxiliary_parameters(arch), start=1):
        parts = decoder_layer_partials(h, w_c1, b_c1, act, arch.clamp_eps, ep.session.workers)
        ep.publish(topic(sid, "layer", layer), "layer_partials", pk.partials_payload(parts), layer)
        packet = ep.await_broadcast(subs["model"], "layer", layer)
        w, b = _broadcast_arrays(packet, sizes[layer], sizes[layer + 1])
        h = layer_forward(h, w, b, act)

    last = len(sizes) - 2
    parts = last_layer_partials(h, x, arch.clamp_eps, ep.session.workers)
    ep.publish(topic(sid, "layer", last), "layer_partials", pk.partials_payload(parts), last)
    packet = ep.await_broadcast(subs["model"], "knowledge")
    encoder, layers = pk.read_knowledge(packet, sizes[0])
    return rebuild(arch, encoder, layers, ep.session.workers)


def _sync_aggregator(ep: _Endpoint, subs: dict) -> DaefModel:
    session, sid, arch = ep.session, ep.session.session_id, ep.session.arch
    sizes = arch.layer_sizes
    model_topic = topic(sid, "model")

    stats = [pk.read_encoder_stats(p, sizes[0]) for p in ep.collect(subs["encoder"], "encoder_stats")]
    if sum(s.sample_count for s in stats) < arch.latent:
        raise SessionAborted("too few samples across all nodes for the latent size")
    w1, encoder = encoder_stats_merge(stats, arch.latent)
    ep.publish(model_topic, "model_broadcast",
               {"stage": "encoder", "weights": w1.tolist()}, retain=True)

    weights, biases, knowledge = [], [], []
    for layer, (_, b_c1) in enumerate(auxiliary_parameters(arch), start=1):
        received = ep.collect(subs["layer"], "layer_partials", layer)
        partials = merge_neurons([pk.read_partials(p) for p in received])
        w, b = decoder_layer_from_knowledge(partials, b_c1, arch.lambda_hidden, session.workers)
        ep.publish(model_topic, "model_broadcast", pk.layer_payload("layer", w, b), layer, retain=True)
        weights.append(w)
        biases.append(b)
        knowledge.append(partials)

    last = len(sizes) - 2
    received = ep.collect(subs["layer"], "layer_partials", last)
    partials = merge_neurons([pk.read_partials(p) for p in received])
    w, b = rolann.solve_layer(partials, arch.lambda_last, session.workers)
    weights.append(w)
    biases.append(b)
    knowledge.append(partials)
    ep.publish(model_topic, "model_broadcast", pk.knowledge_payload(encoder, knowledge), retain=True)
    return DaefModel(arch, w1, encoder, weights, biases, knowledge)


# -- post-hoc merging ------------------------------------------------------------


def _check_compatible(a: Architecture, b: Architecture) -> None:
    if a.init_seed != b.init_seed:
        raise SeedMismatch(f"seeds differ: {a.init_seed} vs {b.init_seed}")
    if a != b:
        raise ArchitectureMismatch(f"architectures differ: {a.to_dict()} vs {b.to_dict()}")


def merge_knowledge(
    arch: Architecture,
    knowledge: Sequence[tuple[SvdThin, list[list[rolann.RolannPartial]]]],
    workers: int = 1,
) -> DaefModel:
    """Merge several stores of knowledge and re-solve every weight."""
    encoder = dsvd_merge([enc for enc, _ in knowledge])
    n_layers = {len(layers) for _, layers in knowledge}
    if len(n_layers) != 1:
        raise ArchitectureMismatch(f"knowledge for differing layer counts: {sorted(n_layers)}")
    layers = [
        merge_neurons([layers[i] for _, layers in knowledge]) for i in range(n_layers.pop())
    ]
    return rebuild(arch, encoder, layers, workers)


def post_hoc_merge(
    local_model: DaefModel,
    foreign: DaefModel | tuple[SvdThin, list[list[rolann.RolannPartial]]],
    workers: int = 1,
    foreign_arch: Architecture | None = None,
) -> DaefModel:
    """Fold another network's stored knowledge into ``local_model``.

    The returned model carries no threshold or scaler: both were fitted to
    the local data only and have to be refitted.
    """
    if isinstance(foreign, DaefModel):
        foreign_arch = foreign.arch
        foreign = (foreign.encoder_knowledge, foreign.layer_knowledge)
    if foreign_arch is not None:
        _check_compatible(local_model.arch, foreign_arch)
    local = (local_model.encoder_knowledge, local_model.layer_knowledge)
    try:
        return merge_knowledge(local_model.arch, [local, foreign], workers)
    except ShapeMismatch as exc:
        raise ArchitectureMismatch(f"foreign knowledge does not fit the architecture: {exc}") from None


def _post_hoc_node(ep: _Endpoint, subs: dict, x: np.ndarray) -> DaefModel:
    sid = ep.session.session_id
    _, init = ep.receive(subs["init"], time.monotonic() + ep.session.timeout)
    arch = _agree(ep.session, init)
    local = train(x, arch, workers=ep.session.workers)
    ep.publish(topic(sid, "model"), "model_broadcast",
               pk.knowledge_payload(local.encoder_knowledge, local.layer_knowledge))
    # every node merges all contributions in roster order, so all end up identical
    received = ep.collect(subs["model"], "model_broadcast")
    knowledge = [pk.read_knowledge(p, arch.n_inputs) for p in received]
    return merge_knowledge(arch, knowledge, ep.session.workers)


# -- driver --------------------------------------------------------------------------


def simulate(
    session: FedSession,
    local_data: Sequence[np.ndarray | None],
    broker: Broker | None = None,
) -> FedOutcome:
    """Run every node of ``session`` as a thread against ``broker``.

    ``local_data[i]`` belongs to ``session.roster[i]``; ``None`` marks a node
    that never comes online, which makes the session abort after the timeout.
    """
    if len(local_data) != len(session.roster):
        raise ValueError(f"{len(local_data)} data blocks for {len(session.roster)} nodes")
    broker = broker or Broker()
    sid = session.session_id
    broker.open_session(sid)
    abort = threading.Event()
    start = time.monotonic()

    endpoints = {n: _Endpoint(broker, session, n, abort) for n in session.roster}
    node_subs = {}
    for n in session.roster:
        node_subs[n] = {"init": broker.subscribe(topic(sid, "init")),
                        "model": broker.subscribe(topic(sid, "model"))}
    if session.mode == "layer_sync":
        agg_ep = _Endpoint(broker, session, session.aggregator, abort)
        agg_ep._seq = endpoints[session.aggregator]._seq  # one node, one numbering
        agg_subs = {"encoder": broker.subscribe(topic(sid, "encoder")),
                    "layer": broker.subscribe(topic(sid, "layer", "+"))}

    results: dict[str, DaefModel] = {}
    errors: list[BaseException] = []
    lock = threading.Lock()

    def run(name: str, fn, *args) -> None:
        try:
            out = fn(*args)
            with lock:
                results[name] = out
        except BaseException as exc:  # reported after join
            with lock:
                errors.append(exc)
            abort.set()

    threads = []
    for n, x in zip(session.roster, local_data):
        if x is None:
            continue
        fn = _sync_participant if session.mode == "layer_sync" else _post_hoc_node
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != session.arch.n_inputs:
            broker.close_session(sid)
            raise ShapeMismatch(f"{n}: expected {session.arch.n_inputs} features, got {x.shape}")
        threads.append(threading.Thread(target=run, args=(n, fn, endpoints[n], node_subs[n], x)))
    if session.mode == "layer_sync":
        threads.append(threading.Thread(target=run, args=("<aggregator>", _sync_aggregator, agg_ep, agg_subs)))

    init_ep = endpoints[session.aggregator]
    init_ep.publish(topic(sid, "init"), "init",
                    pk.init_payload(session.arch, session.roster, session.aggregator, session.mode),
                    retain=True)
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    broker.close_session(sid)

    if errors:
        first = next((e for e in errors if not isinstance(e, SessionAborted)), errors[0])
        raise SessionAborted(f"session {sid!r} aborted: {type(first).__name__}: {first}") from first

    node_models = {n: results[n] for n in session.roster}
    model = results.get("<aggregator>", node_models[session.aggregator])
    eps = list(endpoints.values()) + ([agg_ep] if session.mode == "layer_sync" else [])
    return FedOutcome(
        model=model,
        node_models=node_models,
        packets=sum(e.sent for e in eps),
        payload_bytes=sum(e.sent_bytes for e in eps),
        rounds=len(session.arch.layer_sizes) if session.mode == "layer_sync" else 2,
        wall_time=time.monotonic() - start,
    )


def run_layer_sync(session: FedSession, local_data: Sequence[np.ndarray], broker: Broker | None = None) -> DaefModel:
    if session.mode != "layer_sync":
        raise ValueError("session is not in layer_sync mode")
    return simulate(session, local_data, broker).model


def run_post_hoc(session: FedSession, local_data: Sequence[np.ndarray], broker: Broker | None = None) -> DaefModel:
    if session.mode != "post_hoc":
        raise ValueError("session is not in post_hoc mode")
    return simulate(session, local_data, broker).model
