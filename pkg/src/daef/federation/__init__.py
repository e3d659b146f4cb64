"""Multi-node training over a publish/subscribe broker."""

from daef.federation.broker import (
    Broker,
    Deduplicator,
    Subscription,
    TcpBrokerClient,
    TcpBrokerServer,
    frame,
    read_frame,
    topic,
    topic_matches,
    write_frame,
)
from daef.federation.packets import (
    EncoderStats,
    KnowledgePacket,
    check_dimensions,
    decode,
    encode,
    local_encoder_stats,
)
from daef.federation.protocol import (
    FedOutcome,
    FedSession,
    aggregate_encoder,
    merge_knowledge,
    post_hoc_merge,
    run_layer_sync,
    run_post_hoc,
    simulate,
)

__all__ = [
    "Broker", "Deduplicator", "Subscription", "TcpBrokerClient", "TcpBrokerServer",
    "frame", "read_frame", "topic", "topic_matches", "write_frame",
    "EncoderStats", "KnowledgePacket", "check_dimensions", "decode", "encode",
    "local_encoder_stats", "FedOutcome", "FedSession", "aggregate_encoder",
    "merge_knowledge", "post_hoc_merge", "run_layer_sync", "run_post_hoc", "simulate",
]
