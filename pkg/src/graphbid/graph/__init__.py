"""Graph construction and graph-neural embeddings of auction states."""
from graphbid.graph.build import (
    AuctionGraph,
    GraphBatch,
    batch_graphs,
    build_graph,
    context_dim,
    context_vector,
)
from graphbid.graph.encoder import (
    EcAggregator,
    EmaTarget,
    GnnEncoder,
    SelfPredictor,
    ec_aggregate,
    encode,
    others_mean,
    spl_loss,
)

__all__ = [
    "AuctionGraph", "EcAggregator", "EmaTarget", "GnnEncoder", "GraphBatch", "SelfPredictor",
    "batch_graphs", "build_graph", "context_dim", "context_vector", "ec_aggregate", "encode",
    "others_mean", "spl_loss",
]
