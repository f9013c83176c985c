"""Graph-attention encoder over frame graphs.

Pipeline per frame: a node encoder concatenates each keypoint descriptor with
an MLP embedding of its normalized position, two graph-attention layers
propagate messages along the adjacency, and two parallel bias-free two-layer
ReLU heads produce location features ``x_loc`` (where a keypoint writes on
the object descriptor) and content features ``x_content`` (what it writes).
Their elementwise product is the structural feature ``x_struct``.

The attention layer follows the additive single-head formulation: per-edge
scores leaky_relu(a . [W h_i || W h_j]) are softmax-normalized over each
node's neighborhood (self-loops included). Multiple heads are supported by
averaging head outputs, keeping the output width independent of head count.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import diff_core as dc
from .diff_core import Parameter, Tensor
from .topo_graph import FrameGraph

NODE_MLP_HIDDEN = 32


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and switches shared by the encoder and temporal stages.

    ``node_dim`` (descriptor_dim + position_embed_dim) is the width of the
    encoded node features; ``gat_dim`` is the attention output width and
    defaults to ``node_dim``; ``object_dim`` is the object-descriptor width
    and must be at least ``gat_dim`` so the first sparsity layer expands.
    """

    descriptor_dim: int = 256
    position_embed_dim: int = 16
    object_dim: int = 2048
    gat_dim: int | None = None
    gat_heads: int = 1
    leaky_slope: float = 0.2
    fully_connected: bool = False

    def __post_init__(self):
        if min(self.descriptor_dim, self.position_embed_dim, self.object_dim) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.gat_heads < 1:
            raise ValueError("gat_heads must be >= 1")
        if self.gat_out_dim > self.object_dim:
            raise ValueError(
                f"gat_dim {self.gat_out_dim} must not exceed object_dim {self.object_dim}"
            )

    @property
    def node_dim(self) -> int:
        return self.descriptor_dim + self.position_embed_dim

    @property
    def gat_out_dim(self) -> int:
        return self.node_dim if self.gat_dim is None else self.gat_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GatLayerParams:
    """One attention layer: shared linear map plus per-head attention vectors."""

    weight: Parameter  # (heads, out, in)
    attn: Parameter  # (heads, 2 * out)


@dataclass
class EncoderParams:
    """All learnable weights of the frame encoder."""

    config: ModelConfig
    node_mlp_w1: Parameter
    node_mlp_b1: Parameter
    node_mlp_w2: Parameter
    node_mlp_b2: Parameter
    gat1: GatLayerParams
    gat2: GatLayerParams
    loc_head_w1: Parameter
    loc_head_w2: Parameter
    content_head_w1: Parameter
    content_head_w2: Parameter
    slp_w: Parameter
    slp_b: Parameter

    def parameters(self) -> list[Parameter]:
        return [
            self.node_mlp_w1,
            self.node_mlp_b1,
            self.node_mlp_w2,
            self.node_mlp_b2,
            self.gat1.weight,
            self.gat1.attn,
            self.gat2.weight,
            self.gat2.attn,
            self.loc_head_w1,
            self.loc_head_w2,
            self.content_head_w1,
            self.content_head_w2,
            self.slp_w,
            self.slp_b,
        ]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    # checkpoint sections: node_mlp, gat1, gat2, loc_head, content_head, slp

    def to_sections(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            "node_mlp": {
                "w1": self.node_mlp_w1.data,
                "b1": self.node_mlp_b1.data,
                "w2": self.node_mlp_w2.data,
                "b2": self.node_mlp_b2.data,
            },
            "gat1": {"weight": self.gat1.weight.data, "attn": self.gat1.attn.data},
            "gat2": {"weight": self.gat2.weight.data, "attn": self.gat2.attn.data},
            "loc_head": {"w1": self.loc_head_w1.data, "w2": self.loc_head_w2.data},
            "content_head": {
                "w1": self.content_head_w1.data,
                "w2": self.content_head_w2.data,
            },
            "slp": {"w": self.slp_w.data, "b": self.slp_b.data},
        }

    @classmethod
    def from_sections(
        cls, config: ModelConfig, sections: dict[str, dict[str, np.ndarray]]
    ) -> "EncoderParams":
        shapes = _encoder_shapes(config)
        got = {
            name: dc.take_section(sections, name, expected)
            for name, expected in shapes.items()
        }
        return cls(
            config=config,
            node_mlp_w1=Parameter(got["node_mlp"]["w1"], "node_mlp.w1"),
            node_mlp_b1=Parameter(got["node_mlp"]["b1"], "node_mlp.b1"),
            node_mlp_w2=Parameter(got["node_mlp"]["w2"], "node_mlp.w2"),
            node_mlp_b2=Parameter(got["node_mlp"]["b2"], "node_mlp.b2"),
            gat1=GatLayerParams(
                Parameter(got["gat1"]["weight"], "gat1.weight"),
                Parameter(got["gat1"]["attn"], "gat1.attn"),
            ),
            gat2=GatLayerParams(
                Parameter(got["gat2"]["weight"], "gat2.weight"),
                Parameter(got["gat2"]["attn"], "gat2.attn"),
            ),
            loc_head_w1=Parameter(got["loc_head"]["w1"], "loc_head.w1"),
            loc_head_w2=Parameter(got["loc_head"]["w2"], "loc_head.w2"),
            content_head_w1=Parameter(got["content_head"]["w1"], "content_head.w1"),
            content_head_w2=Parameter(got["content_head"]["w2"], "content_head.w2"),
            slp_w=Parameter(got["slp"]["w"], "slp.w"),
            slp_b=Parameter(got["slp"]["b"], "slp.b"),
        )


def _encoder_shapes(cfg: ModelConfig) -> dict[str, dict[str, tuple[int, ...]]]:
    h, dn, dg, do = cfg.gat_heads, cfg.node_dim, cfg.gat_out_dim, cfg.object_dim
    return {
        "node_mlp": {
            "w1": (NODE_MLP_HIDDEN, 2),
            "b1": (NODE_MLP_HIDDEN,),
            "w2": (cfg.position_embed_dim, NODE_MLP_HIDDEN),
            "b2": (cfg.position_embed_dim,),
        },
        "gat1": {"weight": (h, dg, dn), "attn": (h, 2 * dg)},
        "gat2": {"weight": (h, dg, dg), "attn": (h, 2 * dg)},
        "loc_head": {"w1": (do, dg), "w2": (do, do)},
        "content_head": {"w1": (do, dg), "w2": (do, do)},
        "slp": {"w": (do, do), "b": (do,)},
    }


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> EncoderParams:
    """He-initialize the ReLU paths, Glorot-initialize the attention maps."""

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def glorot(shape, fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)

    dn, dg, do = cfg.node_dim, cfg.gat_out_dim, cfg.object_dim
    h = cfg.gat_heads
    return EncoderParams(
        config=cfg,
        node_mlp_w1=Parameter(he((NODE_MLP_HIDDEN, 2), 2), "node_mlp.w1"),
        node_mlp_b1=Parameter(np.zeros(NODE_MLP_HIDDEN), "node_mlp.b1"),
        node_mlp_w2=Parameter(
            he((cfg.position_embed_dim, NODE_MLP_HIDDEN), NODE_MLP_HIDDEN), "node_mlp.w2"
        ),
        node_mlp_b2=Parameter(np.zeros(cfg.position_embed_dim), "node_mlp.b2"),
        gat1=GatLayerParams(
            Parameter(glorot((h, dg, dn), dn, dg), "gat1.weight"),
            Parameter(glorot((h, 2 * dg), 2 * dg, 1), "gat1.attn"),
        ),
        gat2=GatLayerParams(
            Parameter(glorot((h, dg, dg), dg, dg), "gat2.weight"),
            Parameter(glorot((h, 2 * dg), 2 * dg, 1), "gat2.attn"),
        ),
        loc_head_w1=Parameter(he((do, dg), dg), "loc_head.w1"),
        loc_head_w2=Parameter(he((do, do), do), "loc_head.w2"),
        content_head_w1=Parameter(he((do, dg), dg), "content_head.w1"),
        content_head_w2=Parameter(he((do, do), do), "content_head.w2"),
        slp_w=Parameter(glorot((do, do), do, do), "slp.w"),
        slp_b=Parameter(np.zeros(do), "slp.b"),
    )


@dataclass
class FrameEncoding:
    """Per-node feature matrices for one frame (all entries non-negative)."""

    x_loc: Tensor  # (N, D_o)
    x_content: Tensor  # (N, D_o)
    x_struct: Tensor  # (N, D_o), == x_loc * x_content

    @property
    def n_nodes(self) -> int:
        return self.x_struct.shape[0]


# -- forward operations ---------------------------------------------------------


def encode_nodes(graph: FrameGraph, params: EncoderParams) -> Tensor:
    """Rows [descriptor || MLP(normalized position)], width node_dim."""
    cfg = params.config
    if graph.descriptors.shape[1] != cfg.descriptor_dim:
        raise dc.ShapeError(
            f"graph descriptors have dim {graph.descriptors.shape[1]}, "
            f"model expects {cfg.descriptor_dim}"
        )
    pos = Tensor(graph.positions_norm)
    hidden = dc.relu(dc.affine(pos, params.node_mlp_w1, params.node_mlp_b1))
    embed = dc.affine(hidden, params.node_mlp_w2, params.node_mlp_b2)
    return dc.concat_columns(Tensor(graph.descriptors), embed)


def gat_layer(
    h: Tensor,
    adjacency: np.ndarray,
    layer: GatLayerParams,
    leaky_slope: float = 0.2,
    activation: str = "relu",
) -> Tensor:
    """One round of attention-weighted message passing over the adjacency."""
    adjacency = np.asarray(adjacency)
    n = h.shape[0]
    if adjacency.shape != (n, n):
        raise dc.ShapeError(f"adjacency {adjacency.shape} for {n} nodes")
    if not np.array_equal(adjacency, adjacency.T) or not np.all(np.diag(adjacency) == 1):
        raise ValueError("adjacency must be symmetric with self-loops")

    heads, out_dim, in_dim = layer.weight.shape
    # constant selectors split the stacked attention vector into its two halves
    p_src = np.vstack([np.eye(out_dim), np.zeros((out_dim, out_dim))])
    p_dst = np.vstack([np.zeros((out_dim, out_dim)), np.eye(out_dim)])

    head_outputs = []
    w_flat = dc.reshape(layer.weight, (heads * out_dim, in_dim))
    for k in range(heads):
        if heads == 1:
            w_k = dc.reshape(layer.weight, (out_dim, in_dim))
            a_k = dc.reshape(layer.attn, (1, 2 * out_dim))
        else:
            sel = np.zeros((out_dim, heads * out_dim))
            sel[:, k * out_dim : (k + 1) * out_dim] = np.eye(out_dim)
            w_k = dc.matmul(Tensor(sel), w_flat)
            a_k = dc.matmul(Tensor(np.eye(heads)[k : k + 1]), layer.attn)
        wh = dc.matmul(h, dc.transpose(w_k))  # (n, out)
        s_src = dc.matmul(wh, dc.transpose(dc.matmul(a_k, Tensor(p_src))))  # (n, 1)
        s_dst = dc.matmul(wh, dc.transpose(dc.matmul(a_k, Tensor(p_dst))))  # (n, 1)
        scores = dc.leaky_relu(
            dc.add(s_src, dc.reshape(s_dst, (1, n))), leaky_slope
        )
        alpha = dc.masked_softmax(scores, adjacency)
        head_outputs.append(dc.matmul(alpha, wh))

    agg = head_outputs[0]
    for extra in head_outputs[1:]:
        agg = dc.add(agg, extra)
    if heads > 1:
        agg = dc.elementwise_mul(agg, 1.0 / heads)

    if activation == "relu":
        return dc.relu(agg)
    if activation == "identity":
        return agg
    raise ValueError(f"unknown activation {activation!r}")


def sparsity_head(h: Tensor, w1: Parameter, w2: Parameter) -> Tensor:
    """Two stacked bias-free ReLU layers mapping gat_dim -> object_dim."""
    return dc.relu(dc.matmul(dc.relu(dc.matmul(h, dc.transpose(w1))), dc.transpose(w2)))


def encode_frame(graph: FrameGraph, params: EncoderParams) -> FrameEncoding:
    """Node encoder -> 2 attention layers -> both sparsity heads -> product."""
    cfg = params.config
    h = encode_nodes(graph, params)
    h = gat_layer(h, graph.adjacency, params.gat1, cfg.leaky_slope, activation="relu")
    h = gat_layer(h, graph.adjacency, params.gat2, cfg.leaky_slope, activation="identity")
    x_loc = sparsity_head(h, params.loc_head_w1, params.loc_head_w2)
    x_content = sparsity_head(h, params.content_head_w1, params.content_head_w2)
    return FrameEncoding(
        x_loc=x_loc, x_content=x_content, x_struct=dc.elementwise_mul(x_loc, x_content)
    )


def single_frame_descriptor(enc: FrameEncoding, params: EncoderParams) -> Tensor:
    """Unit-norm descriptor from one frame: normalize(slp(sum of x_struct rows))."""
    pooled = dc.reshape(dc.reduce_sum(enc.x_struct, axis=0), (1, params.config.object_dim))
    out = dc.affine(pooled, params.slp_w, params.slp_b)
    return dc.l2_normalize(dc.reshape(out, (params.config.object_dim,)))
