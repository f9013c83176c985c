"""Temporal aggregation of per-frame structural features into one descriptor.

Structural feature rows from a frame sequence are node-wise stacked, passed
through a length-1 stride-1 temporal convolution (exactly a per-row affine
map, since the filter covers one row), average-pooled across all rows, and
L2-normalized. The result is a unit-norm object descriptor whose value is
invariant to frame and node order.

Also provides the averaging baseline over single-frame descriptors and the
unique-feature filter that drops rows whose selector feature is too similar
to an already kept row.

Descriptor dumps are line-delimited JSON records
``{"video_id", "object_id", "half", "vector"}`` with half in
{"query", "reference"}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diff_core as dc
from .diff_core import Parameter, Tensor
from .graph_encoder import EncoderParams, FrameEncoding, ModelConfig, encode_frame
from .topo_graph import FrameGraph


@dataclass
class TemporalParams:
    """Length-1 temporal convolution: kernel (D_o, D_o) and bias (D_o,)."""

    kernel: Parameter
    bias: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.kernel, self.bias]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def to_sections(self) -> dict[str, dict[str, np.ndarray]]:
        return {"temporal": {"kernel": self.kernel.data, "bias": self.bias.data}}

    @classmethod
    def from_sections(
        cls, config: ModelConfig, sections: dict[str, dict[str, np.ndarray]]
    ) -> "TemporalParams":
        do = config.object_dim
        got = dc.take_section(sections, "temporal", {"kernel": (do, do), "bias": (do,)})
        return cls(Parameter(got["kernel"], "temporal.kernel"), Parameter(got["bias"], "temporal.bias"))


def init_temporal_params(cfg: ModelConfig, rng: np.random.Generator) -> TemporalParams:
    do = cfg.object_dim
    kernel = rng.normal(0.0, np.sqrt(1.0 / do), size=(do, do))
    return TemporalParams(
        Parameter(kernel, "temporal.kernel"),
        Parameter(np.zeros(do), "temporal.bias"),
    )


@dataclass
class StackedFeatures:
    """Structural rows of a whole sequence plus each row's source frame."""

    matrix: Tensor  # (N_s, D_o)
    frame_offsets: list[int]  # per-row frame ordinal, non-decreasing

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class TemporalDescriptor:
    """Unit-norm object descriptor for a frame range of one track."""

    vector: np.ndarray  # (D_o,)
    source: tuple[str, str, tuple[int, int]]  # (video_id, object_id, frame range)

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"descriptor norm {norm} is not 1 within 1e-6")


# -- operations -----------------------------------------------------------------


def stack_sequence(encodings: list[FrameEncoding]) -> StackedFeatures:
    """Concatenate x_struct rows in frame order, remembering row provenance."""
    if not encodings:
        raise ValueError("cannot stack an empty sequence")
    offsets: list[int] = []
    for f, enc in enumerate(encodings):
        offsets.extend([f] * enc.n_nodes)
    return StackedFeatures(
        matrix=dc.concat_rows([enc.x_struct for enc in encodings]),
        frame_offsets=offsets,
    )


def temporal_conv(stacked: StackedFeatures, params: TemporalParams) -> Tensor:
    """Apply the length-1 convolution: per row, kernel @ row + bias."""
    return dc.affine(stacked.matrix, params.kernel, params.bias)


def sequence_average_pool(y: Tensor) -> Tensor:
    """Column-wise mean over all stacked rows."""
    if y.shape[0] < 1:
        raise ValueError("cannot pool an empty matrix")
    return dc.reduce_mean(y, axis=0)


def encode_sequence(
    graphs: list[FrameGraph],
    enc: EncoderParams,
    tmp: TemporalParams,
    unique_threshold: float | None = None,
    unique_selector: str = "location",
) -> Tensor:
    """Differentiable sequence descriptor; unit-norm output on the tape."""
    if not graphs:
        raise ValueError("cannot encode an empty sequence")
    encodings = [encode_frame(g, enc) for g in graphs]
    stacked = stack_sequence(encodings)
    if unique_threshold is not None:
        stacked = select_unique_features(stacked, encodings, unique_threshold, unique_selector)
    pooled = sequence_average_pool(temporal_conv(stacked, tmp))
    return dc.l2_normalize(pooled)


def airobject_descriptor(
    graphs: list[FrameGraph],
    enc: EncoderParams,
    tmp: TemporalParams,
    unique_threshold: float | None = None,
    unique_selector: str = "location",
) -> TemporalDescriptor:
    """Full-pipeline descriptor for a frame sequence of one object."""
    vec = encode_sequence(graphs, enc, tmp, unique_threshold, unique_selector)
    video_id, object_id, first = graphs[0].source
    last = graphs[-1].source[2]
    return TemporalDescriptor(vector=vec.data.copy(), source=(video_id, object_id, (first, last)))


def average_descriptor_baseline(descs: list[np.ndarray]) -> np.ndarray:
    """Unit-normalized mean of single-frame descriptors."""
    if not descs:
        raise ValueError("need at least one descriptor")
    mean = np.mean([np.asarray(d, dtype=np.float64) for d in descs], axis=0)
    norm = float(np.linalg.norm(mean))
    if norm <= dc.EPS_NORM:
        raise dc.ZeroVectorError("descriptors average to (near-)zero")
    return mean / norm


def select_unique_features(
    stacked: StackedFeatures,
    encodings: list[FrameEncoding],
    sim_threshold: float,
    selector: str = "location",
) -> StackedFeatures:
    """Greedy first-kept-wins dedup of stacked rows by selector-feature cosine.

    A row survives iff its selector feature (x_loc or x_content) has cosine
    similarity below `sim_threshold` against every previously kept row's
    selector feature. Zero-norm selector rows are always kept. Row order is
    preserved; the first row always survives.
    """
    if not 0.0 < sim_threshold < 1.0:
        raise ValueError(f"sim_threshold must be in (0, 1), got {sim_threshold}")
    if selector == "location":
        sel = np.concatenate([e.x_loc.data for e in encodings], axis=0)
    elif selector == "content":
        sel = np.concatenate([e.x_content.data for e in encodings], axis=0)
    else:
        raise ValueError(f"selector must be 'location' or 'content', got {selector!r}")
    if sel.shape[0] != stacked.n_rows:
        raise ValueError("encodings do not match the stacked matrix")

    norms = np.linalg.norm(sel, axis=1)
    kept: list[int] = []
    for i in range(sel.shape[0]):
        if norms[i] <= dc.EPS_NORM:
            kept.append(i)
            continue
        duplicate = False
        for j in kept:
            if norms[j] <= dc.EPS_NORM:
                continue
            cos = float(sel[i] @ sel[j]) / (norms[i] * norms[j])
            if cos >= sim_threshold:
                duplicate = True
                break
        if not duplicate:
            kept.append(i)

    selector_rows = np.zeros((len(kept), stacked.n_rows))
    for row, idx in enumerate(kept):
        selector_rows[row, idx] = 1.0
    return StackedFeatures(
        matrix=dc.matmul(Tensor(selector_rows), stacked.matrix),
        frame_offsets=[stacked.frame_offsets[i] for i in kept],
    )


# -- descriptor dump I/O ----------------------------------------------------------


@dataclass(frozen=True)
class DescriptorRecord:
    """One dumped descriptor: track identity, which half, and the vector."""

    video_id: str
    object_id: str
    half: str  # "query" or "reference"
    vector: np.ndarray

    def __post_init__(self):
        if self.half not in ("query", "reference"):
            raise ValueError(f"half must be 'query' or 'reference', got {self.half!r}")
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))


def write_descriptors(records: list[DescriptorRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "video_id": rec.video_id,
                        "object_id": rec.object_id,
                        "half": rec.half,
                        "vector": [float(v) for v in rec.vector],
                    }
                )
            )
            fh.write("\n")


def read_descriptors(path) -> list[DescriptorRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                records.append(
                    DescriptorRecord(
                        video_id=str(rec["video_id"]),
                        object_id=str(rec["object_id"]),
                        half=str(rec["half"]),
                        vector=np.asarray(rec["vector"], dtype=np.float64),
                    )
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}, line {lineno}: bad descriptor record ({exc})") from exc
    return records
