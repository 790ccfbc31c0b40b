"""The four network variants, graph execution, and model file I/O.

All variants share a 7-block trunk: block 1 is a 5x5 conv with 16 filters,
later blocks use 3x3 kernels with channels doubling up to a 256 cap
(16, 32, 64, 128, 256, 256, 256), each block being conv -> batchnorm ->
relu with a 2x2 max pool after blocks 1-5 only.

  basenet  regular convs, flatten -> dense-128 -> dense head
  scnet    separable convs (blocks 2-7), same dense head
  scfcnet  separable convs, head replaced by GAP -> dropout -> 1x1 conv
  ernet    scfcnet plus residual skips around blocks 2-7 (1x1 projections
           where the channel count changes)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import ArgumentError, FormatError, ShapeError, StateError
from .tensor import he_normal_init, make_rng

VARIANTS = ("basenet", "scnet", "scfcnet", "ernet")
CHANNELS = (16, 32, 64, 128, 256, 256, 256)
POOLED_BLOCKS = 5          # pooling after all but the two final blocks
FIRST_KERNEL = 5
LATER_KERNEL = 3
DENSE_HIDDEN = 128
DROPOUT_RATE = 0.5
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5

MODEL_MAGIC = b"ERNETv01"


@dataclass
class LayerSpec:
    kind: str                 # conv|sepconv|maxpool|batchnorm|relu|gap|dense|dropout|flatten|residual_begin|residual_end
    name: str
    cfg: dict = field(default_factory=dict)


@dataclass
class ModelGraph:
    name: str
    layers: list
    params: dict              # name -> ndarray, insertion order is the declared order
    input_shape: tuple        # (h, w, ch)
    class_count: int
    feature_index: int        # last trunk layer; its output feeds the head and Grad-CAM
    dtype: np.dtype
    non_trainable: set        # batch-norm running stats
    l2_keys: set              # conv / dense weight tensors the L2 penalty applies to


@dataclass
class ForwardCache:
    phase: str
    layer_caches: list
    out_shapes: list          # (layer name, output shape) per executed layer
    feature_map: Optional[np.ndarray]
    logits: np.ndarray


def canonical_variant(variant: str) -> str:
    v = variant.lower()
    if v not in VARIANTS:
        raise ArgumentError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return v


def build_model(variant: str, input_shape, class_count: int, rng, dtype=np.float32) -> ModelGraph:
    v = canonical_variant(variant)
    h, w, c = (int(s) for s in input_shape)
    if h < 64 or w < 64:
        raise ArgumentError(f"input spatial extents must be >= 64, got {h}x{w}")
    if c < 1:
        raise ArgumentError("input needs at least one channel")
    if class_count < 2:
        raise ArgumentError(f"class_count must be >= 2, got {class_count}")

    separable = v in ("scnet", "scfcnet", "ernet")
    residual = v == "ernet"
    conv_head = v in ("scfcnet", "ernet")

    layers: list[LayerSpec] = []
    params: dict[str, np.ndarray] = {}
    non_trainable: set[str] = set()
    l2_keys: set[str] = set()

    def he(shape, fan_in):
        return he_normal_init(shape, fan_in, rng, dtype=dtype)

    def zeros(shape):
        return np.zeros(shape, dtype=dtype)

    in_ch = c
    fh, fw = h, w
    for i, ch in enumerate(CHANNELS):
        block = f"b{i + 1}"
        k = FIRST_KERNEL if i == 0 else LATER_KERNEL
        use_sep = separable and i > 0
        use_res = residual and i > 0

        begin_index = None
        if use_res:
            layers.append(LayerSpec("residual_begin", f"{block}_skip"))
            begin_index = len(layers) - 1

        if use_sep:
            name = f"{block}_sep"
            params[f"{name}.dw"] = he((k, k, in_ch), fan_in=k * k)
            params[f"{name}.pw_w"] = he((1, 1, in_ch, ch), fan_in=in_ch)
            params[f"{name}.pw_b"] = zeros(ch)
            l2_keys.update({f"{name}.dw", f"{name}.pw_w"})
            layers.append(LayerSpec("sepconv", name, {"kernel": k, "in_ch": in_ch, "filters": ch}))
        else:
            name = f"{block}_conv"
            params[f"{name}.w"] = he((k, k, in_ch, ch), fan_in=k * k * in_ch)
            params[f"{name}.b"] = zeros(ch)
            l2_keys.add(f"{name}.w")
            layers.append(LayerSpec("conv", name, {"kernel": k, "in_ch": in_ch, "filters": ch}))

        bn = f"{block}_bn"
        params[f"{bn}.scale"] = np.ones(ch, dtype=dtype)
        params[f"{bn}.shift"] = zeros(ch)
        params[f"{bn}.rmean"] = zeros(ch)
        params[f"{bn}.rvar"] = np.ones(ch, dtype=dtype)
        non_trainable.update({f"{bn}.rmean", f"{bn}.rvar"})
        layers.append(LayerSpec("batchnorm", bn, {"channels": ch}))
        layers.append(LayerSpec("relu", f"{block}_relu"))

        if use_res:
            name = f"{block}_merge"
            has_proj = in_ch != ch
            if has_proj:
                params[f"{name}.proj_w"] = he((1, 1, in_ch, ch), fan_in=in_ch)
                params[f"{name}.proj_b"] = zeros(ch)
                l2_keys.add(f"{name}.proj_w")
            layers.append(LayerSpec("residual_end", name, {"begin": begin_index, "proj": has_proj}))

        if i < POOLED_BLOCKS:
            layers.append(LayerSpec("maxpool", f"{block}_pool"))
            fh, fw = fh // 2, fw // 2
        in_ch = ch

    feature_index = len(layers) - 1

    if conv_head:
        layers.append(LayerSpec("gap", "head_gap"))
        layers.append(LayerSpec("dropout", "head_drop", {"rate": DROPOUT_RATE}))
        params["head_conv.w"] = he((1, 1, in_ch, class_count), fan_in=in_ch)
        params["head_conv.b"] = zeros(class_count)
        l2_keys.add("head_conv.w")
        layers.append(LayerSpec("conv", "head_conv", {"kernel": 1, "in_ch": in_ch, "filters": class_count}))
        layers.append(LayerSpec("flatten", "head_flat"))
    else:
        feat_dim = fh * fw * in_ch
        layers.append(LayerSpec("flatten", "head_flat"))
        params["head_fc1.w"] = he((feat_dim, DENSE_HIDDEN), fan_in=feat_dim)
        params["head_fc1.b"] = zeros(DENSE_HIDDEN)
        l2_keys.add("head_fc1.w")
        layers.append(LayerSpec("dense", "head_fc1", {"units": DENSE_HIDDEN, "in_features": feat_dim}))
        layers.append(LayerSpec("relu", "head_relu"))
        layers.append(LayerSpec("dropout", "head_drop", {"rate": DROPOUT_RATE}))
        params["head_fc2.w"] = he((DENSE_HIDDEN, class_count), fan_in=DENSE_HIDDEN)
        params["head_fc2.b"] = zeros(class_count)
        l2_keys.add("head_fc2.w")
        layers.append(LayerSpec("dense", "head_fc2", {"units": class_count, "in_features": DENSE_HIDDEN}))

    return ModelGraph(
        name=v,
        layers=layers,
        params=params,
        input_shape=(h, w, c),
        class_count=class_count,
        feature_index=feature_index,
        dtype=np.dtype(dtype),
        non_trainable=non_trainable,
        l2_keys=l2_keys,
    )


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _bn_params(graph: ModelGraph, name: str) -> ops.BatchNormParams:
    p = graph.params
    return ops.BatchNormParams(
        scale=p[f"{name}.scale"], shift=p[f"{name}.shift"],
        running_mean=p[f"{name}.rmean"], running_var=p[f"{name}.rvar"],
        momentum=BN_MOMENTUM, epsilon=BN_EPSILON,
    )


def _run_layers(graph: ModelGraph, x: np.ndarray, phase: str, rng, start: int):
    caches: list = [None] * start
    shapes: list = []
    feature_map = None
    skip_stack: list = []
    p = graph.params
    out = x
    for idx in range(start, len(graph.layers)):
        layer = graph.layers[idx]
        kind, name, cfg = layer.kind, layer.name, layer.cfg
        if kind == "conv":
            out, cache = ops.conv2d_forward(out, ops.ConvParams(p[f"{name}.w"], p[f"{name}.b"]))
        elif kind == "sepconv":
            out, cache = ops.separable_forward(
                out,
                ops.DepthwiseParams(p[f"{name}.dw"]),
                ops.ConvParams(p[f"{name}.pw_w"], p[f"{name}.pw_b"]),
            )
        elif kind == "batchnorm":
            out, cache = ops.batch_norm_forward(out, _bn_params(graph, name), phase)
        elif kind == "relu":
            out, cache = ops.relu_forward(out)
        elif kind == "maxpool":
            out, cache = ops.maxpool2_forward(out)
        elif kind == "gap":
            out, cache = ops.global_avg_pool_forward(out)
        elif kind == "dense":
            out, cache = ops.dense_forward(out, p[f"{name}.w"], p[f"{name}.b"])
        elif kind == "dropout":
            if phase == "train" and rng is None:
                raise ArgumentError("train-phase forward needs an rng for dropout")
            out, cache = ops.dropout_forward(out, cfg["rate"], phase, rng)
        elif kind == "flatten":
            cache = out.shape
            out = out.reshape(out.shape[0], -1)
        elif kind == "residual_begin":
            skip_stack.append(out)
            cache = None
        elif kind == "residual_end":
            saved = skip_stack.pop()
            proj = None
            if cfg["proj"]:
                proj = ops.ConvParams(p[f"{name}.proj_w"], p[f"{name}.proj_b"])
            out, cache = ops.residual_merge_forward(saved, out, proj)
        else:
            raise ArgumentError(f"unknown layer kind {kind!r}")
        caches.append(cache)
        shapes.append((name, out.shape))
        if idx == graph.feature_index:
            feature_map = out
    return out, caches, shapes, feature_map


def forward(graph: ModelGraph, x: np.ndarray, phase: str = "infer", rng=None):
    """Run all layers; returns (logits, cache). Cache feeds backward and Grad-CAM."""
    if phase not in ("train", "infer"):
        raise ArgumentError(f"phase must be 'train' or 'infer', got {phase!r}")
    if x.ndim != 4 or tuple(x.shape[1:]) != graph.input_shape:
        raise ShapeError(
            f"input shape {x.shape} does not match (batch,)+{graph.input_shape}"
        )
    logits, caches, shapes, feature_map = _run_layers(graph, x, phase, rng, start=0)
    return logits, ForwardCache(phase, caches, shapes, feature_map, logits)


def head_forward(graph: ModelGraph, feature_map: np.ndarray, phase: str = "infer", rng=None) -> np.ndarray:
    """Run only the classification head on a trunk feature map."""
    logits, _, _, _ = _run_layers(graph, feature_map, phase, rng, start=graph.feature_index + 1)
    return logits


def _backward_walk(graph: ModelGraph, cache: ForwardCache, d_logits: np.ndarray, stop_after: int):
    """Reverse pass over layers > stop_after; returns (param grads, d at stop boundary)."""
    grads: dict[str, np.ndarray] = {}
    pending: dict[int, np.ndarray] = {}
    d = d_logits
    for idx in range(len(graph.layers) - 1, stop_after, -1):
        layer = graph.layers[idx]
        kind, name = layer.kind, layer.name
        lcache = cache.layer_caches[idx]
        if kind == "conv":
            bundle = ops.conv2d_backward(d, lcache)
            grads[f"{name}.w"] = bundle.d_params["weights"]
            grads[f"{name}.b"] = bundle.d_params["bias"]
            d = bundle.d_input
        elif kind == "sepconv":
            bundle = ops.separable_backward(d, lcache)
            grads[f"{name}.dw"] = bundle.d_params["dw_weights"]
            grads[f"{name}.pw_w"] = bundle.d_params["pw_weights"]
            grads[f"{name}.pw_b"] = bundle.d_params["pw_bias"]
            d = bundle.d_input
        elif kind == "batchnorm":
            bundle = ops.batch_norm_backward(d, lcache)
            grads[f"{name}.scale"] = bundle.d_params["scale"]
            grads[f"{name}.shift"] = bundle.d_params["shift"]
            d = bundle.d_input
        elif kind == "relu":
            d = ops.relu_backward(d, lcache).d_input
        elif kind == "maxpool":
            d = ops.maxpool2_backward(d, lcache).d_input
        elif kind == "gap":
            d = ops.global_avg_pool_backward(d, lcache).d_input
        elif kind == "dense":
            bundle = ops.dense_backward(d, lcache)
            grads[f"{name}.w"] = bundle.d_params["weights"]
            grads[f"{name}.b"] = bundle.d_params["bias"]
            d = bundle.d_input
        elif kind == "dropout":
            d = ops.dropout_backward(d, lcache).d_input
        elif kind == "flatten":
            d = d.reshape(lcache)
        elif kind == "residual_end":
            bundle = ops.residual_merge_backward(d, lcache)
            if layer.cfg["proj"]:
                grads[f"{name}.proj_w"] = bundle.d_params["proj_weights"]
                grads[f"{name}.proj_b"] = bundle.d_params["proj_bias"]
            begin = layer.cfg["begin"]
            pending[begin] = pending.get(begin, 0) + bundle.d_input
            # d itself continues down the block path unchanged
        elif kind == "residual_begin":
            if idx in pending:
                d = d + pending.pop(idx)
        else:
            raise ArgumentError(f"unknown layer kind {kind!r}")
    return grads, d


def backward(graph: ModelGraph, cache: ForwardCache, d_logits: np.ndarray,
             l2_lambda: float = 0.0) -> dict:
    """Gradients for every trainable parameter, with the L2 term folded in."""
    if cache.phase != "train":
        raise StateError("backward requires a cache from a train-phase forward")
    if d_logits.shape != cache.logits.shape:
        raise ShapeError(f"d_logits shape {d_logits.shape} != logits shape {cache.logits.shape}")
    grads, _ = _backward_walk(graph, cache, d_logits, stop_after=-1)
    if l2_lambda:
        for key in graph.l2_keys:
            grads[key] = grads[key] + (2.0 * l2_lambda) * graph.params[key]
    return grads


def feature_gradient(graph: ModelGraph, cache: ForwardCache, d_logits: np.ndarray) -> np.ndarray:
    """Gradient of a scalar-in-logits functional w.r.t. the trunk feature map."""
    if cache.feature_map is None:
        raise StateError("cache does not retain the trunk feature map")
    _, d = _backward_walk(graph, cache, d_logits, stop_after=graph.feature_index)
    return d


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

@dataclass
class ParamCounts:
    trainable: int
    non_trainable: int
    per_layer: list           # (layer name, trainable count), declared order


def param_count(graph: ModelGraph) -> ParamCounts:
    per_layer: dict[str, int] = {}
    trainable = 0
    non_trainable = 0
    for key, value in graph.params.items():
        layer = key.split(".")[0]
        if key in graph.non_trainable:
            non_trainable += value.size
        else:
            trainable += value.size
            per_layer[layer] = per_layer.get(layer, 0) + value.size
    return ParamCounts(trainable, non_trainable, list(per_layer.items()))


def payload_bytes(graph: ModelGraph) -> int:
    """Serialized parameter payload size (all params, 4 bytes each)."""
    return 4 * sum(v.size for v in graph.params.values())


def trace_shapes(graph: ModelGraph) -> list:
    """Per-layer output shapes for a batch-1 zero input."""
    x = np.zeros((1,) + graph.input_shape, dtype=graph.dtype)
    _, _, shapes, _ = _run_layers(graph, x, "infer", None, start=0)
    return shapes


def clone_params(graph: ModelGraph) -> dict:
    return {k: v.copy() for k, v in graph.params.items()}


def restore_params(graph: ModelGraph, snapshot: dict) -> None:
    for k, v in snapshot.items():
        graph.params[k][...] = v


# ---------------------------------------------------------------------------
# serialization: magic, length-prefixed JSON header, float32 payload, CRC-32
# ---------------------------------------------------------------------------

def _header_dict(graph: ModelGraph) -> dict:
    return {
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "class_count": graph.class_count,
        "precision": "float32",
        "layers": [{"kind": l.kind, "name": l.name, "cfg": l.cfg} for l in graph.layers],
        "params": [
            {"name": k, "shape": list(v.shape), "trainable": k not in graph.non_trainable}
            for k, v in graph.params.items()
        ],
    }


def save_model(graph: ModelGraph, path) -> None:
    header = json.dumps(_header_dict(graph), sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(v, dtype="<f4").tobytes() for v in graph.params.values()
    )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_model(path, rng=None) -> ModelGraph:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MODEL_MAGIC) + 4 or blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    off = len(MODEL_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise FormatError("truncated header")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    off += hlen
    sizes = [int(np.prod(p["shape"])) for p in header["params"]]
    payload_len = 4 * sum(sizes)
    if len(blob) != off + payload_len + 4:
        raise FormatError(
            f"payload/trailer length mismatch: have {len(blob) - off} bytes, "
            f"expected {payload_len + 4}"
        )
    payload = blob[off:off + payload_len]
    (crc_stored,) = struct.unpack_from("<I", blob, off + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FormatError("payload checksum mismatch")

    graph = build_model(
        header["name"], tuple(header["input_shape"]), header["class_count"],
        rng if rng is not None else make_rng(0),
    )
    declared = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    actual = [(k, v.shape) for k, v in graph.params.items()]
    if declared != actual:
        raise FormatError("parameter manifest does not match the declared architecture")
    pos = 0
    for (key, _), size in zip(declared, sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=4 * pos)
        graph.params[key][...] = arr.reshape(graph.params[key].shape)
        pos += size
    return graph
