"""Network description and plumbing: layer specs, weight storage, forward
passes that expose every hidden feature map, teacher-to-student construction
under pruning schemes, parameter/FLOP accounting, and the on-disk model
format.

Networks are immutable once constructed (weight arrays are marked
read-only); training steps produce new networks via ``replace_weights``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    PayloadLengthError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .tensor import as_tensor4d, conv2d_gemm, conv_output_extent, im2col, relu

MAGIC = b"XDNC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    pad: int = 0
    activation: str = "relu"

    @property
    def weight_shape(self):
        return (self.c_out, self.c_in, self.k, self.k)


@dataclass(frozen=True)
class LinearSpec:
    d_in: int
    d_out: int
    activation: str = "none"

    @property
    def weight_shape(self):
        return (self.d_out, self.d_in)


LayerSpec = ConvSpec | LinearSpec


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Network:
    """Ordered layer specs plus one weight tensor (and optional bias) each."""

    layers: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray | None, ...]
    role: str = "teacher"

    def __post_init__(self):
        if len(self.layers) != len(self.weights) or len(self.layers) != len(self.biases):
            raise ShapeError("layers, weights and biases must align")
        if self.role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, got {self.role!r}")
        frozen_w, frozen_b = [], []
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            if w.shape != spec.weight_shape:
                raise ShapeError(f"weight shape {w.shape} != spec {spec.weight_shape}")
            if not np.all(np.isfinite(w)):
                raise ShapeError("non-finite weights")
            frozen_w.append(_freeze(w))
            if b is None:
                frozen_b.append(None)
            else:
                if isinstance(spec, ConvSpec):
                    raise ShapeError("conv layers carry no bias")
                if b.shape != (spec.d_out,):
                    raise ShapeError(f"bias shape {b.shape} != ({spec.d_out},)")
                frozen_b.append(_freeze(b))
        for a, b in zip(self.layers, self.layers[1:]):
            if isinstance(a, ConvSpec) and isinstance(b, ConvSpec) and a.c_out != b.c_in:
                raise ShapeError(f"adjacent conv channels differ: {a.c_out} vs {b.c_in}")
        object.__setattr__(self, "weights", tuple(frozen_w))
        object.__setattr__(self, "biases", tuple(frozen_b))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def conv_indices(self) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(self.layers) if isinstance(s, ConvSpec))

    def replace_weights(self, weights, biases=None, role=None) -> "Network":
        return Network(
            self.layers,
            tuple(weights),
            self.biases if biases is None else tuple(biases),
            self.role if role is None else role,
        )


def init_network(specs, seed: int, role: str = "teacher") -> Network:
    """Kaiming-style fan-in initialization from a seeded generator."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        if isinstance(spec, ConvSpec):
            fan_in = spec.c_in * spec.k * spec.k
            weights.append(rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / fan_in))
            biases.append(None)
        else:
            weights.append(rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / spec.d_in))
            biases.append(np.zeros(spec.d_out))
    return Network(tuple(specs), tuple(weights), tuple(biases), role)


def layer_forward(spec: LayerSpec, w: np.ndarray, b, x: np.ndarray) -> np.ndarray:
    """One layer's output (post-activation); flattens 4-D input for Linear."""
    if isinstance(spec, ConvSpec):
        z = conv2d_gemm(im2col(x, spec.k, spec.stride, spec.pad), w)
    else:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != spec.d_in:
            raise ShapeError(f"linear expects {spec.d_in} features, got {flat.shape[1]}")
        z = flat @ w.T
        if b is not None:
            z = z + b
    return relu(z) if spec.activation == "relu" else z


def forward_collect(net: Network, x) -> list[np.ndarray]:
    """Run the network and return every layer output: [h_1, ..., h_L, logits]."""
    h = as_tensor4d(x, "input")
    first = net.layers[0]
    if isinstance(first, ConvSpec) and h.shape[1] != first.c_in:
        raise ShapeError(f"input has {h.shape[1]} channels, layer 0 expects {first.c_in}")
    outputs = []
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        h = layer_forward(spec, w, b, h)
        outputs.append(h)
    return outputs


def logits_of(net: Network, x) -> np.ndarray:
    return forward_collect(net, x)[-1]


def accuracy(net: Network, x, labels, topk: int = 1) -> float:
    """Fraction of samples whose true class is within the top-k logits."""
    o = logits_of(net, x)
    labels = np.asarray(labels)
    topk_idx = np.argsort(o, axis=1)[:, ::-1][:, :topk]
    return float(np.mean(np.any(topk_idx == labels[:, None], axis=1)))


@dataclass(frozen=True)
class PruneScheme:
    """How the student is carved out of the teacher.

    structured: per-conv-layer channel keep fractions in (0, 1]
    unstructured: teacher-shaped student, sparsity imposed by the schedule
    The final linear layer is always skipped; extra conv indices may be
    listed in ``skip_layers`` (unstructured skips apply no prox there).
    """

    kind: str = "unstructured"
    sparsity: float = 0.0
    keep_fractions: tuple[float, ...] = ()
    skip_layers: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.kind not in ("structured", "unstructured"):
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {self.sparsity}")
        for f in self.keep_fractions:
            if not 0.0 < f <= 1.0:
                raise ValueError(f"keep fraction {f} would leave zero channels")


@dataclass(frozen=True)
class WeightMask:
    """Per-layer binary tensors congruent to the weights: 0 = pruned."""

    masks: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(_freeze(m) for m in self.masks))

    @staticmethod
    def all_ones(net: Network) -> "WeightMask":
        return WeightMask(tuple(np.ones_like(w) for w in net.weights))

    def sparsity(self) -> float:
        total = sum(m.size for m in self.masks)
        kept = sum(int(m.sum()) for m in self.masks)
        return 1.0 - kept / total


def apply_mask(net: Network, mask: WeightMask) -> Network:
    """Zero masked weights; output is then invariant to their stored values."""
    new = [w * m for w, m in zip(net.weights, mask.masks)]
    return net.replace_weights(new)


def structured_keep_indices(teacher: Network, scheme: PruneScheme) -> list[np.ndarray]:
    """Kept output-channel indices per conv layer, smallest-L1 channels dropped.

    Removal order is ascending (L1 norm, original index), so tied channels
    drop the earlier index first. Kept indices stay in original order.
    """
    conv_idx = teacher.conv_indices
    if len(scheme.keep_fractions) != len(conv_idx):
        raise ShapeError(
            f"need {len(conv_idx)} keep fractions, got {len(scheme.keep_fractions)}"
        )
    kept = []
    for pos, li in enumerate(conv_idx):
        spec = teacher.layers[li]
        if li in scheme.skip_layers:
            kept.append(np.arange(spec.c_out))
            continue
        frac = scheme.keep_fractions[pos]
        n_keep = max(1, int(np.floor(frac * spec.c_out)))
        norms = np.abs(teacher.weights[li]).sum(axis=(1, 2, 3))
        order = np.argsort(norms, kind="stable")  # ascending, earlier index first
        removed = set(order[: spec.c_out - n_keep].tolist())
        kept.append(np.array([i for i in range(spec.c_out) if i not in removed]))
    return kept


def build_student(teacher: Network, scheme: PruneScheme):
    """Derive the student network and its weight mask from a prune scheme.

    Unstructured: weights copied, mask all ones (the distillation schedule
    imposes sparsity). Structured: physically smaller network with the
    lowest-L1 channels removed and downstream input channels sliced to
    match; the final linear layer is never touched, so the last conv layer
    must keep all channels.
    """
    if not isinstance(teacher.layers[-1], LinearSpec):
        raise ShapeError("expected a final linear layer")
    if scheme.kind == "unstructured":
        student = Network(teacher.layers, teacher.weights, teacher.biases, "student")
        return student, WeightMask.all_ones(student)

    kept = structured_keep_indices(teacher, scheme)
    last_conv = teacher.conv_indices[-1]
    if kept[-1].size != teacher.layers[last_conv].c_out:
        raise ShapeError(
            "structured scheme must keep every channel of the last conv layer "
            "(the final linear layer is shared with the teacher)"
        )
    specs, weights, biases = [], [], []
    prev_keep = None
    for li, (spec, w, b) in enumerate(zip(teacher.layers, teacher.weights, teacher.biases)):
        if isinstance(spec, ConvSpec):
            pos = teacher.conv_indices.index(li)
            out_keep = kept[pos]
            sliced = w[out_keep]
            c_in = spec.c_in
            if prev_keep is not None:
                sliced = sliced[:, prev_keep]
                c_in = prev_keep.size
            specs.append(
                ConvSpec(c_in, out_keep.size, spec.k, spec.stride, spec.pad, spec.activation)
            )
            weights.append(sliced.copy())
            biases.append(None)
            prev_keep = out_keep
        else:
            specs.append(spec)
            weights.append(w.copy())
            biases.append(None if b is None else b.copy())
    student = Network(tuple(specs), tuple(weights), tuple(biases), "student")
    return student, WeightMask.all_ones(student)


def count_params_flops(net: Network, input_shape, mask: WeightMask | None = None):
    """Parameter and FLOP counts.

    Params sum weight elements only (biases excluded by convention); with a
    mask, masked-out entries count as removed. FLOPs are 2 multiplies per
    multiply-accumulate per output element for one sample, counted dense
    (irregular sparsity gives no FLOP credit).
    """
    c, h, w = input_shape
    params = 0
    flops = 0
    for i, (spec, wt) in enumerate(zip(net.layers, net.weights)):
        if mask is not None:
            params += int(mask.masks[i].sum())
        else:
            params += wt.size
        if isinstance(spec, ConvSpec):
            h = conv_output_extent(h, spec.k, spec.stride, spec.pad)
            w = conv_output_extent(w, spec.k, spec.stride, spec.pad)
            flops += 2 * spec.c_in * spec.k * spec.k * spec.c_out * h * w
            c = spec.c_out
        else:
            flops += 2 * spec.d_in * spec.d_out
    return params, flops


def _header_text(net: Network) -> str:
    lines = [f"role={net.role}", f"layers={net.num_layers}"]
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        if isinstance(spec, ConvSpec):
            lines.append(
                f"layer=conv c_in={spec.c_in} c_out={spec.c_out} k={spec.k} "
                f"stride={spec.stride} pad={spec.pad} act={spec.activation} "
                f"elems={w.size} bias_elems=0"
            )
        else:
            nb = 0 if b is None else b.size
            lines.append(
                f"layer=linear d_in={spec.d_in} d_out={spec.d_out} "
                f"act={spec.activation} elems={w.size} bias_elems={nb}"
            )
    return "\n".join(lines) + "\n"


def _parse_header(text: str):
    fields = {}
    layer_lines = []
    for line in text.strip().splitlines():
        if line.startswith("layer="):
            layer_lines.append(line)
        else:
            k, _, v = line.partition("=")
            fields[k] = v
    role = fields.get("role", "teacher")
    declared = int(fields.get("layers", len(layer_lines)))
    if declared != len(layer_lines):
        raise PayloadLengthError(
            f"header declares {declared} layers but lists {len(layer_lines)}"
        )
    specs, counts = [], []
    for line in layer_lines:
        kv = dict(part.split("=", 1) for part in line.split())
        if kv["layer"] == "conv":
            spec = ConvSpec(
                int(kv["c_in"]), int(kv["c_out"]), int(kv["k"]),
                int(kv["stride"]), int(kv["pad"]), kv["act"],
            )
        else:
            spec = LinearSpec(int(kv["d_in"]), int(kv["d_out"]), kv["act"])
        specs.append(spec)
        counts.append((int(kv["elems"]), int(kv["bias_elems"])))
    return role, specs, counts


def save_model(net: Network, path) -> None:
    """Write the binary model file (magic, version, header, payload, checksum)."""
    header = _header_text(net).encode("utf-8")
    payload = bytearray()
    for w, b in zip(net.weights, net.biases):
        payload += w.astype("<f8").tobytes()
        if b is not None:
            payload += b.astype("<f8").tobytes()
    checksum = sum(payload) % (1 << 64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(bytes(payload))
        fh.write(checksum.to_bytes(8, "little"))


def load_model(path) -> Network:
    """Read a model file back, validating every structural field."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise TruncatedPayloadError(f"file is only {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version = int.from_bytes(blob[4:8], "little")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    header_len = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + header_len + 8:
        raise TruncatedPayloadError("file ends inside the header or checksum")
    role, specs, counts = _parse_header(blob[16 : 16 + header_len].decode("utf-8"))
    payload = blob[16 + header_len : -8]
    declared = sum(wn + bn for wn, bn in counts) * 8
    if len(payload) < declared:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, header declares {declared}"
        )
    if len(payload) != declared:
        raise PayloadLengthError(
            f"payload has {len(payload)} bytes, header declares {declared}"
        )
    checksum = int.from_bytes(blob[-8:], "little")
    if sum(payload) % (1 << 64) != checksum:
        raise ChecksumError("payload checksum mismatch")
    weights, biases = [], []
    offset = 0
    for spec, (wn, bn) in zip(specs, counts):
        w = np.frombuffer(payload, dtype="<f8", count=wn, offset=offset).copy()
        offset += wn * 8
        if np.prod(spec.weight_shape) != wn:
            raise PayloadLengthError(
                f"layer declares {wn} elements, spec needs {spec.weight_shape}"
            )
        weights.append(w.reshape(spec.weight_shape))
        if bn:
            b = np.frombuffer(payload, dtype="<f8", count=bn, offset=offset).copy()
            offset += bn * 8
            biases.append(b)
        else:
            biases.append(None)
    return Network(tuple(specs), tuple(weights), tuple(biases), role)


def networks_equal(a: Network, b: Network) -> bool:
    """Bitwise equality of specs, weights and biases."""
    if a.layers != b.layers or a.role != b.role:
        return False
    for wa, wb in zip(a.weights, b.weights):
        if not np.array_equal(wa, wb):
            return False
    for ba, bb in zip(a.biases, b.biases):
        if (ba is None) != (bb is None):
            return False
        if ba is not None and not np.array_equal(ba, bb):
            return False
    return True
