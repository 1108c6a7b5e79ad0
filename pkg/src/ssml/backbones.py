"""MLP, STNN and CNN backbones with a shared forward interface.

The default layer sizes reproduce the ERP configuration (32 channels x 128
samples, two classes). Other channel counts and lengths follow the generic
rule: STNN's spatial stage mixes ``channels`` inputs and the CNN's final
spatial convolution spans all ``channels`` rows; temporal stacks are unchanged.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndgrad import GradTape, Node, ShapeError

KINDS = ("MLP", "STNN", "CNN")

# (kernel width, filters) of the temporal convolutions; pool after the first three
CNN_TEMPORAL = ((16, 16), (3, 32), (3, 64), (3, 128))
CNN_POOLED = (True, True, True, False)


class ModelError(ValueError):
    """Raised when a model specification cannot be built."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "CNN"
    channels: int = 32
    time_len: int = 128
    n_classes: int = 2
    hidden: int = 300
    spatial_filters: int = 16
    temporal_filters: int = 64
    cnn_spatial_filters: int = 256

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ModelError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        for name in ("channels", "time_len", "n_classes", "hidden", "spatial_filters",
                     "temporal_filters", "cnn_spatial_filters"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        self.layer_outputs()  # validates the shape arithmetic

    def layer_outputs(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-sample output shape of every layer, in forward order."""
        C, T, K = self.channels, self.time_len, self.n_classes
        if self.kind == "MLP":
            return [("input", (C, T)), ("flatten", (C * T,)), ("hidden", (self.hidden,)), ("output", (K,))]
        if self.kind == "STNN":
            S, F = self.spatial_filters, self.temporal_filters
            return [("input", (C, T)), ("spatial", (S, T)), ("temporal", (S, F)),
                    ("flatten", (S * F,)), ("output", (K,))]
        shapes = [("input", (C, T))]
        width = T
        for i, ((kw, filters), pooled) in enumerate(zip(CNN_TEMPORAL, CNN_POOLED), start=1):
            width = width - kw + 1
            if width < 1:
                raise ModelError(f"CNN layer conv{i} (kernel 1x{kw}) does not fit: time_len {T} too short")
            shapes.append((f"conv{i}", (filters, C, width)))
            if pooled:
                if width < 2:
                    raise ModelError(f"CNN layer pool{i} needs width >= 2, got {width} (time_len {T} too short)")
                width //= 2
                shapes.append((f"pool{i}", (filters, C, width)))
        shapes.append(("conv5", (self.cnn_spatial_filters, 1, width)))
        shapes.append(("flatten", (self.cnn_spatial_filters * width,)))
        shapes.append(("output", (K,)))
        return shapes

    @property
    def feature_width(self) -> int:
        return dict(self.layer_outputs())["flatten" if self.kind != "MLP" else "hidden"][0]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        C, T, K, n = self.channels, self.time_len, self.n_classes, self.feature_width
        if self.kind == "MLP":
            return [("hidden.W", (C * T, self.hidden)), ("hidden.b", (self.hidden,)),
                    ("output.W", (n, K)), ("output.b", (K,))]
        if self.kind == "STNN":
            S, F = self.spatial_filters, self.temporal_filters
            return [("spatial.W", (S, C)), ("spatial.b", (S,)),
                    ("temporal.W", (T, F)), ("temporal.b", (F,)),
                    ("output.W", (n, K)), ("output.b", (K,))]
        shapes = []
        c_in = 1
        for i, (kw, filters) in enumerate(CNN_TEMPORAL, start=1):
            shapes += [(f"conv{i}.W", (filters, c_in, 1, kw)), (f"conv{i}.b", (filters,))]
            c_in = filters
        shapes += [("conv5.W", (self.cnn_spatial_filters, c_in, C, 1)), ("conv5.b", (self.cnn_spatial_filters,))]
        shapes += [("output.W", (n, K)), ("output.b", (K,))]
        return shapes


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    seed: int | None = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.spec, tensors, self.seed)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, v in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


@dataclass
class ForwardResult:
    probs: np.ndarray
    features: np.ndarray
    tape: GradTape | None = None
    probs_node: Node | None = None
    features_node: Node | None = None
    shapes: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.features.shape[1]


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Weights uniform in +-sqrt(6 / fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if spec.kind == "STNN" and name == "spatial.W":
            fan_in = shape[1]
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            fan_in = shape[0]
        bound = np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(spec, tensors, seed)


def forward(params: ModelParams, x: np.ndarray, record: bool = False,
            replay: list[np.ndarray] | None = None) -> ForwardResult:
    """Run the backbone on ``x`` (``m x C x T``; a single ``C x T`` sample is promoted).

    ``replay`` imposes relu masks and pool winners taken from an earlier tape's
    ``signature()``, which makes the network smooth around that pass.
    """
    spec = params.spec
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (spec.channels, spec.time_len):
        raise ShapeError(f"{spec.kind} expects input m x {spec.channels} x {spec.time_len}, got {x.shape}")
    dtype = next(iter(params.tensors.values())).dtype
    x = x.astype(dtype, copy=False)
    tape = GradTape(replay=None if replay is None else list(replay))
    P = {name: tape.param(v, name) for name, v in params.tensors.items()}
    m = x.shape[0]
    shapes = [("input", x.shape[1:])]

    def note(name, node):
        shapes.append((name, node.value.shape[1:]))
        return node

    h = tape.const(x)
    if spec.kind == "MLP":
        h = note("flatten", tape.reshape(h, (m, -1)))
        h = note("hidden", tape.relu(tape.linear(h, P["hidden.W"], P["hidden.b"])))
        feats = h
    elif spec.kind == "STNN":
        h = note("spatial", tape.mix(h, P["spatial.W"], P["spatial.b"]))
        h = note("temporal", tape.linear(h, P["temporal.W"], P["temporal.b"]))
        feats = note("flatten", tape.reshape(h, (m, -1)))
    else:
        h = tape.reshape(h, (m, 1, spec.channels, spec.time_len))
        for i, pooled in enumerate(CNN_POOLED, start=1):
            h = note(f"conv{i}", tape.relu(tape.conv2d(h, P[f"conv{i}.W"], P[f"conv{i}.b"])))
            if pooled:
                h = note(f"pool{i}", tape.maxpool(h))
        h = note("conv5", tape.relu(tape.conv2d(h, P["conv5.W"], P["conv5.b"])))
        feats = note("flatten", tape.reshape(h, (m, -1)))
    logits = tape.linear(feats, P["output.W"], P["output.b"])
    probs = note("output", tape.softmax(logits))
    if not record:
        return ForwardResult(probs.value, feats.value, shapes=shapes)
    return ForwardResult(probs.value, feats.value, tape, probs, feats, shapes)


def predict(params: ModelParams, x: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and features for a large batch, evaluated in chunks."""
    probs, feats = [], []
    for start in range(0, len(x), chunk):
        res = forward(params, x[start:start + chunk])
        probs.append(res.probs)
        feats.append(res.features)
    if not probs:
        n = params.spec.feature_width
        return np.zeros((0, params.spec.n_classes), np.float32), np.zeros((0, n), np.float32)
    return np.concatenate(probs), np.concatenate(feats)


# ---------------------------------------------------------------------------
# checkpoints: text manifest + little-endian float32 blob
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict[str, np.ndarray] | None = None,
                    meta: dict[str, object] | None = None) -> None:
    """Write ``path`` (manifest) and ``path.bin`` (parameter blob, manifest order)."""
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    spec = params.spec
    lines = [
        f"kind = {spec.kind}",
        f"channels = {spec.channels}",
        f"time_len = {spec.time_len}",
        f"n_classes = {spec.n_classes}",
        f"hidden = {spec.hidden}",
        f"spatial_filters = {spec.spatial_filters}",
        f"temporal_filters = {spec.temporal_filters}",
        f"cnn_spatial_filters = {spec.cnn_spatial_filters}",
        f"seed = {'' if params.seed is None else params.seed}",
        f"blob = {blob_path.name}",
    ]
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key} = {value}")
    blocks = list(params.tensors.items()) + list((extra or {}).items())
    with open(blob_path, "wb") as fh:
        for name, value in blocks:
            lines.append(f"block.{name} = {'x'.join(str(d) for d in value.shape)}")
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    path.write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, np.ndarray], dict[str, str]]:
    """Inverse of :func:`save_checkpoint`: returns (params, extra blocks, meta)."""
    path = Path(path)
    fields, blocks, meta = {}, [], {}
    for raw in path.read_text().splitlines():
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        key, _, value = (s.strip() for s in raw.partition("="))
        if key.startswith("block."):
            shape = tuple(int(d) for d in value.split("x")) if value else ()
            blocks.append((key[len("block."):], shape))
        elif key.startswith("meta."):
            meta[key[len("meta."):]] = value
        else:
            fields[key] = value
    try:
        spec = ModelSpec(kind=fields["kind"], channels=int(fields["channels"]), time_len=int(fields["time_len"]),
                         n_classes=int(fields["n_classes"]), hidden=int(fields.get("hidden", 300)),
                         spatial_filters=int(fields.get("spatial_filters", 16)),
                         temporal_filters=int(fields.get("temporal_filters", 64)),
                         cnn_spatial_filters=int(fields.get("cnn_spatial_filters", 256)))
    except KeyError as exc:
        raise ModelError(f"checkpoint manifest {path} is missing field {exc.args[0]}") from None
    raw = np.frombuffer((path.parent / fields.get("blob", path.name + ".bin")).read_bytes(), dtype="<f4")
    expected = sum(int(np.prod(s)) for _, s in blocks)
    if raw.size != expected:
        raise ModelError(f"checkpoint blob holds {raw.size} floats, manifest declares {expected}")
    values, offset = {}, 0
    for name, shape in blocks:
        size = int(np.prod(shape))
        values[name] = raw[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
    names = [n for n, _ in spec.param_shapes()]
    missing = [n for n in names if n not in values]
    if missing:
        raise ModelError(f"checkpoint lacks parameter blocks {missing}")
    seed = int(fields["seed"]) if fields.get("seed") else None
    params = ModelParams(spec, {n: values.pop(n) for n in names}, seed)
    return params, values, meta
