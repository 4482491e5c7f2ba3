"""Wide-ResNet backbone with parallel residual adapters and per-domain heads.

Layout (``ArchitectureSpec`` defaults)::

    conv 3x3 1->32, BN
    3 stacks x 2 residual blocks, filters 64 / 128 / 256
        block: conv(s) BN ReLU conv BN (+ shortcut) ReLU
        first block of a stack: stride 2, shortcut = 2x2 avg-pool + zero channels
    BN, ReLU, 2-D attention pooling
    head: dense (no bias, BN follows) -> BN -> ReLU -> dropout -> dense

Every 3x3 convolution is shared between domains and has a 1x1 adapter per
domain whose output is added before the (domain-specific) BN. Activations
past each sample's valid time length are forced to zero after every BN, so
per-batch zero padding does not leak into the valid region.

Parameters are addressed by qualified names such as ``shared/conv/s0b0c0``
or ``domain/<id>/adapter/s0b0c0`` and ``domain/<id>/bn/final/gamma``.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import BatchNormState

REGIMES = ("scratch", "head_only", "adapters_and_head", "shared_multidomain")


@dataclass(frozen=True)
class ArchitectureSpec:
    initial_filters: int = 32
    stack_filters: tuple = (64, 128, 256)
    blocks_per_stack: int = 2
    kernel: int = 3
    adapter_kernel: int = 1
    attention_shared: bool = False
    head_hidden_width: int = 64
    head_dropout_rate: float = 0.5
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "stack_filters", tuple(self.stack_filters))
        filters = (self.initial_filters,) + self.stack_filters
        if any(b != 2 * a for a, b in zip(filters[1:], filters[2:])):
            raise ValueError("stack filters must double from stack to stack")
        if self.kernel % 2 == 0 or self.adapter_kernel % 2 == 0 or self.adapter_kernel > self.kernel:
            raise ValueError("kernels must be odd and the adapter kernel no larger than the shared one")
        if not 0 <= self.head_dropout_rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")

    @classmethod
    def tiny(cls, **overrides) -> "ArchitectureSpec":
        """8-filter variant for desk-scale experiments and gradient checks."""
        params = dict(initial_filters=4, stack_filters=(8, 16, 32), head_hidden_width=16)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stack_filters"] = list(self.stack_filters)
        return d

    def conv_layers(self) -> list[tuple[str, int, int, int]]:
        """``(name, in_channels, out_channels, stride)`` for every convolution, in order."""
        layers = [("conv0", 1, self.initial_filters, 1)]
        prev = self.initial_filters
        for s, f in enumerate(self.stack_filters):
            for b in range(self.blocks_per_stack):
                layers.append((f"s{s}b{b}c0", prev, f, 2 if b == 0 else 1))
                layers.append((f"s{s}b{b}c1", f, f, 1))
                prev = f
        return layers

    @property
    def feature_width(self) -> int:
        return self.stack_filters[-1]

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.stack_filters)


@dataclass
class DomainParams:
    n_classes: int
    adapters: dict
    bn: dict  # layer name -> BatchNormState, includes "final" and "head"
    head: dict
    attention: dict | None = None


@dataclass
class ModelBundle:
    spec: ArchitectureSpec
    shared: dict
    domains: dict = field(default_factory=dict)
    dtype: type = np.float32

    # -- parameter views -------------------------------------------------

    def parameters(self, domain_id: str | None = None) -> dict:
        """Live ``name -> array`` view; restricted to shared + one domain if given."""
        out = {f"shared/{k}": v for k, v in self.shared.items()}
        for d, dom in self.domains.items():
            if domain_id is not None and d != domain_id:
                continue
            p = f"domain/{d}/"
            out.update({p + f"adapter/{k}": v for k, v in dom.adapters.items()})
            for k, st in dom.bn.items():
                out[p + f"bn/{k}/gamma"] = st.gamma
                out[p + f"bn/{k}/beta"] = st.beta
            if dom.attention is not None:
                out.update({p + f"attention/{k}": v for k, v in dom.attention.items()})
            out.update({p + f"head/{k}": v for k, v in dom.head.items()})
        return out

    def buffers(self) -> dict:
        out = {}
        for d, dom in self.domains.items():
            for k, st in dom.bn.items():
                out[f"domain/{d}/bn/{k}/running_mean"] = st.running_mean
                out[f"domain/{d}/bn/{k}/running_var"] = st.running_var
        return out

    def state(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def domain(self, domain_id: str) -> DomainParams:
        try:
            return self.domains[domain_id]
        except KeyError:
            raise KeyError(f"unknown domain {domain_id!r}") from None


# --------------------------------------------------------------------------
# construction


def _rng(seed: int, *keys: str) -> np.random.Generator:
    return np.random.default_rng([seed] + [zlib.crc32(k.encode()) for k in keys])


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _attention_params(spec: ArchitectureSpec, rng, dtype) -> dict:
    c = spec.feature_width
    return {
        "W": (rng.standard_normal((c, c)) * np.sqrt(1.0 / c)).astype(dtype),
        "b": np.zeros(c, dtype),
        "v": np.zeros(c, dtype),
    }


def _new_domain(spec: ArchitectureSpec, domain_id: str, n_classes: int, seed: int, dtype) -> DomainParams:
    if n_classes < 2:
        raise ValueError(f"domain {domain_id!r} needs at least 2 classes")
    if "/" in domain_id or not domain_id:
        raise ValueError(f"invalid domain id {domain_id!r}")
    bn = {}
    adapters = {}
    for name, cin, cout, _ in spec.conv_layers():
        adapters[name] = np.zeros((cout, cin, spec.adapter_kernel, spec.adapter_kernel), dtype)
        bn[name] = BatchNormState.fresh(cout, dtype, spec.bn_epsilon, spec.bn_momentum)
    bn["final"] = BatchNormState.fresh(spec.feature_width, dtype, spec.bn_epsilon, spec.bn_momentum)
    hw = spec.head_hidden_width
    bn["head"] = BatchNormState.fresh(hw, dtype, spec.bn_epsilon, spec.bn_momentum)
    rng = _rng(seed, "domain", domain_id)
    head = {
        "fc1/w": _he(rng, (spec.feature_width, hw), spec.feature_width, dtype),
        "fc2/w": _he(rng, (hw, n_classes), hw, dtype),
        "fc2/b": np.zeros(n_classes, dtype),
    }
    attention = None if spec.attention_shared else _attention_params(spec, rng, dtype)
    return DomainParams(n_classes, adapters, bn, head, attention)


def build(spec: ArchitectureSpec, domains, seed: int = 0, dtype=np.float32) -> ModelBundle:
    """Fresh bundle for ``domains`` given as ``[(domain_id, n_classes), ...]``."""
    domains = list(domains)
    if not domains:
        raise ValueError("at least one domain is required")
    shared = {}
    for name, cin, cout, _ in spec.conv_layers():
        k = spec.kernel
        shared[f"conv/{name}"] = _he(_rng(seed, "shared", name), (cout, cin, k, k), cin * k * k, dtype)
    if spec.attention_shared:
        for k, v in _attention_params(spec, _rng(seed, "shared", "attention"), dtype).items():
            shared[f"attention/{k}"] = v
    bundle = ModelBundle(spec, shared, {}, dtype)
    for domain_id, n_classes in domains:
        if domain_id in bundle.domains:
            raise ValueError(f"duplicate domain id {domain_id!r}")
        bundle.domains[domain_id] = _new_domain(spec, domain_id, n_classes, seed, dtype)
    return bundle


def reinitialize_domain(bundle: ModelBundle, domain_id: str, n_classes: int, seed: int) -> ModelBundle:
    """Replace (or add) one domain with zero adapters and a fresh head, BN and attention."""
    bundle.domains[domain_id] = _new_domain(bundle.spec, domain_id, n_classes, seed, bundle.dtype)
    return bundle


def astype(bundle: ModelBundle, dtype) -> ModelBundle:
    """Deep copy of ``bundle`` with every array cast to ``dtype``."""
    def conv(a):
        return np.array(a, dtype=dtype)

    def conv_bn(st: BatchNormState):
        return BatchNormState(conv(st.gamma), conv(st.beta), conv(st.running_mean), conv(st.running_var),
                              st.epsilon, st.momentum_stats)

    domains = {
        d: DomainParams(
            dom.n_classes,
            {k: conv(v) for k, v in dom.adapters.items()},
            {k: conv_bn(v) for k, v in dom.bn.items()},
            {k: conv(v) for k, v in dom.head.items()},
            None if dom.attention is None else {k: conv(v) for k, v in dom.attention.items()},
        )
        for d, dom in bundle.domains.items()
    }
    return ModelBundle(bundle.spec, {k: conv(v) for k, v in bundle.shared.items()}, domains, dtype)


def copy(bundle: ModelBundle) -> ModelBundle:
    return astype(bundle, bundle.dtype)


# --------------------------------------------------------------------------
# parameter bookkeeping


def parameter_counts(bundle: ModelBundle) -> dict:
    spec = bundle.spec
    shared_conv = sum(v.size for k, v in bundle.shared.items() if k.startswith("conv/"))
    counts = {"shared_conv": shared_conv,
              "shared_attention": sum(v.size for k, v in bundle.shared.items() if k.startswith("attention/")),
              "domains": {}}
    for d, dom in bundle.domains.items():
        bn = sum(st.gamma.size + st.beta.size for k, st in dom.bn.items() if k != "head")
        head = sum(v.size for v in dom.head.values()) + 2 * spec.head_hidden_width
        counts["domains"][d] = {
            "adapters": sum(v.size for v in dom.adapters.values()),
            "bn": bn,
            "attention": 0 if dom.attention is None else sum(v.size for v in dom.attention.values()),
            "head": head,
        }
    counts["total"] = shared_conv + counts["shared_attention"] + sum(
        sum(c.values()) for c in counts["domains"].values())
    return counts


def trainable_mask(bundle: ModelBundle, regime: str, domain_id: str) -> set:
    """Qualified parameter names updated under ``regime`` for batches of ``domain_id``."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    bundle.domain(domain_id)
    own = {k for k in bundle.parameters(domain_id) if k.startswith(f"domain/{domain_id}/")}
    if regime in ("scratch", "shared_multidomain"):
        return own | {f"shared/{k}" for k in bundle.shared}
    if regime == "head_only":
        p = f"domain/{domain_id}/"
        return {k for k in own if k.startswith(p + "head/") or k.startswith(p + "bn/head/")}
    return own


def checksum(arrays: dict, keys=None) -> str:
    """SHA-256 over the named arrays (sorted by name)."""
    h = hashlib.sha256()
    for k in sorted(arrays if keys is None else keys):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def shared_checksum(bundle: ModelBundle) -> str:
    return checksum({k: v for k, v in bundle.parameters().items() if k.startswith("shared/")})


# --------------------------------------------------------------------------
# forward / backward


def _time_mask(lengths, width, dtype):
    return (np.arange(width)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)[:, None, None, :]


def _ceil_half(a):
    return -(-np.asarray(a) // 2)


class _Pass:
    """Holds the caches of one forward pass for the backward sweep."""

    def __init__(self):
        self.ops = []


def _forward(bundle: ModelBundle, x, lengths, domain_id, mode, rng, use_adapters, record):
    spec = bundle.spec
    dom = bundle.domain(domain_id)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected input of shape (N, 1, n_mels, W), got {x.shape}")
    if x.shape[3] < 1:
        raise ShapeError("input width must be at least 1")
    x = x.astype(bundle.dtype, copy=False)
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > x.shape[3]):
        raise ShapeError("lengths must lie in [1, W]")
    tape = _Pass() if record else None
    mask = _time_mask(lengths, x.shape[3], bundle.dtype)
    x = x * mask

    def conv_bn(h, name, stride, m):
        kernel = bundle.shared[f"conv/{name}"]
        if use_adapters:
            # an adapter on the same input and stride folds into the central taps
            kernel = kernel.copy()
            o, a = (kernel.shape[2] - spec.adapter_kernel) // 2, spec.adapter_kernel
            kernel[:, :, o : o + a, o : o + a] += dom.adapters[name]
        out, c_conv = T.conv2d(h, kernel, stride)
        out, c_bn = T.batchnorm(out, dom.bn[name], mode, m)
        if record:
            tape.ops.append(("conv_bn", name, c_conv, use_adapters, c_bn))
        return out

    h = conv_bn(x, "conv0", 1, mask)
    for s, f in enumerate(spec.stack_filters):
        for b in range(spec.blocks_per_stack):
            stride = 2 if b == 0 else 1
            inp = h
            if stride == 2:
                lengths = _ceil_half(lengths)
                mask = _time_mask(lengths, -(-inp.shape[3] // 2), bundle.dtype)
            y = conv_bn(inp, f"s{s}b{b}c0", stride, mask)
            y, r = T.relu(y)
            if record:
                tape.ops.append(("relu", r))
            y = conv_bn(y, f"s{s}b{b}c1", 1, mask)
            if stride == 2 or inp.shape[1] != f:
                sc, pool_shape = T.avgpool2d(inp) if stride == 2 else (inp, None)
                extra = f - sc.shape[1]
                if extra:
                    sc = np.concatenate([sc, np.zeros((sc.shape[0], extra) + sc.shape[2:], sc.dtype)], axis=1)
                if record:
                    tape.ops.append(("shortcut", inp.shape[1], pool_shape))
            else:
                sc = inp
                if record:
                    tape.ops.append(("identity",))
            h, r = T.relu(y + sc)
            if record:
                tape.ops.append(("relu", r))
    h, c_bn = T.batchnorm(h, dom.bn["final"], mode, mask)
    h, r = T.relu(h)
    if record:
        tape.ops.append(("bn", "final", c_bn))
        tape.ops.append(("relu", r))
    att = dom.attention if dom.attention is not None else {
        k.split("/", 1)[1]: v for k, v in bundle.shared.items() if k.startswith("attention/")}
    pooled, c_att = T.attention_pool(h, lengths, att)
    z, c_fc1 = T.dense(pooled, dom.head["fc1/w"], 0.0)
    z, c_hbn = T.batchnorm(z, dom.bn["head"], mode)
    z, r_head = T.relu(z)
    drop = None
    rate = spec.head_dropout_rate
    if mode == "train" and rate > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        drop = (rng.random(z.shape) >= rate).astype(z.dtype) / (1 - rate)
        z = z * drop
    logits, c_fc2 = T.dense(z, dom.head["fc2/w"], dom.head["fc2/b"])
    if record:
        tape.head = (c_att, c_fc1, c_hbn, r_head, drop, c_fc2)
        tape.use_adapters = use_adapters
    return logits, tape


def forward(bundle: ModelBundle, x, lengths, domain_id: str, mode: str = "eval", rng=None,
            use_adapters: bool = True) -> np.ndarray:
    """Logits of shape (N, n_classes) for a zero-padded batch ``x`` of shape (N, 1, 64, W)."""
    logits, _ = _forward(bundle, x, lengths, domain_id, mode, rng, use_adapters, record=False)
    return logits


def recalibrate_bn(bundle: ModelBundle, batches, domain_id: str, use_adapters: bool = True) -> None:
    """Reset ``domain_id``'s running BN statistics to their mean over ``batches``.

    Each batch goes through a train-mode forward pass with the current
    weights; the moving-average momentum is set to ``1/k`` for the k-th batch
    so the result is the plain average. Parameters are left untouched.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("recalibrate_bn needs at least one batch")
    states = list(bundle.domain(domain_id).bn.values())
    saved = [s.momentum_stats for s in states]
    rng = np.random.default_rng(0)
    try:
        for k, batch in enumerate(batches, 1):
            for s in states:
                s.momentum_stats = 1.0 / k
            _forward(bundle, batch.features, batch.lengths, domain_id, "train", rng, use_adapters, record=False)
    finally:
        for s, mom in zip(states, saved):
            s.momentum_stats = mom


def predict_proba(bundle: ModelBundle, x, lengths, domain_id: str) -> np.ndarray:
    return T.softmax(forward(bundle, x, lengths, domain_id, "eval"))


def _head_only(names: set | None, domain_id: str) -> bool:
    if names is None:
        return False
    p = f"domain/{domain_id}/"
    return all(n.startswith(p + "head/") or n.startswith(p + "bn/head/") for n in names)


def loss_and_grads(bundle: ModelBundle, x, lengths, labels, domain_id: str, mode: str = "train",
                   rng=None, trainable: set | None = None, use_adapters: bool = True):
    """Mean cross-entropy, gradients by qualified name, and logits.

    Only names in ``trainable`` are returned (all if ``None``); when the
    trainable set lies entirely in the head, the backbone backward is skipped.
    """
    logits, tape = _forward(bundle, x, lengths, domain_id, mode, rng, use_adapters, record=True)
    loss, dlogits = T.softmax_xent(logits, labels)
    dom = bundle.domains[domain_id]
    p = f"domain/{domain_id}/"
    grads = {}
    c_att, c_fc1, c_hbn, r_head, drop, c_fc2 = tape.head
    dz, grads[p + "head/fc2/w"], grads[p + "head/fc2/b"] = T.dense_backward(dlogits, c_fc2)
    if drop is not None:
        dz = dz * drop
    dz = T.relu_backward(dz, r_head)
    dz, grads[p + "bn/head/gamma"], grads[p + "bn/head/beta"] = T.batchnorm_backward(dz, c_hbn)
    dpooled, grads[p + "head/fc1/w"], _ = T.dense_backward(dz, c_fc1)
    if not _head_only(trainable, domain_id):
        dh, datt = T.attention_pool_backward(dpooled, c_att)
        att_prefix = p + "attention/" if dom.attention is not None else "shared/attention/"
        for k, v in datt.items():
            grads[att_prefix + k] = v
        _backbone_backward(bundle, tape, dh, p, grads)
    if trainable is not None:
        grads = {k: v for k, v in grads.items() if k in trainable}
    return loss, grads, logits


def _backbone_backward(bundle, tape, dh, p, grads):
    ops = tape.ops
    i = len(ops) - 1
    # final relu + bn
    dh = T.relu_backward(dh, ops[i][1]); i -= 1
    dh, grads[p + "bn/final/gamma"], grads[p + "bn/final/beta"] = T.batchnorm_backward(dh, ops[i][2]); i -= 1

    def conv_bn_back(d, op):
        _, name, c_conv, adapted, c_bn = op
        d, grads[p + f"bn/{name}/gamma"], grads[p + f"bn/{name}/beta"] = T.batchnorm_backward(d, c_bn)
        dx, dk = T.conv2d_backward(d, c_conv)
        grads[f"shared/conv/{name}"] = dk
        if adapted:
            o, a = (dk.shape[2] - bundle.spec.adapter_kernel) // 2, bundle.spec.adapter_kernel
            grads[p + f"adapter/{name}"] = dk[:, :, o : o + a, o : o + a].copy()
        return dx

    spec = bundle.spec
    n_blocks = len(spec.stack_filters) * spec.blocks_per_stack
    for _ in range(n_blocks):
        # ops per block: conv_bn, relu, conv_bn, shortcut|identity, relu
        relu_out, short, cb1, relu_mid, cb0 = ops[i], ops[i - 1], ops[i - 2], ops[i - 3], ops[i - 4]
        i -= 5
        dsum = T.relu_backward(dh, relu_out[1])
        dy = conv_bn_back(dsum, cb1)
        dy = T.relu_backward(dy, relu_mid[1])
        dinp = conv_bn_back(dy, cb0)
        if short[0] == "identity":
            dinp = dinp + dsum
        else:
            cin, pool_shape = short[1], short[2]
            dsc = dsum[:, :cin]
            dinp = dinp + (T.avgpool2d_backward(dsc, pool_shape) if pool_shape is not None else dsc)
        dh = dinp
    conv_bn_back(dh, ops[i])


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"EMOADAPT"
FORMAT_VERSION = 1


def save(bundle: ModelBundle, path) -> None:
    """Write magic, version, JSON header and float32 little-endian parameter blocks."""
    state = bundle.state()
    names = sorted(state)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": bundle.spec.to_dict(),
        "domains": [{"id": d, "n_classes": dom.n_classes} for d, dom in bundle.domains.items()],
        "index": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f4").tobytes())


def load(path) -> ModelBundle:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(MAGIC) + 12
    if len(raw) < fixed or raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack("<IQ", raw[len(MAGIC) : fixed])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < fixed + hlen:
        raise DataError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[fixed : fixed + hlen])
    spec = ArchitectureSpec(**header["spec"])
    bundle = build(spec, [(d["id"], d["n_classes"]) for d in header["domains"]], seed=0)
    state = bundle.state()
    if {e["name"] for e in header["index"]} != set(state):
        raise DataError(f"{path}: checkpoint index does not cover the architecture")
    offset = fixed + hlen
    for entry in header["index"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in state or state[name].shape != shape:
            raise DataError(f"{path}: checkpoint entry {name} does not match the architecture")
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: truncated checkpoint data at {name}")
        state[name][...] = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after parameter blocks")
    return bundle
