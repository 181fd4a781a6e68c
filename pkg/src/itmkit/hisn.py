"""Hierarchical synthesis network.

Three feature branches (local, dilated, global) are concatenated and fused
into the dim component ``H1`` in [0, 1]; a second stack of conv blocks,
each modulated by the LAMN scale/bias maps, predicts the non-negative bright
residual ``H2``; the estimate is ``H = H1 + H2``.

Two ablations are supported: ``configA`` chains three heads
(dequantise -> linearise -> extend range) and ``configB`` drops the
hierarchy and predicts ``H`` from a single head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .lamn import he_normal, init_lamn_params, lamn_forward, lamn_param_shapes, modulate
from .tensor import LayerSpec, Tensor

VARIANTS = ("default", "configA", "configB")


@dataclass
class HisnConfig:
    width: int = 64
    m: int = 5
    n: int = 6
    local_layers: int = 2
    dilation_layers: int = 4
    input_size: int = 256       # resolution the global branch runs at
    variant: str = "default"
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError(f"m and n must be >= 1 (got m={self.m}, n={self.n})")
        if self.width < 1 or self.local_layers < 1 or self.dilation_layers < 1:
            raise ConfigError("width and branch depths must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        global_depth(self.input_size)

    @classmethod
    def toy(cls, **kw):
        kw.setdefault("width", 16)
        kw.setdefault("input_size", 64)
        return cls(**kw)


def admissible_sizes(limit=4096):
    sizes, s = [], 8
    while s <= limit:
        sizes.append(s)
        s *= 2
    return sizes


def global_depth(size):
    """Number of stride-2 convs that bring ``size`` down to 4 before the 4x4 conv."""
    if size not in admissible_sizes(max(size, 8)):
        raise ShapeError(
            f"global branch cannot reduce {size}x{size} to 1x1; admissible sizes are "
            f"{', '.join(map(str, admissible_sizes(1024)))}, ...",
            dim="resolution",
        )
    return int(np.log2(size)) - 2


def layer_list(cfg: HisnConfig):
    """Ordered ``(name, LayerSpec)`` for every conv of the synthesis network."""
    c = cfg.width
    conv = LayerSpec.parse
    layers = []
    for i in range(1, cfg.local_layers + 1):
        layers.append((f"local.{i}", conv("k3s1p1d1", 3 if i == 1 else c, c)))
    for i in range(1, cfg.dilation_layers + 1):
        layers.append((f"dilation.{i}", conv("k3s1p2d2", 3 if i == 1 else c, c)))
    for i in range(1, global_depth(cfg.input_size) + 1):
        layers.append((f"global.{i}", conv("k3s2p1d1", 3 if i == 1 else c, c)))
    layers.append(("global.final", conv("k4s1p0d1", c, c)))
    for i in range(1, cfg.m + 1):
        layers.append((f"fusion.{i}", conv("k3s1p1d1", 3 * c if i == 1 else c, c)))

    if cfg.variant == "default":
        layers.append(("h1.head", conv("k3s1p1d1", c, 3)))
        for i in range(1, cfg.n + 1):
            layers.append((f"h2.{i}", conv("k3s1p1d1", c + 3 if i == 1 else c, c)))
        layers.append(("h2.head", conv("k3s1p1d1", c, 3)))
    elif cfg.variant == "configB":
        for i in range(1, cfg.n + 1):
            layers.append((f"h2.{i}", conv("k3s1p1d1", c, c)))
        layers.append(("out.head", conv("k3s1p1d1", c, 3)))
    else:
        layers.append(("a1.head", conv("k3s1p1d1", c, 3)))
        layers.append(("a2.1", conv("k3s1p1d1", c + 3, c)))
        layers.append(("a2.2", conv("k3s1p1d1", c, c)))
        layers.append(("a2.head", conv("k3s1p1d1", c, 3)))
        for i in range(1, cfg.n + 1):
            layers.append((f"h2.{i}", conv("k3s1p1d1", c + 3 if i == 1 else c, c)))
        layers.append(("a3.head", conv("k3s1p1d1", c, 3)))
    return layers


@dataclass
class NetworkParams:
    config: HisnConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def count(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def astype(self, dtype):
        return NetworkParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )

    def arrays(self):
        return {k: v.data for k, v in self.tensors.items()}

    def grads(self):
        """Gradients by name; parameters off the loss path get exact zeros."""
        return {k: np.zeros_like(v.data) if v.grad is None else v.grad for k, v in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def to_bytes(self):
        return b"".join(v.data.astype("<f4").tobytes() for v in self.tensors.values())


# ReLU output heads start with small non-negative weights. The initial bright
# part is near zero, and since the stack inputs are post-ReLU, modulation can
# only raise the head input where the mask fires. The zero-target majority then
# switches off unsaturated pixels without killing whole output channels.
RELU_HEADS = ("h2.head", "out.head", "a3.head")
RELU_HEAD_WEIGHT_SCALE = 0.1


def build_network(cfg: HisnConfig, dtype=np.float32):
    """Seeded He-normal weights and zero biases, LAMN included; ReLU heads scaled down."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, spec in layer_list(cfg):
        w = he_normal(rng, spec.cout, spec.cin, spec.k, dtype=dtype)
        b = np.zeros(spec.cout, dtype=dtype)
        if name in RELU_HEADS:
            w = np.abs(w) * dtype(RELU_HEAD_WEIGHT_SCALE)
        tensors[f"{name}.w"] = w
        tensors[f"{name}.b"] = b
    tensors.update(init_lamn_params(cfg.width, cfg.n, rng, dtype=dtype))
    return NetworkParams(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()})


def expected_param_count(cfg: HisnConfig):
    base = sum(spec.param_count() for _, spec in layer_list(cfg))
    lamn = sum(int(np.prod(s)) for s in lamn_param_shapes(cfg.width, cfg.n).values())
    return base + lamn


# ---------------------------------------------------------------------------
# forward

@dataclass
class HdrPrediction:
    h1: Tensor
    h2: Tensor
    h: Tensor
    extras: dict = field(default_factory=dict)


def _conv(params, name, x, spec_notation="k3s1p1d1"):
    spec = LayerSpec.parse(spec_notation)
    return T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], spec.s, spec.p, spec.d)


def resize_for_global(x, size):
    """Bring an (N, 3, H, W) array to size x size for the global branch."""
    x = np.asarray(x)
    n, c, h, w = x.shape
    if (h, w) == (size, size):
        return x
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return x.reshape(n, c, size, fh, size, fw).mean(axis=(3, 5))
    from PIL import Image

    out = np.empty((n, c, size, size), dtype=x.dtype)
    for i in range(n):
        for j in range(c):
            img = Image.fromarray(x[i, j].astype(np.float32), "F")
            out[i, j] = np.asarray(img.resize((size, size), Image.BILINEAR))
    return out


def features(ldr, params: NetworkParams, global_input=None):
    """Concatenated branch features F, shape (N, 3C, H, W)."""
    cfg = params.config
    x = T.as_tensor(ldr)
    _, _, h, w = x.shape
    a = x
    for i in range(1, cfg.local_layers + 1):
        a = T.relu(_conv(params, f"local.{i}", a))
    b = x
    for i in range(1, cfg.dilation_layers + 1):
        b = T.relu(_conv(params, f"dilation.{i}", b, "k3s1p2d2"))
    if global_input is None:
        global_input = resize_for_global(x.data, cfg.input_size)
    g = T.as_tensor(global_input)
    if g.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"global branch expects {cfg.input_size}x{cfg.input_size}, got {g.shape[2]}x{g.shape[3]}",
            dim="resolution",
        )
    for i in range(1, global_depth(cfg.input_size) + 1):
        g = T.relu(_conv(params, f"global.{i}", g, "k3s2p1d1"))
    g = T.relu(_conv(params, "global.final", g, "k4s1p0d1"))
    g = T.tile_spatial(g, h, w)
    return T.concat([a, b, g])


def _fuse(f, params, m):
    y = f
    for i in range(1, m + 1):
        y = T.relu(_conv(params, f"fusion.{i}", y))
    return y


def _modulated_stack(y, mods, params, n, modulation=True):
    acts = []
    for i in range(1, n + 1):
        x = T.relu(_conv(params, f"h2.{i}", y))
        acts.append(x)
        if modulation:
            gamma, beta = mods[i - 1]
            try:
                y = modulate(x, gamma, beta)
            except ShapeError as exc:
                raise ShapeError(f"modulation stage {i}: {exc}", dim=f"stage {i}") from None
        else:
            y = x
    return y, acts


def _as_mask(mask, like):
    m = T.as_tensor(mask)
    if m.ndim == 3:
        m = Tensor(m.data[:, None])
    if m.shape[0] != like.shape[0] or m.shape[2:] != like.shape[2:]:
        raise ShapeError(f"mask shape {m.shape} not aligned with LDR input {like.shape}", dim="mask")
    return Tensor(m.data.astype(like.dtype))


def hisn_forward(ldr, mask, params: NetworkParams, global_input=None, modulation=True, zero_modulation=False):
    """Run the network on an (N, 3, H, W) LDR batch and (N, 1, H, W) mask.

    ``modulation=False`` bypasses LAMN entirely; ``zero_modulation=True``
    runs the modulation op with gamma = beta = 0.
    """
    cfg = params.config
    if cfg.variant == "configA":
        pred = hisn_forward_configA(ldr, params, mask=mask, global_input=global_input, modulation=modulation)
        return pred
    x = T.as_tensor(ldr)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"LDR batch must be (N, 3, H, W), got {x.shape}", dim="input")
    m = _as_mask(mask, x)
    f = features(x, params, global_input)
    y = _fuse(f, params, cfg.m)
    n, c, h, w = y.shape
    stage_shapes = [(c, h, w)] * cfg.n
    mods = lamn_forward(m, params.tensors, cfg.n, stage_shapes) if modulation else None
    if zero_modulation and mods is not None:
        mods = [(Tensor(np.zeros_like(g.data)), Tensor(np.zeros_like(b.data))) for g, b in mods]

    if cfg.variant == "configB":
        z, acts = _modulated_stack(y, mods, params, cfg.n, modulation)
        h_out = T.relu(_conv(params, "out.head", z))
        h1 = T.minimum(h_out, 1.0)
        h2 = T.add(h_out, T.scale(h1, -1.0))
        return HdrPrediction(h1, h2, h_out, {"activations": acts, "modulation": mods})

    h1 = T.sigmoid(_conv(params, "h1.head", y))
    z, acts = _modulated_stack(T.concat([y, h1]), mods, params, cfg.n, modulation)
    h2 = T.relu(_conv(params, "h2.head", z))
    return HdrPrediction(h1, h2, T.add(h1, h2), {"activations": acts, "modulation": mods})


@dataclass
class ConfigAPrediction:
    h1p: Tensor   # dequantised, display-referred
    h2p: Tensor   # linearised
    h3p: Tensor   # range-extended; the HDR estimate
    h: Tensor
    extras: dict = field(default_factory=dict)


def hisn_forward_configA(ldr, params: NetworkParams, mask=None, global_input=None, modulation=True):
    """L -> h1' -> h2' -> h3' = H."""
    cfg = params.config
    if cfg.variant != "configA":
        raise ConfigError(f"hisn_forward_configA needs variant configA, got {cfg.variant!r}")
    x = T.as_tensor(ldr)
    f = features(x, params, global_input)
    y = _fuse(f, params, cfg.m)
    h1p = T.sigmoid(_conv(params, "a1.head", y))
    y2 = T.relu(_conv(params, "a2.1", T.concat([y, h1p])))
    y2 = T.relu(_conv(params, "a2.2", y2))
    h2p = T.sigmoid(_conv(params, "a2.head", y2))
    mods = None
    if modulation:
        if mask is None:
            raise ShapeError("configA with modulation needs a mask", dim="mask")
        m = _as_mask(mask, x)
        n, c, h, w = y.shape
        mods = lamn_forward(m, params.tensors, cfg.n, [(c, h, w)] * cfg.n)
    z, acts = _modulated_stack(T.concat([y2, h2p]), mods, params, cfg.n, modulation)
    h3p = T.relu(_conv(params, "a3.head", z))
    return ConfigAPrediction(h1p, h2p, h3p, h3p, {"activations": acts, "modulation": mods})


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"ITMCKPT1"


def save_checkpoint(path, params: NetworkParams, adam_state=None, iteration=0, extra=None):
    """Binary container: magic, u64 header length, JSON header, little-endian float32 payload."""
    entries, blobs, offset = [], [], 0

    def put(name, group, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, t in params.tensors.items():
        put(name, "param", t.data)
    adam = None
    if adam_state is not None:
        adam = {"t": adam_state.t, "beta1": adam_state.beta1, "beta2": adam_state.beta2, "eps": adam_state.eps}
        for name in params.tensors:
            if name in adam_state.m:
                put(name, "adam_m", adam_state.m[name])
                put(name, "adam_v", adam_state.v[name])
    header = {
        "format": 1,
        "config": asdict(params.config),
        "iteration": int(iteration),
        "adam": adam,
        "extra": extra or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, dtype=np.float32):
    """Return ``(params, adam_state_or_None, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not an itmkit checkpoint", offset=0)
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header", offset=8)
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: corrupt header", offset=16) from None
    base = 16 + hlen
    cfg = HisnConfig(**header["config"])
    from .tensor import AdamState

    tensors, state = {}, None
    if header.get("adam"):
        a = header["adam"]
        state = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
    for e in header["tensors"]:
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(data):
            raise FormatError(f"{path}: tensor {e['name']!r} truncated", offset=start)
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(e["shape"]).astype(dtype)
        if e["group"] == "param":
            tensors[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        elif state is not None:
            (state.m if e["group"] == "adam_m" else state.v)[e["name"]] = arr.copy()
    params = NetworkParams(cfg, tensors)
    missing = set(build_network_names(cfg)) - set(tensors)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:5]}")
    return params, state, header


def build_network_names(cfg):
    names = []
    for name, _ in layer_list(cfg):
        names += [f"{name}.w", f"{name}.b"]
    return names + list(lamn_param_shapes(cfg.width, cfg.n))


# ---------------------------------------------------------------------------
# activation dumps

def _normalize_u8(a):
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8), False
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8), True


def dump_activations(ldr, mask, params: NetworkParams, out_dir):
    """Write every channel of gamma_i / beta_i as grayscale PNG and gamma_i^c * L as RGB PNG.

    Uses the first image of the batch. Returns the list of written paths.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = T.as_tensor(ldr)
    m = _as_mask(mask, x)
    cfg = params.config
    n, _, h, w = x.shape
    mods = lamn_forward(m, params.tensors, cfg.n, [(cfg.width, h, w)] * cfg.n)
    rgb = np.transpose(x.data[0], (1, 2, 0)).astype(np.float64)
    written, notes = [], []
    for i, (gamma, beta) in enumerate(mods, 1):
        for label, t in (("gamma", gamma), ("beta", beta)):
            for ch in range(t.shape[1]):
                img, ok = _normalize_u8(t.data[0, ch])
                p = out / f"{label}{i}_c{ch:02d}.png"
                Image.fromarray(img, "L").save(p)
                written.append(p)
                if not ok:
                    notes.append(f"{p.name}: constant channel, written as zeros")
        for ch in range(gamma.shape[1]):
            prod = gamma.data[0, ch].astype(np.float64)[:, :, None] * rgb
            img, ok = _normalize_u8(prod)
            p = out / f"gamma{i}_c{ch:02d}_times_L.png"
            Image.fromarray(img, "RGB").save(p)
            written.append(p)
            if not ok:
                notes.append(f"{p.name}: constant product, written as zeros")
    if notes:
        (out / "notes.txt").write_text("\n".join(notes) + "\n")
    return written
