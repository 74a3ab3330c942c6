"""Dense CVR model with frozen base weights and gated low-rank adapters.

Everything runs in float64. The feature party owns this model; the clean
room never sees it, only logits and per-sample gradients of logits.
"""
from __future__ import annotations

import copy
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

RELU = "relu"
IDENTITY = "identity"

_CKPT_MAGIC = b"CVRM"
_CKPT_VERSION = 1
_ACT_CODES = {RELU: 0, IDENTITY: 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class ModelError(ValueError):
    pass


@dataclass
class Layer:
    W: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    activation: str = RELU

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]


@dataclass
class BaseModel:
    layers: list[Layer]
    frozen: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ModelError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ModelError(f"layer dims do not chain: {prev.d_out} -> {nxt.d_in}")
        if self.layers[-1].d_out != 1:
            raise ModelError("final layer must produce a scalar logit")

    @classmethod
    def init(cls, d_in: int, hidden: Sequence[int] = (64, 32), seed: int = 0) -> "BaseModel":
        """He-initialised MLP: rectifier hidden layers, identity logit head."""
        rng = np.random.default_rng(seed)
        dims = [d_in, *hidden, 1]
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act = IDENTITY if i == len(dims) - 2 else RELU
            W = rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a))
            layers.append(Layer(W, np.zeros(b), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [l.d_out for l in self.layers]

    def num_params(self) -> int:
        return sum(l.W.size + l.bias.size for l in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.W.ravel(), l.bias]) for l in self.layers])

    def apply_update(self, delta: np.ndarray) -> None:
        if self.frozen:
            raise ModelError("base model is frozen")
        delta = _check_delta(delta, self.num_params())
        off = 0
        for l in self.layers:
            n = l.W.size
            l.W += delta[off:off + n].reshape(l.W.shape)
            off += n
            l.bias += delta[off:off + l.bias.size]
            off += l.bias.size

    def freeze(self) -> "BaseModel":
        self.frozen = True
        return self

    def unfrozen_copy(self) -> "BaseModel":
        out = copy.deepcopy(self)
        out.frozen = False
        return out

    def checksum(self) -> str:
        return hashlib.sha256(self.flatten().astype("<f8").tobytes()).hexdigest()


@dataclass
class LoraFactors:
    """Adapter factors for a single base layer: delta W = gate * (alpha/r) * B @ A."""

    A: np.ndarray  # (r, d_in)
    B: np.ndarray  # (d_out, r)
    alpha: float
    gate: int = 1

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def size(self) -> int:
        return self.A.size + self.B.size


@dataclass
class LoraAdapter:
    adapter_id: str
    factors: dict[int, LoraFactors] = field(default_factory=dict)  # layer index -> factors

    def layer_indices(self) -> list[int]:
        return sorted(self.factors)

    def num_params(self) -> int:
        return sum(f.size for f in self.factors.values())


@dataclass
class ParamVector:
    adapter_id: str
    values: np.ndarray
    # (layer_index, "A"|"B", shape) in wire order
    layout: tuple[tuple[int, str, tuple[int, int]], ...]


@dataclass
class PerSampleGrads:
    G: np.ndarray  # (b, param_count), G[i, j] = dz_i / df_j

    @property
    def batch_size(self) -> int:
        return self.G.shape[0]

    @property
    def param_count(self) -> int:
        return self.G.shape[1]


class AdaptedModel:
    """A frozen :class:`BaseModel` plus any number of named gated adapters."""

    def __init__(self, base: BaseModel):
        self.base = base
        self.adapters: dict[str, LoraAdapter] = {}

    def add_adapter(
        self,
        adapter_id: str,
        layers: Sequence[int] | None = None,
        rank: int | Sequence[int] = 1,
        alpha: float | None = None,
        seed: int = 0,
    ) -> LoraAdapter:
        if adapter_id in self.adapters:
            raise ModelError(f"adapter {adapter_id!r} already exists")
        n_layers = len(self.base.layers)
        layers = list(range(n_layers)) if layers is None else sorted(set(layers))
        if isinstance(rank, int):
            # a single rank is capped per layer, so rank=4 still fits the scalar head
            ranks = [min(rank, self.base.layers[li].d_in, self.base.layers[li].d_out) if 0 <= li < n_layers else rank
                     for li in layers]
        else:
            ranks = list(rank)
        if len(ranks) != len(layers):
            raise ModelError("one rank per attached layer required")
        rng = np.random.default_rng(seed)
        ad = LoraAdapter(adapter_id)
        for li, r in zip(layers, ranks):
            if not 0 <= li < n_layers:
                raise ModelError(f"no layer {li}")
            layer = self.base.layers[li]
            if not 1 <= r <= min(layer.d_in, layer.d_out):
                raise ModelError(f"rank {r} invalid for layer {li} ({layer.d_in}->{layer.d_out})")
            A = rng.normal(0.0, np.sqrt(1.0 / r), size=(r, layer.d_in))
            B = np.zeros((layer.d_out, r))
            ad.factors[li] = LoraFactors(A, B, float(r if alpha is None else alpha))
        self.adapters[adapter_id] = ad
        return ad

    def adapter(self, adapter_id: str) -> LoraAdapter:
        try:
            return self.adapters[adapter_id]
        except KeyError:
            raise ModelError(f"unknown adapter {adapter_id!r}") from None

    def set_gate(self, adapter_id: str, layer_index: int, gate: int) -> None:
        ad = self.adapter(adapter_id)
        if layer_index not in ad.factors:
            raise ModelError(f"adapter {adapter_id!r} is not attached to layer {layer_index}")
        if gate not in (0, 1):
            raise ModelError("gate must be 0 or 1")
        ad.factors[layer_index].gate = int(gate)

    def set_all_gates(self, adapter_id: str, gate: int) -> None:
        for li in self.adapter(adapter_id).factors:
            self.set_gate(adapter_id, li, gate)

    # -- parameters -----------------------------------------------------

    def layout(self, adapter_id: str) -> tuple[tuple[int, str, tuple[int, int]], ...]:
        ad = self.adapter(adapter_id)
        out = []
        for li in ad.layer_indices():
            f = ad.factors[li]
            out.append((li, "A", f.A.shape))
            out.append((li, "B", f.B.shape))
        return tuple(out)

    def param_count(self, adapter_id: str) -> int:
        return self.adapter(adapter_id).num_params()

    def flatten_params(self, adapter_id: str) -> ParamVector:
        ad = self.adapter(adapter_id)
        parts = []
        for li in ad.layer_indices():
            parts += [ad.factors[li].A.ravel(), ad.factors[li].B.ravel()]
        return ParamVector(adapter_id, np.concatenate(parts), self.layout(adapter_id))

    def apply_update(self, adapter_id: str, delta) -> None:
        ad = self.adapter(adapter_id)
        if isinstance(delta, ParamVector):
            delta = delta.values
        delta = _check_delta(delta, ad.num_params())
        off = 0
        for li in ad.layer_indices():
            f = ad.factors[li]
            for mat in (f.A, f.B):
                mat += delta[off:off + mat.size].reshape(mat.shape)
                off += mat.size

    def set_params(self, adapter_id: str, values: np.ndarray) -> None:
        cur = self.flatten_params(adapter_id).values
        values = _check_delta(values, cur.size)
        ad = self.adapter(adapter_id)
        off = 0
        for li in ad.layer_indices():
            f = ad.factors[li]
            for mat in (f.A, f.B):
                mat[...] = values[off:off + mat.size].reshape(mat.shape)
                off += mat.size

    def signature(self, adapter_id: str) -> bytes:
        """SHA-256 over the adapter's parameter layout (not its values)."""
        ad = self.adapter(adapter_id)
        h = hashlib.sha256()
        h.update(repr(self.base.dims).encode())
        for li, name, shape in self.layout(adapter_id):
            h.update(f"{li}:{name}:{shape[0]}x{shape[1]}:{ad.factors[li].alpha!r};".encode())
        return h.digest()

    # -- compute ----------------------------------------------------------

    def forward(self, X, adapter_sel=None) -> np.ndarray:
        """Logits for every row of ``X``.

        ``adapter_sel`` is None (base model), one adapter id for the whole
        batch, or a per-sample sequence of ids / None.
        """
        X = self._check_input(X)
        if adapter_sel is None or isinstance(adapter_sel, str):
            return self._forward_uniform(X, adapter_sel)[0][-1][:, 0]
        sel = list(adapter_sel)
        if len(sel) != X.shape[0]:
            raise ModelError("adapter_sel length must equal batch size")
        out = np.empty(X.shape[0])
        for key in set(sel):
            idx = np.array([i for i, s in enumerate(sel) if s == key])
            out[idx] = self._forward_uniform(X[idx], key)[0][-1][:, 0]
        return out

    def per_sample_grads(self, X, adapter_id: str | Sequence[str]) -> PerSampleGrads:
        """Exact d z_i / d f for the adapter's flat parameter vector."""
        if not isinstance(adapter_id, str):
            ids = set(adapter_id)
            if len(ids) != 1:
                raise ModelError("batch mixes adapters; training batches must be adapter-uniform")
            (adapter_id,) = ids
        X = self._check_input(X)
        ad = self.adapter(adapter_id)
        hs, ahs, deltas = self._backprop(X, adapter_id)
        cols = []
        for li in ad.layer_indices():
            f = ad.factors[li]
            g = f.gate * f.scale
            # dz/dA[k, j] = g * (B^T delta)[k] * h[j];  dz/dB[o, k] = g * delta[o] * (A h)[k]
            bt_delta = deltas[li] @ f.B
            cols.append((g * np.einsum("bk,bj->bkj", bt_delta, hs[li])).reshape(X.shape[0], -1))
            cols.append((g * np.einsum("bo,bk->bok", deltas[li], ahs[li])).reshape(X.shape[0], -1))
        return PerSampleGrads(np.concatenate(cols, axis=1))

    def base_param_grad(self, X, dL_dz, adapter_id: str | None = None) -> np.ndarray:
        """Sum_i dL/dz_i * dz_i/d(theta_base), laid out like ``BaseModel.flatten``."""
        X = self._check_input(X)
        dL_dz = np.asarray(dL_dz, dtype=np.float64)
        hs, _, deltas = self._backprop(X, adapter_id)
        parts = []
        for li in range(len(self.base.layers)):
            wd = deltas[li] * dL_dz[:, None]
            parts += [(wd.T @ hs[li]).ravel(), wd.sum(axis=0)]
        return np.concatenate(parts)

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.base.input_dim:
            raise ModelError(f"expected input of width {self.base.input_dim}, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ModelError("non-finite input")
        return X

    def _forward_uniform(self, X, adapter_id):
        ad = self.adapter(adapter_id) if adapter_id is not None else None
        hs = [X]  # hs[l] is the input to layer l; hs[-1] the logit column
        ahs: dict[int, np.ndarray] = {}
        pres = []
        h = X
        for li, layer in enumerate(self.base.layers):
            pre = h @ layer.W.T + layer.bias
            f = ad.factors.get(li) if ad is not None else None
            if f is not None and f.gate:
                ah = h @ f.A.T
                ahs[li] = ah
                pre = pre + f.scale * (ah @ f.B.T)
            elif f is not None:
                ahs[li] = h @ f.A.T
            pres.append(pre)
            h = np.maximum(pre, 0.0) if layer.activation == RELU else pre
            hs.append(h)
        return hs, ahs, pres

    def _backprop(self, X, adapter_id):
        """Per-sample d z / d(pre-activation) for every layer."""
        hs, ahs, pres = self._forward_uniform(X, adapter_id)
        ad = self.adapter(adapter_id) if adapter_id is not None else None
        n = len(self.base.layers)
        deltas: list[np.ndarray] = [None] * n  # type: ignore[list-item]
        d = np.ones((X.shape[0], 1))
        for li in range(n - 1, -1, -1):
            layer = self.base.layers[li]
            if layer.activation == RELU:
                d = d * (pres[li] > 0)
            deltas[li] = d
            if li == 0:
                break
            back = d @ layer.W
            f = ad.factors.get(li) if ad is not None else None
            if f is not None and f.gate:
                back = back + f.scale * ((d @ f.B) @ f.A)
            d = back
        return hs, ahs, deltas

    def copy(self) -> "AdaptedModel":
        return copy.deepcopy(self)


def forward(model: AdaptedModel, X, adapter_sel=None) -> np.ndarray:
    return model.forward(X, adapter_sel)


def per_sample_grads(model: AdaptedModel, adapter_id, X) -> PerSampleGrads:
    return model.per_sample_grads(X, adapter_id)


def _check_delta(delta, n: int) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64).ravel()
    if delta.size != n:
        raise ModelError(f"update has length {delta.size}, expected {n}")
    if not np.all(np.isfinite(delta)):
        raise ModelError("non-finite update")
    return delta


# -- checkpoint ---------------------------------------------------------------


def save_model(model: AdaptedModel | BaseModel, path) -> None:
    """Write the CVRM checkpoint (little-endian, float64 weights)."""
    if isinstance(model, BaseModel):
        model = AdaptedModel(model)
    base = model.base
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<BBI", _CKPT_VERSION, int(base.frozen), len(base.layers)))
    for layer in base.layers:
        buf.write(struct.pack("<IIB", layer.d_in, layer.d_out, _ACT_CODES[layer.activation]))
    for layer in base.layers:
        buf.write(layer.W.astype("<f8").tobytes())
        buf.write(layer.bias.astype("<f8").tobytes())
    buf.write(struct.pack("<I", len(model.adapters)))
    for aid, ad in model.adapters.items():
        raw = aid.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<I", len(ad.factors)))
        for li in ad.layer_indices():
            f = ad.factors[li]
            buf.write(struct.pack("<IIdB", li, f.rank, f.alpha, f.gate))
            buf.write(f.A.astype("<f8").tobytes())
            buf.write(f.B.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> AdaptedModel:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != _CKPT_MAGIC:
        raise ModelError("bad magic: not a CVRM checkpoint")
    version, frozen, n_layers = r.unpack("<BBI")
    if version != _CKPT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    shapes = [r.unpack("<IIB") for _ in range(n_layers)]
    layers = []
    for d_in, d_out, act in shapes:
        W = r.array(d_out * d_in).reshape(d_out, d_in)
        layers.append(Layer(W, r.array(d_out), _ACT_NAMES[act]))
    model = AdaptedModel(BaseModel(layers, frozen=bool(frozen)))
    (n_ad,) = r.unpack("<I")
    for _ in range(n_ad):
        (ln,) = r.unpack("<H")
        aid = r.take(ln).decode("utf-8")
        ad = LoraAdapter(aid)
        (nf,) = r.unpack("<I")
        for _ in range(nf):
            li, rank, alpha, gate = r.unpack("<IIdB")
            layer = layers[li]
            A = r.array(rank * layer.d_in).reshape(rank, layer.d_in)
            B = r.array(layer.d_out * rank).reshape(layer.d_out, rank)
            ad.factors[li] = LoraFactors(A, B, alpha, gate)
        model.adapters[aid] = ad
    if r.pos != len(data):
        raise ModelError("trailing bytes in checkpoint")
    return model


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)
