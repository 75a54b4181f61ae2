"""Trainable feature adapter: channel projection plus attention refinement.

The adapter maps a collaborator's feature space onto the ego's.  A 1x1
projection handles channel-count mismatch; a channel-attention gate (shared
two-layer bottleneck over mean- and max-pooled descriptors) and a spatial
attention gate (7x7 convolution over channel mean/max planes) refine the
projected map.  The refinement re-enters through a zero-initialized output
gate, so a freshly created adapter is exactly the projection — and exactly
the identity when channel counts match.  That gives few-shot fine-tuning a
safe starting point and makes the initial state testable.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as nd
from .autodiff import Tensor
from .percept import FeatureMap, PerceptError

__all__ = ["AdapterParams", "AdapterRegistry", "adapter_init", "adapter_forward",
           "adapter_to_bytes", "adapter_from_bytes"]

ADAPTER_MAGIC = b"CPSA"
ADAPTER_VERSION = 1

_TENSOR_NAMES = ("proj.w", "proj.b", "cam.w1", "cam.w2", "sam.w", "sam.b", "gate.w", "gate.b")


@dataclass
class AdapterParams:
    """Parameter set of one collaborator->ego adapter."""

    c_src: int
    c_ego: int
    reduction: int
    ego_family: str
    tensors: dict[str, Tensor]

    def trainable_tensors(self) -> list[Tensor]:
        return [self.tensors[n] for n in _TENSOR_NAMES]

    def snapshot(self) -> "AdapterParams":
        """Bit-exact copy with independent buffers (for isolation checks)."""
        copies = {}
        for name, t in self.tensors.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            copies[name] = c
        return AdapterParams(self.c_src, self.c_ego, self.reduction, self.ego_family, copies)

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t._live = False
            t.grad = None


def adapter_init(c_src: int, c_ego: int, reduction: int, seed: int, ego_family: str = "ego") -> AdapterParams:
    """Seeded adapter creation; identity behaviour at step 0.

    The projection starts as the exact identity when ``c_src == c_ego`` and
    as a variance-preserving seeded random matrix otherwise (a vanishing
    init would stall gradient flow through the frozen fusion).  The output
    gate starts at exactly zero, so the attention branch is inactive until
    training opens it.
    """
    if reduction < 1 or c_src < reduction or c_ego < reduction:
        raise PerceptError(f"adapter_init: need c_src, c_ego >= reduction >= 1, got {c_src}, {c_ego}, {reduction}")
    if c_ego % reduction != 0:
        raise PerceptError(f"adapter_init: reduction {reduction} does not divide c_ego {c_ego}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xADA)))
    hidden = c_ego // reduction

    if c_src == c_ego:
        proj = np.eye(c_ego).reshape(c_ego, c_src, 1, 1)
    else:
        proj = rng.normal(0.0, 1.0 / np.sqrt(c_src), size=(c_ego, c_src, 1, 1))

    def t(arr):
        return Tensor(arr, requires_grad=True)

    tensors = {
        "proj.w": t(proj),
        "proj.b": t(np.zeros(c_ego)),
        "cam.w1": t(rng.normal(0.0, np.sqrt(2.0 / c_ego), size=(hidden, c_ego, 1, 1))),
        "cam.w2": t(rng.normal(0.0, np.sqrt(2.0 / hidden), size=(c_ego, hidden, 1, 1))),
        "sam.w": t(rng.normal(0.0, np.sqrt(2.0 / (2 * 49)), size=(1, 2, 7, 7))),
        "sam.b": t(np.zeros(1)),
        "gate.w": t(np.zeros((c_ego, c_ego, 1, 1))),
        "gate.b": t(np.zeros(c_ego)),
    }
    return AdapterParams(c_src=c_src, c_ego=c_ego, reduction=reduction, ego_family=ego_family, tensors=tensors)


def adapter_forward(fmap: FeatureMap, params: AdapterParams) -> FeatureMap:
    """Project a collaborator feature map into the ego's semantic space.

    projection -> channel gate -> spatial gate -> zero-init residual gate;
    output keeps the input's spatial dims and carries the ego family tag.
    """
    values = fmap.values
    if values.shape[0] != params.c_src:
        raise PerceptError(
            f"adapter_forward: feature has {values.shape[0]} channels, adapter expects {params.c_src}"
        )
    ts = params.tensors
    no_bias_h = Tensor(np.zeros(ts["cam.w1"].shape[0]))
    no_bias_c = Tensor(np.zeros(params.c_ego))

    p = nd.conv2d(values, ts["proj.w"], ts["proj.b"], 0)

    def cam_mlp(desc: Tensor) -> Tensor:
        hid = nd.relu(nd.conv2d(desc, ts["cam.w1"], no_bias_h, 0))
        return nd.conv2d(hid, ts["cam.w2"], no_bias_c, 0)

    gate_c = nd.sigmoid(nd.add(cam_mlp(nd.reduce(p, "spatial", "mean")),
                               cam_mlp(nd.reduce(p, "spatial", "max"))))
    p_c = nd.mul(p, gate_c)

    planes = nd.concat_channels([nd.reduce(p_c, "channel", "mean"), nd.reduce(p_c, "channel", "max")])
    gate_s = nd.sigmoid(nd.conv2d(planes, ts["sam.w"], ts["sam.b"], 3))
    refined = nd.mul(p_c, gate_s)

    out = nd.add(p, nd.conv2d(refined, ts["gate.w"], ts["gate.b"], 0))
    return FeatureMap(values=out, family=params.ego_family, grid=fmap.grid)


class AdapterRegistry:
    """One adapter per collaborator (or per family when shared).

    The registry is mutated only by the self-training driver; ``snapshot``
    hands out bit-exact copies so isolation can be asserted.
    """

    def __init__(self, c_ego: int, reduction: int, ego_family: str, seed: int,
                 share_by_family: bool = False):
        self.c_ego = c_ego
        self.reduction = reduction
        self.ego_family = ego_family
        self.seed = seed
        self.share_by_family = share_by_family
        self._adapters: dict[str, AdapterParams] = {}

    def _key(self, collaborator_id: str, family_id: str) -> str:
        return family_id if self.share_by_family else collaborator_id

    def get_or_create(self, collaborator_id: str, c_src: int, family_id: str = "") -> AdapterParams:
        key = self._key(collaborator_id, family_id)
        existing = self._adapters.get(key)
        if existing is not None:
            if existing.c_src != c_src:
                raise PerceptError(
                    f"adapter for {key!r} was created with c_src={existing.c_src}; "
                    f"cannot change to {c_src} (families are immutable per agent)"
                )
            return existing
        params = adapter_init(c_src, self.c_ego, self.reduction, seed=_derive_seed(self.seed, key),
                              ego_family=self.ego_family)
        self._adapters[key] = params
        return params

    def dims(self, collaborator_id: str, family_id: str = "") -> tuple[int, int]:
        params = self._adapters[self._key(collaborator_id, family_id)]
        return params.c_src, params.c_ego

    def snapshot(self, collaborator_id: str, family_id: str = "") -> AdapterParams:
        return self._adapters[self._key(collaborator_id, family_id)].snapshot()

    def snapshot_all(self) -> dict[str, AdapterParams]:
        """Bit-exact copies of every adapter, keyed as the registry keys them."""
        return {key: params.snapshot() for key, params in self._adapters.items()}

    def freeze(self, collaborator_id: str, family_id: str = "") -> None:
        self._adapters[self._key(collaborator_id, family_id)].freeze()

    def ids(self) -> tuple[str, ...]:
        return tuple(self._adapters)


def _derive_seed(base: int, key: str) -> int:
    digest = np.frombuffer(key.encode("utf-8"), dtype=np.uint8)
    return int(np.random.SeedSequence((base, int(digest.sum()), len(key))).generate_state(1)[0])


def adapter_to_bytes(params: AdapterParams) -> bytes:
    buf = io.BytesIO()
    fam = params.ego_family.encode("utf-8")
    buf.write(ADAPTER_MAGIC)
    buf.write(struct.pack("<HHHHH", ADAPTER_VERSION, params.c_src, params.c_ego, params.reduction, len(fam)))
    buf.write(fam)
    for name in _TENSOR_NAMES:
        t = params.tensors[name]
        buf.write(struct.pack("<B", t.data.ndim))
        for d in t.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def adapter_from_bytes(blob: bytes) -> AdapterParams:
    buf = io.BytesIO(blob)
    if buf.read(4) != ADAPTER_MAGIC:
        raise PerceptError("not an adapter blob (bad magic)")
    version, c_src, c_ego, reduction, fam_len = struct.unpack("<HHHHH", buf.read(10))
    if version != ADAPTER_VERSION:
        raise PerceptError(f"unsupported adapter version {version}")
    ego_family = buf.read(fam_len).decode("utf-8")
    tensors: dict[str, Tensor] = {}
    for name in _TENSOR_NAMES:
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
        tensors[name] = Tensor(data, requires_grad=True)
    return AdapterParams(c_src=c_src, c_ego=c_ego, reduction=reduction, ego_family=ego_family, tensors=tensors)
