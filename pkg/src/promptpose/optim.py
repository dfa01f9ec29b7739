"""Parameter registry, AdamW, and the versioned tensor container format."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, CorruptDataError, ShapeError

_MAGIC = b"TENSORS1"
_VERSION = 1


class ParameterStore:
    """Ordered name -> Tensor registry with per-parameter group tags.

    Group tags select the learning rate ("backbone" trains slower than
    "other", following the two-rate optimizer setup).
    """

    def __init__(self):
        self._params = {}
        self._groups = {}

    def register(self, name, tensor, group="other"):
        if name in self._params:
            raise ContractError(f"parameter '{name}' registered twice")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._groups[name] = group
        return tensor

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name):
        return self._params[name]

    def group_of(self, name):
        return self._groups[name]

    def names(self):
        return list(self._params)

    def zero_grads(self):
        """Give every parameter a zero gradient buffer.

        Backward accumulates into these, so parameters untouched by a
        particular forward pass (e.g. the unused prompt-modality branch)
        still present a valid gradient to the optimizer.
        """
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def clear_grads(self):
        for p in self._params.values():
            p.grad = None

    def num_values(self):
        return sum(p.data.size for p in self._params.values())

    def state_arrays(self):
        return {name: p.data for name, p in self._params.items()}

    def save(self, path):
        save_tensors(path, self.state_arrays())

    def load(self, path):
        arrays = load_tensors(path)
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise CorruptDataError(
                f"checkpoint does not match the registry (missing={missing[:4]}, extra={extra[:4]})"
            )
        for name, p in self._params.items():
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"checkpoint entry '{name}' has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arr)
            p.grad = None


class AdamW:
    """Decoupled-weight-decay Adam over a ParameterStore.

    Defaults: lr 1e-4 (1e-5 for the "backbone" group), weight decay 1e-4,
    betas (0.9, 0.999), eps 1e-8. Gradients are cleared after each step.
    """

    def __init__(self, store, lr=1e-4, backbone_lr=1e-5, weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = float(lr)
        self.backbone_lr = float(backbone_lr)
        self.weight_decay = float(weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in store}
        self._v = {name: np.zeros_like(p.data) for name, p in store}

    def _lr_for(self, name):
        return self.backbone_lr if self.store.group_of(name) == "backbone" else self.lr

    def step(self):
        for name, p in self.store:
            if p.grad is None:
                raise ContractError(f"adamw step: parameter '{name}' has no gradient")
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.store:
            lr = self._lr_for(name)
            g = p.grad
            if self.weight_decay != 0.0:
                p.data -= lr * self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.store.clear_grads()


# -- tensor container --------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
# {"version": 1, "entries": [{"name", "shape", "offset", "count"}]}, then the
# concatenated little-endian float64 payload.

def save_tensors(path, arrays):
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "count": int(arr.size),
        })
        blobs.append(arr.astype("<f8").tobytes())
        offset += arr.size
    header = json.dumps({"version": _VERSION, "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = _MAGIC + len(header).to_bytes(8, "little") + header + b"".join(blobs)
    atomic_write_bytes(path, payload)


def load_tensors(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise CorruptDataError(f"{path}: not a tensor container (bad magic)")
    hlen = int.from_bytes(raw[8:16], "little")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptDataError(f"{path}: unreadable container header") from exc
    if header.get("version") != _VERSION:
        raise CorruptDataError(f"{path}: unsupported container version {header.get('version')}")
    base = 16 + hlen
    out = {}
    for entry in header["entries"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(entry["count"])
        expect = 1
        for s in shape:
            expect *= s
        if expect != count:
            raise CorruptDataError(
                f"{path}: entry '{entry['name']}' count {count} does not match shape {shape}"
            )
        start = base + 8 * int(entry["offset"])
        stop = start + 8 * count
        if stop > len(raw):
            raise CorruptDataError(f"{path}: entry '{entry['name']}' payload truncated")
        arr = np.frombuffer(raw[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
        out[entry["name"]] = arr
    return out


def atomic_write_bytes(path, payload):
    """Write via a sibling temp file + rename so failures leave no partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def make_param(store, name, rng, shape, scale=None, group="other", init="uniform"):
    """Create and register a parameter.

    ``uniform`` draws Glorot-style from +-sqrt(6/(fan_in+fan_out)) unless an
    explicit ``scale`` is given; ``zeros`` and ``normal`` do what they say.
    """
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "normal":
        data = rng.normal(0.0, scale if scale is not None else 0.02, size=shape)
    else:
        if scale is None:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[1] if len(shape) > 1 else shape[0]
            scale = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-scale, scale, size=shape)
    return store.register(name, Tensor(data), group=group)
