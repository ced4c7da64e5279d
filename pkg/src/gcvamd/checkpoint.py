"""Binary checkpoint container and model save/load.

Layout: magic ``GCVD``, format version (u32 LE), record count (u32 LE), then
per record: name length (u32) + UTF-8 name, dtype code (u8), rank (u32),
dims (u64 each), row-major little-endian payload. A fixed-size footer holds
the rng seed, the phase/epoch cursor, and the augmented-Lagrangian dual state.
"""

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from gcvamd.errors import CheckpointFormatError
from gcvamd.graph import AugLagState

MAGIC = b"GCVD"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

_FOOTER = struct.Struct("<QII5d")


@dataclass(frozen=True)
class Footer:
    seed: int
    phase: int
    epoch: int
    dual: AugLagState


def write_container(path, arrays, footer):
    """Write named arrays plus footer. Iteration order of ``arrays`` is kept."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        nm = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nm)))
        buf.write(nm)
        buf.write(struct.pack("<BI", _DTYPE_CODES[dtype], arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.astype(dtype, copy=False).tobytes())
    d = footer.dual
    buf.write(
        _FOOTER.pack(
            footer.seed, footer.phase, footer.epoch, d.alpha, d.rho, d.beta, d.gamma, d.h_prev
        )
    )
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated file while reading {what}")
    return data


def read_container(path):
    """Read back (arrays, footer); raises CheckpointFormatError on damage."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointFormatError("bad magic header, not a GCVD container")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported format version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "record name length"))
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            code, rank = struct.unpack("<BI", _read_exact(fh, 5, "record header"))
            if code not in _CODE_DTYPES:
                raise CheckpointFormatError(f"unknown dtype code {code} in {name!r}")
            dims = struct.unpack(
                "<" + "Q" * rank, _read_exact(fh, 8 * rank, "record dims")
            )
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = _read_exact(fh, nbytes, f"payload of {name!r}")
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        raw = _read_exact(fh, _FOOTER.size, "footer")
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after footer")
    seed, phase, epoch, alpha, rho, beta, gamma, h_prev = _FOOTER.unpack(raw)
    dual = AugLagState(alpha=alpha, rho=rho, beta=beta, gamma=gamma, h_prev=h_prev)
    return arrays, Footer(seed=seed, phase=phase, epoch=epoch, dual=dual)


def save_model(model, path, seed=0, phase=0, epoch=0, dual=None):
    """Checkpoint any registered network (model, conv AE, or classifier)."""
    meta = {"kind": model.checkpoint_kind, "init": model.checkpoint_init()}
    arrays = {
        "meta/json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    }
    for name, tensor in model.state_dict().items():
        arrays[f"state/{name}"] = tensor.detach().cpu().numpy()
    if dual is None:
        dual = AugLagState()
    write_container(path, arrays, Footer(seed=seed, phase=phase, epoch=epoch, dual=dual))


def load_model(path):
    """Rebuild the checkpointed network; returns (model, footer)."""
    import torch

    from gcvamd import downstream, model as model_mod

    factories = {
        "gcvamd": model_mod.GcvamdModel.from_checkpoint_init,
        "conv_ae": downstream.ConvAE.from_checkpoint_init,
        "dnn": downstream.DnnClassifier.from_checkpoint_init,
    }
    arrays, footer = read_container(path)
    if "meta/json" not in arrays:
        raise CheckpointFormatError("missing meta record")
    meta = json.loads(arrays.pop("meta/json").tobytes().decode())
    if meta.get("kind") not in factories:
        raise CheckpointFormatError(f"unknown checkpoint kind {meta.get('kind')!r}")
    net = factories[meta["kind"]](meta["init"])
    state = net.state_dict()
    loaded = {}
    for name, arr in arrays.items():
        if not name.startswith("state/"):
            raise CheckpointFormatError(f"unknown record {name!r}")
        key = name[len("state/"):]
        if key not in state:
            raise CheckpointFormatError(f"unknown array name {key!r} for kind {meta['kind']}")
        loaded[key] = torch.from_numpy(arr.copy())
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointFormatError(f"missing arrays: {sorted(missing)}")
    net.load_state_dict(loaded)
    return net, footer
