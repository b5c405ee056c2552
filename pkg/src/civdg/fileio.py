"""Delimited-text and binary formats for datasets and checkpoints.

Binary layout (all little endian)::

    magic  b"CIVD"
    u16    version (1)
    u16    kind (1 = dataset, 2 = checkpoint)

dataset body::

    u16 role, u16 task, u64 n, u32 p, u32 C, u32 r, u32 q, u32 m,
    u32 meta_len, meta (UTF-8 JSON simulator config, may be empty),
    n rows of f64: x[p] y[C] z d yr[r] u[q] a[m]

checkpoint body::

    u64 manifest_len, manifest (UTF-8 JSON), zero padding to a multiple
    of 8 bytes, then the f64 arrays listed in the manifest (offsets are
    relative to the start of the data section).
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import CriticSpec, PredictorSpec
from .moments import MomentState
from .scm import ROLES, DatasetSplit, ScmConfig
from .tensor import ParameterStore

MAGIC = b"CIVD"
VERSION = 1
KIND_DATASET = 1
KIND_CHECKPOINT = 2
TASKS = ("single_label", "multi_label")

_HEAD = struct.Struct("<4sHH")
_DS = struct.Struct("<HHQIIIIII")


def _config_json(cfg):
    if cfg is None:
        return b""
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _config_from_json(raw):
    if not raw:
        return None
    data = json.loads(raw.decode("utf-8"))
    data["selection_matrix"] = np.array(data["selection_matrix"])
    data["stratum_probs"] = np.array(data["stratum_probs"])
    return ScmConfig.from_dict(data)


def _latent_dims(split):
    if not split.has_latent:
        return 0, 0, 0
    return split.yr.shape[1], split.u.shape[1], split.a.shape[1]


def dataset_matrix(split):
    """Row-major f64 matrix with columns x, y, z, d and (optionally) latents."""
    cols = [split.x, split.y, split.z[:, None].astype(np.float64), split.d[:, None].astype(np.float64)]
    if split.has_latent:
        cols += [split.yr, split.u, split.a]
    return np.ascontiguousarray(np.concatenate(cols, axis=1), dtype="<f8")


def write_dataset_binary(split, path):
    n, p = split.x.shape
    C = split.y.shape[1]
    r, q, m = _latent_dims(split)
    meta = _config_json(split.config)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, KIND_DATASET))
        fh.write(_DS.pack(ROLES.index(split.role), TASKS.index(split.task_mode), n, p, C, r, q, m, len(meta)))
        fh.write(meta)
        fh.write(dataset_matrix(split).tobytes())


def _read_header(fh, path, kind):
    raw = fh.read(_HEAD.size)
    if len(raw) < _HEAD.size:
        raise DataError(f"{path}: truncated header")
    magic, version, got_kind = _HEAD.unpack(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if got_kind != kind:
        raise DataError(f"{path}: expected file kind {kind}, found {got_kind}")


def read_dataset_binary(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with open(path, "rb") as fh:
        _read_header(fh, path, KIND_DATASET)
        raw = fh.read(_DS.size)
        if len(raw) < _DS.size:
            raise DataError(f"{path}: truncated dataset header")
        role, task, n, p, C, r, q, m, meta_len = _DS.unpack(raw)
        if role >= len(ROLES) or task >= len(TASKS):
            raise DataError(f"{path}: invalid role/task code")
        meta = fh.read(meta_len)
        width = p + C + 2 + r + q + m
        body = fh.read()
    if len(body) != 8 * n * width:
        raise DataError(f"{path}: expected {8 * n * width} data bytes, found {len(body)}")
    mat = np.frombuffer(body, dtype="<f8").reshape(n, width).astype(np.float64)
    return _split_from_matrix(mat, p, C, (r, q, m), ROLES[role], TASKS[task], _config_from_json(meta))


def _split_from_matrix(mat, p, C, latent, role, task, cfg):
    r, q, m = latent
    x = mat[:, :p].copy()
    y = mat[:, p:p + C].copy()
    z = mat[:, p + C].astype(np.int64)
    d = mat[:, p + C + 1].astype(np.int64)
    kw = {}
    if r or q or m:
        o = p + C + 2
        kw = {"yr": mat[:, o:o + r].copy(), "u": mat[:, o + r:o + r + q].copy(),
              "a": mat[:, o + r + q:o + r + q + m].copy()}
    return DatasetSplit(x, y, z, d, role, cfg, task_mode=task, **kw)


def dataset_header(split):
    p, C = split.x.shape[1], split.y.shape[1]
    names = [f"x_{i}" for i in range(p)] + [f"y_{i}" for i in range(C)] + ["z", "d"]
    if split.has_latent:
        r, q, m = _latent_dims(split)
        names += [f"yr_{i}" for i in range(r)] + [f"u_{i}" for i in range(q)] + [f"a_{i}" for i in range(m)]
    return names


def write_dataset_text(split, path, sep=","):
    """Delimited text; a leading ``#`` comment records role and task mode."""
    mat = dataset_matrix(split)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# role={split.role} task={split.task_mode}\n")
        fh.write(sep.join(dataset_header(split)) + "\n")
        np.savetxt(fh, mat, fmt="%.17g", delimiter=sep)


def read_dataset_text(path, sep=",", config=None):
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    role, task = "train", "single_label"
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("#"):
            meta = dict(tok.split("=", 1) for tok in first[1:].split())
            role, task = meta.get("role", role), meta.get("task", task)
            header = fh.readline()
        else:
            header = first
        names = header.strip().split(sep)
        mat = np.loadtxt(fh, delimiter=sep, ndmin=2)
    if mat.size == 0:
        mat = mat.reshape(0, len(names))
    if mat.shape[1] != len(names):
        raise DataError(f"{path}: header has {len(names)} columns, rows have {mat.shape[1]}")
    counts = {pre: sum(1 for nm in names if nm.startswith(pre)) for pre in ("x_", "y_", "yr_", "u_", "a_")}
    return _split_from_matrix(mat, counts["x_"], counts["y_"],
                              (counts["yr_"], counts["u_"], counts["a_"]), role, task, config)


# ------------------------------------------------------------ checkpoints


def write_checkpoint(model, path, extra=None):
    """Serialise specs, every parameter array (with power-iteration vectors) and the moment state."""
    arrays = dict(model.params.arrays())
    if model.moment_state is not None:
        arrays["moment.mu"] = model.moment_state.mu
        arrays["moment.initialized"] = model.moment_state.initialized.astype(np.float64)
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    trainable = [[n, bool(model.params[n].trainable)] for n in model.params.names()]
    manifest = {
        "pred_spec": model.pred_spec.to_dict(),
        "critic_spec": None if model.critic_spec is None else model.critic_spec.to_dict(),
        "ablation": model.ablation,
        "step": model.step,
        "momentum": None if model.moment_state is None else model.moment_state.momentum,
        "trainable": trainable,
        "arrays": entries,
        "extra": extra or {},
    }
    raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    pad = (-(_HEAD.size + 8 + len(raw))) % 8
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, KIND_CHECKPOINT))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(b"\0" * pad)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path):
    from .trainer import Model

    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        _read_header(fh, path, KIND_CHECKPOINT)
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        fh.read((-(_HEAD.size + 8 + mlen)) % 8)
        data = fh.read()
    arrays = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 8 * count
        if end > len(data):
            raise DataError(f"{path}: array {e['name']} extends past end of file")
        arrays[e["name"]] = np.frombuffer(data[e["offset"]:end], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    store = ParameterStore()
    for name, trainable in manifest["trainable"]:
        store.add(name, arrays[name], sn_u=arrays.get(name + ".sn_u"), trainable=trainable)
    pred_spec = PredictorSpec(**manifest["pred_spec"])
    critic_spec = CriticSpec(**manifest["critic_spec"]) if manifest["critic_spec"] else None
    state = None
    if "moment.mu" in arrays:
        state = MomentState(arrays["moment.mu"], arrays["moment.initialized"] > 0.5, manifest["momentum"])
    model = Model(pred_spec, critic_spec, store, state, manifest["ablation"], manifest["step"])
    return model, manifest["extra"]


def write_representations(path, model, split, sep=","):
    """One row per sample: d, z, y (class index or bitmask), then adapter outputs."""
    from .metrics import PredictionLog
    from .models import representation

    h = representation(model.params, model.pred_spec, split.x, model.model_strata(split.d))
    ids = PredictionLog(np.full_like(split.y, 0.5) if split.task_mode == "multi_label"
                        else np.full_like(split.y, 1.0 / split.y.shape[1]),
                        split.y, split.z, split.d, split.task_mode).label_ids
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(sep.join(["d", "z", "y"] + [f"h_{i}" for i in range(h.shape[1])]) + "\n")
        for i in range(len(split)):
            vals = [str(int(split.d[i])), str(int(split.z[i])), str(int(ids[i]))]
            vals += [repr(float(v)) for v in h[i]]
            fh.write(sep.join(vals) + "\n")
