"""Checkpoint archives: a zip holding one ``.npy`` member per named array plus
``manifest.json``. Member timestamps are fixed so identical runs produce
byte-identical files."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .errors import ArtifactMismatchError
from .model import ModelDims, PAEModel
from .utils import atomic_write

CHECKPOINT_FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def _npy(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _flatten_trainer(state: dict) -> tuple[dict, dict]:
    """Split trainer state into JSON-able metadata and named arrays."""
    arrays: dict[str, np.ndarray] = {"rng/batch": state["generator"].numpy()}
    optim_meta = {}
    for comp, sd in state["optimizers"].items():
        groups = json.loads(json.dumps(sd["param_groups"]))
        keys = {}
        for idx, pstate in sd["state"].items():
            keys[str(idx)] = sorted(pstate)
            for k, v in pstate.items():
                arrays[f"optim/{comp}/{idx}/{k}"] = torch.as_tensor(v).numpy()
        optim_meta[comp] = {"param_groups": groups, "state_keys": keys}
    meta = {"epoch": state["epoch"], "history": state["history"], "optimizers": optim_meta}
    return meta, arrays


def _unflatten_trainer(meta: dict, arrays: dict) -> dict:
    optimizers = {}
    for comp, om in meta["optimizers"].items():
        st = {int(idx): {k: torch.from_numpy(arrays[f"optim/{comp}/{idx}/{k}"].copy()) for k in keys}
              for idx, keys in om["state_keys"].items()}
        optimizers[comp] = {"state": st, "param_groups": om["param_groups"]}
    return {
        "epoch": meta["epoch"],
        "history": meta["history"],
        "optimizers": optimizers,
        "generator": torch.from_numpy(arrays["rng/batch"].copy()),
    }


def save_checkpoint(path: Union[str, Path], model: PAEModel, manifest: dict,
                    trainer_state: Optional[dict] = None) -> Path:
    manifest = dict(manifest)
    manifest.update(
        format_version=CHECKPOINT_FORMAT_VERSION,
        dims={k: getattr(model.dims, k) for k in ("num_locations", "num_users", "embed_dim", "hidden_dim", "head_dim")},
        heads=list(model.heads),
        model_seed=model.seed,
        dtype=str(model.dtype).replace("torch.", ""),
    )
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if trainer_state is not None:
        meta, extra = _flatten_trainer(trainer_state)
        manifest["trainer"] = meta
        arrays.update(extra)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _member(zf, "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        for name in sorted(arrays):
            _member(zf, f"arrays/{name}.npy", _npy(arrays[name]))
    return atomic_write(path, buf.getvalue())


def read_manifest(path: Union[str, Path]) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_checkpoint(path: Union[str, Path], expected_vocab_hash: Optional[str] = None):
    """Return ``(model, manifest, trainer_state_or_None)``.

    Raises :class:`ArtifactMismatchError` on an unknown format version or a
    vocabulary hash different from ``expected_vocab_hash``.
    """
    path = Path(path)
    if not path.is_file():
        raise ArtifactMismatchError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {n[len("arrays/"):-len(".npy")]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                      for n in zf.namelist() if n.startswith("arrays/")}
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ArtifactMismatchError(f"{path}: not a checkpoint archive ({exc})") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ArtifactMismatchError(f"{path}: unsupported checkpoint format {manifest.get('format_version')!r}")
    if expected_vocab_hash is not None and manifest.get("vocab_hash") != expected_vocab_hash:
        raise ArtifactMismatchError(f"{path}: vocabulary hash mismatch")
    dims = ModelDims(**manifest["dims"])
    model = PAEModel(dims, heads=manifest["heads"], seed=manifest["model_seed"], dtype=_DTYPES[manifest["dtype"]])
    params = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(params)
    trainer_state = _unflatten_trainer(manifest["trainer"], arrays) if "trainer" in manifest else None
    return model, manifest, trainer_state
