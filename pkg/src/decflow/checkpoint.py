"""Versioned ``.npz`` checkpoints for fitted flows.

A checkpoint stores the velocity network layer by layer plus the per-arm
standardization and base atoms, so sampling after a reload is bitwise
identical to sampling from the in-memory model.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .decfm.model import FlowModel
from .errors import ValidationError
from .nuisance import ConditionalFlow
from .numkit import MlpParams

FORMAT_VERSION = 1
_KINDS = {"flow_model": FlowModel, "conditional_flow": ConditionalFlow}


def _pack_params(params: MlpParams, out: dict):
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"W{i}"] = w
        out[f"b{i}"] = b


def _unpack_params(z, meta) -> MlpParams:
    ws = [z[f"W{i}"] for i in range(meta["n_layers"])]
    bs = [z[f"b{i}"] for i in range(meta["n_layers"])]
    return MlpParams(ws, bs, meta["y_dim"], meta["ctx_dim"], meta["activation"])


def save_checkpoint(model, path) -> Path:
    """Write a :class:`FlowModel` or :class:`ConditionalFlow` to ``path``."""
    kind = next((k for k, cls in _KINDS.items() if isinstance(model, cls)), None)
    if kind is None:
        raise ValidationError(f"cannot checkpoint object of type {type(model).__name__}")
    v = model.velocity
    meta = {"format": FORMAT_VERSION, "kind": kind, "n_layers": len(v.weights), "y_dim": v.y_dim,
            "ctx_dim": v.ctx_dim, "activation": v.activation, "ode_steps": model.ode_steps}
    arrays = {}
    _pack_params(v, arrays)
    for arm in (0, 1):
        arrays[f"loc{arm}"] = np.asarray(model.loc[arm])
        arrays[f"scale{arm}"] = np.asarray(model.scale[arm])
        arrays[f"atoms{arm}"] = np.asarray(model.base_atoms[arm])
    if kind == "flow_model":
        meta["base_kind"] = model.base_kind
        arrays["loss_log"] = np.asarray(model.loss_log, dtype=np.float64).reshape(-1, 4)
    else:
        meta["x_dim"] = model.x_dim
        arrays["loss_log"] = np.asarray(model.loss_log, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != FORMAT_VERSION:
                raise ValidationError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
            params = _unpack_params(z, meta)
            loc = {arm: z[f"loc{arm}"] for arm in (0, 1)}
            scale = {arm: z[f"scale{arm}"] for arm in (0, 1)}
            atoms = {arm: z[f"atoms{arm}"] for arm in (0, 1)}
            log = z["loss_log"]
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{path}: not a readable checkpoint ({exc})") from None
    if meta["kind"] == "flow_model":
        rows = [(int(e), int(a), float(l), float(w)) for e, a, l, w in log]
        return FlowModel(params, meta["base_kind"], meta["ode_steps"], loc, scale, atoms, rows)
    if meta["kind"] == "conditional_flow":
        return ConditionalFlow(params, atoms, loc, scale, meta["ode_steps"], meta["x_dim"],
                               [float(v) for v in log])
    raise ValidationError(f"{path}: unknown checkpoint kind {meta['kind']!r}")
