"""Save and restore trained models as JSON.

A checkpoint stores the config snapshot plus every parameter value. JSON
serializes Python floats through their shortest round-tripping repr, so a
reload reproduces the model bit-for-bit: the skeleton is rebuilt from the
config (same constructors, same seed) and the saved values overwrite the
fresh initialization in parameter order.
"""

from __future__ import annotations

import json

import numpy as np

from .baselines import EmGmm
from .errors import FormatError
from .evalkit import PcaProjection
from .training import TrainConfig, TrainedModel, assemble_model

FORMAT_TAG = "gcflow-checkpoint-1"


def _head_payload(head):
    if head is None:
        return None
    return {
        "means": [m.data.tolist() for m in head.means],
        "log_stds": [s.data.tolist() for s in head.log_stds],
        "weight_logits": head.weight_logits.data.tolist(),
    }


def save_checkpoint(path, tm: TrainedModel):
    payload = {
        "format": FORMAT_TAG,
        "kind": tm.kind,
        "config": tm.config,
        "dim": tm.dim,
        "classes": tm.classes,
        "damping_used": tm.damping_used,
        "pca": None,
        "params": None,
        "head": _head_payload(tm.head),
        "gmm": None,
    }
    if tm.pca is not None:
        payload["pca"] = {
            "mean": tm.pca.mean.tolist(),
            "directions": tm.pca.directions.tolist(),
            "explained": tm.pca.explained.tolist(),
        }
    if isinstance(tm.model, EmGmm):
        payload["gmm"] = {
            "weights": tm.model.weights.tolist(),
            "means": tm.model.means.tolist(),
            "covs": tm.model.covs.tolist(),
            "mapping": tm.gmm_mapping.tolist(),
        }
    elif tm.model is not None:
        payload["params"] = [p.data.tolist() for p in tm.model.params()]
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
    return str(path)


def _restore_params(params, saved, what):
    if len(saved) != len(params):
        raise FormatError(f"checkpoint stores {len(saved)} {what} arrays, model has {len(params)}")
    for p, value in zip(params, saved):
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != p.data.shape:
            raise FormatError(f"{what} array is {arr.shape}, model expects {p.data.shape}")
        p.data[...] = arr


def load_checkpoint(path, graph) -> TrainedModel:
    """Rebuild a trained model against the given graph."""
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if payload.get("format") != FORMAT_TAG:
        raise FormatError(f"{path}: not a checkpoint file")
    try:
        cfg = TrainConfig(**payload["config"])
        tm = assemble_model(
            cfg, graph, int(payload["dim"]), int(payload["classes"]),
            damping_used=payload["damping_used"],
        )
        if payload["pca"] is not None:
            tm.pca = PcaProjection(
                mean=np.asarray(payload["pca"]["mean"], dtype=np.float64),
                directions=np.asarray(payload["pca"]["directions"], dtype=np.float64),
                explained=np.asarray(payload["pca"]["explained"], dtype=np.float64),
            )
        if payload["gmm"] is not None:
            gmm = payload["gmm"]
            tm.model = EmGmm(gmm["weights"], gmm["means"], gmm["covs"])
            tm.gmm_mapping = np.asarray(gmm["mapping"], dtype=np.intp)
        elif payload["params"] is not None:
            _restore_params(tm.model.params(), payload["params"], "parameter")
        if payload["head"] is not None:
            head = payload["head"]
            _restore_params(tm.head.means, head["means"], "component mean")
            _restore_params(tm.head.log_stds, head["log_stds"], "component log-std")
            tm.head.weight_logits.data[...] = np.asarray(head["weight_logits"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from None
    return tm
