"""On-disk keystore for per-layer permutation keys.

The file is a JSON document::

    {"format": "kvshield-keystore", "version": 1,
     "payload": {"model_id": ..., "layers": [{"layer_index", "dim", "head_layout", "map"}, ...]},
     "sha256": <hex digest of the canonical payload encoding>}

The canonical encoding is ``json.dumps(payload, sort_keys=True, separators=(",", ":"))``.
It stands in for sealed secure-world storage; the supported reader is
:meth:`kvshield.shield.SecureWorldContext.from_keystore`.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from kvshield.errors import KeystoreError, InvalidDimensionError
from kvshield.permutation import PermutationKey

FORMAT = "kvshield-keystore"
VERSION = 1


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_keystore(path, model_id: str, keys: dict[int, PermutationKey]) -> None:
    layers = []
    for layer in sorted(keys):
        key = keys[layer]
        layers.append({
            "layer_index": int(layer),
            "dim": key.dim,
            "head_layout": list(key.head_layout) if key.head_layout else None,
            "map": list(key.map),
        })
    payload = {"model_id": model_id, "layers": layers}
    doc = {"format": FORMAT, "version": VERSION, "payload": payload, "sha256": _digest(payload)}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_keystore(path) -> tuple[str, dict[int, PermutationKey]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise KeystoreError(f"cannot read keystore {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise KeystoreError(f"not a keystore file: format={doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise KeystoreError(f"unsupported keystore version {doc.get('version')!r}")
    payload = doc.get("payload")
    if not isinstance(payload, dict) or _digest(payload) != doc.get("sha256"):
        raise KeystoreError("keystore integrity check failed")
    keys: dict[int, PermutationKey] = {}
    try:
        for entry in payload["layers"]:
            layout = entry["head_layout"]
            key = PermutationKey(tuple(entry["map"]), tuple(layout) if layout else None)
            if key.dim != entry["dim"]:
                raise KeystoreError(f"layer {entry['layer_index']}: dim field disagrees with map")
            if entry["layer_index"] in keys:
                raise KeystoreError(f"duplicate layer {entry['layer_index']}")
            keys[int(entry["layer_index"])] = key
    except (KeyError, TypeError, InvalidDimensionError) as exc:
        raise KeystoreError(f"malformed keystore entry: {exc}") from exc
    return payload["model_id"], keys
