"""Traversal of Keras model-config JSON for custom-computation layers.

Walks every ``layers`` array in a config (including nested inner models and
wrapper layers that embed a single ``layer``), records each layer it finds,
and pulls serialized code payloads out of Lambda-style layers.  Payload
bytes are decoded from base64 so they can be measured and hashed, but they
are never unmarshalled, compiled, or executed.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
from dataclasses import dataclass

MAX_WALK_DEPTH = 256
MAX_WALK_NODES = 1_000_000


@dataclass(frozen=True)
class CodePayload:
    encoding: str  # "base64-marshalled-code", "plain-source", or "reference-by-name"
    decoded_length: int  # 0 for reference-by-name
    digest: str  # sha256 hex of the decoded bytes (or of the reference name)
    preview: str  # first 64 bytes, rendered printable


@dataclass(frozen=True)
class LayerRecord:
    class_name: str
    layer_name: str
    json_path: str
    payload: CodePayload | None = None


@dataclass(frozen=True)
class ConfigAnomaly:
    kind: str  # "MalformedConfig" or "Base64Error"
    json_path: str
    message: str


def _safe_preview(data: bytes, limit: int = 64) -> str:
    head = data[:limit]
    return "".join(chr(b) if 0x20 <= b < 0x7F else f"\\x{b:02x}" for b in head)


def extract_code_payload(
    layer: dict,
    json_path: str = "",
    anomalies: list[ConfigAnomaly] | None = None,
) -> CodePayload | None:
    """Inspect a layer's ``config.function`` field without evaluating it.

    Two on-disk encodings are handled: a list/tuple whose first element is
    base64 of marshalled code, and a bare string naming a registered
    function.  Anything else is reported as an anomaly, never silently
    passed.
    """
    config = layer.get("config")
    if not isinstance(config, dict):
        return None
    function = config.get("function")
    if function is None:
        return None
    field_path = f"{json_path}.config.function" if json_path else "config.function"
    if isinstance(function, str):
        data = function.encode("utf-8")
        digest = hashlib.sha256(data).hexdigest()
        # A dotted identifier names a registered function; anything else is
        # code written straight into the config.
        is_name = bool(function) and all(
            part.isidentifier() for part in function.split(".")
        )
        if is_name:
            return CodePayload(
                encoding="reference-by-name",
                decoded_length=0,
                digest=digest,
                preview=_safe_preview(data),
            )
        return CodePayload(
            encoding="plain-source",
            decoded_length=len(data),
            digest=digest,
            preview=_safe_preview(data),
        )
    if isinstance(function, list) and function and isinstance(function[0], str):
        try:
            decoded = base64.b64decode(function[0], validate=True)
        except (binascii.Error, ValueError) as exc:
            if anomalies is not None:
                anomalies.append(
                    ConfigAnomaly("Base64Error", field_path, f"undecodable payload: {exc}")
                )
            return None
        return CodePayload(
            encoding="base64-marshalled-code",
            decoded_length=len(decoded),
            digest=hashlib.sha256(decoded).hexdigest(),
            preview=_safe_preview(decoded),
        )
    if anomalies is not None:
        anomalies.append(
            ConfigAnomaly(
                "MalformedConfig",
                field_path,
                f"unrecognized function encoding ({type(function).__name__})",
            )
        )
    return None


def _layer_name(layer: dict) -> str:
    config = layer.get("config")
    if isinstance(config, dict) and isinstance(config.get("name"), str):
        return config["name"]
    if isinstance(layer.get("name"), str):
        return layer["name"]
    return ""


def walk_layers(
    config: object,
    anomalies: list[ConfigAnomaly] | None = None,
    payload_classes: frozenset[str] | set[str] | None = None,
) -> list[LayerRecord]:
    """Collect a LayerRecord for every layer in document order.

    One record per element of any ``layers`` array and per wrapper-embedded
    ``layer`` object, however deeply nested.  Layers whose class is in
    ``payload_classes`` (Lambda by default) get their code payload
    extracted.  Malformed nodes are recorded as anomalies and traversal
    continues elsewhere.  Bounded by depth and node caps against
    adversarial configs.
    """
    records: list[LayerRecord] = []
    budget = [MAX_WALK_NODES]
    capped = [False]
    wants_payload = frozenset(payload_classes) if payload_classes is not None else frozenset({"Lambda"})

    def note(kind: str, path: str, message: str) -> None:
        if anomalies is not None:
            anomalies.append(ConfigAnomaly(kind, path, message))

    def record_layer(layer: object, path: str) -> None:
        if not isinstance(layer, dict) or not isinstance(layer.get("class_name"), str):
            note("MalformedConfig", path, "layer entry is not an object with class_name")
            return
        payload = None
        if layer["class_name"] in wants_payload:
            payload = extract_code_payload(layer, path, anomalies)
        records.append(
            LayerRecord(
                class_name=layer["class_name"],
                layer_name=_layer_name(layer),
                json_path=path,
                payload=payload,
            )
        )

    def visit(node: object, path: str, depth: int) -> None:
        budget[0] -= 1
        if budget[0] < 0 or depth > MAX_WALK_DEPTH:
            if not capped[0]:
                note("MalformedConfig", path, "traversal budget exhausted")
                capped[0] = True
            return
        if isinstance(node, dict):
            for key, value in node.items():
                child_path = f"{path}.{key}" if path else str(key)
                if key == "layers":
                    if isinstance(value, list):
                        for index, layer in enumerate(value):
                            layer_path = f"{child_path}[{index}]"
                            record_layer(layer, layer_path)
                            visit(layer, layer_path, depth + 1)
                    else:
                        note("MalformedConfig", child_path, "layers node is not an array")
                elif key == "layer" and isinstance(value, dict) and "class_name" in value:
                    record_layer(value, child_path)
                    visit(value, child_path, depth + 1)
                else:
                    visit(value, child_path, depth + 1)
        elif isinstance(node, list):
            for index, item in enumerate(node):
                visit(item, f"{path}[{index}]", depth + 1)

    if not isinstance(config, dict):
        note("MalformedConfig", "", "config root is not a JSON object")
        return records
    visit(config, "", 0)
    return records
