"""Inter-client messages: the only values that cross a client boundary.

``ClientPublish`` goes client -> server at the end of a local phase,
``ServerDistribute`` goes server -> client at the end of a communication
phase, and ``LikelihoodReport`` carries the per-client log-likelihood scalar
back to the server during weight optimisation.  None of them has a field
for images, questions, answers or features; :func:`audit` checks a
serialized transcript against that rule.
"""
from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, fields

import numpy as np

PromptArrays = dict[str, list]


def _arrays_to_json(arrays: dict[str, np.ndarray]) -> PromptArrays:
    return {name: np.asarray(a, dtype=np.float64).tolist() for name, a in sorted(arrays.items())}


@dataclass(frozen=True)
class ClientPublish:
    client_id: int
    prompts: PromptArrays
    mean_uncertainty: float
    eval_accuracy: float

    @classmethod
    def build(cls, client_id: int, arrays: dict[str, np.ndarray], mean_uncertainty: float,
              eval_accuracy: float) -> "ClientPublish":
        return cls(int(client_id), _arrays_to_json(arrays), float(mean_uncertainty),
                   float(eval_accuracy))

    def prompt_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v, dtype=np.float64) for k, v in self.prompts.items()}


@dataclass(frozen=True)
class ServerDistribute:
    client_id: int
    prompts: PromptArrays
    weight_row: list[float]

    @classmethod
    def build(cls, client_id: int, arrays: dict[str, np.ndarray], weight_row) -> "ServerDistribute":
        return cls(int(client_id), _arrays_to_json(arrays), [float(w) for w in weight_row])

    def prompt_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v, dtype=np.float64) for k, v in self.prompts.items()}


@dataclass(frozen=True)
class LikelihoodReport:
    client_id: int
    iteration: int
    log_likelihood: float


MESSAGE_TYPES = {cls.__name__: cls for cls in (ClientPublish, ServerDistribute, LikelihoodReport)}
SCHEMA_FIELDS = {name: {f.name for f in fields(cls)} for name, cls in MESSAGE_TYPES.items()}
FORBIDDEN_FIELDS = ("image", "images", "question", "questions", "answer", "answers", "label",
                    "labels", "features", "instances", "train", "test", "eval")


def serialize(msg) -> str:
    return json.dumps({"type": type(msg).__name__, "body": asdict(msg)}, sort_keys=True)


def deserialize(line: str):
    rec = json.loads(line)
    return MESSAGE_TYPES[rec["type"]](**rec["body"])


class MessageBus:
    """Collects every message that crosses a boundary, in serialized form."""

    def __init__(self, record: bool = True):
        self.record = record
        self.lines: list[str] = []
        self._lock = threading.Lock()

    def send(self, msg):
        if self.record:
            line = serialize(msg)
            with self._lock:
                self.lines.append(line)
        return msg


def _walk_keys(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield f"{prefix}{k}"
            yield from _walk_keys(v, f"{prefix}{k}.")


def audit(lines: list[str]) -> list[str]:
    """Return violations: unknown message types, non-schema or data-bearing fields."""
    problems = []
    for i, line in enumerate(lines):
        rec = json.loads(line)
        kind = rec.get("type")
        if kind not in SCHEMA_FIELDS or set(rec) != {"type", "body"}:
            problems.append(f"line {i}: unknown envelope {sorted(rec)} / type {kind!r}")
            continue
        body = rec["body"]
        extra = set(body) - SCHEMA_FIELDS[kind]
        if extra:
            problems.append(f"line {i}: {kind} has non-schema fields {sorted(extra)}")
        for key in _walk_keys(body):
            leaf = key.split(".")[-1].lower()
            if leaf in FORBIDDEN_FIELDS:
                problems.append(f"line {i}: data-bearing field {key!r}")
        for name in body.get("prompts", {}):
            if name.split(".")[0] not in ("image", "question") or ".block" not in name:
                problems.append(f"line {i}: unexpected prompt array name {name!r}")
    return problems
