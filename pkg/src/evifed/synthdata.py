"""Synthetic multi-department VQA data.

Every department draws 8x8 images from one pattern family (stripes, blobs,
rings, ...) and asks three kinds of question about them:

* ``is FAMILY present ?``   closed, answer yes/no
* ``how many FAMILY ?``     open, answer one..four
* ``which way FAMILY ?``    open, answer orient-a/orient-b (line families only)

"No" images hold either pure noise or a pattern from a distractor family,
so what counts as "present" differs between departments.  Departments that
share a family solve the same task; related families share the counting
concept but not the pixels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from evifed.errors import ConfigError

GRID = 8
MAX_QUESTION_LEN = 8
ANSWERS = ("yes", "no", "one", "two", "three", "four", "orient-a", "orient-b")
YES, NO = 0, 1
COUNT_OFFSET = 2
ORIENT_OFFSET = 6

VOCAB = {
    "<pad>": 0, "how": 1, "many": 2, "is": 3, "present": 4, "which": 5, "way": 6, "?": 7,
}
FAMILIES = ("stripes", "tilted_stripes", "blobs", "dots", "rings", "squares", "checker", "crosses")
for _i, _name in enumerate(FAMILIES):
    VOCAB[_name] = 8 + _i
N_VARIANTS = 8
MAX_DEPARTMENTS = len(FAMILIES) * N_VARIANTS

# declared overlap between distinct families; unlisted pairs are disjoint
_RELATED = {
    frozenset(("stripes", "tilted_stripes")): 0.5,
    frozenset(("blobs", "dots")): 0.5,
    frozenset(("rings", "squares")): 0.5,
    frozenset(("checker", "crosses")): 0.5,
}
_ORIENTED = ("stripes", "tilted_stripes")
# department order: the first two share a family (the planted related pair),
# the rest avoid anything related to it before cycling
_PAIRED_ORDER = ("stripes", "stripes", "blobs", "rings", "checker", "tilted_stripes",
                 "dots", "squares", "crosses")


@dataclass(frozen=True)
class DepartmentSpec:
    family: str
    variant: int = 0
    sigma: float = 0.1
    intensity: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown pattern family {self.family!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")

    @property
    def attributes(self) -> tuple[str, ...]:
        if self.family in _ORIENTED:
            return ("presence", "count", "orientation")
        return ("presence", "count")

    @property
    def distractor(self) -> str:
        return FAMILIES[(FAMILIES.index(self.family) + 2) % len(FAMILIES)]


@dataclass(frozen=True)
class VQAInstance:
    image: np.ndarray
    question: np.ndarray
    answer: int
    question_type: str  # "closed" | "open"


@dataclass
class VQABatch:
    images: np.ndarray      # (N, 8, 8)
    questions: np.ndarray   # (N, L) int
    answers: np.ndarray     # (N,) int
    closed: np.ndarray      # (N,) bool

    def __len__(self) -> int:
        return int(self.answers.shape[0])

    def subset(self, idx) -> "VQABatch":
        return VQABatch(self.images[idx], self.questions[idx], self.answers[idx], self.closed[idx])

    def instances(self) -> list[VQAInstance]:
        return [VQAInstance(self.images[i], self.questions[i], int(self.answers[i]),
                            "closed" if self.closed[i] else "open") for i in range(len(self))]

    @classmethod
    def from_instances(cls, items: list[VQAInstance]) -> "VQABatch":
        if not items:
            return cls(np.zeros((0, GRID, GRID)), np.zeros((0, MAX_QUESTION_LEN), np.int64),
                       np.zeros(0, np.int64), np.zeros(0, bool))
        return cls(np.stack([np.asarray(it.image, float) for it in items]),
                   np.stack([np.asarray(it.question, np.int64) for it in items]),
                   np.array([it.answer for it in items], np.int64),
                   np.array([it.question_type == "closed" for it in items]))

    @classmethod
    def concat(cls, parts: Iterable["VQABatch"]) -> "VQABatch":
        parts = list(parts)
        return cls(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.questions for p in parts]),
                   np.concatenate([p.answers for p in parts]),
                   np.concatenate([p.closed for p in parts]))


@dataclass
class ClientData:
    spec: DepartmentSpec
    train: VQABatch
    eval: VQABatch
    test: VQABatch

    def splits(self) -> dict[str, VQABatch]:
        return {"train": self.train, "eval": self.eval, "test": self.test}


# -- rendering ---------------------------------------------------------------


def _spaced(k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct, pairwise non-adjacent positions in [0, 8)."""
    return np.sort(rng.choice(4, size=k, replace=False) * 2 + rng.integers(2))


def _lattice(k: int, rng: np.random.Generator, corners) -> list[tuple[int, int]]:
    idx = rng.choice(len(corners), size=k, replace=False)
    return [corners[i] for i in np.sort(idx)]


_BLOB_CORNERS = [(3 * i, 3 * j) for i in range(3) for j in range(3)]
_SQUARE_CORNERS = [(0, 0), (0, 5), (5, 0), (5, 5)]


def render(family: str, count: int, orient: int, rng: np.random.Generator) -> np.ndarray:
    """Binary pattern with ``count`` objects; ``orient`` selects line direction."""
    img = np.zeros((GRID, GRID))
    r, c = np.indices((GRID, GRID))
    if family == "stripes":
        pos = _spaced(count, rng)
        if orient == 0:
            img[pos, :] = 1.0
        else:
            img[:, pos] = 1.0
    elif family == "tilted_stripes":
        diag = (r - c) % GRID if orient == 0 else (r + c) % GRID
        img[np.isin(diag, _spaced(count, rng))] = 1.0
    elif family == "blobs":
        for i, j in _lattice(count, rng, _BLOB_CORNERS):
            img[i:i + 2, j:j + 2] = 1.0
    elif family == "dots":
        for i, j in _lattice(count, rng, _BLOB_CORNERS):
            img[i + rng.integers(2), j + rng.integers(2)] = 1.0
    elif family == "rings":
        for k in rng.choice(4, size=count, replace=False):
            ring = np.maximum(np.abs(r - 3.5), np.abs(c - 3.5)) == 3.5 - k
            img[ring] = 1.0
    elif family == "squares":
        for i, j in _lattice(count, rng, _SQUARE_CORNERS):
            img[i:i + 3, j:j + 3] = 1.0
            img[i + 1, j + 1] = 0.0
    elif family == "checker":
        quads = [(0, 0), (0, 4), (4, 0), (4, 4)]
        for i, j in _lattice(count, rng, quads):
            block = ((r[:4, :4] + c[:4, :4]) % 2 == 0).astype(float)
            img[i:i + 4, j:j + 4] = block
    elif family == "crosses":
        for i, j in _lattice(count, rng, _SQUARE_CORNERS):
            img[i + 1, j:j + 3] = 1.0
            img[i:i + 3, j + 1] = 1.0
    else:
        raise ConfigError(f"unknown pattern family {family!r}")
    return img


def _finish(pattern: np.ndarray, spec: DepartmentSpec, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, spec.sigma, pattern.shape) if spec.sigma > 0 else 0.0
    return np.clip(pattern * spec.intensity + noise, 0.0, 1.0)


def _question(kind: str, family: str) -> np.ndarray:
    words = {"presence": ["is", family, "present", "?"],
             "count": ["how", "many", family, "?"],
             "orientation": ["which", "way", family, "?"]}[kind]
    toks = [VOCAB[w] for w in words]
    return np.array(toks + [0] * (MAX_QUESTION_LEN - len(toks)), dtype=np.int64)


def _department(spec: DepartmentSpec, n: int, rng: np.random.Generator,
                label_noise: float) -> VQABatch:
    n_closed = n // 2
    n_open = n - n_closed
    kinds = ["presence"] * n_closed
    if "orientation" in spec.attributes:
        n_orient = n_open // 3
        kinds += ["count"] * (n_open - n_orient) + ["orientation"] * n_orient
    else:
        kinds += ["count"] * n_open
    yes_flags = np.zeros(n_closed, dtype=bool)
    yes_flags[: (n_closed + int(rng.integers(2))) // 2] = True
    rng.shuffle(yes_flags)

    images, questions, answers, closed = [], [], [], []
    for i, kind in enumerate(kinds):
        count = int(rng.integers(1, 5))
        orient = int(rng.integers(2))
        if kind == "presence":
            if yes_flags[i]:
                pattern, answer = render(spec.family, count, orient, rng), YES
            elif rng.random() < 0.5:
                pattern, answer = render(spec.distractor, count, orient, rng), NO
            else:
                pattern, answer = np.zeros((GRID, GRID)), NO
        else:
            pattern = render(spec.family, count, orient, rng)
            answer = COUNT_OFFSET + count - 1 if kind == "count" else ORIENT_OFFSET + orient
        if label_noise > 0 and rng.random() < label_noise:
            pool = [YES, NO] if kind == "presence" else (
                list(range(COUNT_OFFSET, COUNT_OFFSET + 4)) if kind == "count"
                else [ORIENT_OFFSET, ORIENT_OFFSET + 1])
            answer = int(rng.choice(pool))
        images.append(_finish(pattern, spec, rng))
        questions.append(_question(kind, spec.family))
        answers.append(answer)
        closed.append(kind == "presence")
    order = rng.permutation(n)
    batch = VQABatch(np.stack(images), np.stack(questions),
                     np.array(answers, dtype=np.int64), np.array(closed))
    return batch.subset(order)


def department_specs(T: int, cycle: bool = False) -> list[DepartmentSpec]:
    """Default department assignment; T >= 3 always starts with a same-family pair."""
    if T < 1:
        raise ConfigError("need at least one client")
    if T > MAX_DEPARTMENTS and not cycle:
        raise ConfigError(
            f"T={T} exceeds the {MAX_DEPARTMENTS} available family/variant departments")
    if T == 2:
        order = ("stripes", "blobs")
    elif T == 1:
        order = ("stripes",)
    else:
        order = _PAIRED_ORDER
    specs, used, cursor = [], {}, 0
    for t in range(T):
        if t < len(order):
            family = order[t]
        else:
            # next family in cycle order that still has an unused variant
            for _ in range(len(FAMILIES)):
                family = FAMILIES[cursor % len(FAMILIES)]
                cursor += 1
                if used.get(family, 0) < N_VARIANTS:
                    break
        variant = used.get(family, 0) % N_VARIANTS
        used[family] = used.get(family, 0) + 1
        specs.append(DepartmentSpec(family, variant, sigma=0.1 + 0.02 * variant,
                                    intensity=1.0 - 0.04 * variant))
    return specs


def generate(T: int, per_client_n: int, seed: int, *, departments=None,
             label_noise: float = 0.0, cycle: bool = False) -> list[ClientData]:
    """T client partitions, each split 70/15/15 into train/eval/test."""
    if per_client_n < 30:
        raise ConfigError(f"per_client_n must be >= 30, got {per_client_n}")
    specs = list(departments) if departments is not None else department_specs(T, cycle)
    if len(specs) != T:
        raise ConfigError(f"got {len(specs)} department specs for T={T}")
    out = []
    for t, spec in enumerate(specs):
        rng = np.random.default_rng([seed, t])
        batch = _department(spec, per_client_n, rng, label_noise)
        n_train = int(round(0.70 * per_client_n))
        n_eval = int(round(0.15 * per_client_n))
        out.append(ClientData(
            spec=spec,
            train=batch.subset(slice(0, n_train)),
            eval=batch.subset(slice(n_train, n_train + n_eval)),
            test=batch.subset(slice(n_train + n_eval, per_client_n)),
        ))
    return out


def relatedness(spec_a: DepartmentSpec, spec_b: DepartmentSpec) -> float:
    if spec_a.family == spec_b.family:
        return 1.0
    return _RELATED.get(frozenset((spec_a.family, spec_b.family)), 0.0)


# -- line-delimited JSON dump --------------------------------------------------


def dump_jsonl(clients: list[ClientData], path) -> None:
    """One JSON object per instance: client, split, family, image, question, answer."""
    with open(path, "w", encoding="utf-8") as fh:
        for t, cd in enumerate(clients):
            for split, batch in cd.splits().items():
                for i in range(len(batch)):
                    rec = {
                        "client": t,
                        "split": split,
                        "family": cd.spec.family,
                        "variant": cd.spec.variant,
                        "sigma": cd.spec.sigma,
                        "intensity": cd.spec.intensity,
                        "image": [[round(float(v), 12) for v in row] for row in batch.images[i]],
                        "question": [int(v) for v in batch.questions[i]],
                        "answer": int(batch.answers[i]),
                        "answer_text": ANSWERS[int(batch.answers[i])],
                        "question_type": "closed" if batch.closed[i] else "open",
                    }
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path) -> list[ClientData]:
    rows: dict[int, dict[str, list[VQAInstance]]] = {}
    specs: dict[int, DepartmentSpec] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        t = int(rec["client"])
        specs[t] = DepartmentSpec(rec["family"], rec["variant"], rec["sigma"], rec["intensity"])
        inst = VQAInstance(np.array(rec["image"], float), np.array(rec["question"], np.int64),
                           int(rec["answer"]), rec["question_type"])
        rows.setdefault(t, {"train": [], "eval": [], "test": []})[rec["split"]].append(inst)
    return [ClientData(specs[t], *(VQABatch.from_instances(rows[t][s])
                                   for s in ("train", "eval", "test")))
            for t in sorted(rows)]
