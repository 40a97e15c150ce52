"""Seeded synthetic scenes with planted concepts.

A scene is a set of N region feature vectors.  Each planted region is
``prototype[concept] + offset[attribute] + noise``; unplanted regions are pure
noise.  Questions ask for the attribute of one planted concept, captions
list the attribute/concept pairs of a scene.  Because the generating region
is known, attention localisation can be checked directly.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .container import read_records, write_records
from .text import Vocabulary

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

CONCEPT_NAMES = (
    "apple ball cat dog egg fish goat hat ink jar kite lamp map "
    "nut owl pig quilt rose sock tree umbrella vase whale xylophone yak zebra"
).split()
ATTRIBUTE_NAMES = "red green blue yellow white black purple orange pink brown gray silver".split()
FUNCTION_WORDS = ["what", "color", "is", "the", "of", "and"]

QUESTION_TEMPLATES = (
    "what color is the {c}",
    "what is the color of the {c}",
    "the {c} is what color",
)


class GenerationError(ValueError):
    """The requested dataset cannot be generated under its contracts."""


@dataclass
class ConceptVocabulary:
    names: list
    prototypes: np.ndarray  # (n_concepts, D_v)
    attribute_names: list
    offsets: np.ndarray  # (n_attributes, D_v)

    @property
    def n_concepts(self) -> int:
        return len(self.names)

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_names)

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def min_separation(self) -> float:
        return _min_pairwise_distance(self.prototypes)

    def tokens(self) -> list[str]:
        return ["<pad>"] + FUNCTION_WORDS + list(self.names) + list(self.attribute_names)

    def to_json(self) -> dict:
        return {
            "concepts": [{"name": n, "prototype": p.tolist()} for n, p in zip(self.names, self.prototypes)],
            "attributes": [{"name": n, "offset": o.tolist()} for n, o in zip(self.attribute_names, self.offsets)],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ConceptVocabulary":
        return cls(
            names=[c["name"] for c in d["concepts"]],
            prototypes=np.array([c["prototype"] for c in d["concepts"]], dtype=np.float64),
            attribute_names=[a["name"] for a in d["attributes"]],
            offsets=np.array([a["offset"] for a in d["attributes"]], dtype=np.float64),
        )


def _min_pairwise_distance(x: np.ndarray) -> float:
    if len(x) < 2:
        return math.inf
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    return float(d[np.triu_indices(len(x), 1)].min())


def _names(base: Sequence[str], n: int, stem: str) -> list[str]:
    return list(base[:n]) + [f"{stem}{i}" for i in range(len(base), n)]


def make_concept_vocabulary(
    n_concepts: int, n_attributes: int, feature_dim: int, seed: int, scale: float = 1.0
) -> ConceptVocabulary:
    """Prototypes and attribute offsets of norm ``scale``.

    When ``feature_dim`` allows, all prototypes and offsets are mutually
    orthogonal (a random rotation of the standard basis); otherwise they are
    random directions, rejected until unit-scaled prototypes are at least
    0.5 apart.
    """
    if scale <= 0:
        raise GenerationError("scale must be positive")
    if n_concepts < 1 or n_attributes < 1:
        raise GenerationError("need at least one concept and one attribute")
    rng = np.random.default_rng([seed, 0xC0])
    total = n_concepts + n_attributes
    if feature_dim >= total:
        q, r = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
        q = q * np.sign(np.diag(r))
        basis = q.T[:total]
        protos, offsets = basis[:n_concepts], basis[n_concepts:]
    else:
        for _ in range(100):
            v = rng.standard_normal((total, feature_dim))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            protos, offsets = v[:n_concepts], v[n_concepts:]
            if _min_pairwise_distance(protos) > 0.5:
                break
        else:
            raise GenerationError("could not draw prototypes 0.5 apart; raise feature_dim")
    return ConceptVocabulary(
        names=_names(CONCEPT_NAMES, n_concepts, "concept"),
        prototypes=np.ascontiguousarray(protos * scale),
        attribute_names=_names(ATTRIBUTE_NAMES, n_attributes, "attr"),
        offsets=np.ascontiguousarray(offsets * scale),
    )


# ---------------------------------------------------------------------------
# items


@dataclass
class Scene:
    regions: np.ndarray  # (N, D_v)
    planted: list  # per region: [concept, attribute] or None for background

    def concepts(self) -> list[int]:
        return sorted(p[0] for p in self.planted if p is not None)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.regions, dtype="<f8").tobytes()).hexdigest()


@dataclass
class VqaItem:
    item_id: int
    scene: Scene
    question: list  # token ids
    answer: int
    planted_region: int
    keyword_position: int

    def to_record(self):
        meta = {
            "kind": "vqa",
            "item_id": self.item_id,
            "planted": self.scene.planted,
            "question": self.question,
            "answer": self.answer,
            "planted_region": self.planted_region,
            "keyword_position": self.keyword_position,
        }
        return meta, self.scene.regions

    @classmethod
    def from_record(cls, meta, array) -> "VqaItem":
        return cls(
            item_id=meta["item_id"],
            scene=Scene(array, meta["planted"]),
            question=meta["question"],
            answer=meta["answer"],
            planted_region=meta["planted_region"],
            keyword_position=meta["keyword_position"],
        )


@dataclass
class MatchItem:
    item_id: int
    scene: Scene
    caption: list  # token ids

    def to_record(self):
        meta = {"kind": "match", "item_id": self.item_id, "planted": self.scene.planted, "caption": self.caption}
        return meta, self.scene.regions

    @classmethod
    def from_record(cls, meta, array) -> "MatchItem":
        return cls(item_id=meta["item_id"], scene=Scene(array, meta["planted"]), caption=meta["caption"])


_ITEM_TYPES = {"vqa": VqaItem, "match": MatchItem}


@dataclass
class Dataset:
    task: str  # "vqa" or "match"
    concepts: ConceptVocabulary
    vocab: Vocabulary
    splits: dict
    manifest: dict = field(default_factory=dict)

    @property
    def n_answers(self) -> int:
        return self.concepts.n_attributes


# ---------------------------------------------------------------------------
# generation


def noise_for(concepts: ConceptVocabulary, ratio: float) -> float:
    """Per-coordinate noise σ as a fraction of the minimum prototype separation."""
    return ratio * concepts.min_separation()


def _split_sizes(sizes) -> dict:
    if isinstance(sizes, Mapping):
        out = {s: int(sizes.get(s, 0)) for s in SPLITS}
    elif isinstance(sizes, int):
        n_val = sizes // 10
        n_test = sizes // 10
        out = {"train": sizes - n_val - n_test, "val": n_val, "test": n_test}
    else:
        out = dict(zip(SPLITS, (int(s) for s in sizes)))
    if any(v < 0 for v in out.values()) or sum(out.values()) < 1:
        raise GenerationError("need at least one item")
    return out


def _make_scene(rng, concepts: ConceptVocabulary, chosen, n_regions: int, sigma: float) -> Scene:
    slots = rng.permutation(n_regions)[: len(chosen)]
    attrs = rng.integers(0, concepts.n_attributes, size=len(chosen))
    noise = rng.standard_normal((n_regions, concepts.feature_dim)) * sigma
    regions = noise
    planted = [None] * n_regions
    for c, a, slot in zip(chosen, attrs, slots):
        regions[slot] = concepts.prototypes[c] + concepts.offsets[a] + noise[slot]
        planted[int(slot)] = [int(c), int(a)]
    return Scene(regions, planted)


def _generate_splits(sizes, make_item, max_attempts: int = 1000) -> dict:
    """Run ``make_item(rng, item_id)`` per split with split-indexed streams.

    A scene whose content hash already occurs in an earlier split is redrawn
    so no scene crosses splits.
    """
    seen: dict[str, str] = {}
    splits = {}
    next_id = 0
    for index, name in enumerate(SPLITS):
        items, local = [], set()
        rng_key = index
        for _ in range(sizes[name]):
            for _attempt in range(max_attempts):
                item = make_item(rng_key, next_id)
                h = item.scene.digest()
                if seen.get(h, name) == name:
                    break
            else:
                raise GenerationError(f"cannot keep split {name!r} disjoint from earlier splits")
            local.add(h)
            items.append(item)
            next_id += 1
        for h in local:
            seen.setdefault(h, name)
        splits[name] = items
    return splits


def gen_vqa_dataset(
    concepts: ConceptVocabulary,
    sizes,
    n_regions: int,
    sigma: float,
    seed: int,
    concepts_per_scene: int | None = None,
) -> Dataset:
    """Questions "what color is the <concept>" answered by the planted attribute."""
    per_scene = n_regions if concepts_per_scene is None else concepts_per_scene
    if per_scene > n_regions:
        raise GenerationError(f"{per_scene} concepts do not fit in {n_regions} regions")
    if per_scene > concepts.n_concepts:
        raise GenerationError(f"vocabulary has {concepts.n_concepts} concepts, scenes need {per_scene}")
    if per_scene < 1:
        raise GenerationError("scenes need at least one planted concept")
    sizes = _split_sizes(sizes)
    vocab = Vocabulary(concepts.tokens())
    streams = {i: np.random.default_rng([seed, 1, i]) for i in range(len(SPLITS))}

    def make_item(key, item_id):
        rng = streams[key]
        chosen = rng.choice(concepts.n_concepts, size=per_scene, replace=False)
        scene = _make_scene(rng, concepts, chosen, n_regions, sigma)
        target = int(rng.integers(per_scene))
        c = int(chosen[target])
        region = next(i for i, p in enumerate(scene.planted) if p is not None and p[0] == c)
        template = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
        words = template.format(c=concepts.names[c]).split()
        return VqaItem(
            item_id=item_id,
            scene=scene,
            question=vocab.encode(words),
            answer=scene.planted[region][1],
            planted_region=region,
            keyword_position=words.index(concepts.names[c]),
        )

    splits = _generate_splits(sizes, make_item)
    manifest = _manifest("vqa", seed, concepts, n_regions, sigma, splits)
    manifest["concepts_per_scene"] = per_scene
    return Dataset("vqa", concepts, vocab, splits, manifest)


def gen_matching_dataset(
    concepts: ConceptVocabulary,
    sizes,
    n_regions: int,
    caption_bounds: tuple[int, int],
    sigma: float,
    seed: int,
) -> Dataset:
    """Scenes paired with captions "red apple and blue ball ...".

    ``caption_bounds`` bounds how many concepts a scene plants (and its
    caption names).  No two scenes in the whole dataset share a concept set.
    """
    lo, hi = caption_bounds
    if not 1 <= lo <= hi:
        raise GenerationError(f"bad caption bounds {caption_bounds}")
    if hi > n_regions or hi > concepts.n_concepts:
        raise GenerationError("caption bound exceeds regions or concepts")
    sizes = _split_sizes(sizes)
    need = sum(sizes.values())
    available = sum(math.comb(concepts.n_concepts, k) for k in range(lo, hi + 1))
    if available < need:
        raise GenerationError(f"only {available} distinct concept combinations for {need} scenes")
    vocab = Vocabulary(concepts.tokens())

    # distinct concept sets for all items, drawn once from a dedicated stream
    rng = np.random.default_rng([seed, 2])
    if available <= 200_000:
        pool = [c for k in range(lo, hi + 1) for c in itertools.combinations(range(concepts.n_concepts), k)]
        picks = rng.choice(len(pool), size=need, replace=False)
        combos = [pool[i] for i in picks]
    else:
        seen, combos = set(), []
        while len(combos) < need:
            k = int(rng.integers(lo, hi + 1))
            c = tuple(sorted(rng.choice(concepts.n_concepts, size=k, replace=False).tolist()))
            if c not in seen:
                seen.add(c)
                combos.append(c)
    streams = {i: np.random.default_rng([seed, 3, i]) for i in range(len(SPLITS))}

    def make_item(key, item_id):
        rng = streams[key]
        chosen = rng.permutation(np.array(combos[item_id]))
        scene = _make_scene(rng, concepts, chosen, n_regions, sigma)
        attr = {p[0]: p[1] for p in scene.planted if p is not None}
        words = []
        for c in chosen:
            if words:
                words.append("and")
            words += [concepts.attribute_names[attr[int(c)]], concepts.names[int(c)]]
        return MatchItem(item_id=item_id, scene=scene, caption=vocab.encode(words))

    splits = _generate_splits(sizes, make_item)
    manifest = _manifest("match", seed, concepts, n_regions, sigma, splits)
    manifest["caption_bounds"] = [lo, hi]
    return Dataset("match", concepts, vocab, splits, manifest)


def _manifest(task, seed, concepts, n_regions, sigma, splits) -> dict:
    return {
        "version": FORMAT_VERSION,
        "task": task,
        "seed": seed,
        "dims": {"feature_dim": concepts.feature_dim, "regions": n_regions},
        "counts": {k: len(v) for k, v in splits.items()},
        "noise_sigma": sigma,
        "n_answers": concepts.n_attributes,
        **concepts.to_json(),
    }


# ---------------------------------------------------------------------------
# persistence


def write_dataset(dataset: Dataset, path) -> dict:
    """Write ``<split>.dan`` files, ``vocab.txt`` and ``manifest.json``.

    Returns the paths written, keyed by role.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, items in dataset.splits.items():
        p = root / f"{name}.dan"
        write_records(p, (item.to_record() for item in items))
        written[name] = p
    dataset.vocab.write(root / "vocab.txt")
    written["vocab"] = root / "vocab.txt"
    (root / "manifest.json").write_text(json.dumps(dataset.manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    written["manifest"] = root / "manifest.json"
    return written


def read_split(path, task: str) -> list:
    cls = _ITEM_TYPES[task]
    return [cls.from_record(meta, arr) for meta, arr in read_records(path)]


def read_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        from .container import VersionError

        raise VersionError(f"dataset manifest version {manifest.get('version')} != {FORMAT_VERSION}")
    task = manifest["task"]
    splits = {}
    for name in SPLITS:
        p = root / f"{name}.dan"
        if p.exists():
            splits[name] = read_split(p, task)
    return Dataset(
        task=task,
        concepts=ConceptVocabulary.from_json(manifest),
        vocab=Vocabulary.read(root / "vocab.txt"),
        splits=splits,
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# learning-free reference decoders


def decode_regions(regions: np.ndarray, concepts: ConceptVocabulary) -> list:
    """Nearest (concept, attribute) combination per region, or None for background."""
    combos = concepts.prototypes[:, None, :] + concepts.offsets[None, :, :]
    flat = np.concatenate([combos.reshape(-1, concepts.feature_dim), np.zeros((1, concepts.feature_dim))])
    d = ((regions[:, None, :] - flat[None, :, :]) ** 2).sum(axis=-1)
    best = d.argmin(axis=1)
    background = len(flat) - 1
    return [None if b == background else divmod(int(b), concepts.n_attributes) for b in best]


def nearest_prototype_answer(item: VqaItem, concepts: ConceptVocabulary, vocab: Vocabulary) -> int:
    """Answer a VQA item by exhaustive nearest-combination decoding; -1 if unanswerable."""
    names = {vocab[n]: i for i, n in enumerate(concepts.names)}
    asked = [names[t] for t in item.question if t in names]
    if not asked:
        return -1
    for decoded in decode_regions(item.scene.regions, concepts):
        if decoded is not None and decoded[0] == asked[0]:
            return decoded[1]
    return -1
