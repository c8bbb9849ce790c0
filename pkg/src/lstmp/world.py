"""Synthetic held-out-object captioning benchmark.

Each "image" is a sum of object prototype vectors plus Gaussian noise and
carries templated reference captions that mention every object once.  A
subset of objects is held out: the detector and the language model see
them, the paired image-caption training split never does.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

END_TOKEN = "<end>"
START_TOKEN = "<start>"

FUNCTION_WORDS = ("a", "and", "in", "on", "the", "with", "near", ",")
ATTRIBUTES = ("small", "large", "red", "old", "shiny", "wooden", "striped", "tiny")
SCENES = ("street", "kitchen", "field", "room", "beach", "park")
OBJECT_NAMES = (
    "dog", "cat", "horse", "sheep", "cow", "bird", "car", "truck", "bicycle", "boat",
    "chair", "table", "lamp", "cup", "plate", "apple", "banana", "clock", "vase", "kite",
    "train", "bench", "laptop", "guitar", "umbrella", "bottle", "pizza", "zebra",
)

# {oN} object slot, {attr} attribute, {scene} scene word
TEMPLATES = {
    1: (
        "a {attr} {o1} in the {scene}",
        "a {o1} in the {scene}",
        "a {o1} on the {scene}",
        "the {attr} {o1} near the {scene}",
    ),
    2: (
        "a {o1} and a {o2} in the {scene}",
        "a {attr} {o1} with a {o2}",
        "a {o1} near a {attr} {o2} on the {scene}",
    ),
    3: (
        "a {o1} , a {o2} and a {o3} in the {scene}",
        "a {o1} with a {o2} and a {o3}",
    ),
}

SPLIT_NAMES = ("detector_train", "paired_train", "test")

MAX_PROTOTYPE_COSINE = 0.9


@dataclass(frozen=True)
class WorldSpec:
    n_objects: int = 24
    n_heldout: int = 4
    D_v: int = 32
    noise_sigma: float = 0.1
    n_attributes: int = 5
    n_scenes: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.n_heldout < self.n_objects:
            raise ValueError("need 0 < n_heldout < n_objects")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 1 <= self.n_attributes <= len(ATTRIBUTES) or not 1 <= self.n_scenes <= len(SCENES):
            raise ValueError("attribute/scene counts exceed the word lists")


@dataclass(frozen=True)
class SplitCounts:
    n_train: int = 2000
    n_test_per_heldout: int = 25
    n_test_random: int = 100
    captions_per_image: int = 2


class Vocabulary:
    """Token strings with END at 0 and START at 1."""

    def __init__(self, tokens: Sequence[str], object_tokens: Sequence[str]):
        if tokens[0] != END_TOKEN or tokens[1] != START_TOKEN:
            raise ValueError("vocabulary must start with <end>, <start>")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")
        self.object_tokens = list(object_tokens)
        self.object_words = [self.index[t] for t in self.object_tokens]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [1] + [self.index[w] for w in words] + [0]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i == 0:
                break
            if i != 1:
                out.append(self.tokens[i])
        return out

    def object_membership(self) -> np.ndarray:
        m = np.zeros(len(self.tokens), dtype=bool)
        m[self.object_words] = True
        return m


@dataclass
class World:
    spec: WorldSpec
    prototypes: np.ndarray  # (n_objects, D_v)
    vocab: Vocabulary
    attributes: tuple[str, ...]
    scenes: tuple[str, ...]

    @property
    def object_tokens(self) -> list[str]:
        return self.vocab.object_tokens


@dataclass
class Sample:
    image: np.ndarray
    objects: tuple[int, ...]
    captions: list[list[str]]
    image_id: int = 0

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "image": self.image.tolist(),
                "objects": list(self.objects), "captions": self.captions}

    @classmethod
    def from_json(cls, d: dict) -> "Sample":
        return cls(np.array(d["image"], dtype=np.float64), tuple(int(o) for o in d["objects"]),
                   [list(c) for c in d["captions"]], int(d.get("image_id", 0)))


@dataclass
class CorpusSplits:
    vocab: Vocabulary
    heldout: tuple[int, ...]
    detector_train: list[Sample]
    lm_sentences: list[list[str]]
    paired_train: list[Sample]
    test: list[Sample]
    world_seed: int = 0
    spec: WorldSpec = field(default_factory=WorldSpec)

    @property
    def heldout_tokens(self) -> list[str]:
        return [self.vocab.object_tokens[k] for k in self.heldout]


def object_names(n: int) -> list[str]:
    names = list(OBJECT_NAMES[:n])
    names += [f"object{k}" for k in range(len(names), n)]
    return names


def generate_world(spec: WorldSpec) -> World:
    """Prototypes, vocabulary and grammar tables for ``spec``."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    protos = rng.standard_normal((spec.n_objects, spec.D_v))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    cos = protos @ protos.T
    np.fill_diagonal(cos, 0.0)
    if spec.n_objects > 1 and np.abs(cos).max() >= MAX_PROTOTYPE_COSINE:
        raise ValueError(
            f"{spec.n_objects} prototypes in {spec.D_v} dims reach cosine {np.abs(cos).max():.3f}; "
            f"raise D_v or lower n_objects")
    attrs = ATTRIBUTES[: spec.n_attributes]
    scenes = SCENES[: spec.n_scenes]
    objs = object_names(spec.n_objects)
    tokens = [END_TOKEN, START_TOKEN, *FUNCTION_WORDS, *attrs, *scenes, *objs]
    return World(spec, protos, Vocabulary(tokens, objs), tuple(attrs), tuple(scenes))


def caption_for(world: World, objects: Sequence[int], rng: np.random.Generator) -> list[str]:
    """One templated caption mentioning each of ``objects`` exactly once."""
    order = rng.permutation(len(objects))
    template = TEMPLATES[len(objects)][rng.integers(len(TEMPLATES[len(objects)]))]
    fill = {f"o{i + 1}": world.object_tokens[objects[j]] for i, j in enumerate(order)}
    fill["attr"] = world.attributes[rng.integers(len(world.attributes))]
    fill["scene"] = world.scenes[rng.integers(len(world.scenes))]
    return template.format(**fill).split()


def render_sample(world: World, objects: Sequence[int], rng: np.random.Generator,
                  n_captions: int = 2, image_id: int = 0) -> Sample:
    objects = tuple(sorted(int(o) for o in objects))
    if not 1 <= len(objects) <= 3:
        raise ValueError(f"samples hold 1-3 objects, got {len(objects)}")
    if len(set(objects)) != len(objects):
        raise ValueError("duplicate objects in subset")
    feat = world.prototypes[list(objects)].sum(axis=0)
    if world.spec.noise_sigma > 0:
        feat = feat + rng.normal(0.0, world.spec.noise_sigma, size=feat.shape)
    caps = [caption_for(world, objects, rng) for _ in range(n_captions)]
    return Sample(feat, objects, caps, image_id)


def _sample_rng(seed: int, stream: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, i]))


def _random_objects(rng, n_objects: int, must: int | None = None) -> list[int]:
    k = int(rng.integers(1, 4))
    if must is None:
        return [int(o) for o in rng.choice(n_objects, size=k, replace=False)]
    others = [o for o in range(n_objects) if o != must]
    return [must] + [int(o) for o in rng.choice(others, size=k - 1, replace=False)]


def build_splits(world: World, counts: SplitCounts = SplitCounts()) -> CorpusSplits:
    """Held-out partition: detector/LM data see every object, paired data none held out."""
    spec = world.spec
    seed = spec.seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    heldout = tuple(sorted(int(o) for o in rng.choice(spec.n_objects, size=spec.n_heldout, replace=False)))
    held = set(heldout)
    ncap = counts.captions_per_image

    pool = []
    for i in range(counts.n_train):
        r = _sample_rng(seed, 2, i)
        pool.append(render_sample(world, _random_objects(r, spec.n_objects), r, ncap, image_id=i))

    test = []
    for j, o in enumerate(heldout):
        for i in range(counts.n_test_per_heldout):
            r = _sample_rng(seed, 3 + j, i)
            test.append(render_sample(world, _random_objects(r, spec.n_objects, must=o), r, ncap))
    for i in range(counts.n_test_random):
        r = _sample_rng(seed, 3 + spec.n_heldout, i)
        test.append(render_sample(world, _random_objects(r, spec.n_objects), r, ncap))
    for i, s in enumerate(test):
        s.image_id = counts.n_train + i

    paired = [s for s in pool if not held.intersection(s.objects)]
    lm = [c for s in pool for c in s.captions]
    splits = CorpusSplits(world.vocab, heldout, pool, lm, paired, test, seed, spec)
    check_splits(splits)
    return splits


def check_splits(splits: CorpusSplits, min_test: int = 20, min_positives: int = 30) -> None:
    """Raise ValueError unless the held-out partition invariants hold."""
    held_tokens = set(splits.heldout_tokens)
    for s in splits.paired_train:
        for c in s.captions:
            if held_tokens.intersection(c):
                raise ValueError(f"paired_train image {s.image_id} mentions a held-out object")
    n_obj = len(splits.vocab.object_tokens)
    pos = np.zeros(n_obj, dtype=int)
    for s in splits.detector_train:
        pos[list(s.objects)] += 1
    if pos.min() < min_positives:
        raise ValueError(f"object {int(pos.argmin())} has only {pos.min()} detector positives (< {min_positives})")
    for o in splits.heldout:
        n_test = sum(o in s.objects for s in splits.test)
        if n_test < min_test:
            raise ValueError(f"held-out object {o} appears in {n_test} test images (< {min_test})")
        tok = splits.vocab.object_tokens[o]
        if not any(tok in c for c in splits.lm_sentences):
            raise ValueError(f"held-out object {tok!r} never appears in lm_sentences")


# -- corpus files --------------------------------------------------------------

class CorpusFormatError(ValueError):
    pass


MANIFEST = "manifest.json"


def save_corpus(splits: CorpusSplits, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in SPLIT_NAMES:
        fname = f"{name}.jsonl"
        with open(out / fname, "w") as fh:
            for s in getattr(splits, name):
                fh.write(json.dumps(s.to_json()) + "\n")
        files[name] = fname
    with open(out / "lm_sentences.jsonl", "w") as fh:
        for c in splits.lm_sentences:
            fh.write(json.dumps({"tokens": c}) + "\n")
    files["lm_sentences"] = "lm_sentences.jsonl"
    manifest = {
        "world_seed": splits.world_seed,
        "heldout_objects": list(splits.heldout),
        "heldout_tokens": splits.heldout_tokens,
        "splits": files,
        "vocabulary": splits.vocab.tokens,
        "object_tokens": splits.vocab.object_tokens,
        "world": asdict(splits.spec),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return out


def _read_jsonl(path: Path, parse):
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                items.append(parse(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(f"{path}:{lineno}: malformed line ({e})") from None
    return items


def read_manifest(path) -> dict:
    p = Path(path)
    try:
        return json.loads((p / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorpusFormatError(f"{p / MANIFEST}: {e}") from None


def load_corpus(path) -> CorpusSplits:
    root = Path(path)
    m = read_manifest(root)
    vocab = Vocabulary(m["vocabulary"], m["object_tokens"])
    files = m["splits"]
    data = {name: _read_jsonl(root / files[name], Sample.from_json) for name in SPLIT_NAMES}
    lm = _read_jsonl(root / files["lm_sentences"], lambda d: list(d["tokens"]))
    for name, samples in data.items():
        for s in samples:
            for c in s.captions:
                vocab.encode(c)
    return CorpusSplits(vocab, tuple(m["heldout_objects"]), data["detector_train"], lm,
                        data["paired_train"], data["test"], m["world_seed"], WorldSpec(**m["world"]))
