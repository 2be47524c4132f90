"""Toy scenes, their region features and template captions.

A scene is a handful of objects, each a (category, color, size) triple, plus
a spatial relation between the first two. Its caption repeats the first
object's category and color at the end, so predicting the final color is
easiest when the decoder can look back at what it already said.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import Xoshiro256

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
NOISE_SALT = 0x6A09E667F3BCC908

# 1-indexed position of color_0 in a rendered caption, and of its repeat
FIRST_COLOR_POS = 3
FINAL_COLOR_POS = 13


class ConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True)
class DataConfig:
    categories: tuple[str, ...] = ("box", "ball", "cup", "chair", "lamp", "book", "vase", "dog")
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow", "black", "white")
    sizes: tuple[str, ...] = ("big", "small", "tiny")
    relations: tuple[str, ...] = ("left-of", "right-of", "above", "below")
    k_min: int = 2
    k_max: int = 5
    noise_sigma: float = 0.1
    region_dim: int = 20
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("categories", "colors", "sizes", "relations"):
            inv = getattr(self, name)
            if isinstance(inv, list):
                object.__setattr__(self, name, tuple(inv))
                inv = getattr(self, name)
            if not inv:
                raise ConfigError(f"inventory {name!r} is empty")
            if len(set(inv)) != len(inv):
                raise ConfigError(f"inventory {name!r} has duplicates")
        if not 2 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 2 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.region_dim < self.encoding_width:
            raise ConfigError(
                f"region_dim {self.region_dim} is smaller than the one-hot width {self.encoding_width}"
            )
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be >= 0")

    @property
    def encoding_width(self) -> int:
        return len(self.categories) + len(self.colors) + len(self.sizes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ToyScene:
    objects: tuple[tuple[str, str, str], ...]  # (category, color, size)
    relation: str

    def key(self) -> tuple:
        return (self.objects, self.relation)

    def to_dict(self) -> dict:
        return {"objects": [list(o) for o in self.objects], "relation": self.relation}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyScene":
        return cls(tuple(tuple(o) for o in d["objects"]), d["relation"])


@dataclass
class DatasetRecord:
    regions: np.ndarray          # [k, D]
    caption: list[str]           # ends with <eos>
    scene: ToyScene | None = None

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (
            self.caption == other.caption
            and self.scene == other.scene
            and self.regions.shape == other.regions.shape
            and bool(np.array_equal(self.regions, other.regions))
        )


def gen_scene(seed: int, config: DataConfig = DataConfig()) -> ToyScene:
    rng = Xoshiro256(seed)
    k = config.k_min + rng.randbelow(config.k_max - config.k_min + 1)
    objects = tuple(
        (
            config.categories[rng.randbelow(len(config.categories))],
            config.colors[rng.randbelow(len(config.colors))],
            config.sizes[rng.randbelow(len(config.sizes))],
        )
        for _ in range(k)
    )
    return ToyScene(objects, config.relations[rng.randbelow(len(config.relations))])


def encode_scene(scene: ToyScene, config: DataConfig = DataConfig(), seed: int = 0) -> np.ndarray:
    """One region per object: one-hot category | color | size blocks, zero
    padding up to ``region_dim``, plus Gaussian noise of std ``noise_sigma``."""
    nc, nk = len(config.categories), len(config.colors)
    feats = np.zeros((len(scene.objects), config.region_dim))
    for i, (cat, color, size) in enumerate(scene.objects):
        try:
            feats[i, config.categories.index(cat)] = 1.0
            feats[i, nc + config.colors.index(color)] = 1.0
            feats[i, nc + nk + config.sizes.index(size)] = 1.0
        except ValueError as err:
            raise ConfigError(f"scene attribute not in inventory: {err}") from None
    if config.noise_sigma > 0:
        rng = Xoshiro256(seed ^ NOISE_SALT)
        noise = np.array(rng.normals(feats.size)).reshape(feats.shape)
        feats += config.noise_sigma * noise
    return feats


def decode_regions(regions: np.ndarray, config: DataConfig = DataConfig()) -> list[tuple[str, str, str]]:
    """Recover (category, color, size) from each region by block argmax."""
    nc, nk, ns = len(config.categories), len(config.colors), len(config.sizes)
    out = []
    for r in np.asarray(regions):
        out.append((
            config.categories[int(np.argmax(r[:nc]))],
            config.colors[int(np.argmax(r[nc:nc + nk]))],
            config.sizes[int(np.argmax(r[nc + nk:nc + nk + ns]))],
        ))
    return out


def render_caption(scene: ToyScene) -> list[str]:
    (cat0, color0, size0), (cat1, color1, _) = scene.objects[0], scene.objects[1]
    return [
        "a", size0, color0, cat0, scene.relation, "a", color1, cat1,
        "and", "the", cat0, "is", color0,
    ]


def make_record(seed: int, config: DataConfig = DataConfig()) -> DatasetRecord:
    scene = gen_scene(seed, config)
    return DatasetRecord(encode_scene(scene, config, seed), render_caption(scene) + [EOS], scene)


def generate_splits(config: DataConfig = DataConfig()) -> dict[str, list[DatasetRecord]]:
    """Train/val/test records with no scene shared between splits.

    Record ``j`` of the candidate stream uses seed ``config.seed ^ j``;
    repeated scenes are skipped, so splits are disjoint and deterministic.
    """
    wanted = [("train", config.n_train), ("val", config.n_val), ("test", config.n_test)]
    total = sum(n for _, n in wanted)
    seen: set = set()
    pool: list[DatasetRecord] = []
    j = 0
    while len(pool) < total:
        if j > 100 * total + 1000:
            raise ConfigError("scene space too small for the requested split sizes")
        rec = make_record(config.seed ^ j, config)
        j += 1
        if rec.scene.key() in seen:
            continue
        seen.add(rec.scene.key())
        pool.append(rec)
    out, start = {}, 0
    for name, n in wanted:
        out[name] = pool[start:start + n]
        start += n
    return out


# ------------------------------------------------------------------ vocabulary


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    pad_id, bos_id, eos_id, unk_id = 0, 1, 2, 3


def build_vocab(corpus: Sequence[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first
    (ties lexicographic); everything else becomes ``<unk>``."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for caption in corpus for t in caption if t not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


# --------------------------------------------------------------------- storage


def record_to_json(rec: DatasetRecord) -> str:
    d = {"regions": rec.regions.tolist(), "caption": list(rec.caption)}
    if rec.scene is not None:
        d["scene"] = rec.scene.to_dict()
    return json.dumps(d)


def record_from_json(line: str) -> DatasetRecord:
    d = json.loads(line)
    regions = np.asarray(d["regions"], dtype=np.float64)
    if regions.ndim != 2 or regions.shape[0] == 0:
        raise ValueError(f"regions must be a non-empty [k, D] list, got shape {regions.shape}")
    caption = d["caption"]
    if not isinstance(caption, list) or not all(isinstance(t, str) for t in caption):
        raise ValueError("caption must be a list of strings")
    scene = ToyScene.from_dict(d["scene"]) if d.get("scene") else None
    return DatasetRecord(regions, caption, scene)


def write_dataset(records: Iterable[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def read_dataset(path) -> list[DatasetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(line))
            except (ValueError, KeyError, TypeError) as err:
                raise DatasetParseError(path, lineno, str(err)) from None
    return records


def write_splits(splits: dict[str, list[DatasetRecord]], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, records in splits.items():
        paths[name] = out_dir / f"{name}.jsonl"
        write_dataset(records, paths[name])
    return paths


# ------------------------------------------------------------------- batching


def caption_ids(rec: DatasetRecord, vocab: Vocabulary) -> list[int]:
    ids = vocab.encode(rec.caption)
    if not ids or ids[-1] != vocab.eos_id:
        ids.append(vocab.eos_id)
    return ids


def batch_captions(records: Sequence[DatasetRecord], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Padded ``[B, n_max]`` gold ids and per-caption lengths."""
    seqs = [caption_ids(r, vocab) for r in records]
    lengths = np.array([len(s) for s in seqs], dtype=np.intp)
    gold = np.full((len(seqs), lengths.max()), vocab.pad_id, dtype=np.intp)
    for b, s in enumerate(seqs):
        gold[b, :len(s)] = s
    return gold, lengths


def references(rec: DatasetRecord) -> list[list[str]]:
    """The record's reference captions, ``<eos>`` stripped."""
    return [[t for t in rec.caption if t != EOS]]
