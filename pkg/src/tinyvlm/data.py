"""Deterministic synthetic multimodal corpus.

Images are G x G grids of (shape, color) cells rendered as patch vectors
one_hot(shape) ++ one_hot(color) + N(0, sigma^2). Task kinds:

  text_lm           Markov filler text with embedded "<color> implies <object>"
                    fact sentences (pretraining; facts appear ONLY here).
  caption           enumerate grid contents row-major: "<color> <shape> ..."
  perception_color  "color <row> <col> ?"   -> color word at that cell
  perception_count  "count <shape> ?"       -> digit (grid sized so <= 9)
  cognition_meaning "meaning <row> <col> ?" -> fact_map[color at cell]
  text_factqa       "<color> implies"       -> fact_map[color] (text-only)

Every instance is answerable from (image, fact_map) alone; ``oracle_answer``
is the rule-based reference. Generation is a pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ModelConfig
from .core import make_rng
from .model import MOD_IMAGE, MOD_PAD, MOD_TEXT, SequenceBatch

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
SHAPES = ("circle", "square", "triangle", "star")
OBJECTS = ("stop", "go", "water", "fire", "metal", "wood")
FILLERS = ("the", "a", "and", "cat", "dog", "bird", "tree", "sky", "runs", "sees")
DIGITS = tuple(str(i) for i in range(10))
KEYWORDS = ("color", "count", "meaning", "implies", "caption", "?")

VISUAL_KINDS = ("perception_color", "perception_count", "cognition_meaning")
ALL_KINDS = ("caption", "perception_color", "perception_count",
             "cognition_meaning", "text_lm", "text_factqa")


class Vocabulary:
    """Fixed word-level token enumeration; ids are stable across runs."""

    def __init__(self, grid_size: int = 3):
        self.grid_size = grid_size
        self.rows = tuple(f"row{i}" for i in range(grid_size))
        self.cols = tuple(f"col{i}" for i in range(grid_size))
        self.tokens = (("<pad>", "<bos>", "<eos>") + COLORS + SHAPES + DIGITS
                       + self.rows + self.cols + KEYWORDS + OBJECTS + FILLERS)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary enumeration")
        self.id = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id, self.bos_id, self.eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str]) -> list[int]:
        return [self.id[w] for w in words]

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.id, f, indent=0, sort_keys=False)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as f:
            mapping = json.load(f)
        grid_size = sum(1 for t in mapping if t.startswith("row"))
        vocab = cls(grid_size)
        if vocab.id != mapping:
            raise ValueError(f"{path} does not match the fixed vocabulary enumeration")
        return vocab


@dataclass
class SyntheticImage:
    grid: list[list[tuple[int, int]]]   # G x G of (shape_id, color_id)
    noise_seed: int
    sigma: float
    patch_vectors: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.patch_vectors is None:
            self.patch_vectors = render_patches(self.grid, self.noise_seed, self.sigma)

    @property
    def grid_size(self) -> int:
        return len(self.grid)


def render_patches(grid, noise_seed: int, sigma: float) -> np.ndarray:
    """one_hot(shape) ++ one_hot(color) per cell, row-major, plus noise."""
    g = len(grid)
    c_dim = len(SHAPES) + len(COLORS)
    out = np.zeros((g * g, c_dim))
    for r in range(g):
        for c in range(g):
            shape_id, color_id = grid[r][c]
            p = r * g + c
            out[p, shape_id] = 1.0
            out[p, len(SHAPES) + color_id] = 1.0
    if sigma > 0:
        out += make_rng(noise_seed).normal(0.0, sigma, size=out.shape)
    return out


@dataclass
class TaskInstance:
    kind: str
    image: Optional[SyntheticImage]
    prompt: list[str]
    answer: list[str]


def random_fact_map(rng: np.random.Generator) -> dict[str, str]:
    """Color -> object assignment; permuted so it is a seed-dependent secret."""
    perm = rng.permutation(len(OBJECTS))
    return {c: OBJECTS[perm[i]] for i, c in enumerate(COLORS)}


def _random_grid(rng: np.random.Generator, g: int) -> list[list[tuple[int, int]]]:
    return [[(int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS))))
             for _ in range(g)] for _ in range(g)]


def _random_image(rng: np.random.Generator, g: int, sigma: float) -> SyntheticImage:
    grid = _random_grid(rng, g)
    return SyntheticImage(grid, int(rng.integers(2**63)), sigma)


def _markov_table(rng: np.random.Generator, fanout: int = 3) -> list[list[int]]:
    n = len(FILLERS)
    return [sorted(rng.choice(n, size=fanout, replace=False).tolist()) for _ in range(n)]


def _filler_sentence(rng: np.random.Generator, table, length: int) -> list[str]:
    w = int(rng.integers(len(FILLERS)))
    out = [FILLERS[w]]
    for _ in range(length - 1):
        w = table[w][int(rng.integers(len(table[w])))]
        out.append(FILLERS[w])
    return out


def gen_pretrain_corpus(rng: np.random.Generator, n_seqs: int,
                        fact_map: dict[str, str], n_heldout: Optional[int] = None,
                        max_tokens: int = 30):
    """Text-LM sequences with round-robin fact injection.

    Facts are scheduled so every (color, object) pair occurs at least
    ceil(n_seqs / 20) times. Each sequence also carries one counting
    sentence "<digit> <filler>" so digit tokens exist in the backbone's
    output distribution (count answers would otherwise fight a head row
    that pretraining only ever suppressed). Returns (train, heldout).
    """
    if n_seqs < 1:
        raise ValueError("n_seqs must be >= 1")
    if n_heldout is None:
        n_heldout = max(8, n_seqs // 10)
    table = _markov_table(rng)
    facts_per_seq = 2 if n_seqs >= 6 else len(COLORS)
    fact_cursor = 0

    def one_sequence(with_facts: bool) -> TaskInstance:
        nonlocal fact_cursor
        sentences = []
        if with_facts:
            for _ in range(facts_per_seq):
                color = COLORS[fact_cursor % len(COLORS)]
                fact_cursor += 1
                sentences.append([color, "implies", fact_map[color]])
        sentences.append([DIGITS[int(rng.integers(10))],
                          FILLERS[int(rng.integers(len(FILLERS)))]])
        while sum(len(s) for s in sentences) < max_tokens - 6:
            sentences.append(_filler_sentence(rng, table, int(rng.integers(4, 8))))
        order = rng.permutation(len(sentences))
        tokens = [w for j in order for w in sentences[j]][:max_tokens]
        return TaskInstance("text_lm", None, [], tokens)

    train = [one_sequence(True) for _ in range(n_seqs)]
    heldout = [one_sequence(True) for _ in range(n_heldout)]
    return train, heldout


def gen_visual_sft(rng: np.random.Generator, n_examples: int,
                   mix: dict[str, float], fact_map: dict[str, str],
                   grid_size: int = 3, sigma: float = 0.02) -> list[TaskInstance]:
    """Perception/cognition instruction instances at the given kind mix."""
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError(f"mix proportions must sum to 1, got {sum(mix.values())}")
    unknown = set(mix) - set(VISUAL_KINDS)
    if unknown:
        raise ValueError(f"unknown task kinds in mix: {sorted(unknown)}")
    if grid_size * grid_size > 9:
        raise ValueError("grid too large: counts could exceed a single digit")
    kinds = sorted(mix)
    counts = {k: int(n_examples * mix[k]) for k in kinds}
    short = n_examples - sum(counts.values())
    for k in kinds[:short]:
        counts[k] += 1
    pool = [k for k in kinds for _ in range(counts[k])]
    order = rng.permutation(len(pool))

    out = []
    for j in order:
        kind = pool[j]
        img = _random_image(rng, grid_size, sigma)
        if kind == "perception_color":
            r, c = int(rng.integers(grid_size)), int(rng.integers(grid_size))
            prompt = ["color", f"row{r}", f"col{c}", "?"]
            answer = [COLORS[img.grid[r][c][1]]]
        elif kind == "perception_count":
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            prompt = ["count", shape, "?"]
            answer = [_count_answer(img, shape)]
        else:  # cognition_meaning
            r, c = int(rng.integers(grid_size)), int(rng.integers(grid_size))
            prompt = ["meaning", f"row{r}", f"col{c}", "?"]
            answer = [fact_map[COLORS[img.grid[r][c][1]]]]
        out.append(TaskInstance(kind, img, prompt, answer))
    return out


def _count_answer(img: SyntheticImage, shape: str) -> str:
    n = sum(1 for row in img.grid for (s, _) in row if SHAPES[s] == shape)
    if n > 9:
        raise ValueError(f"count {n} exceeds a single digit")
    return str(n)


def gen_caption_data(rng: np.random.Generator, n_examples: int,
                     grid_size: int = 3, sigma: float = 0.02) -> list[TaskInstance]:
    """Captions enumerate grid contents row-major as "<color> <shape>" pairs."""
    out = []
    for _ in range(n_examples):
        img = _random_image(rng, grid_size, sigma)
        out.append(TaskInstance("caption", img, ["caption", "?"], _caption_of(img)))
    return out


def _caption_of(img: SyntheticImage) -> list[str]:
    words = []
    for row in img.grid:
        for (s, c) in row:
            words += [COLORS[c], SHAPES[s]]
    return words


def gen_fact_qa(rng: np.random.Generator, n_examples: int,
                fact_map: dict[str, str]) -> list[TaskInstance]:
    """Text-only fact completion probes (backbone-knowledge retention)."""
    table = _markov_table(rng)
    out = []
    for i in range(n_examples):
        color = COLORS[i % len(COLORS)]
        prefix = _filler_sentence(rng, table, int(rng.integers(3))) \
            if rng.random() < 0.5 else []
        out.append(TaskInstance("text_factqa", None, prefix + [color, "implies"],
                                [fact_map[color]]))
    return out


def _coords(prompt: list[str]) -> tuple[int, int]:
    return int(prompt[1][len("row"):]), int(prompt[2][len("col"):])


def oracle_answer(inst: TaskInstance, fact_map: dict[str, str]) -> list[str]:
    """Rule-based reference answer computed from (image, fact_map) alone."""
    if inst.kind == "perception_color":
        r, c = _coords(inst.prompt)
        return [COLORS[inst.image.grid[r][c][1]]]
    if inst.kind == "perception_count":
        return [_count_answer(inst.image, inst.prompt[1])]
    if inst.kind == "cognition_meaning":
        r, c = _coords(inst.prompt)
        return [fact_map[COLORS[inst.image.grid[r][c][1]]]]
    if inst.kind == "caption":
        return _caption_of(inst.image)
    if inst.kind == "text_factqa":
        return [fact_map[inst.prompt[-2]]]
    if inst.kind == "text_lm":
        return list(inst.answer)
    raise ValueError(f"unknown task kind {inst.kind!r}")


def save_dataset(instances: list[TaskInstance], path) -> None:
    with open(path, "w") as f:
        for inst in instances:
            rec = {"kind": inst.kind, "grid": None, "noise_seed": None, "sigma": None,
                   "prompt_tokens": inst.prompt, "answer_tokens": inst.answer}
            if inst.image is not None:
                rec["grid"] = [[list(cell) for cell in row] for row in inst.image.grid]
                rec["noise_seed"] = inst.image.noise_seed
                rec["sigma"] = inst.image.sigma
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path) -> list[TaskInstance]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            img = None
            if rec["grid"] is not None:
                grid = [[tuple(cell) for cell in row] for row in rec["grid"]]
                img = SyntheticImage(grid, rec["noise_seed"], rec["sigma"])
            out.append(TaskInstance(rec["kind"], img, rec["prompt_tokens"],
                                    rec["answer_tokens"]))
    return out


def assemble_batch(instances: list[TaskInstance], vocab: Vocabulary,
                   cfg: ModelConfig, include_answer: bool = True,
                   pad_to: Optional[int] = None) -> SequenceBatch:
    """Pack instances into [BOS, patches, prompt, answer, EOS, PAD...] arrays.

    Answer tokens plus EOS carry the loss mask; prompts and patches never do.
    With include_answer=False only the decode prefix is packed.
    """
    if not instances:
        raise ValueError("cannot assemble an empty batch")
    B = len(instances)
    P = cfg.n_patches
    rows = []
    for inst in instances:
        toks = ["<bos>"]
        mods = [MOD_TEXT]
        if inst.image is not None:
            if inst.image.grid_size ** 2 != P:
                raise ValueError("image patch count does not match config.n_patches")
            toks += ["<pad>"] * P          # placeholder ids; embeddings come from patches
            mods += [MOD_IMAGE] * P
        toks += inst.prompt
        mods += [MOD_TEXT] * len(inst.prompt)
        loss_start = len(toks)
        if include_answer:
            toks += inst.answer + ["<eos>"]
            mods += [MOD_TEXT] * (len(inst.answer) + 1)
        rows.append((vocab.encode(toks), mods, loss_start))

    T = max(len(r[0]) for r in rows)
    if pad_to is not None:
        if pad_to < T:
            raise ValueError(f"pad_to {pad_to} shorter than longest row {T}")
        T = pad_to
    if T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")

    ids = np.full((B, T), vocab.pad_id, dtype=np.int64)
    mod = np.full((B, T), MOD_PAD, dtype=np.int8)
    loss = np.zeros((B, T), dtype=bool)
    patches = np.zeros((B, P, cfg.patch_dim))
    for b, (inst, (toks, mods, loss_start)) in enumerate(zip(instances, rows)):
        n = len(toks)
        ids[b, :n] = toks
        mod[b, :n] = mods
        if include_answer:
            loss[b, loss_start:n] = True
        if inst.image is not None:
            pv = inst.image.patch_vectors
            if pv.shape[1] != cfg.patch_dim:
                raise ValueError("patch dim does not match config.patch_dim")
            patches[b] = pv
    return SequenceBatch(ids, patches, mod, loss)
