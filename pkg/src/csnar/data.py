"""Synthetic code-switching corpus generation and manifest I/O.

The generator builds a small Mandarin-like inventory of CJK characters
mapped surjectively onto fewer pinyin syllables (so homophones are
guaranteed), a bigram successor structure over characters (so context can
disambiguate homophones), and an English word list. Acoustics are
template vectors per pronunciation unit plus Gaussian noise; homophones
share a template, which is exactly what makes character identity
unrecoverable from audio alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import write_arrays
from .vocab import PinyinTable, Vocabulary, build_vocab, is_cjk_char, tokenize

_ONSETS = (
    "b", "d", "g", "m", "n", "l", "s", "t", "w", "y", "f", "h",
    "k", "p", "r", "j", "q", "x", "z", "c", "zh", "ch", "sh",
)
_RIMES = ("a", "o", "e", "i", "u", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong")

_ENGLISH_WORDS = tuple(
    """happy day work time people good life world school friend party music
    night morning coffee lunch dinner movie game phone computer office home
    city street train plane ticket money market store book paper letter
    email meeting project team boss holiday weekend summer winter spring
    autumn family mother father sister brother teacher student doctor
    question answer problem idea story news photo video travel hotel beach
    mountain river garden flower animal weather rain wind cloud light dark
    color sound voice language number minute second hour week month year
    today tomorrow yesterday always never maybe really pretty little big
    small quiet funny serious busy free early late""".split()
)


@dataclass
class SynthConfig:
    num_chars: int = 48
    num_pinyin: int = 16
    num_eng_words: int = 24
    num_train: int = 2000
    num_val: int = 200
    num_test: int = 200
    min_len: int = 6
    max_len: int = 12
    switch_prob: float = 0.35
    feature_dim: int = 16
    min_dur: int = 5
    max_dur: int = 9
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_pinyin >= self.num_chars:
            raise ValueError(
                f"num_pinyin ({self.num_pinyin}) must be smaller than num_chars "
                f"({self.num_chars}) to force homophones"
            )
        if self.num_pinyin < 1 or self.num_eng_words < 1:
            raise ValueError("inventories must be nonempty")
        if self.num_pinyin > len(_ONSETS) * len(_RIMES):
            raise ValueError("requested pinyin inventory exceeds syllable combinations")
        if self.num_eng_words > len(_ENGLISH_WORDS):
            raise ValueError(f"at most {len(_ENGLISH_WORDS)} English words available")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 1 <= self.min_dur <= self.max_dur:
            raise ValueError("need 1 <= min_dur <= max_dur")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError("switch_prob must lie in [0, 1]")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")


def _syllables(n: int) -> list[str]:
    out = []
    for rime in _RIMES:
        for onset in _ONSETS:
            out.append(onset + rime)
            if len(out) == n:
                return out
    return out


def _group_layout(num_chars: int, num_pinyin: int) -> tuple[int, int, int]:
    """Split the inventory into anchors and equal-size homophone groups.

    Returns (num_anchors, num_groups, group_size) with
    anchors + groups * size == num_chars and anchors + groups == num_pinyin.
    Groups share one size so group-to-group successor chains stay
    index-aligned.
    """
    extra = num_chars - num_pinyin
    for size in range(min(8, extra + 1), 1, -1):
        if extra % (size - 1):
            continue
        groups = extra // (size - 1)
        anchors = num_pinyin - groups
        if groups >= 1 and anchors >= 1:
            return anchors, groups, size
    raise ValueError(
        f"cannot split {num_chars} characters over {num_pinyin} syllables into "
        "anchors plus equal homophone groups; adjust the inventory sizes"
    )


class CorpusSpec:
    """Deterministic corpus structure derived purely from the config seed.

    Characters split into anchors (pinyin uniquely identifies them) and
    homophone groups of equal size. Successors are built so that the
    pinyin projection of a character's successor set is identical across
    its homophone group: pronunciation context alone carries no
    information about which group member occurred, while one resolved
    character pins its whole chain. That is the property the masked
    decoder stages exist to exploit.
    """

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 101])
        self.chars = [chr(0x4E00 + i) for i in range(cfg.num_chars)]
        self.pinyins = _syllables(cfg.num_pinyin)
        words = [w for w in _ENGLISH_WORDS if w not in set(self.pinyins)]
        self.eng_words = words[: cfg.num_eng_words]
        if len(self.eng_words) < cfg.num_eng_words:
            raise ValueError("not enough English words after pinyin collision filtering")

        n_anchor, n_groups, gsize = _group_layout(cfg.num_chars, cfg.num_pinyin)
        chars = list(self.chars)
        self.anchors = chars[:n_anchor]
        members = chars[n_anchor:]
        self.groups = [
            members[g * gsize : (g + 1) * gsize] for g in range(n_groups)
        ]

        mapping = {}
        for j, ch in enumerate(self.anchors):
            mapping[ch] = self.pinyins[j]
        for g, group in enumerate(self.groups):
            for ch in group:
                mapping[ch] = self.pinyins[n_anchor + g]
        self.table = PinyinTable(mapping)

        # group-to-group chains: member i of group g is followed by member
        # i of the next group, or by the group's shared anchor, so the
        # successor set's pinyin projection is the same for every member
        succ: dict[str, list[str]] = {}
        group_anchor = [
            self.anchors[int(rng.integers(n_anchor))] for _ in range(n_groups)
        ]
        for g, group in enumerate(self.groups):
            nxt = self.groups[(g + 1) % n_groups]
            shift = 1 if n_groups == 1 else 0  # self-paired groups rotate
            for i, ch in enumerate(group):
                succ[ch] = [nxt[(i + shift) % gsize], group_anchor[g]]
        # anchors pin a specific group member and chain to other anchors
        for j, ch in enumerate(self.anchors):
            g = int(rng.integers(n_groups))
            i = int(rng.integers(gsize))
            other = self.anchors[(j + 1) % n_anchor]
            if other == ch:
                other = self.groups[g][(i + 1) % gsize]
            succ[ch] = [self.groups[g][i], other]
        self.successors = succ

        units = sorted(self.pinyins) + sorted(self.eng_words)
        trng = np.random.default_rng([cfg.seed, 202])
        self.templates = {u: trng.normal(0.0, 1.0, cfg.feature_dim) for u in units}

    def unit_of(self, token: str) -> str:
        """Pronunciation unit behind a token: its syllable for Mandarin chars."""
        if len(token) == 1 and is_cjk_char(token):
            return self.table.pinyin_of(token)
        if token not in self.templates:
            raise ValueError(f"token {token!r} is outside the corpus inventory")
        return token

    def homophone_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {p: [] for p in self.pinyins}
        for ch in self.chars:
            groups[self.table.mapping[ch]].append(ch)
        return groups

    def meta_dict(self) -> dict:
        return {
            "chars": self.chars,
            "pinyins": self.pinyins,
            "eng_words": self.eng_words,
            "anchors": self.anchors,
            "char_pinyin": dict(self.table.mapping),
            "successors": {k: list(v) for k, v in self.successors.items()},
            "homophone_groups": self.homophone_groups(),
        }


def _sample_transcript(spec: CorpusSpec, rng: np.random.Generator) -> str:
    cfg = spec.cfg
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    tokens: list[str] = []
    mandarin = bool(rng.random() < 0.5)
    prev: str | None = None
    for _ in range(length):
        if prev is not None and rng.random() < cfg.switch_prob:
            mandarin = not mandarin
        if mandarin:
            if prev is not None and prev in spec.successors:
                choices = spec.successors[prev]
                tok = choices[int(rng.integers(len(choices)))]
            elif rng.random() < 0.6:
                # Mandarin runs tend to open on an anchor character, the
                # way real text leans on frequent unambiguous words
                tok = spec.anchors[int(rng.integers(len(spec.anchors)))]
            else:
                tok = spec.chars[int(rng.integers(len(spec.chars)))]
        else:
            tok = spec.eng_words[int(rng.integers(len(spec.eng_words)))]
            while tok == prev:
                tok = spec.eng_words[int(rng.integers(len(spec.eng_words)))]
        tokens.append(tok)
        prev = tok
    # Mandarin runs read like text, English words stay separated
    out = []
    for i, tok in enumerate(tokens):
        if i and not (is_cjk_char(tok[0]) and is_cjk_char(tokens[i - 1][0])):
            out.append(" ")
        out.append(tok)
    return "".join(out)


def synth_features(
    transcript: str, spec: CorpusSpec | SynthConfig, rng: np.random.Generator
) -> np.ndarray:
    """Template-plus-noise features; homophones share templates by design."""
    if isinstance(spec, SynthConfig):
        spec = CorpusSpec(spec)
    cfg = spec.cfg
    chunks = []
    for token in tokenize(transcript):
        template = spec.templates[spec.unit_of(token)]
        dur = int(rng.integers(cfg.min_dur, cfg.max_dur + 1))
        block = np.tile(template, (dur, 1))
        if cfg.noise_std > 0:
            block = block + rng.normal(0.0, cfg.noise_std, block.shape)
        chunks.append(block)
    if not chunks:
        return np.zeros((0, cfg.feature_dim))
    return np.concatenate(chunks, axis=0)


def spec_augment(
    features: np.ndarray,
    num_time_masks: int,
    time_width: int,
    num_freq_masks: int,
    freq_width: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero random time spans and feature channels on a copy of the input."""
    T, dim = features.shape
    if time_width > T or freq_width > dim:
        raise ValueError(
            f"mask widths ({time_width}, {freq_width}) exceed feature shape {features.shape}"
        )
    out = features.copy()
    for _ in range(num_time_masks):
        if time_width == 0:
            continue
        start = int(rng.integers(0, T - time_width + 1))
        out[start : start + time_width, :] = 0.0
    for _ in range(num_freq_masks):
        if freq_width == 0:
            continue
        start = int(rng.integers(0, dim - freq_width + 1))
        out[:, start : start + freq_width] = 0.0
    return out


@dataclass
class ManifestRecord:
    utt_id: str
    text: str
    feats_path: str
    num_frames: int


class ManifestError(IOError):
    pass


def write_manifest(records: list[ManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "utt_id": r.utt_id,
                        "text": r.text,
                        "feats_path": r.feats_path,
                        "num_frames": r.num_frames,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_manifest(path, check_files: bool = True) -> list[ManifestRecord]:
    """Read and validate a JSON-lines manifest.

    Feature paths are stored relative to the manifest's directory; with
    ``check_files`` each referenced file must exist.
    """
    path = Path(path)
    base = path.parent
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: record {lineno}: bad JSON: {e}") from None
            for key in ("utt_id", "text", "feats_path", "num_frames"):
                if key not in rec:
                    raise ManifestError(f"{path}: record {lineno}: missing field {key!r}")
            if rec["utt_id"] in seen:
                raise ManifestError(
                    f"{path}: record {lineno}: duplicate utt_id {rec['utt_id']!r}"
                )
            seen.add(rec["utt_id"])
            if check_files and not (base / rec["feats_path"]).exists():
                raise ManifestError(
                    f"{path}: record {lineno}: feature file {rec['feats_path']!r} not found"
                )
            records.append(
                ManifestRecord(
                    rec["utt_id"], rec["text"], rec["feats_path"], int(rec["num_frames"])
                )
            )
    return records


@dataclass
class GeneratedCorpus:
    out_dir: Path
    manifests: dict[str, list[ManifestRecord]]
    manifest_paths: dict[str, Path]
    char_vocab: Vocabulary
    pinyin_vocab: Vocabulary
    table: PinyinTable
    spec: CorpusSpec


def gen_corpus(cfg: SynthConfig, out_dir) -> GeneratedCorpus:
    """Generate train/val/test splits, features, vocabularies, and the table.

    Everything (transcripts, templates, noise) is a pure function of the
    config, so regenerating with the same seed is byte-identical.
    """
    out_dir = Path(out_dir)
    feats_dir = out_dir / "feats"
    feats_dir.mkdir(parents=True, exist_ok=True)
    spec = CorpusSpec(cfg)

    split_sizes = {"train": cfg.num_train, "val": cfg.num_val, "test": cfg.num_test}
    manifests: dict[str, list[ManifestRecord]] = {}
    all_lines: list[str] = []
    for split_idx, (split, size) in enumerate(split_sizes.items()):
        text_rng = np.random.default_rng([cfg.seed, 301 + split_idx])
        records = []
        for i in range(size):
            utt_id = f"{split}-{i:05d}"
            transcript = _sample_transcript(spec, text_rng)
            frng = np.random.default_rng([cfg.seed, 401 + split_idx, i])
            feats = synth_features(transcript, spec, frng)
            rel = f"feats/{utt_id}.mccs"
            write_arrays(out_dir / rel, {"feats": feats}, {"utt_id": utt_id})
            records.append(ManifestRecord(utt_id, transcript, rel, feats.shape[0]))
            all_lines.append(transcript)
        manifests[split] = records

    char_vocab, pinyin_vocab = build_vocab(all_lines, spec.table)

    manifest_paths = {}
    for split, records in manifests.items():
        p = out_dir / f"{split}.jsonl"
        write_manifest(records, p)
        manifest_paths[split] = p
    char_vocab.save(out_dir / "char_vocab.tsv")
    pinyin_vocab.save(out_dir / "pinyin_vocab.tsv")
    spec.table.save(out_dir / "pinyin_table.tsv")
    (out_dir / "corpus_meta.json").write_text(
        json.dumps(spec.meta_dict(), ensure_ascii=False, indent=2), encoding="utf-8"
    )
    return GeneratedCorpus(
        out_dir, manifests, manifest_paths, char_vocab, pinyin_vocab, spec.table, spec
    )


def load_features(manifest_path, record: ManifestRecord) -> np.ndarray:
    from .container import read_arrays

    arrays, _ = read_arrays(Path(manifest_path).parent / record.feats_path)
    return arrays["feats"]
