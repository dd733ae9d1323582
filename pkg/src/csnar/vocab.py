"""Token inventories, mixed-unit tokenization, and the char->pinyin table.

Mandarin is tokenized per character and English per whitespace word; the
two inventories live side by side in one vocabulary with a language tag
per token. A second vocabulary replaces each Mandarin character with its
pinyin syllable, collapsing homophones onto a single token.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

MAN_CHAR = "MAN_CHAR"
PINYIN = "PINYIN"
ENG = "ENG"
SPECIAL = "SPECIAL"

LANG_TAGS = (MAN_CHAR, PINYIN, ENG, SPECIAL)

BLANK_TOKEN = "<blank>"
MASK_TOKEN = "<mask>"
UNK_TOKEN = "<unk>"
NOISE_TOKEN = "<noise>"
SPECIAL_TOKENS = (BLANK_TOKEN, MASK_TOKEN, UNK_TOKEN, NOISE_TOKEN)

_PINYIN_RE = re.compile(r"^[a-z]+[0-9]?$")

# CJK unified ideographs (base + extension A + compatibility block).
_CJK_RANGES = ((0x3400, 0x4DBF), (0x4E00, 0x9FFF), (0xF900, 0xFAFF))


def is_cjk_char(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


_TOKEN_RE = re.compile(
    "([㐀-䶿一-鿿豈-﫿])|([^\\s㐀-䶿一-鿿豈-﫿]+)"
)


def tokenize(text: str) -> list[str]:
    """Split into mixed units: one token per CJK codepoint, whitespace words elsewhere."""
    return [m.group(0) for m in _TOKEN_RE.finditer(text)]


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


class VocabError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Dense token inventory with a language tag per id.

    The four special tokens always occupy ids 0..3 in the order blank,
    mask, unk, noise.
    """

    tokens: list[str]
    tags: list[str]
    id_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise VocabError("tokens and tags length mismatch")
        self.id_of = {}
        for i, (tok, tag) in enumerate(zip(self.tokens, self.tags)):
            if tok in self.id_of:
                raise VocabError(f"duplicate token {tok!r} in vocabulary")
            if tag not in LANG_TAGS:
                raise VocabError(f"unknown language tag {tag!r} for token {tok!r}")
            self.id_of[tok] = i
        for name in SPECIAL_TOKENS:
            i = self.id_of.get(name)
            if i is None or self.tags[i] != SPECIAL:
                raise VocabError(f"special token {name!r} missing or not tagged SPECIAL")
        for tok, tag in zip(self.tokens, self.tags):
            if tag == MAN_CHAR and len(tok) != 1:
                raise VocabError(f"MAN_CHAR token {tok!r} is not a single character")
            if tag == PINYIN and not _PINYIN_RE.match(tok):
                raise VocabError(f"PINYIN token {tok!r} does not match [a-z]+[0-9]?")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def blank_id(self) -> int:
        return self.id_of[BLANK_TOKEN]

    @property
    def mask_id(self) -> int:
        return self.id_of[MASK_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.id_of[UNK_TOKEN]

    @property
    def noise_id(self) -> int:
        return self.id_of[NOISE_TOKEN]

    def tag_of(self, token: str) -> str:
        """Tag of a token; out-of-vocabulary strings fall back to a script heuristic."""
        i = self.id_of.get(token)
        if i is not None:
            return self.tags[i]
        if len(token) == 1 and is_cjk_char(token):
            return MAN_CHAR
        return ENG

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.unk_id
        return [self.id_of.get(t, unk) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, tag in zip(self.tokens, self.tags):
                f.write(f"{tok}\t{tag}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, tags = [], []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise VocabError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
            tokens.append(parts[0])
            tags.append(parts[1])
        return cls(tokens, tags)


@dataclass
class PinyinTable:
    """Total many-to-one map from Mandarin characters to pinyin syllables."""

    mapping: dict[str, str]

    def __post_init__(self):
        for ch, py in self.mapping.items():
            if len(ch) != 1 or not is_cjk_char(ch):
                raise VocabError(f"table key {ch!r} is not a single CJK character")
            if not _PINYIN_RE.match(py):
                raise VocabError(f"table value {py!r} for {ch!r} is not a pinyin syllable")

    def pinyin_of(self, char: str) -> str:
        try:
            return self.mapping[char]
        except KeyError:
            raise VocabError(f"character {char!r} has no pinyin table entry") from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for ch, py in self.mapping.items():
                f.write(f"{ch}\t{py}\n")

    @classmethod
    def load(cls, path) -> "PinyinTable":
        mapping: dict[str, str] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise VocabError(f"{path}:{lineno}: expected 'CHAR<TAB>pinyin', got {line!r}")
            ch, py = parts
            if ch in mapping and mapping[ch] != py:
                # Polyphones canonicalize to the first listed pronunciation.
                continue
            mapping.setdefault(ch, py)
        return cls(mapping)


def build_vocab(corpus_lines: list[str], table: PinyinTable) -> tuple[Vocabulary, Vocabulary]:
    """Build the character-level and pinyin-level vocabularies from transcripts.

    The character vocabulary holds every Mandarin character and English
    word seen in the corpus (specials first, then sorted characters, then
    sorted words). The pinyin vocabulary replaces characters with their
    mapped syllables, deduplicated, which collapses homophones.
    """
    chars: set[str] = set()
    words: set[str] = set()
    for line in corpus_lines:
        for tok in tokenize(line):
            if tok in SPECIAL_TOKENS:
                continue
            if len(tok) == 1 and is_cjk_char(tok):
                chars.add(tok)
            else:
                words.add(tok)
    for ch in sorted(chars):
        table.pinyin_of(ch)  # fail early, naming the uncovered character
    pinyins = sorted({table.mapping[ch] for ch in chars})
    eng = sorted(words)

    clash = set(pinyins) & set(eng)
    if clash:
        raise VocabError(
            f"English words collide with pinyin syllables: {sorted(clash)[:5]}"
        )

    char_tokens = list(SPECIAL_TOKENS) + sorted(chars) + eng
    char_tags = [SPECIAL] * 4 + [MAN_CHAR] * len(chars) + [ENG] * len(eng)
    pyin_tokens = list(SPECIAL_TOKENS) + pinyins + eng
    pyin_tags = [SPECIAL] * 4 + [PINYIN] * len(pinyins) + [ENG] * len(eng)
    return Vocabulary(char_tokens, char_tags), Vocabulary(pyin_tokens, pyin_tags)


def to_pinyin(
    char_ids: list[int],
    char_vocab: Vocabulary,
    pinyin_vocab: Vocabulary,
    table: PinyinTable,
) -> list[int]:
    """Map a character-vocab id sequence to the pinyin vocab, length preserved.

    Mandarin ids go through the table; English and special ids carry over
    by token-string identity.
    """
    out = []
    for i in char_ids:
        tok = char_vocab.tokens[i]
        if char_vocab.tags[i] == MAN_CHAR:
            tok = table.pinyin_of(tok)
        j = pinyin_vocab.id_of.get(tok)
        if j is None:
            raise VocabError(f"token {tok!r} missing from pinyin vocabulary")
        out.append(j)
    return out


def map_tokens_to_pinyin(tokens: list[str], table: PinyinTable) -> list[str]:
    """String-level variant of ``to_pinyin`` used by pinyin-level scoring."""
    out = []
    for tok in tokens:
        if len(tok) == 1 and is_cjk_char(tok):
            out.append(table.pinyin_of(tok))
        else:
            out.append(tok)
    return out
