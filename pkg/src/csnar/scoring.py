"""Error-rate scoring and significance testing.

Token error rate runs over mixed units (characters plus words) with
substitutions and deletions attributed to the reference token's language
and insertions to the hypothesis token's. Pinyin-level scoring maps both
sides through the pronunciation table first, which forgives homophone
swaps. Significance uses the exact binomial McNemar test on sentence
correctness and a paired two-sided t-test on per-utterance error rates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

from .vocab import PinyinTable, Vocabulary, map_tokens_to_pinyin

log = logging.getLogger(__name__)

MATCH = "match"
SUB = "sub"
DEL = "del"
INS = "ins"


@dataclass(frozen=True)
class AlignmentOp:
    kind: str  # match | sub | del | ins
    ref: str | None
    hyp: str | None


def align(ref: list[str], hyp: list[str]) -> list[AlignmentOp]:
    """Minimal unit-cost alignment with a deterministic backtrace.

    Ties prefer the diagonal (match, then substitution), then deletion,
    then insertion.
    """
    m, n = len(ref), len(hyp)
    cost = [[0] * (n + 1) for _ in range(m + 1)]
    move = [[0] * (n + 1) for _ in range(m + 1)]  # 0 diag, 1 up/del, 2 left/ins
    for i in range(1, m + 1):
        cost[i][0] = i
        move[i][0] = 1
    for j in range(1, n + 1):
        cost[0][j] = j
        move[0][j] = 2
    for i in range(1, m + 1):
        ref_tok = ref[i - 1]
        row, above = cost[i], cost[i - 1]
        mrow = move[i]
        for j in range(1, n + 1):
            diag = above[j - 1] + (ref_tok != hyp[j - 1])
            up = above[j] + 1
            left = row[j - 1] + 1
            best = diag
            which = 0
            if up < best:
                best, which = up, 1
            if left < best:
                best, which = left, 2
            row[j] = best
            mrow[j] = which
    ops: list[AlignmentOp] = []
    i, j = m, n
    while i > 0 or j > 0:
        which = move[i][j]
        if which == 0:
            r, h = ref[i - 1], hyp[j - 1]
            ops.append(AlignmentOp(MATCH if r == h else SUB, r, h))
            i, j = i - 1, j - 1
        elif which == 1:
            ops.append(AlignmentOp(DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append(AlignmentOp(INS, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def _new_tag_counts() -> dict[str, int]:
    return {"sub": 0, "del": 0, "ins": 0, "ref": 0}


@dataclass
class ErrorReport:
    """Aggregated alignment counts with per-language attribution."""

    ref_tokens: int = 0
    sub: int = 0
    deletions: int = 0
    insertions: int = 0
    per_tag: dict[str, dict[str, int]] = field(default_factory=dict)
    per_utt: dict[str, dict] = field(default_factory=dict)
    missing_hyps: int = 0

    @property
    def errors(self) -> int:
        return self.sub + self.deletions + self.insertions

    @property
    def ter(self) -> float:
        return self.errors / self.ref_tokens if self.ref_tokens else 0.0

    def tag_counts(self, tag: str) -> dict[str, int]:
        return self.per_tag.get(tag, _new_tag_counts())

    def tag_ter(self, tag: str) -> float:
        c = self.tag_counts(tag)
        return (c["sub"] + c["del"] + c["ins"]) / c["ref"] if c["ref"] else 0.0

    def sentence_flags(self) -> dict[str, bool]:
        return {u: rec["correct"] for u, rec in self.per_utt.items()}

    def utterance_error_rates(self) -> dict[str, float]:
        return {
            u: rec["errors"] / max(rec["ref_len"], 1) for u, rec in self.per_utt.items()
        }

    def to_dict(self) -> dict:
        return {
            "ref_tokens": self.ref_tokens,
            "sub": self.sub,
            "del": self.deletions,
            "ins": self.insertions,
            "errors": self.errors,
            "ter": self.ter,
            "per_tag": {t: dict(c) for t, c in sorted(self.per_tag.items())},
            "missing_hyps": self.missing_hyps,
        }


def score_corpus(
    refs: dict[str, list[str]],
    hyps: dict[str, list[str]],
    tag_of,
) -> ErrorReport:
    """Score matched utterances; ``tag_of`` maps a token to its language tag.

    Utterances without a hypothesis count as all deletions (with a
    warning); hypothesis-only utterances are an error since nothing pairs
    with them.
    """
    if callable(getattr(tag_of, "tag_of", None)):
        tag_of = tag_of.tag_of
    extra = set(hyps) - set(refs)
    if extra:
        raise ValueError(f"hypotheses with no reference: {sorted(extra)[:5]}")
    report = ErrorReport()
    for utt_id in sorted(refs):
        ref = refs[utt_id]
        hyp = hyps.get(utt_id)
        if hyp is None:
            report.missing_hyps += 1
            hyp = []
        ops = align(ref, hyp)
        errors = 0
        for op in ops:
            if op.kind == MATCH:
                tag = tag_of(op.ref)
                report.per_tag.setdefault(tag, _new_tag_counts())["ref"] += 1
                continue
            errors += 1
            if op.kind == SUB:
                tag = tag_of(op.ref)
                cnt = report.per_tag.setdefault(tag, _new_tag_counts())
                cnt["sub"] += 1
                cnt["ref"] += 1
                report.sub += 1
            elif op.kind == DEL:
                tag = tag_of(op.ref)
                cnt = report.per_tag.setdefault(tag, _new_tag_counts())
                cnt["del"] += 1
                cnt["ref"] += 1
                report.deletions += 1
            else:
                tag = tag_of(op.hyp)
                report.per_tag.setdefault(tag, _new_tag_counts())["ins"] += 1
                report.insertions += 1
        report.ref_tokens += len(ref)
        report.per_utt[utt_id] = {
            "errors": errors,
            "ref_len": len(ref),
            "correct": errors == 0,
        }
    if report.missing_hyps:
        log.warning("%d utterances had no hypothesis; scored as deletions", report.missing_hyps)
    return report


def per_score(
    refs: dict[str, list[str]],
    hyps: dict[str, list[str]],
    table: PinyinTable,
    tag_of=None,
) -> tuple[float, ErrorReport]:
    """Pinyin-level error rate: map both sides through the table, then TER.

    Returns the mapped corpus TER and its full report. The table must
    cover every Mandarin character on either side.
    """
    mapped_refs = {u: map_tokens_to_pinyin(t, table) for u, t in refs.items()}
    mapped_hyps = {u: map_tokens_to_pinyin(t, table) for u, t in hyps.items()}
    syllables = set(table.mapping.values())
    if tag_of is not None and callable(getattr(tag_of, "tag_of", None)):
        tag_of = tag_of.tag_of

    def mapped_tag(token: str) -> str:
        if token in syllables:
            return "PINYIN"
        return tag_of(token) if tag_of is not None else "ENG"

    report = score_corpus(mapped_refs, mapped_hyps, mapped_tag)
    return report.ter, report


def mcnemar(flags_a: list[bool], flags_b: list[bool]) -> float:
    """Exact two-sided McNemar p-value over paired correctness flags.

    Uses the binomial distribution over the b + c discordant pairs at
    p = 1/2: twice the smaller tail, capped at 1.
    """
    if len(flags_a) != len(flags_b):
        raise ValueError("paired flag lists differ in length")
    b = sum(1 for x, y in zip(flags_a, flags_b) if x and not y)
    c = sum(1 for x, y in zip(flags_a, flags_b) if not x and y)
    n = b + c
    if n == 0:
        log.warning("no discordant pairs; McNemar p-value is 1 by convention")
        return 1.0
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1))
    # int / int division is exactly rounded in Python, so this stays
    # accurate even when 2**n exceeds the float range
    return min(1.0, 2.0 * (tail / 2**n))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta function."""
    max_iter = 300
    eps = 3e-16
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise FloatingPointError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) via the continued fraction."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    front = math.exp(
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(|T| >= t) for Student's t with ``df`` degrees of freedom."""
    t = abs(float(t))
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = df / (df + t * t)
    return betainc(df / 2.0, 0.5, x)


def paired_ttest(errs_a: list[float], errs_b: list[float]) -> float:
    """Two-sided paired t-test p-value over per-utterance error rates."""
    if len(errs_a) != len(errs_b):
        raise ValueError("paired samples differ in length")
    n = len(errs_a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    diffs = [a - b for a, b in zip(errs_a, errs_b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return 1.0
        log.warning("zero-variance nonzero differences; p-value collapses to 0")
        return 0.0
    t = mean / math.sqrt(var / n)
    return student_t_sf(t, n - 1)


# ---------------------------------------------------------------------------
# Report formatting
# ---------------------------------------------------------------------------

_COLUMNS = (
    ("ter_all", "TER:All"),
    ("ter_man", "TER:Man"),
    ("per", "TER:Pinyin"),
    ("ter_eng", "TER:Eng"),
    ("sub_all", "Sub:All"),
    ("del_all", "Del:All"),
    ("del_man", "Del:Man"),
    ("del_eng", "Del:Eng"),
    ("ins_all", "Ins:All"),
)


def error_breakdown(report: ErrorReport, per: float | None = None) -> dict:
    """Flatten a report into the standard analysis columns (percentages)."""
    man = report.tag_counts("MAN_CHAR")
    eng = report.tag_counts("ENG")
    n = report.ref_tokens or 1
    out = {
        "ter_all": 100.0 * report.ter,
        "ter_man": 100.0 * report.tag_ter("MAN_CHAR"),
        "per": 100.0 * per if per is not None else None,
        "ter_eng": 100.0 * report.tag_ter("ENG"),
        "sub_all": 100.0 * report.sub / n,
        "del_all": 100.0 * report.deletions / n,
        "del_man": 100.0 * man["del"] / n,
        "del_eng": 100.0 * eng["del"] / n,
        "ins_all": 100.0 * report.insertions / n,
    }
    return out


def format_breakdown_table(rows: dict[str, dict]) -> str:
    """Aligned text table, one row per system, standard column layout."""
    headers = ["Method"] + [h for _, h in _COLUMNS]
    lines = []
    table_rows = []
    for name, row in rows.items():
        cells = [name]
        for key, _ in _COLUMNS:
            v = row.get(key)
            cells.append("-" if v is None else f"{v:.1f}")
        table_rows.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in table_rows)) if table_rows else len(h)
              for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for cells in table_rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


def report_to_json(report: ErrorReport, per: float | None = None) -> str:
    payload = report.to_dict()
    payload["breakdown"] = error_breakdown(report, per)
    return json.dumps(payload, ensure_ascii=False, indent=2)
