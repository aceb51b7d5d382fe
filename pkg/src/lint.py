"""Consistency checks for tweet-specific UD annotation, plus anonymization and token-class statistics.

Rules only fire on annotation choices: a token the annotator marked as
non-syntactic (``discourse`` or ``list``), or a token that sits in a
retweet construction. The linter never decides whether a token should be
non-syntactic in the first place.
"""
from __future__ import annotations
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import emoji

from .conllu import Sentence, Token, Treebank, read_text
from .errors import AllowlistError
from .logger import get_logger

logger = get_logger(__name__)

NON_SYNTACTIC_RELATIONS = frozenset({"discourse", "list"})


class TokenClass(str, Enum):
    EMOTICON = "emoticon"
    RT_MARKER = "rt_marker"
    AT_MENTION = "at_mention"
    HASHTAG = "hashtag"
    URL = "url"
    TRUNCATED_WORD = "truncated_word"
    PLAIN = "plain"


_MENTION = re.compile(r"^@\w+$")
_HASHTAG = re.compile(r"^#\w+$")
_TLDS = r"(?:com|org|net|edu|gov|co|io|ly|me|gl|be|us|uk|tv|info|it|de|fr)"
_URL_TEXT = re.compile(
    rf"(?:https?://\S+|(?<![@\w])www\.\S+|(?<![@\w.-])[\w-]+(?:\.[\w-]+)*\.{_TLDS}\b(?:/\S*)?)",
    re.IGNORECASE,
)
_URL = re.compile(rf"^{_URL_TEXT.pattern}$", re.IGNORECASE)
_EYES = r"[8:=;xX]"
_NOSE = r"['`\-^o]?"
_EMOTICON = re.compile(
    rf"^(?:{_EYES}{_NOSE}[)\](\[dDpP/\\|*oO]+|[)\](\[dD/\\|]+{_NOSE}{_EYES}|<3+|</3|\^_*\^|-_+-|[oO]_[oO]|T_T)$"
)
EMOTICONS = frozenset({
    ":)", ":-)", ":(", ":-(", ":D", ":-D", ";)", ";-)", ":P", ":-P", ":p", ":'(", ":/", ":|",
    "xD", "XD", "<3", "</3", "^_^", "^^", "-_-", "o_O", "O_o", "T_T", ":*", ":o", ":O",
})
_TRUNCATION = ("…", "...")
_UNSPLIT_CONTRACTIONS = frozenset({"gonna", "wanna", "gotta", "gimme", "lemme", "dunno", "tryna", "outta"})
_MENTION_TEXT = re.compile(r"(?<![\w@])@\w+")
_EMOJI_JOINERS = str.maketrans("", "", "\ufe0f\u200d")


def is_emoticon(form: str) -> bool:
    if form in EMOTICONS or _EMOTICON.match(form):
        return True
    stripped = form.translate(_EMOJI_JOINERS)
    if not stripped:
        return False
    covered = sum(len(e["emoji"].translate(_EMOJI_JOINERS)) for e in emoji.emoji_list(stripped))
    return covered == len(stripped)


def classify_token(form: str, position: int = 0, length: int = 1) -> TokenClass:
    """Surface class of a token; ``position`` is 0-based within a sentence of ``length`` tokens."""
    if form in ("RT", "rt"):
        return TokenClass.RT_MARKER
    if _MENTION.match(form):
        return TokenClass.AT_MENTION
    if _HASHTAG.match(form):
        return TokenClass.HASHTAG
    if _URL.match(form):
        return TokenClass.URL
    if is_emoticon(form):
        return TokenClass.EMOTICON
    if position == length - 1 and form.endswith(_TRUNCATION) and form.rstrip(".…")[-1:].isalnum():
        return TokenClass.TRUNCATED_WORD
    return TokenClass.PLAIN


def anonymize(raw: str) -> str:
    """Replace at-mentions with ``@USER`` and URLs with ``URL``."""
    return _MENTION_TEXT.sub("@USER", _URL_TEXT.sub("URL", raw))


# ---------------------------------------------------------------------- rules

@dataclass(frozen=True)
class LintRule:
    code: str
    severity: str  # error | warning
    description: str


RULES: Dict[str, LintRule] = {r.code: r for r in (
    LintRule("url-list", "error", "non-syntactic URLs are attached with the list relation"),
    LintRule("nonsyntactic-discourse", "error", "non-syntactic tokens other than URLs use the discourse relation"),
    LintRule("nonsyntactic-upos", "error", "non-syntactic emoticons are SYM, other non-syntactic tokens are X"),
    LintRule("retweet", "error", "RT is X; its at-mention attaches to RT as discourse and its colon as punct"),
    LintRule("vocative-propn", "error", "vocative at-mentions are tagged PROPN"),
    LintRule("all-nonsyntactic", "error", "in an entirely non-syntactic tweet every token attaches to the first"),
    LintRule("unsplit-contraction", "warning", "contractions such as gonna or copular its are split into words"),
    LintRule("goeswith-order", "error", "goeswith dependents follow their heads"),
)}


@dataclass(frozen=True)
class LintViolation:
    rule: LintRule
    token_id: int
    message: str
    sent_id: str = ""

    @property
    def is_error(self) -> bool:
        return self.rule.severity == "error"

    def format(self) -> str:
        return f"{self.sent_id}\t{self.token_id}\t{self.rule.code}\t{self.message}"


def _violation(code: str, t: Token, message: str) -> LintViolation:
    return LintViolation(RULES[code], t.id, message)


def _check_retweet(s: Sentence, classes: Sequence[TokenClass]) -> List[LintViolation]:
    """RT followed by an at-mention, when the annotator treated it as a retweet prefix."""
    out: List[LintViolation] = []
    tokens = s.tokens
    for i, t in enumerate(tokens[:-1]):
        if classes[i] is not TokenClass.RT_MARKER or classes[i + 1] is not TokenClass.AT_MENTION:
            continue
        if t.deprel != "discourse" and t.upos != "X":
            continue
        mention = tokens[i + 1]
        # a non-syntactic RT with the wrong tag is already reported as nonsyntactic-upos
        if t.upos != "X" and t.deprel not in NON_SYNTACTIC_RELATIONS:
            out.append(_violation("retweet", t, f"RT tagged {t.upos}, expected X"))
        if mention.head != t.id or mention.deprel != "discourse":
            out.append(_violation(
                "retweet", mention,
                f"at-mention attached to {mention.head} as {mention.deprel}, expected discourse on RT",
            ))
        if i + 2 < len(tokens) and tokens[i + 2].form == ":":
            colon = tokens[i + 2]
            if colon.head != t.id or colon.deprel != "punct":
                out.append(_violation(
                    "retweet", colon,
                    f"colon attached to {colon.head} as {colon.deprel}, expected punct on RT",
                ))
    return out


def _entirely_non_syntactic(s: Sentence, classes: Sequence[TokenClass]) -> bool:
    if len(s) < 2 or not s.has_tree or any(c is TokenClass.PLAIN for c in classes):
        return False
    return all(t.head == 0 or t.deprel in NON_SYNTACTIC_RELATIONS for t in s.tokens)


def lint_sentence(s: Sentence) -> List[LintViolation]:
    """All rule violations in ``s``, in token order within each rule group."""
    n = len(s)
    classes = [classify_token(t.form, i, n) for i, t in enumerate(s.tokens)]
    in_range: Set[int] = {i for r in s.ranges for i in range(r.start, r.end + 1)}
    out: List[LintViolation] = []

    for t, cls in zip(s.tokens, classes):
        if cls is TokenClass.PLAIN or t.deprel not in NON_SYNTACTIC_RELATIONS:
            continue
        if cls is TokenClass.URL and t.deprel != "list":
            out.append(_violation("url-list", t, f"URL attached as {t.deprel}"))
        elif cls is not TokenClass.URL and t.deprel != "discourse":
            out.append(_violation("nonsyntactic-discourse", t, f"{cls.value} attached as {t.deprel}"))
        expected = "SYM" if cls is TokenClass.EMOTICON else "X"
        if t.upos != expected:
            out.append(_violation("nonsyntactic-upos", t, f"{cls.value} tagged {t.upos}, expected {expected}"))

    out.extend(_check_retweet(s, classes))

    for t, cls in zip(s.tokens, classes):
        if cls is TokenClass.AT_MENTION and t.deprel == "vocative" and t.upos != "PROPN":
            out.append(_violation("vocative-propn", t, f"vocative at-mention tagged {t.upos}"))

    if _entirely_non_syntactic(s, classes):
        first = s.tokens[0]
        if first.head != 0:
            out.append(_violation("all-nonsyntactic", first, f"first token attached to {first.head}, expected root"))
        for t in s.tokens[1:]:
            if t.head != 1:
                out.append(_violation("all-nonsyntactic", t, f"attached to {t.head}, expected 1"))

    for t in s.tokens:
        word = t.form.casefold()
        if word in _UNSPLIT_CONTRACTIONS and t.id not in in_range:
            out.append(_violation("unsplit-contraction", t, f"{t.form!r} is not split"))
        elif word == "its" and (t.upos in ("AUX", "VERB") or t.deprel == "cop"):
            out.append(_violation("unsplit-contraction", t, f"{t.form!r} used as a copula is not split"))
        if t.deprel == "goeswith" and t.head is not None and t.head > t.id:
            out.append(_violation("goeswith-order", t, f"goeswith head {t.head} follows its dependent"))

    sid = s.sent_id or ""
    return [LintViolation(v.rule, v.token_id, v.message, sid) for v in out]


# ------------------------------------------------------------------ allowlist

Allowlist = Set[Tuple[str, int, str]]


def load_allowlist(path: Optional[str]) -> Allowlist:
    """Read ``sent_id<TAB>token_id<TAB>code`` lines; ``#`` starts a comment."""
    if not path:
        return set()
    entries: Allowlist = set()
    for lineno, line in enumerate(read_text(path).splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise AllowlistError(path, lineno, "expected sent_id<TAB>token_id<TAB>code")
        sid, tid, code = fields[:3]
        if not tid.strip().isdecimal():
            raise AllowlistError(path, lineno, f"token id {tid!r} is not a number")
        if code not in RULES:
            raise AllowlistError(path, lineno, f"unknown rule code {code!r}")
        entries.add((sid, int(tid), code))
    logger.debug(f"Loaded {len(entries)} allowlisted violations from {path}")
    return entries


def write_allowlist(path: str, violations: Iterable[LintViolation]) -> int:
    """Freeze the error-level violations of a lint pass as an allowlist; returns the entry count."""
    entries = sorted({(v.sent_id, v.token_id, v.rule.code) for v in violations if v.is_error})
    lines = ["# sent_id\ttoken_id\tcode"] + [f"{sid}\t{tid}\t{code}" for sid, tid, code in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(entries)} allowlist entries to {path}")
    return len(entries)


@dataclass
class LintResult:
    violations: List[LintViolation]
    allowed: int = 0

    @property
    def errors(self) -> List[LintViolation]:
        return [v for v in self.violations if v.is_error]

    @property
    def warnings(self) -> List[LintViolation]:
        return [v for v in self.violations if not v.is_error]


def lint_treebank(tb: Treebank, allowlist: Optional[Allowlist] = None) -> LintResult:
    allowlist = allowlist or set()
    result = LintResult([])
    for s in tb:
        for v in lint_sentence(s):
            if (v.sent_id, v.token_id, v.rule.code) in allowlist:
                result.allowed += 1
            else:
                result.violations.append(v)
    logger.info(
        f"Lint: {len(result.errors)} errors, {len(result.warnings)} warnings, "
        f"{result.allowed} allowlisted, {len(tb)} sentences"
    )
    return result


# ------------------------------------------------------------------ statistics

@dataclass
class ClassShare:
    token_class: TokenClass
    syntactic: float
    non_syntactic: float

    @property
    def total(self) -> float:
        return self.syntactic + self.non_syntactic


@dataclass
class CorpusStats:
    tokens: int
    rows: List[ClassShare]

    @property
    def non_syntactic_total(self) -> float:
        return sum(r.non_syntactic for r in self.rows)


def corpus_stats(tb: Treebank) -> CorpusStats:
    """Percentage of all tokens in each class, split by syntactic vs. non-syntactic attachment."""
    counts: Dict[TokenClass, List[int]] = {c: [0, 0] for c in TokenClass if c is not TokenClass.PLAIN}
    total = 0
    for s in tb:
        n = len(s)
        for i, t in enumerate(s.tokens):
            total += 1
            cls = classify_token(t.form, i, n)
            if cls is TokenClass.PLAIN:
                continue
            counts[cls][1 if t.deprel in NON_SYNTACTIC_RELATIONS else 0] += 1
    scale = 100.0 / total if total else 0.0
    rows = [ClassShare(c, syn * scale, non * scale) for c, (syn, non) in counts.items()]
    return CorpusStats(total, rows)
