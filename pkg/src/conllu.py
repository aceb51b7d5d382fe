"""CoNLL-U data model, reader, writer and structural validation.

Sentences are immutable once built. A sentence is either fully annotated
with a dependency tree or carries no tree at all (every HEAD is ``_``),
which is how tokenizer output travels through the pipeline.
"""
from __future__ import annotations
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .errors import AlignmentFailure, ConlluFormatError, InputEncodingError, InvalidSentenceError
from .logger import get_logger

logger = get_logger(__name__)

UPOS_TAGS: Tuple[str, ...] = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)
_UPOS_SET = frozenset(UPOS_TAGS)
EMPTY = "_"
SPLITS = ("train", "dev", "test", "unsplit")

_RANGE_ID = re.compile(r"^(\d+)-(\d+)$")
_EMPTY_NODE_ID = re.compile(r"^\d+\.\d+$")
_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class Token:
    id: int
    form: str
    lemma: str = EMPTY
    upos: str = EMPTY
    xpos: str = EMPTY
    feats: str = EMPTY
    head: Optional[int] = None  # None means unannotated ("_")
    deprel: str = EMPTY
    deps: str = EMPTY
    misc: str = EMPTY

    def misc_items(self) -> Dict[str, str]:
        if self.misc == EMPTY:
            return {}
        items = {}
        for part in self.misc.split("|"):
            key, _, value = part.partition("=")
            items[key] = value
        return items

    def with_misc(self, key: str, value: str) -> "Token":
        items = self.misc_items()
        items[key] = value
        return replace(self, misc="|".join(f"{k}={v}" for k, v in items.items()))


@dataclass(frozen=True)
class MultiwordRange:
    start: int
    end: int
    surface_form: str
    misc: str = EMPTY


@dataclass(frozen=True)
class Violation:
    code: str
    token_id: int = 0
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.code}({self.detail})" if self.detail else self.code


@dataclass(frozen=True)
class Sentence:
    comments: Tuple[str, ...]
    tokens: Tuple[Token, ...]
    ranges: Tuple[MultiwordRange, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)

    def meta(self, key: str) -> Optional[str]:
        for c in self.comments:
            body = c[1:].strip()
            k, sep, v = body.partition("=")
            if sep and k.strip() == key:
                return v.strip()
        return None

    @property
    def sent_id(self) -> Optional[str]:
        return self.meta("sent_id")

    @property
    def text(self) -> Optional[str]:
        return self.meta("text")

    @property
    def forms(self) -> List[str]:
        return [t.form for t in self.tokens]

    @property
    def has_tree(self) -> bool:
        return bool(self.tokens) and all(t.head is not None for t in self.tokens)

    def with_comment(self, key: str, value: str) -> "Sentence":
        kept = tuple(c for c in self.comments if (c[1:].partition("=")[0].strip() != key))
        return replace(self, comments=kept + (f"# {key} = {value}",))

    def with_upos(self, tags: Sequence[str]) -> "Sentence":
        if len(tags) != len(self.tokens):
            raise ValueError("tag count does not match token count")
        return replace(self, tokens=tuple(replace(t, upos=u) for t, u in zip(self.tokens, tags)))

    def with_tree(self, heads: Sequence[int], deprels: Sequence[str]) -> "Sentence":
        if len(heads) != len(self.tokens) or len(deprels) != len(self.tokens):
            raise ValueError("tree size does not match token count")
        return replace(self, tokens=tuple(
            replace(t, head=h, deprel=r) for t, h, r in zip(self.tokens, heads, deprels)
        ))

    def without_tree(self) -> "Sentence":
        return replace(self, tokens=tuple(replace(t, head=None, deprel=EMPTY) for t in self.tokens))


@dataclass(frozen=True)
class Treebank:
    sentences: Tuple[Sentence, ...] = ()
    split_name: str = "unsplit"

    def __post_init__(self):
        if self.split_name not in SPLITS:
            raise ValueError(f"split_name must be one of {SPLITS}, got {self.split_name!r}")

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[Sentence]:
        return iter(self.sentences)

    @property
    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)

    def subset(self, indices: Iterable[int]) -> "Treebank":
        return Treebank(tuple(self.sentences[i] for i in indices), self.split_name)


# ---------------------------------------------------------------- validation

def _find_cycle(heads: Sequence[int]) -> Optional[List[int]]:
    """Return the ids on one cycle of the head graph, or None. ``heads[i]`` is the head of ``i+1``."""
    n = len(heads)
    state = [0] * (n + 1)  # 0 new, 1 on current path, 2 done
    state[0] = 2
    for start in range(1, n + 1):
        path = []
        node = start
        while state[node] == 0:
            state[node] = 1
            path.append(node)
            node = heads[node - 1]
        if state[node] == 1:
            return path[path.index(node):]
        for p in path:
            state[p] = 2
    return None


def validate_sentence(s: Sentence) -> List[Violation]:
    """Check every Sentence invariant; empty list iff the sentence is well formed."""
    out: List[Violation] = []
    n = len(s.tokens)
    if s.sent_id is None:
        out.append(Violation("MissingSentId"))
    if s.text is None:
        out.append(Violation("MissingText"))
    if n == 0:
        out.append(Violation("EmptySentence"))
        return out

    for i, t in enumerate(s.tokens, start=1):
        if t.id != i:
            out.append(Violation("NonContiguousIds", t.id, f"expected {i}"))
        if t.upos != EMPTY and t.upos not in _UPOS_SET:
            out.append(Violation("UnknownUpos", t.id, t.upos))

    for r in s.ranges:
        if not (1 <= r.start < r.end <= n):
            out.append(Violation("BadRange", r.start, f"{r.start}-{r.end}"))
            continue
        covered = "".join(t.form for t in s.tokens[r.start - 1:r.end])
        if covered.casefold() != r.surface_form.casefold():
            out.append(Violation("RangeMismatch", r.start, f"{r.surface_form!r} vs {covered!r}"))

    if s.text is not None:
        rebuilt = _rebuild_text(s)
        if _WS.sub("", rebuilt).casefold() != _WS.sub("", s.text).casefold():
            out.append(Violation("TextMismatch", 0, "forms do not reconstruct # text"))

    annotated = [t.head is not None for t in s.tokens]
    if not any(annotated):
        return out
    if not all(annotated):
        missing = next(t.id for t in s.tokens if t.head is None)
        out.append(Violation("PartialTree", missing))
        return out

    structural: List[Violation] = []
    for t in s.tokens:
        if t.head < 0 or t.head > n:
            structural.append(Violation("HeadOutOfRange", t.id, str(t.head)))
        elif t.head == t.id:
            structural.append(Violation("SelfLoop", t.id))
    if structural:
        return out + structural

    roots = [t for t in s.tokens if t.head == 0]
    if not roots:
        out.append(Violation("NoRoot"))
    elif len(roots) > 1:
        out.append(Violation("MultipleRoots", roots[1].id, ",".join(str(t.id) for t in roots)))
    for t in roots:
        if t.deprel != "root":
            out.append(Violation("RootDeprel", t.id, t.deprel))
    for t in s.tokens:
        if t.head != 0 and t.deprel == "root":
            out.append(Violation("RootDeprel", t.id, "root label on non-root token"))

    cycle = _find_cycle([t.head for t in s.tokens])
    if cycle:
        out.append(Violation("Cycle", min(cycle), ",".join(str(i) for i in sorted(cycle))))
    return out


def _rebuild_text(s: Sentence) -> str:
    parts: List[str] = []
    starts = {r.start: r for r in s.ranges}
    i = 1
    while i <= len(s.tokens):
        r = starts.get(i)
        if r is not None and r.end <= len(s.tokens):
            parts.append(r.surface_form)
            i = r.end + 1
        else:
            parts.append(s.tokens[i - 1].form)
            i += 1
    return " ".join(parts)


def is_projective(s: Sentence) -> bool:
    return crossing_arcs(s) is None


def crossing_arcs(s: Sentence) -> Optional[Tuple[Tuple[int, int], Tuple[int, int]]]:
    """First pair of crossing arcs as ((head, dep), (head, dep)), or None if the tree is projective."""
    arcs = [(t.head, t.id) for t in s.tokens if t.head is not None]
    spans = [(min(h, d), max(h, d), h, d) for h, d in arcs]
    for i, (l1, r1, h1, d1) in enumerate(spans):
        for l2, r2, h2, d2 in spans[i + 1:]:
            if l1 < l2 < r1 < r2 or l2 < l1 < r2 < r1:
                return (h1, d1), (h2, d2)
    return None


# ------------------------------------------------------------------- reading

def _split_blocks(text: str) -> Iterator[Tuple[int, List[Tuple[int, str]]]]:
    block: List[Tuple[int, str]] = []
    start = 1
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if line.strip() == "":
            if block:
                yield start, block
                block = []
        else:
            if not block:
                start = lineno
            block.append((lineno, line))
    if block:
        yield start, block


def _parse_block(block: List[Tuple[int, str]], allow_multi_root: bool) -> Sentence:
    comments: List[str] = []
    tokens: List[Token] = []
    ranges: List[MultiwordRange] = []
    line_of: Dict[int, int] = {}
    for lineno, line in block:
        if line.startswith("#"):
            if tokens or ranges:
                raise ConlluFormatError("comment after token lines", lineno)
            comments.append(line)
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluFormatError(f"expected 10 tab-separated columns, got {len(cols)}", lineno)
        tid = cols[0]
        m = _RANGE_ID.match(tid)
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            if a >= b:
                raise ConlluFormatError(f"invalid range {tid}", lineno)
            ranges.append(MultiwordRange(a, b, cols[1], cols[9]))
            continue
        if _EMPTY_NODE_ID.match(tid):
            raise ConlluFormatError(f"empty nodes are not supported ({tid})", lineno)
        if not tid.isdigit():
            raise ConlluFormatError(f"invalid token id {tid!r}", lineno)
        head: Optional[int]
        if cols[6] == EMPTY:
            head = None
        else:
            try:
                head = int(cols[6])
            except ValueError:
                raise ConlluFormatError(f"non-integer head {cols[6]!r}", lineno)
        token = Token(int(tid), cols[1], cols[2], cols[3], cols[4], cols[5], head, cols[7], cols[8], cols[9])
        line_of[token.id] = lineno
        tokens.append(token)

    sentence = Sentence(tuple(comments), tuple(tokens), tuple(ranges))
    if allow_multi_root:
        sentence = _attach_extra_roots(sentence)
    problems = validate_sentence(sentence)
    if problems:
        first = problems[0]
        line = line_of.get(first.token_id, block[0][0])
        detail = ", ".join(str(p) for p in problems)
        if first.code == "Cycle":
            detail = f"cycle through tokens {first.detail}"
        raise InvalidSentenceError(f"invalid sentence {sentence.sent_id!r}: {detail}", problems, line)
    return sentence


def _attach_extra_roots(s: Sentence) -> Sentence:
    roots = [t.id for t in s.tokens if t.head == 0]
    if len(roots) < 2:
        return s
    first = roots[0]
    logger.debug(f"Sentence {s.sent_id}: attaching {len(roots) - 1} extra roots to token {first}")
    return replace(s, tokens=tuple(
        replace(t, head=first, deprel="parataxis") if t.head == 0 and t.id != first else t
        for t in s.tokens
    ))


def parse_conllu(text: str, split_name: str = "unsplit", allow_multi_root: bool = False) -> Treebank:
    """Parse CoNLL-U text into a validated Treebank.

    Raises ConlluFormatError (with a line number) on malformed columns, bad
    heads, cycles, wrong root counts and duplicate sent_ids.
    """
    sentences: List[Sentence] = []
    seen: Dict[str, int] = {}
    for start, block in _split_blocks(text):
        sentence = _parse_block(block, allow_multi_root)
        sid = sentence.sent_id
        if sid in seen:
            raise ConlluFormatError(f"duplicate sent_id {sid!r} (first at line {seen[sid]})", start)
        seen[sid] = start
        sentences.append(sentence)
    return Treebank(tuple(sentences), split_name)


def read_text(path: str) -> str:
    """UTF-8 text of ``path``; ``-`` reads stdin."""
    try:
        if path == "-":
            return sys.stdin.read()
        return Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise InputEncodingError("<stdin>" if path == "-" else path, e.start, e.reason) from e


def read_conllu(path: str, split_name: str = "unsplit", allow_multi_root: bool = False) -> Treebank:
    """Read a CoNLL-U file; ``-`` reads stdin."""
    text = read_text(path)
    tb = parse_conllu(text, split_name, allow_multi_root)
    logger.debug(f"Read {len(tb)} sentences / {tb.token_count} tokens from {path}")
    return tb


# ------------------------------------------------------------------- writing

def _token_line(t: Token) -> str:
    head = EMPTY if t.head is None else str(t.head)
    return "\t".join((str(t.id), t.form, t.lemma, t.upos, t.xpos, t.feats, head, t.deprel, t.deps, t.misc))


def write_sentence(s: Sentence) -> str:
    lines = list(s.comments)
    starts = {r.start: r for r in s.ranges}
    for t in s.tokens:
        r = starts.get(t.id)
        if r is not None:
            lines.append("\t".join((f"{r.start}-{r.end}", r.surface_form, *([EMPTY] * 7), r.misc)))
        lines.append(_token_line(t))
    return "\n".join(lines) + "\n\n"


def write_conllu(tb: Treebank) -> str:
    return "".join(write_sentence(s) for s in tb.sentences)


def write_conllu_file(path: str, tb: Treebank) -> None:
    """Write a treebank; ``-`` writes stdout."""
    text = write_conllu(tb)
    if path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    out = Path(path)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    logger.debug(f"Wrote {len(tb)} sentences to {path}")


# ---------------------------------------------------------------- alignment

def align_forms(raw: str, forms: Sequence[str]) -> List[Tuple[int, int]]:
    """Character spans of ``forms`` in ``raw``, left to right, skipping whitespace.

    Exact match is tried first, then a case-insensitive match.
    """
    spans: List[Tuple[int, int]] = []
    pos = 0
    for form in forms:
        while pos < len(raw) and raw[pos].isspace():
            pos += 1
        end = pos + len(form)
        piece = raw[pos:end]
        if not form or (piece != form and piece.casefold() != form.casefold()):
            raise AlignmentFailure(form, pos)
        spans.append((pos, end))
        pos = end
    return spans


def sentence_spans(raw: str, s: Sentence) -> List[Tuple[int, int]]:
    """Token spans of ``s`` in ``raw``; falls back to multiword surfaces when forms were normalised."""
    try:
        return align_forms(raw, s.forms)
    except AlignmentFailure:
        if not s.ranges:
            raise
    spans: List[Tuple[int, int]] = []
    pos = 0
    starts = {r.start: r for r in s.ranges}
    i = 1
    while i <= len(s.tokens):
        r = starts.get(i)
        if r is None:
            (start, end), = align_forms(raw[pos:], [s.tokens[i - 1].form])
            spans.append((pos + start, pos + end))
            pos += end
            i += 1
            continue
        (start, end), = align_forms(raw[pos:], [r.surface_form])
        start += pos
        end += pos
        cursor = start
        for t in s.tokens[r.start - 1:r.end]:
            width = min(len(t.form), end - cursor)
            if width <= 0:
                raise AlignmentFailure(t.form, cursor)
            spans.append((cursor, cursor + width))
            cursor += width
        pos = end
        i = r.end + 1
    return spans


# ----------------------------------------------------------------- reporting

@dataclass
class IngestionReport:
    sentences: int = 0
    tokens: int = 0
    non_projective: int = 0
    multiword_ranges: int = 0
    label_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def non_projective_fraction(self) -> float:
        return self.non_projective / self.sentences if self.sentences else 0.0


def ingestion_report(tb: Treebank) -> IngestionReport:
    report = IngestionReport()
    for s in tb:
        report.sentences += 1
        report.tokens += len(s)
        report.multiword_ranges += len(s.ranges)
        if s.has_tree and not is_projective(s):
            report.non_projective += 1
        for t in s.tokens:
            if t.head is not None:
                report.label_counts[t.deprel] = report.label_counts.get(t.deprel, 0) + 1
    logger.info(
        f"Ingested {report.sentences} sentences, {report.tokens} tokens "
        f"({tb.split_name}); non-projective {report.non_projective} "
        f"({100.0 * report.non_projective_fraction:.2f}%)"
    )
    return report
