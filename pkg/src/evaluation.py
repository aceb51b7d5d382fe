"""Token, tagging and attachment metrics plus parsing throughput.

Automatic tokenizations are compared through character spans in the raw
tweet: a system token matches a gold token iff both cover exactly the same
characters. All percentages are reported to one decimal place.
"""
from __future__ import annotations
import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from rich.table import Table

from .conllu import Sentence, Treebank, sentence_spans
from .errors import ConlluFormatError, DimensionMismatchError, RawMismatchError
from .logger import get_logger

logger = get_logger(__name__)

Span = Tuple[int, int]
ROOT_SPAN = (-1, -1)


@dataclass(frozen=True)
class Score:
    """Counts behind one precision/recall/F1 triple."""
    correct: int = 0
    gold_total: int = 0
    system_total: int = 0

    def __add__(self, other: "Score") -> "Score":
        return Score(
            self.correct + other.correct,
            self.gold_total + other.gold_total,
            self.system_total + other.system_total,
        )

    @property
    def precision(self) -> float:
        return 100.0 * self.correct / self.system_total if self.system_total else 0.0

    @property
    def recall(self) -> float:
        return 100.0 * self.correct / self.gold_total if self.gold_total else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def _pct(x: Optional[float]) -> Optional[float]:
    return None if x is None else round(x, 1)


@dataclass
class EvalReport:
    metric: str
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None
    accuracy: Optional[float] = None
    uas: Optional[float] = None
    las: Optional[float] = None
    tokens_per_second: Optional[float] = None
    details: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_score(cls, metric: str, score: Score, **extra) -> "EvalReport":
        return cls(metric, _pct(score.precision), _pct(score.recall), _pct(score.f1), **extra)

    def as_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {"metric": self.metric}
        for key in ("precision", "recall", "f1", "accuracy", "uas", "las", "tokens_per_second"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out.update(self.details)
        return out

    def to_key_values(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items()) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def render_table(reports: Sequence[EvalReport], title: str = "Evaluation") -> Table:
    """Aligned table with one row per report and one column per metric any report has."""
    rows = [r.as_dict() for r in reports]
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k != "metric" and k not in columns)
    table = Table(title=title)
    table.add_column("metric", style="bold")
    for col in columns:
        table.add_column(col, justify="right")
    for row in rows:
        table.add_row(str(row["metric"]), *(("" if col not in row else f"{row[col]}") for col in columns))
    return table


# ------------------------------------------------------------------- pairing

def pair_sentences(gold: Treebank, pred: Treebank) -> List[Tuple[Sentence, Sentence]]:
    """Pair sentences by sent_id when both sides carry the same ids, else by position."""
    if len(gold) != len(pred):
        raise DimensionMismatchError(f"gold has {len(gold)} sentences, system has {len(pred)}")
    gold_ids = [s.sent_id for s in gold]
    pred_by_id = {s.sent_id: s for s in pred}
    if None not in pred_by_id and all(i in pred_by_id for i in gold_ids) and len(pred_by_id) == len(pred):
        return [(g, pred_by_id[g.sent_id]) for g in gold]
    return list(zip(gold.sentences, pred.sentences))


def _raw(gold: Sentence, raw: Optional[str]) -> str:
    text = raw if raw is not None else gold.text
    if text is None:
        raise ConlluFormatError(f"sentence {gold.sent_id!r} has no raw text to align against")
    return text


# ------------------------------------------------------------------ tokens

def _token_score(gold: Sentence, pred: Sentence, raw: str) -> Score:
    g = set(sentence_spans(raw, gold))
    p = set(sentence_spans(raw, pred))
    return Score(len(g & p), len(g), len(p))


def token_span_f1(gold: Sentence, pred: Sentence, raw: Optional[str] = None) -> EvalReport:
    return EvalReport.from_score("tokens", _token_score(gold, pred, _raw(gold, raw)))


def token_scores(gold: Treebank, pred: Treebank) -> EvalReport:
    total = Score()
    for g, p in pair_sentences(gold, pred):
        total += _token_score(g, p, _raw(g, None))
    return EvalReport.from_score("tokens", total)


# ----------------------------------------------------------------- tagging

def _tag_score(gold: Sentence, pred: Sentence, raw: Optional[str]) -> Score:
    if raw is None:
        if len(gold) != len(pred):
            raise DimensionMismatchError(
                f"sentence {gold.sent_id!r}: {len(gold)} gold tokens vs {len(pred)} system tokens"
            )
        correct = sum(g.upos == p.upos for g, p in zip(gold.tokens, pred.tokens))
        return Score(correct, len(gold), len(pred))
    g = {span: t.upos for span, t in zip(sentence_spans(raw, gold), gold.tokens)}
    p = {span: t.upos for span, t in zip(sentence_spans(raw, pred), pred.tokens)}
    correct = sum(1 for span, tag in p.items() if g.get(span) == tag)
    return Score(correct, len(g), len(p))


def tagging_scores(gold: Sentence, pred: Sentence, raw: Optional[str] = None) -> EvalReport:
    """Accuracy on gold tokens when ``raw`` is None, span-aligned F1 otherwise."""
    score = _tag_score(gold, pred, raw)
    if raw is None:
        return EvalReport("upos", accuracy=_pct(score.recall))
    return EvalReport.from_score("upos", score)


def pos_scores(gold: Treebank, pred: Treebank, gold_tokens: bool = True) -> EvalReport:
    total = Score()
    for g, p in pair_sentences(gold, pred):
        total += _tag_score(g, p, None if gold_tokens else _raw(g, None))
    if gold_tokens:
        return EvalReport("upos", accuracy=_pct(total.recall))
    return EvalReport.from_score("upos", total)


# -------------------------------------------------------------- attachment

def _attachment_counts(gold: Sentence, pred: Sentence) -> Tuple[int, int, int]:
    if len(gold) != len(pred):
        raise DimensionMismatchError(
            f"sentence {gold.sent_id!r}: {len(gold)} gold tokens vs {len(pred)} system tokens"
        )
    if not gold.has_tree:
        raise ConlluFormatError(f"gold sentence {gold.sent_id!r} has no dependency tree")
    heads = labels = 0
    for g, p in zip(gold.tokens, pred.tokens):
        if g.head == p.head:
            heads += 1
            labels += g.deprel == p.deprel
    return heads, labels, len(gold)


def attachment_scores(gold: Treebank, pred: Treebank) -> EvalReport:
    """UAS and LAS over all tokens, punctuation included."""
    heads = labels = total = 0
    for g, p in pair_sentences(gold, pred):
        h, lab, n = _attachment_counts(g, p)
        heads += h
        labels += lab
        total += n
    uas = 100.0 * heads / total if total else 0.0
    las = 100.0 * labels / total if total else 0.0
    return EvalReport("las", uas=_pct(uas), las=_pct(las))


# ---------------------------------------------------------------- pipeline

def _span_arcs(raw: str, s: Sentence) -> Dict[Span, Tuple[Optional[Span], str, str]]:
    spans = sentence_spans(raw, s)
    out = {}
    for span, t in zip(spans, s.tokens):
        if t.head is None:
            head_span = None
        elif t.head == 0:
            head_span = ROOT_SPAN
        else:
            head_span = spans[t.head - 1]
        out[span] = (head_span, t.deprel, t.upos)
    return out


def _with_correct(score: Score, correct: int) -> Score:
    return Score(correct, score.gold_total, score.system_total)


def pipeline_scores(gold: Treebank, pred: Treebank) -> EvalReport:
    """LAS F1 over span-aligned tokens; token, UPOS and UAS F1 go into ``details``."""
    tokens = upos = uas = las = Score()
    for g, p in pair_sentences(gold, pred):
        raw = _raw(g, None)
        if p.text is not None and p.text.strip() != raw.strip():
            raise RawMismatchError(f"sentence {g.sent_id!r}: system text differs from gold text")
        gold_arcs = _span_arcs(raw, g)
        pred_arcs = _span_arcs(raw, p)
        base = Score(0, len(gold_arcs), len(pred_arcs))
        tok = pos = unl = lab = 0
        for span, (head, deprel, tag) in pred_arcs.items():
            ref = gold_arcs.get(span)
            if ref is None:
                continue
            tok += 1
            pos += tag == ref[2]
            if head is not None and head == ref[0]:
                unl += 1
                lab += deprel == ref[1]
        tokens += _with_correct(base, tok)
        upos += _with_correct(base, pos)
        uas += _with_correct(base, unl)
        las += _with_correct(base, lab)
    return EvalReport.from_score("pipeline", las, details={
        "tokens_f1": _pct(tokens.f1),
        "upos_f1": _pct(upos.f1),
        "uas_f1": _pct(uas.f1),
    })


# -------------------------------------------------------------- throughput

def throughput(system: Callable[[Sentence], Sentence], tb: Treebank, runs: int = 3, warmup: int = 10) -> float:
    """Tokens per second: median wall time of ``runs`` passes, single thread, after a warm-up."""
    tokens = tb.token_count
    if tokens == 0:
        return 0.0
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for s in tb.sentences[:warmup]:
            system(s)
        times = []
        for _ in range(runs):
            start = time.perf_counter()
            for s in tb.sentences:
                system(s)
            times.append(time.perf_counter() - start)
    finally:
        torch.set_num_threads(threads)
    rate = tokens / statistics.median(times)
    logger.debug(f"Throughput: {rate:.1f} tokens/s over {tokens} tokens (runs={runs})")
    return rate


def speed_report(name: str, rate: float) -> EvalReport:
    return EvalReport(
        f"speed:{name}",
        tokens_per_second=round(rate, 1),
        details={"ktokens_per_second": round(rate / 1000, 2)},
    )


def compare_systems(rates: Dict[str, float], baseline: str) -> Dict[str, float]:
    """Speed of every system relative to ``baseline`` (1.0 = same speed)."""
    base = rates[baseline]
    return {name: (rate / base if base else 0.0) for name, rate in rates.items()}
