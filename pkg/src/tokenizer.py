"""Character-level BiLSTM tokenizer.

Every character gets one of three tags: B starts a token, I continues one,
S marks whitespace. S is never predicted, it is read off the input.
"""
from __future__ import annotations
from collections import Counter
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .config import TokenizerConfig, TrainingConfig
from .conllu import MultiwordRange, Sentence, Token, sentence_spans
from .errors import AlignmentFailure, EmptyInputError, TagSequenceError
from .logger import get_logger
from .runtime import NeuralModel, Vocab, check_indices, fit

logger = get_logger(__name__)

Span = Tuple[int, int]


class CharTag(str, Enum):
    B = "B"
    I = "I"  # noqa: E741
    S = "S"

    @property
    def symbol(self) -> str:
        return {"B": "1", "I": "0", "S": "$"}[self.value]


# classifier output index -> tag
_CLASSES = (CharTag.I, CharTag.B)


class TokenizerModel(NeuralModel):
    KIND = "tokenizer"

    def __init__(self, hparams, vocabs):
        super().__init__(hparams, vocabs)
        h = self.hparams
        self.embed = nn.Embedding(len(self.vocabs["chars"]), int(h["char_dim"]))
        self.lstm = nn.LSTM(int(h["char_dim"]), int(h["hidden_dim"]), batch_first=True, bidirectional=True)
        self.classify = nn.Linear(2 * int(h["hidden_dim"]), len(_CLASSES))
        self.finish_init()

    @classmethod
    def create(cls, vocab: Vocab, config: TokenizerConfig, seed: int) -> "TokenizerModel":
        hparams = {
            "char_dim": config.char_dim,
            "hidden_dim": config.hidden_dim,
            "dropout": config.dropout,
            "seed": seed,
        }
        return cls(hparams, {"chars": vocab})

    def char_ids(self, raw: str) -> List[int]:
        vocab = self.vocabs["chars"]
        return [vocab.index(c) for c in raw]

    def forward(self, char_ids: Sequence[int]) -> torch.Tensor:
        """Per-character logits over (I, B), shape (len(raw), 2)."""
        ids = torch.tensor([list(char_ids)], dtype=torch.long)
        check_indices(ids, self.embed.num_embeddings, "character")
        states, _ = self.lstm(self.drop(self.embed(ids)))
        return self.classify(self.drop(states[0]))


def derive_char_labels(raw: str, s: Sentence) -> List[CharTag]:
    """Gold B/I/S tags for ``raw`` from the tokens of ``s``.

    Token starts (including the starts of pieces split out of one
    whitespace chunk) are B, whitespace is S, the rest is I.
    """
    spans = sentence_spans(raw, s)
    tags = [CharTag.S if c.isspace() else CharTag.I for c in raw]
    covered = [False] * len(raw)
    for start, end in spans:
        tags[start] = CharTag.B
        for i in range(start, end):
            covered[i] = True
    for i, c in enumerate(raw):
        if not c.isspace() and not covered[i]:
            raise AlignmentFailure(raw[i:].split()[0], i)
    return tags


def tag_characters(m: TokenizerModel, raw: str) -> List[CharTag]:
    if not raw:
        raise EmptyInputError("cannot tokenize an empty string")
    if raw.isspace():
        return [CharTag.S] * len(raw)
    m.eval()
    with torch.no_grad():
        best = m(m.char_ids(raw)).argmax(dim=-1).tolist()
    tags = [CharTag.S if c.isspace() else _CLASSES[k] for c, k in zip(raw, best)]
    first = next(i for i, c in enumerate(raw) if not c.isspace())
    tags[first] = CharTag.B
    return tags


def _check_tags(raw: str, tags: Sequence[CharTag]) -> None:
    if len(tags) != len(raw):
        raise TagSequenceError(f"{len(tags)} tags for {len(raw)} characters", min(len(tags), len(raw)))
    for i, (c, tag) in enumerate(zip(raw, tags)):
        if (tag is CharTag.S) != c.isspace():
            raise TagSequenceError(f"tag {tag.value} on {c!r}", i)
    first = next((i for i, c in enumerate(raw) if not c.isspace()), None)
    if first is not None and tags[first] is not CharTag.B:
        raise TagSequenceError("first non-whitespace character must start a token", first)


def decode_tokens(raw: str, tags: Sequence[CharTag]) -> List[Tuple[str, Span]]:
    """Tokens and their character spans, one per B-started run of non-space characters.

    A token never spans whitespace, so a continuation tag right after a
    space also opens a new token.
    """
    _check_tags(raw, tags)
    out: List[Tuple[str, Span]] = []
    start: Optional[int] = None
    for i, tag in enumerate(list(tags) + [CharTag.S]):
        if tag is not CharTag.I and start is not None:
            out.append((raw[start:i], (start, i)))
            start = None
        if tag is CharTag.B or (tag is CharTag.I and start is None):
            start = i
    return out


def tokens_to_sentence(raw: str, tokens: Sequence[Tuple[str, Span]], sent_id: str) -> Sentence:
    """A tree-less sentence with ID/FORM set and a range over every split whitespace chunk."""
    toks = tuple(Token(i, form) for i, (form, _) in enumerate(tokens, start=1))
    ranges: List[MultiwordRange] = []
    i = 0
    while i < len(tokens):
        j = i
        while j + 1 < len(tokens) and tokens[j + 1][1][0] == tokens[j][1][1]:
            j += 1
        if j > i:
            surface = raw[tokens[i][1][0]:tokens[j][1][1]]
            ranges.append(MultiwordRange(i + 1, j + 1, surface))
        i = j + 1
    comments = (f"# sent_id = {sent_id}", f"# text = {raw.strip()}")
    return Sentence(comments, toks, tuple(ranges))


def tokenize(m: TokenizerModel, raw: str, sent_id: str) -> Sentence:
    return tokens_to_sentence(raw, decode_tokens(raw, tag_characters(m, raw)), sent_id)


def token_f1(m: TokenizerModel, pairs: Sequence[Tuple[str, List[CharTag]]]) -> float:
    """Span F1 (percent) of the model's tokens against the gold tags of ``pairs``."""
    correct = gold_total = system_total = 0
    for raw, gold_tags in pairs:
        gold = {span for _, span in decode_tokens(raw, gold_tags)}
        pred = {span for _, span in decode_tokens(raw, tag_characters(m, raw))}
        correct += len(gold & pred)
        gold_total += len(gold)
        system_total += len(pred)
    if correct == 0:
        return 0.0
    p, r = correct / system_total, correct / gold_total
    return 100.0 * 2 * p * r / (p + r)


def _labelled(corpus: Sequence[Tuple[str, Sentence]], what: str) -> List[Tuple[str, List[CharTag]]]:
    pairs: List[Tuple[str, List[CharTag]]] = []
    skipped = 0
    for raw, s in corpus:
        try:
            pairs.append((raw, derive_char_labels(raw, s)))
        except AlignmentFailure as e:
            skipped += 1
            logger.debug(f"{what}: sentence {s.sent_id}: {e}")
    if skipped:
        logger.warning(f"{what}: skipped {skipped} unalignable tweet/sentence pairs")
    return pairs


def train_tokenizer(
    corpus: Sequence[Tuple[str, Sentence]],
    config: TokenizerConfig,
    training: TrainingConfig,
    dev: Optional[Sequence[Tuple[str, Sentence]]] = None,
) -> TokenizerModel:
    """Train on (raw tweet, gold sentence) pairs; keep the epoch with the best dev token F1."""
    pairs = _labelled(corpus, "train")
    if not pairs:
        raise EmptyInputError("no alignable training pairs for the tokenizer")
    dev_pairs = _labelled(dev, "dev") if dev else pairs

    counts = Counter(c for raw, _ in pairs for c in raw)
    vocab = Vocab.from_counts(counts, config.min_char_freq)
    model = TokenizerModel.create(vocab, config, training.seed)
    logger.info(f"Training tokenizer on {len(pairs)} tweets ({len(vocab)} characters in vocabulary)")

    # only non-whitespace positions contribute to the loss
    items = []
    for raw, tags in pairs:
        positions = [i for i, t in enumerate(tags) if t is not CharTag.S]
        gold = [1 if tags[i] is CharTag.B else 0 for i in positions]
        items.append((model.char_ids(raw), torch.tensor(positions), torch.tensor(gold)))

    def loss(m: TokenizerModel, item) -> torch.Tensor:
        ids, positions, gold = item
        logits = m(ids)[positions]
        return nn.functional.cross_entropy(logits, gold, reduction="sum")

    best = fit(model, lambda epoch: items, loss, lambda m: token_f1(m, dev_pairs), training, "tokenizer")
    logger.info(f"Tokenizer trained: best dev token F1 {best:.1f}")
    return model
