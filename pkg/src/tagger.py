"""UPOS tagger: word embeddings + character BiLSTM word vectors, a word-level BiLSTM, softmax per token.

Also provides k-fold jackknifing, which gives the parser training data
with realistic automatic tags.
"""
from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import List, Optional, Sequence

import torch
from torch import nn

from .config import TaggerConfig, TrainingConfig
from .conllu import EMPTY, UPOS_TAGS, Sentence, Treebank
from .errors import ConlluFormatError, EmptyInputError, UsageError
from .logger import get_logger
from .runtime import CharComposer, NeuralModel, Vocab, apply_pretrained, check_indices, fit, load_word_vectors

logger = get_logger(__name__)

GOLD_UPOS_KEY = "GoldUPOS"


def normalize_word(form: str) -> str:
    return form.lower()


class TaggerModel(NeuralModel):
    KIND = "tagger"

    def __init__(self, hparams, vocabs):
        super().__init__(hparams, vocabs)
        h = self.hparams
        self.word_embed = nn.Embedding(len(self.vocabs["words"]), int(h["word_dim"]))
        self.chars = CharComposer(len(self.vocabs["chars"]), int(h["char_dim"]), int(h["char_hidden"]))
        self.encoder = nn.LSTM(
            int(h["word_dim"]) + self.chars.output_dim, int(h["hidden_dim"]),
            batch_first=True, bidirectional=True,
        )
        self.classify = nn.Linear(2 * int(h["hidden_dim"]), len(UPOS_TAGS))
        self.finish_init()

    @classmethod
    def create(cls, words: Vocab, chars: Vocab, config: TaggerConfig, seed: int) -> "TaggerModel":
        hparams = {
            "word_dim": config.word_dim,
            "char_dim": config.char_dim,
            "char_hidden": config.char_hidden,
            "hidden_dim": config.hidden_dim,
            "dropout": config.dropout,
            "seed": seed,
        }
        return cls(hparams, {"words": words, "chars": chars})

    def inputs(self, s: Sentence):
        words, chars = self.vocabs["words"], self.vocabs["chars"]
        word_ids = [words.index(normalize_word(f)) for f in s.forms]
        char_ids = [[chars.index(c) for c in f] for f in s.forms]
        return word_ids, char_ids

    def forward(self, word_ids: Sequence[int], char_ids: Sequence[Sequence[int]]) -> torch.Tensor:
        """Logits over the 17 UPOS tags, shape (n, 17)."""
        ids = torch.tensor(list(word_ids), dtype=torch.long)
        check_indices(ids, self.word_embed.num_embeddings, "word")
        x = torch.cat([self.word_embed(ids), self.chars(char_ids)], dim=-1)
        states, _ = self.encoder(self.drop(x).unsqueeze(0))
        return self.classify(self.drop(states[0]))


def tag_tokens(m: TaggerModel, s: Sentence) -> Sentence:
    if len(s) == 0:
        return s
    m.eval()
    with torch.no_grad():
        best = m(*m.inputs(s)).argmax(dim=-1).tolist()
    return s.with_upos([UPOS_TAGS[k] for k in best])


def tagging_accuracy(m: TaggerModel, tb: Treebank) -> float:
    correct = total = 0
    for s in tb:
        predicted = tag_tokens(m, s)
        correct += sum(p.upos == g.upos for p, g in zip(predicted.tokens, s.tokens))
        total += len(s)
    return 100.0 * correct / total if total else 0.0


def train_tagger(
    tb: Treebank,
    config: TaggerConfig,
    training: TrainingConfig,
    dev: Optional[Treebank] = None,
) -> TaggerModel:
    """Cross-entropy training on gold UPOS; keeps the epoch with the best dev accuracy."""
    if len(tb) == 0:
        raise EmptyInputError("cannot train a tagger on an empty treebank")
    for s in tb:
        missing = next((t.id for t in s.tokens if t.upos == EMPTY), None)
        if missing is not None:
            raise ConlluFormatError(f"sentence {s.sent_id!r}: token {missing} has no gold UPOS")

    words = Vocab.build((normalize_word(f) for s in tb for f in s.forms), config.min_word_freq)
    chars = Vocab.build(c for s in tb for f in s.forms for c in f)
    model = TaggerModel.create(words, chars, config, training.seed)
    if config.pretrained:
        apply_pretrained(model.word_embed, words, load_word_vectors(config.pretrained))
    logger.info(f"Training tagger on {len(tb)} sentences ({len(words)} words, {len(chars)} characters)")

    tag_index = {tag: i for i, tag in enumerate(UPOS_TAGS)}
    items = [(model.inputs(s), torch.tensor([tag_index[t.upos] for t in s.tokens])) for s in tb]

    def loss(m: TaggerModel, item) -> torch.Tensor:
        (word_ids, char_ids), gold = item
        return nn.functional.cross_entropy(m(word_ids, char_ids), gold, reduction="sum")

    held_out = dev if dev is not None and len(dev) else tb
    best = fit(model, lambda epoch: items, loss, lambda m: tagging_accuracy(m, held_out), training, "tagger")
    logger.info(f"Tagger trained: best dev accuracy {best:.1f}")
    return model


def jackknife_folds(n: int, k: int) -> List[List[int]]:
    """Sentence indices of each fold; sentence i goes to fold i mod k."""
    return [list(range(fold, n, k)) for fold in range(k)]


def jackknife_tags(
    tb: Treebank,
    k: int,
    config: TaggerConfig,
    training: TrainingConfig,
    jobs: int = 1,
) -> Treebank:
    """Tag each fold with a model trained on the other k-1 folds.

    The gold tag of every token is kept in MISC as ``GoldUPOS=...``.
    """
    if k < 2:
        raise UsageError(f"jackknifing needs at least 2 folds, got {k}")
    if len(tb) < k:
        raise UsageError(f"cannot split {len(tb)} sentences into {k} folds")
    folds = jackknife_folds(len(tb), k)

    def run_fold(fold: int) -> List[Sentence]:
        held = set(folds[fold])
        train = tb.subset(i for i in range(len(tb)) if i not in held)
        fold_training = replace(training, seed=training.seed + fold, progress=False)
        model = train_tagger(train, config, fold_training)
        logger.info(f"Fold {fold + 1}/{k}: trained on {len(train)} sentences, tagging {len(held)}")
        return [_with_automatic_tags(model, tb.sentences[i]) for i in folds[fold]]

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        tagged = list(pool.map(run_fold, range(k)))

    out: List[Optional[Sentence]] = [None] * len(tb)
    for fold, sentences in enumerate(tagged):
        for i, s in zip(folds[fold], sentences):
            out[i] = s
    return Treebank(tuple(out), tb.split_name)


def _with_automatic_tags(m: TaggerModel, s: Sentence) -> Sentence:
    predicted = tag_tokens(m, s)
    return replace(predicted, tokens=tuple(
        p.with_misc(GOLD_UPOS_KEY, g.upos) for p, g in zip(predicted.tokens, s.tokens)
    ))
