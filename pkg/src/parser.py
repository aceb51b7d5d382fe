"""Greedy transition-based dependency parser.

Tokens are encoded once per sentence by a BiLSTM over word, character and
UPOS vectors. A parser state is scored from the encodings of the top three
stack items and the first buffer item plus the last two actions, through
one tanh hidden layer. Scores are normalized over the valid actions only.
"""
from __future__ import annotations
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .config import ParserConfig, TrainingConfig
from .conllu import UPOS_TAGS, Sentence, Treebank
from .errors import EmptyInputError, TerminalStateError
from .evaluation import attachment_scores
from .logger import get_logger
from .runtime import (
    CharComposer,
    NeuralModel,
    Vocab,
    apply_pretrained,
    check_indices,
    fit,
    load_word_vectors,
    masked_log_softmax,
)
from .tagger import normalize_word
from .transition import (
    Action,
    ActionInventory,
    OracleCorpus,
    ParserState,
    apply_action,
    extract_tree,
    initial_state,
    oracle_corpus,
)

logger = get_logger(__name__)

STACK_FEATURES = 3
HISTORY_FEATURES = 2


class ActionDistribution:
    """Probabilities over an action inventory; zero outside the valid actions."""

    def __init__(self, inventory: ActionInventory, probs: np.ndarray, mask: np.ndarray):
        self.inventory = inventory
        self.probs = probs
        self.mask = mask

    @property
    def support(self) -> List[Action]:
        return [a for a, ok in zip(self.inventory.actions, self.mask) if ok]

    @property
    def entries(self) -> Dict[Action, float]:
        return {a: float(p) for a, p, ok in zip(self.inventory.actions, self.probs, self.mask) if ok}

    def __getitem__(self, a: Action) -> float:
        return float(self.probs[self.inventory.index(a)])

    def total(self) -> float:
        return float(self.probs[self.mask].sum())

    def best_index(self) -> int:
        """Index of the most probable valid action; ties go to the lowest index."""
        return int(np.argmax(np.where(self.mask, self.probs, -1.0)))

    def best_action(self) -> Action:
        return self.inventory.actions[self.best_index()]


class ParserModel(NeuralModel):
    KIND = "parser"

    def __init__(self, hparams, vocabs):
        super().__init__(hparams, vocabs)
        h = self.hparams
        self.inventory = ActionInventory(tuple(h["labels"]))
        self.word_embed = nn.Embedding(len(self.vocabs["words"]), int(h["word_dim"]))
        self.chars = CharComposer(len(self.vocabs["chars"]), int(h["char_dim"]), int(h["char_hidden"]))
        self.pos_embed = nn.Embedding(len(self.vocabs["upos"]), int(h["pos_dim"]))
        in_dim = int(h["word_dim"]) + self.chars.output_dim + int(h["pos_dim"])
        self.encoder = nn.LSTM(in_dim, int(h["hidden_dim"]), batch_first=True, bidirectional=True)
        enc_dim = 2 * int(h["hidden_dim"])
        self.root = nn.Parameter(torch.empty(1, enc_dim))
        self.pad = nn.Parameter(torch.empty(1, enc_dim))
        # one extra row for "no action yet"
        self.action_embed = nn.Embedding(len(self.inventory) + 1, int(h["action_dim"]))
        feature_dim = (STACK_FEATURES + 1) * enc_dim + HISTORY_FEATURES * int(h["action_dim"])
        self.hidden = nn.Linear(feature_dim, int(h["mlp_dim"]))
        self.output = nn.Linear(int(h["mlp_dim"]), len(self.inventory))
        self.finish_init()

    @classmethod
    def create(cls, tb: Treebank, config: ParserConfig, seed: int) -> "ParserModel":
        """A fresh model whose vocabularies and action inventory come from ``tb``."""
        inventory = ActionInventory.from_treebank(tb)
        words = Vocab.build((normalize_word(f) for s in tb for f in s.forms), config.min_word_freq)
        chars = Vocab.build(c for s in tb for f in s.forms for c in f)
        hparams = {
            "word_dim": config.word_dim,
            "char_dim": config.char_dim,
            "char_hidden": config.char_hidden,
            "pos_dim": config.pos_dim,
            "hidden_dim": config.hidden_dim,
            "action_dim": config.action_dim,
            "mlp_dim": config.mlp_dim,
            "dropout": config.dropout,
            "labels": list(inventory.labels),
            "seed": seed,
        }
        model = cls(hparams, {"words": words, "chars": chars, "upos": Vocab(UPOS_TAGS)})
        if config.pretrained:
            apply_pretrained(model.word_embed, words, load_word_vectors(config.pretrained))
        return model

    def encode(self, s: Sentence) -> torch.Tensor:
        """Rows: ROOT, tokens 1..n, then the padding vector at n+1."""
        words, chars, upos = self.vocabs["words"], self.vocabs["chars"], self.vocabs["upos"]
        word_ids = torch.tensor([words.index(normalize_word(t.form)) for t in s.tokens], dtype=torch.long)
        pos_ids = torch.tensor([upos.index(t.upos) for t in s.tokens], dtype=torch.long)
        check_indices(word_ids, self.word_embed.num_embeddings, "word")
        check_indices(pos_ids, self.pos_embed.num_embeddings, "UPOS")
        x = torch.cat([
            self.word_embed(word_ids),
            self.chars([[chars.index(c) for c in t.form] for t in s.tokens]),
            self.pos_embed(pos_ids),
        ], dim=-1)
        states, _ = self.encoder(self.drop(x).unsqueeze(0))
        return torch.cat([self.root, states[0], self.pad], dim=0)

    def _features(self, st: ParserState):
        pad = st.n + 1
        stack = list(st.stack[-STACK_FEATURES:])[::-1]
        positions = stack + [pad] * (STACK_FEATURES - len(stack))
        positions.append(pad if st.buffer_empty else st.next_token)
        none = len(self.inventory)
        recent = list(st.history[-HISTORY_FEATURES:])[::-1]
        history = [self.inventory.index(a) if a in self.inventory else none for a in recent]
        history += [none] * (HISTORY_FEATURES - len(history))
        return positions, history

    def state_logits(self, encoding: torch.Tensor, states: Sequence[ParserState]) -> torch.Tensor:
        """Unnormalized scores over the full inventory, shape (len(states), |actions|)."""
        features = [self._features(st) for st in states]
        positions = torch.tensor([f[0] for f in features], dtype=torch.long)
        history = torch.tensor([f[1] for f in features], dtype=torch.long)
        x = torch.cat([
            encoding[positions].reshape(len(states), -1),
            self.action_embed(history).reshape(len(states), -1),
        ], dim=-1)
        return self.output(torch.tanh(self.hidden(self.drop(x))))

    def valid_mask(self, states: Sequence[ParserState]) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.inventory.valid_mask(st) for st in states]))

    def forward(self, s: Sentence, states: Sequence[ParserState]) -> torch.Tensor:
        """Log-probabilities over valid actions (-inf elsewhere) for every state."""
        return masked_log_softmax(self.state_logits(self.encode(s), states), self.valid_mask(states))


def score_state(
    m: ParserModel,
    st: ParserState,
    s: Sentence,
    encoding: Optional[torch.Tensor] = None,
) -> ActionDistribution:
    """q(a|st). Pass ``encoding`` (from ``m.encode(s)``) to skip re-encoding the sentence."""
    if st.is_terminal:
        raise TerminalStateError("cannot score a terminal state")
    mask = m.inventory.valid_mask(st)
    with torch.no_grad():
        if encoding is None:
            encoding = m.encode(s)
        logits = m.state_logits(encoding, [st])[0].double()
        log_q = masked_log_softmax(logits, torch.from_numpy(mask))
    return ActionDistribution(m.inventory, torch.exp(log_q).numpy(), mask)


def greedy_parse(m: ParserModel, s: Sentence) -> Sentence:
    """Follow the most probable valid action until the state is terminal (2n steps)."""
    m.eval()
    st = initial_state(s)
    with torch.no_grad():
        encoding = m.encode(s)
    while not st.is_terminal:
        st = apply_action(st, score_state(m, st, s, encoding).best_action())
    return extract_tree(st, s)


def parse_treebank(
    parse: Callable[[Sentence], Sentence],
    tb: Treebank,
    progress: bool = False,
) -> Treebank:
    parsed = [parse(s) for s in tqdm(tb.sentences, desc="parsing", leave=False, disable=not progress)]
    return Treebank(tuple(parsed), tb.split_name)


def labeled_attachment(m: ParserModel, tb: Treebank) -> float:
    return attachment_scores(tb, parse_treebank(lambda s: greedy_parse(m, s), tb)).las


@dataclass
class StateBatch:
    """All training states of one sentence, scored in a single pass."""
    sentence: Sentence
    states: List[ParserState]
    gold: Optional[torch.Tensor] = None     # action indices
    targets: Optional[torch.Tensor] = None  # (len(states), |actions|) probabilities


def oracle_batches(inventory: ActionInventory, corpus: OracleCorpus) -> List[StateBatch]:
    batches = []
    for s, actions in zip(corpus.sentences, corpus.sequences):
        states = [initial_state(s)]
        for a in actions[:-1]:
            states.append(apply_action(states[-1], a))
        gold = torch.tensor([inventory.index(a) for a in actions], dtype=torch.long)
        batches.append(StateBatch(s, states, gold=gold))
    return batches


def log_loss(m: ParserModel, batch: StateBatch) -> torch.Tensor:
    log_q = m(batch.sentence, batch.states)
    return -log_q.gather(1, batch.gold.unsqueeze(1)).sum()


def fit_parser(
    model: ParserModel,
    epoch_items: Callable[[int], Sequence[StateBatch]],
    loss_fn: Callable[[ParserModel, StateBatch], torch.Tensor],
    held_out: Treebank,
    training: TrainingConfig,
    name: str,
) -> float:
    """Train ``model`` and keep the epoch with the best LAS on ``held_out``."""
    best = fit(model, epoch_items, loss_fn, lambda m: labeled_attachment(m, held_out), training, name)
    logger.info(f"{name}: best held-out LAS {best:.1f}")
    return best


def prepare_corpus(tb: Treebank, inventory: ActionInventory) -> OracleCorpus:
    corpus = oracle_corpus(tb, inventory)
    if not corpus.sentences:
        raise EmptyInputError("no projective sentences to train on")
    return corpus


def train_parser(
    tb: Treebank,
    config: ParserConfig,
    training: TrainingConfig,
    dev: Optional[Treebank] = None,
) -> ParserModel:
    """Log-loss training on static-oracle state/action pairs; best epoch by dev LAS.

    Args:
        tb: Training treebank. Non-projective sentences and sentences with
            labels outside the inventory are skipped and counted.
        config: Network dimensions, vocabulary cutoff and pretrained vectors.
        training: Epochs, learning rate schedule, clipping and seed.
        dev: Held-out treebank for epoch selection. Defaults to the usable training sentences.

    Returns:
        The model from the best epoch.

    Raises:
        EmptyInputError: no projective sentence is left to train on.
    """
    model = ParserModel.create(tb, config, training.seed)
    corpus = prepare_corpus(tb, model.inventory)
    batches = oracle_batches(model.inventory, corpus)
    logger.info(
        f"Training parser (seed {training.seed}) on {len(batches)} sentences, "
        f"{sum(len(b.states) for b in batches)} oracle states, {len(model.inventory)} actions"
    )
    held_out = dev if dev is not None and len(dev) else Treebank(tuple(corpus.sentences), tb.split_name)
    fit_parser(model, lambda epoch: batches, log_loss, held_out, training, f"parser[seed={training.seed}]")
    return model


@dataclass
class SeedStudy:
    models: List[ParserModel]
    seeds: List[int]
    las: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.las))

    @property
    def best(self) -> float:
        return max(self.las)

    @property
    def worst(self) -> float:
        return min(self.las)


def train_parser_seeds(
    tb: Treebank,
    config: ParserConfig,
    training: TrainingConfig,
    seeds: Sequence[int],
    dev: Optional[Treebank] = None,
) -> SeedStudy:
    """One model per seed; reports the mean/min/max held-out LAS across seeds.

    Args:
        tb: Training treebank.
        config: Architecture shared by every run.
        training: Training settings; ``seed`` is replaced per run.
        seeds: Seeds to train with, in order.
        dev: Treebank scored for each run. Defaults to ``tb``.

    Returns:
        A SeedStudy holding the models and their LAS in seed order.
    """
    held_out = dev if dev is not None and len(dev) else tb
    models, scores = [], []
    for seed in seeds:
        model = train_parser(tb, config, replace(training, seed=seed), dev)
        models.append(model)
        scores.append(labeled_attachment(model, held_out))
    study = SeedStudy(models, list(seeds), scores)
    logger.info(
        f"LAS over {len(seeds)} seeds: mean {study.mean:.1f}, "
        f"min {study.worst:.1f}, max {study.best:.1f}, spread {study.best - study.worst:.1f}"
    )
    return study
