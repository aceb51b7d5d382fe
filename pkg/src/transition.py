"""Arc-standard labeled transition system.

ROOT is node 0 and sits at the bottom of the stack. Attaching a token to
ROOT is only allowed as the very last transition, so every complete parse
has exactly one root.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .conllu import Sentence, Treebank, crossing_arcs
from .errors import (
    EmptyInputError,
    IllegalActionError,
    IncompleteParseError,
    NonProjectiveError,
    TerminalStateError,
)
from .logger import get_logger

logger = get_logger(__name__)

SHIFT = "SHIFT"
LEFT_ARC = "LEFT_ARC"
RIGHT_ARC = "RIGHT_ARC"
ROOT_LABEL = "root"
FALLBACK_LABEL = "dep"

Arc = Tuple[int, int, str]  # (head, dependent, label)


@dataclass(frozen=True)
class Action:
    kind: str
    label: Optional[str] = None

    def __str__(self) -> str:
        return self.kind if self.label is None else f"{self.kind}({self.label})"


SHIFT_ACTION = Action(SHIFT)
ROOT_ACTION = Action(RIGHT_ARC, ROOT_LABEL)


@dataclass(frozen=True)
class ParserState:
    """Stack, buffer and arcs of one parse. Transitions return new states.

    The buffer is always a suffix of the sentence, so it is stored as the
    index of its first token.
    """
    n: int
    stack: Tuple[int, ...] = (0,)
    next_token: int = 1
    arcs: Tuple[Arc, ...] = ()
    history: Tuple[Action, ...] = ()

    @property
    def buffer(self) -> Tuple[int, ...]:
        return tuple(range(self.next_token, self.n + 1))

    @property
    def buffer_empty(self) -> bool:
        return self.next_token > self.n

    @property
    def is_terminal(self) -> bool:
        return self.buffer_empty and self.stack == (0,)


def initial_state(s: Sentence) -> ParserState:
    if len(s) == 0:
        raise EmptyInputError(f"cannot parse empty sentence {s.sent_id!r}")
    return ParserState(n=len(s))


def _non_root_labels(labels: Iterable[str]) -> List[str]:
    return [label for label in labels if label != ROOT_LABEL]


def valid_actions(st: ParserState, labels: Sequence[str]) -> List[Action]:
    """Legal transitions from ``st``, in inventory order (SHIFT, LEFT_ARC*, RIGHT_ARC*, root)."""
    if st.is_terminal:
        raise TerminalStateError("no actions are valid in a terminal state")
    out: List[Action] = []
    if not st.buffer_empty:
        out.append(SHIFT_ACTION)
    if len(st.stack) >= 2:
        if st.stack[-2] != 0:
            kept = _non_root_labels(labels)
            out.extend(Action(LEFT_ARC, label) for label in kept)
            out.extend(Action(RIGHT_ARC, label) for label in kept)
        elif len(st.stack) == 2 and st.buffer_empty:
            out.append(ROOT_ACTION)
    return out


def is_valid(st: ParserState, a: Action) -> bool:
    """Structural legality of ``a`` in ``st``, for any label."""
    if st.is_terminal:
        return False
    if a.kind == SHIFT:
        return not st.buffer_empty
    if len(st.stack) < 2 or a.label is None:
        return False
    second = st.stack[-2]
    if a.kind == LEFT_ARC:
        return second != 0 and a.label != ROOT_LABEL
    if a.kind == RIGHT_ARC:
        if second == 0:
            return a.label == ROOT_LABEL and len(st.stack) == 2 and st.buffer_empty
        return a.label != ROOT_LABEL
    return False


def apply_action(st: ParserState, a: Action) -> ParserState:
    if not is_valid(st, a):
        raise IllegalActionError(f"{a} is not legal with stack {list(st.stack)} and buffer {list(st.buffer)}")
    history = st.history + (a,)
    if a.kind == SHIFT:
        return ParserState(st.n, st.stack + (st.next_token,), st.next_token + 1, st.arcs, history)
    top, second = st.stack[-1], st.stack[-2]
    if a.kind == LEFT_ARC:
        return ParserState(st.n, st.stack[:-2] + (top,), st.next_token, st.arcs + ((top, second, a.label),), history)
    return ParserState(st.n, st.stack[:-1], st.next_token, st.arcs + ((second, top, a.label),), history)


def oracle_sequence(s: Sentence) -> List[Action]:
    """Static arc-standard oracle for the gold tree of ``s``.

    LEFT_ARC when the second stack item is a gold dependent of the top;
    RIGHT_ARC when the top is a gold dependent of the second item and has
    collected all its own dependents; SHIFT otherwise.
    """
    if not s.has_tree:
        raise IncompleteParseError(f"sentence {s.sent_id!r} has no gold tree")
    crossing = crossing_arcs(s)
    if crossing is not None:
        raise NonProjectiveError(s.sent_id or "?", crossing)

    heads = [0] + [t.head for t in s.tokens]
    labels = [ROOT_LABEL] + [t.deprel for t in s.tokens]
    pending = [0] * (len(s) + 1)
    for h in heads[1:]:
        pending[h] += 1

    st = initial_state(s)
    actions: List[Action] = []
    while not st.is_terminal:
        action = SHIFT_ACTION
        if len(st.stack) >= 2:
            top, second = st.stack[-1], st.stack[-2]
            if second != 0 and heads[second] == top:
                action = Action(LEFT_ARC, labels[second])
            elif heads[top] == second and pending[top] == 0:
                action = ROOT_ACTION if second == 0 else Action(RIGHT_ARC, labels[top])
        if action.kind == LEFT_ARC:
            pending[st.stack[-1]] -= 1
        elif action.kind == RIGHT_ARC:
            pending[st.stack[-2]] -= 1
        st = apply_action(st, action)
        actions.append(action)
    return actions


def replay(s: Sentence, actions: Iterable[Action]) -> ParserState:
    st = initial_state(s)
    for a in actions:
        st = apply_action(st, a)
    return st


def extract_tree(st: ParserState, template: Sentence) -> Sentence:
    """Copy the arcs of a terminal state into ``template``'s HEAD and DEPREL columns."""
    if not st.is_terminal:
        raise IncompleteParseError("cannot extract a tree from a non-terminal state")
    if st.n != len(template):
        raise IncompleteParseError(f"state covers {st.n} tokens, sentence has {len(template)}")
    heads = [0] * st.n
    deprels = [ROOT_LABEL] * st.n
    for head, dep, label in st.arcs:
        heads[dep - 1] = head
        deprels[dep - 1] = label
    return template.with_tree(heads, deprels)


def random_walk(s: Sentence, labels: Sequence[str], rng: np.random.Generator) -> ParserState:
    """Apply uniformly chosen legal actions until the state is terminal."""
    st = initial_state(s)
    while not st.is_terminal:
        options = valid_actions(st, labels)
        st = apply_action(st, options[int(rng.integers(len(options)))])
    return st


@dataclass
class ActionInventory:
    """The closed action set of a trained parser: SHIFT, LEFT_ARC(l)..., RIGHT_ARC(l)..., RIGHT_ARC(root)."""
    labels: Tuple[str, ...]
    actions: Tuple[Action, ...] = field(init=False)
    _index: Dict[Action, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.labels = tuple(_non_root_labels(self.labels)) or (FALLBACK_LABEL,)
        self.actions = (
            (SHIFT_ACTION,)
            + tuple(Action(LEFT_ARC, label) for label in self.labels)
            + tuple(Action(RIGHT_ARC, label) for label in self.labels)
            + (ROOT_ACTION,)
        )
        self._index = {a: i for i, a in enumerate(self.actions)}

    @classmethod
    def from_treebank(cls, tb: Treebank) -> "ActionInventory":
        labels = sorted({t.deprel for s in tb for t in s.tokens if t.head is not None})
        return cls(tuple(labels))

    def __len__(self) -> int:
        return len(self.actions)

    def __contains__(self, a: Action) -> bool:
        return a in self._index

    def index(self, a: Action) -> int:
        return self._index[a]

    def valid_mask(self, st: ParserState) -> np.ndarray:
        mask = np.zeros(len(self.actions), dtype=bool)
        for a in valid_actions(st, self.labels):
            mask[self._index[a]] = True
        return mask

    def covers(self, s: Sentence) -> bool:
        return all(t.deprel in self.labels or t.head == 0 for t in s.tokens)


@dataclass
class OracleCorpus:
    """Oracle action sequences for the usable sentences of a treebank."""
    sentences: List[Sentence]
    sequences: List[List[Action]]
    non_projective: int = 0
    unknown_label: int = 0


def oracle_corpus(tb: Treebank, inventory: ActionInventory) -> OracleCorpus:
    """Oracle sequences for every projective sentence whose labels are all in ``inventory``."""
    corpus = OracleCorpus([], [])
    for s in tb:
        if not s.has_tree:
            continue
        if not inventory.covers(s):
            corpus.unknown_label += 1
            continue
        try:
            seq = oracle_sequence(s)
        except NonProjectiveError as e:
            logger.debug(str(e))
            corpus.non_projective += 1
            continue
        corpus.sentences.append(s)
        corpus.sequences.append(seq)
    if corpus.non_projective:
        logger.warning(f"Skipped {corpus.non_projective} non-projective sentences")
    if corpus.unknown_label:
        logger.warning(f"Skipped {corpus.unknown_label} sentences with labels outside the inventory")
    return corpus
