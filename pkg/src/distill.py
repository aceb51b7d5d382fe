"""Parser ensembles and their distillation into a single greedy parser.

The ensemble's action distribution is the per-action mean of its members'
distributions. A student parser is trained on ensemble targets with

    loss = alpha * sum_a -p(a|s) log q(a|s) + (1 - alpha) * -log q(gold|s)

over either the static-oracle states (``oracle`` mode) or states reached by
sampling actions from the ensemble (``exploration`` mode, alpha = 1 only).
"""
from __future__ import annotations
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from .config import ParserConfig, TrainingConfig
from .conllu import Sentence, Treebank, read_text
from .errors import (
    DimensionMismatchError,
    EmptyInputError,
    IncompatibleModeError,
    ManifestError,
    TerminalStateError,
    UsageError,
)
from .logger import get_logger
from .parser import (
    ActionDistribution,
    ParserModel,
    StateBatch,
    fit_parser,
    labeled_attachment,
    score_state,
    train_parser,
)
from .runtime import apply_pretrained, load_word_vectors
from .transition import Action, ParserState, apply_action, extract_tree, initial_state, oracle_corpus

logger = get_logger(__name__)

MODES = ("oracle", "exploration")
PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
RENORMALIZE_TOLERANCE = 1e-9
MANIFEST_HEADER = "# twparse ensemble manifest v1"


class Ensemble:
    """N parsers sharing one action inventory and one set of vocabularies."""

    def __init__(self, members: Sequence[ParserModel]):
        if not members:
            raise EmptyInputError("an ensemble needs at least one member")
        first = members[0]
        for i, m in enumerate(members[1:], start=2):
            if m.inventory.actions != first.inventory.actions:
                raise DimensionMismatchError(f"member {i} has a different action inventory")
            if m.vocabs != first.vocabs:
                raise DimensionMismatchError(f"member {i} has different vocabularies")
        self.members = list(members)
        self.inventory = first.inventory
        for m in self.members:
            m.eval()

    def __len__(self) -> int:
        return len(self.members)

    def encode(self, s: Sentence) -> List[torch.Tensor]:
        with torch.no_grad():
            return [m.encode(s) for m in self.members]


def ensemble_distribution(
    e: Ensemble,
    st: ParserState,
    s: Sentence,
    encodings: Optional[Sequence[torch.Tensor]] = None,
) -> ActionDistribution:
    """Mean of the members' q(a|st), action by action.

    Each mean is an exactly rounded sum divided by N, clipped to the
    members' range, so member order never matters and N equal members give
    back that member's distribution unchanged.
    """
    if st.is_terminal:
        raise TerminalStateError("cannot score a terminal state")
    if encodings is None:
        encodings = e.encode(s)
    dists = [score_state(m, st, s, enc) for m, enc in zip(e.members, encodings)]
    mask = dists[0].mask
    stacked = np.stack([d.probs for d in dists])
    probs = np.zeros(stacked.shape[1], dtype=np.float64)
    for j in np.flatnonzero(mask):
        column = stacked[:, j]
        mean = math.fsum(column.tolist()) / len(dists)
        probs[j] = min(max(mean, float(column.min())), float(column.max()))
    total = math.fsum(probs.tolist())
    if abs(total - 1.0) > RENORMALIZE_TOLERANCE:
        probs /= total
    return ActionDistribution(e.inventory, probs, mask)


def ensemble_parse(e: Ensemble, s: Sentence) -> Sentence:
    """Greedy decoding over the averaged distribution."""
    encodings = e.encode(s)
    st = initial_state(s)
    while not st.is_terminal:
        st = apply_action(st, ensemble_distribution(e, st, s, encodings).best_action())
    return extract_tree(st, s)


# ----------------------------------------------------------------------- loss

@dataclass
class DistillationExample:
    sentence: Sentence
    state: ParserState
    target: ActionDistribution
    gold_action: Optional[Action] = None


@dataclass
class ClampCounter:
    """Number of log-probabilities raised to the floor since the last reset."""
    count: int = 0

    def add(self, n: int) -> None:
        if n:
            self.count += n
            logger.warning(f"Clamped {n} zero probabilities at {PROB_FLOOR:g} (total {self.count})")

    def reset(self) -> None:
        self.count = 0


clamped = ClampCounter()


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")


def interpolated_loss(
    log_q: torch.Tensor,
    mask: torch.Tensor,
    targets: Optional[torch.Tensor],
    gold: Optional[torch.Tensor],
    alpha: float,
) -> torch.Tensor:
    """Summed distillation/log-loss mix over a batch of states.

    ``log_q`` and ``targets`` are (states, actions); ``mask`` marks the valid
    actions; ``gold`` holds action indices. Invalid actions contribute
    nothing, valid ones are floored at log(1e-12).
    """
    safe = log_q.masked_fill(~mask, 0.0)
    clamped.add(int(((safe < LOG_FLOOR) & mask).sum()))
    safe = safe.clamp(min=LOG_FLOOR)
    loss = log_q.new_zeros(())
    if alpha > 0.0:
        loss = loss + alpha * -(targets.to(safe.dtype) * safe).sum()
    if alpha < 1.0:
        loss = loss + (1.0 - alpha) * -safe.gather(1, gold.unsqueeze(1)).sum()
    return loss


def distillation_loss(q: ActionDistribution, ex: DistillationExample, alpha: float) -> float:
    _check_alpha(alpha)
    if alpha < 1.0 and ex.gold_action is None:
        raise IncompatibleModeError("alpha < 1 needs a gold action for the log-loss term")
    if not np.array_equal(q.mask, ex.target.mask):
        raise DimensionMismatchError("student and target distributions have different supports")
    mask = torch.from_numpy(q.mask).unsqueeze(0)
    with np.errstate(divide="ignore"):
        log_q = torch.from_numpy(np.log(q.probs)).unsqueeze(0)
    targets = torch.from_numpy(ex.target.probs).unsqueeze(0)
    gold = None
    if ex.gold_action is not None:
        gold = torch.tensor([q.inventory.index(ex.gold_action)])
    return float(interpolated_loss(log_q, mask, targets, gold, alpha))


# ----------------------------------------------------------- state collection

def _map_sentences(fn, sentences: Sequence, jobs: int, desc: str, progress: bool) -> List:
    if jobs <= 1:
        return [fn(s) for s in tqdm(sentences, desc=desc, leave=False, disable=not progress)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(tqdm(pool.map(fn, sentences), total=len(sentences), desc=desc, leave=False, disable=not progress))


def collect_oracle_states(
    e: Ensemble,
    tb: Treebank,
    jobs: int = 1,
    progress: bool = False,
) -> List[DistillationExample]:
    """One example per static-oracle state, with the gold action and the ensemble target."""
    corpus = oracle_corpus(tb, e.inventory)

    def collect(pair: Tuple[Sentence, List[Action]]) -> List[DistillationExample]:
        s, actions = pair
        encodings = e.encode(s)
        st = initial_state(s)
        out = []
        for a in actions:
            out.append(DistillationExample(s, st, ensemble_distribution(e, st, s, encodings), a))
            st = apply_action(st, a)
        return out

    pairs = list(zip(corpus.sentences, corpus.sequences))
    per_sentence = _map_sentences(collect, pairs, jobs, "oracle states", progress)
    examples = [ex for chunk in per_sentence for ex in chunk]
    logger.info(f"Collected {len(examples)} oracle states from {len(pairs)} sentences")
    return examples


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> int:
    """Draw an action index in proportion to its probability (inverse CDF)."""
    support = np.flatnonzero(dist.mask & (dist.probs > 0.0))
    if support.size == 0:
        support = np.flatnonzero(dist.mask)
        weights = np.ones(support.size)
    else:
        weights = dist.probs[support]
    cdf = np.cumsum(weights)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(support[min(k, support.size - 1)])


def collect_exploration_states(
    e: Ensemble,
    tb: Treebank,
    seed: int,
    progress: bool = False,
) -> List[DistillationExample]:
    """Roll out one sampled trajectory per sentence; every visited state becomes an example."""
    rng = np.random.default_rng(seed)
    examples: List[DistillationExample] = []
    for s in tqdm(tb.sentences, desc="exploration", leave=False, disable=not progress):
        if len(s) == 0:
            continue
        encodings = e.encode(s)
        st = initial_state(s)
        while not st.is_terminal:
            target = ensemble_distribution(e, st, s, encodings)
            examples.append(DistillationExample(s, st, target))
            st = apply_action(st, e.inventory.actions[sample_action(target, rng)])
    logger.debug(f"Sampled {len(examples)} exploration states (seed {seed})")
    return examples


def to_batches(examples: Sequence[DistillationExample]) -> List[StateBatch]:
    """Group consecutive examples of the same sentence into one training batch."""
    groups: List[List[DistillationExample]] = []
    for ex in examples:
        if groups and groups[-1][0].sentence is ex.sentence:
            groups[-1].append(ex)
        else:
            groups.append([ex])
    batches = []
    for group in groups:
        targets = torch.from_numpy(np.stack([ex.target.probs for ex in group]))
        gold = None
        if all(ex.gold_action is not None for ex in group):
            inventory = group[0].target.inventory
            gold = torch.tensor([inventory.index(ex.gold_action) for ex in group], dtype=torch.long)
        batches.append(StateBatch(group[0].sentence, [ex.state for ex in group], gold=gold, targets=targets))
    return batches


# ------------------------------------------------------------------- training

def student_for(e: Ensemble, config: ParserConfig, seed: int) -> ParserModel:
    """A fresh parser with the ensemble's vocabularies and action inventory."""
    template = e.members[0]
    hparams = dict(template.hparams)
    hparams.update({
        "word_dim": config.word_dim,
        "char_dim": config.char_dim,
        "char_hidden": config.char_hidden,
        "pos_dim": config.pos_dim,
        "hidden_dim": config.hidden_dim,
        "action_dim": config.action_dim,
        "mlp_dim": config.mlp_dim,
        "dropout": config.dropout,
        "seed": seed,
    })
    student = ParserModel(hparams, template.vocabs)
    if config.pretrained:
        apply_pretrained(student.word_embed, student.vocabs["words"], load_word_vectors(config.pretrained))
    return student


def check_mode(alpha: float, mode: str) -> None:
    _check_alpha(alpha)
    if mode not in MODES:
        raise UsageError(f"unknown distillation mode {mode!r}; expected one of {MODES}")
    if mode == "exploration" and alpha != 1.0:
        raise IncompatibleModeError("exploration mode has no gold actions and needs alpha = 1.0")


def distill_train(
    e: Ensemble,
    tb: Treebank,
    alpha: float,
    mode: str,
    config: ParserConfig,
    training: TrainingConfig,
    dev: Optional[Treebank] = None,
    jobs: int = 1,
) -> ParserModel:
    """Train one greedy parser on ensemble targets.

    Oracle-mode targets are computed once. Exploration mode samples new
    trajectories every epoch, seeded with ``training.seed + epoch``.

    Args:
        e: Ensemble whose averaged distributions are the soft targets.
        tb: Training treebank. Oracle mode skips non-projective sentences.
        alpha: Weight of the ensemble cross-entropy; ``1 - alpha`` weights the gold action.
        mode: ``"oracle"`` or ``"exploration"``. Exploration needs ``alpha == 1.0``.
        config: Student architecture; vocabularies and inventory come from the ensemble.
        training: Epochs, learning rate, clipping and seed.
        dev: Held-out treebank for epoch selection. Defaults to the projective training sentences.
        jobs: Worker threads for collecting oracle states.

    Returns:
        The student from the epoch with the best held-out LAS.

    Raises:
        IncompatibleModeError: exploration mode with ``alpha != 1``.
        EmptyInputError: nothing to train on.
    """
    check_mode(alpha, mode)
    student = student_for(e, config, training.seed)
    name = f"distill[{mode}, alpha={alpha:g}]"

    if mode == "oracle":
        fixed = to_batches(collect_oracle_states(e, tb, jobs, training.progress))
        if not fixed:
            raise EmptyInputError("no projective sentences to distill on")

        def epoch_items(epoch: int) -> List[StateBatch]:
            return fixed
    else:
        if not any(len(s) for s in tb):
            raise EmptyInputError("no sentences to explore")

        def epoch_items(epoch: int) -> List[StateBatch]:
            return to_batches(collect_exploration_states(e, tb, training.seed + epoch, training.progress))

    def loss(m: ParserModel, batch: StateBatch) -> torch.Tensor:
        log_q = m(batch.sentence, batch.states)
        return interpolated_loss(log_q, m.valid_mask(batch.states), batch.targets, batch.gold, alpha)

    if dev is not None and len(dev):
        held_out = dev
    else:
        held_out = Treebank(tuple(oracle_corpus(tb, e.inventory).sentences), tb.split_name)
    logger.info(f"Distilling a {len(e)}-member ensemble in {mode} mode with alpha={alpha:g}")
    fit_parser(student, epoch_items, loss, held_out, training, name)
    return student


def train_ensemble(
    tb: Treebank,
    config: ParserConfig,
    training: TrainingConfig,
    seeds: Sequence[int],
    jobs: int = 1,
    dev: Optional[Treebank] = None,
) -> List[ParserModel]:
    """Train one parser per seed, up to ``jobs`` at a time.

    Each member owns its random generator, so results do not depend on ``jobs``.

    Args:
        tb: Training treebank shared by every member.
        config: Parser architecture shared by every member.
        training: Training settings; ``seed`` is replaced per member.
        seeds: One seed per member.
        jobs: Maximum number of members trained concurrently.
        dev: Held-out treebank for each member's epoch selection.

    Returns:
        Members in the order of ``seeds``.
    """
    if not seeds:
        raise UsageError("an ensemble needs at least one seed")
    quiet = replace(training, progress=training.progress and jobs <= 1)

    def train_member(seed: int) -> ParserModel:
        return train_parser(tb, config, replace(quiet, seed=seed), dev)

    logger.info(f"Training {len(seeds)} ensemble members with {jobs} worker(s)")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(train_member, seeds))


def alpha_sweep(
    e: Ensemble,
    tb: Treebank,
    alphas: Sequence[float],
    config: ParserConfig,
    training: TrainingConfig,
    dev: Treebank,
) -> List[Tuple[float, float]]:
    """Held-out LAS of an oracle-mode student for each alpha.

    Args:
        e: Teacher ensemble.
        tb: Training treebank.
        alphas: Interpolation weights to try, each in [0, 1].
        config: Student architecture.
        training: Training settings, identical for every alpha.
        dev: Treebank used both for epoch selection and for the reported score.

    Returns:
        ``(alpha, las)`` pairs in the order of ``alphas``.
    """
    results = []
    for alpha in alphas:
        student = distill_train(e, tb, alpha, "oracle", config, training, dev)
        las = labeled_attachment(student, dev)
        logger.info(f"alpha={alpha:g}: LAS {las:.1f}")
        results.append((alpha, las))
    return results


# ------------------------------------------------------------------- manifest

def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: str, model_paths: Sequence[str]) -> None:
    """One ``sha256<TAB>path`` line per member; paths are stored relative to the manifest."""
    manifest = Path(path)
    lines = [MANIFEST_HEADER]
    for p in model_paths:
        member = Path(p)
        try:
            shown = member.resolve().relative_to(manifest.parent.resolve())
        except ValueError:
            shown = member
        lines.append(f"{file_sha256(member)}\t{shown.as_posix()}")
    manifest.parent.mkdir(parents=True, exist_ok=True)
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote ensemble manifest with {len(model_paths)} members to {path}")


def read_manifest(path: str) -> List[Path]:
    """Member paths listed in a manifest, after verifying every checksum."""
    manifest = Path(path)
    if not manifest.exists():
        raise ManifestError(f"manifest not found: {path}")
    members: List[Path] = []
    for lineno, line in enumerate(read_text(path).splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        checksum, sep, rel = line.partition("\t")
        if not sep:
            raise ManifestError(f"{path}:{lineno}: expected 'sha256<TAB>path'")
        member = Path(rel)
        if not member.is_absolute():
            member = manifest.parent / member
        if not member.exists():
            raise ManifestError(f"{path}:{lineno}: member model {member} is missing")
        if file_sha256(member) != checksum:
            raise ManifestError(f"{path}:{lineno}: checksum mismatch for {member}")
        members.append(member)
    if not members:
        raise ManifestError(f"{path} lists no members")
    return members


def load_ensemble(path: str) -> Ensemble:
    return Ensemble([ParserModel.load(str(p)) for p in read_manifest(path)])
