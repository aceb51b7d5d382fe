"""Neural building blocks shared by the tokenizer, tagger and parser.

Covers:
- Vocabularies with UNK at index 0 and a frequency cutoff
- Seeded initialisation and dropout (every model owns its own generator,
  so models can train in parallel threads without sharing RNG state)
- A recorded forward pass (Tape) and reverse-mode gradients keyed by
  parameter name
- Central-difference gradient checking in float64
- Clipped SGD steps with a per-epoch learning-rate decay
- A versioned binary model file: JSON header + row-major float32 tensors
"""
from __future__ import annotations
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Type, TypeVar

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence
from tqdm import tqdm

from .config import TrainingConfig
from .conllu import read_text
from .errors import (
    DimensionMismatchError,
    ModelFormatError,
    NonFiniteGradientError,
    TapeInvalidatedError,
)
from .logger import get_logger

logger = get_logger(__name__)

UNK = "<unk>"
FORMAT_VERSION = 1
MAGIC = b"TWPM"
HEADER_KEYS = ("kind", "hparams", "vocabs", "tensors")
EMBEDDING_INIT_RANGE = 0.1


class Vocab:
    """Injective item -> index map; index 0 is always UNK."""

    def __init__(self, items: Iterable[str] = ()):
        self._items: List[str] = [UNK]
        self._index: Dict[str, int] = {UNK: 0}
        for item in items:
            self.add(item)

    @classmethod
    def from_counts(cls, counts: Mapping[str, int], min_freq: int = 1) -> "Vocab":
        # Sorted by (-count, item) so the same corpus always yields the same indices
        kept = sorted((item for item, c in counts.items() if c >= min_freq), key=lambda x: (-counts[x], x))
        return cls(kept)

    @classmethod
    def build(cls, items: Iterable[str], min_freq: int = 1) -> "Vocab":
        return cls.from_counts(Counter(items), min_freq)

    def add(self, item: str) -> int:
        if item not in self._index:
            self._index[item] = len(self._items)
            self._items.append(item)
        return self._index[item]

    def index(self, item: str) -> int:
        return self._index.get(item, 0)

    def item(self, index: int) -> str:
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item: str) -> bool:
        return item in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self._items == other._items

    def to_list(self) -> List[str]:
        return list(self._items)

    @classmethod
    def from_list(cls, items: Sequence[str]) -> "Vocab":
        if not items or items[0] != UNK:
            raise ModelFormatError("vocabulary must start with the UNK entry")
        if len(set(items)) != len(items):
            raise ModelFormatError("vocabulary entries must be unique")
        return cls(items[1:])


# ------------------------------------------------------------ initialisation

def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _uniform_(t: torch.Tensor, bound: float, generator: torch.Generator) -> None:
    with torch.no_grad():
        values = torch.rand(t.shape, generator=generator, dtype=torch.float64) * (2 * bound) - bound
        t.copy_(values.to(t.dtype))


def init_module(module: nn.Module, generator: torch.Generator) -> None:
    """Embeddings uniform in [-0.1, 0.1]; matrices Glorot-uniform; vectors zero."""
    embedding_weights = {id(m.weight) for m in module.modules() if isinstance(m, nn.Embedding)}
    for name, p in module.named_parameters():
        if id(p) in embedding_weights:
            _uniform_(p, EMBEDDING_INIT_RANGE, generator)
        elif p.dim() >= 2:
            fan_out, fan_in = p.shape[0], int(np.prod(p.shape[1:]))
            _uniform_(p, math.sqrt(6.0 / (fan_in + fan_out)), generator)
        else:
            with torch.no_grad():
                p.zero_()


def dropout(x: torch.Tensor, p: float, generator: torch.Generator, training: bool) -> torch.Tensor:
    if not training or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def check_indices(ids: torch.Tensor, size: int, what: str) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= size):
        raise IndexError(f"{what} index out of bounds for vocabulary of size {size}")


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Log-softmax over the positions where ``mask`` is true; -inf elsewhere."""
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


# ------------------------------------------------------------------- layers

class CharComposer(nn.Module):
    """Character embeddings run through a BiLSTM; the two final states form the word vector."""

    def __init__(self, n_chars: int, char_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.embed = nn.Embedding(n_chars, char_dim)
        self.lstm = nn.LSTM(char_dim, hidden_dim, batch_first=True, bidirectional=True)

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    def forward(self, words: Sequence[Sequence[int]]) -> torch.Tensor:
        lengths = [max(1, len(w)) for w in words]
        ids = torch.zeros((len(words), max(lengths)), dtype=torch.long)
        for i, w in enumerate(words):
            if w:
                ids[i, :len(w)] = torch.tensor(w, dtype=torch.long)
        check_indices(ids, self.embed.num_embeddings, "character")
        packed = pack_padded_sequence(self.embed(ids), torch.tensor(lengths), batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.lstm(packed)
        return torch.cat([h_n[0], h_n[1]], dim=-1)


# -------------------------------------------------------------- base model

ModelT = TypeVar("ModelT", bound="NeuralModel")
T = TypeVar("T")


class NeuralModel(nn.Module):
    """A trainable network with its hyperparameters and vocabularies.

    Subclasses build their layers in ``__init__(hparams, vocabs)`` and call
    ``finish_init()`` last.
    """

    KIND = "model"

    def __init__(self, hparams: Mapping[str, Any], vocabs: Mapping[str, Vocab]):
        super().__init__()
        self.hparams: Dict[str, Any] = dict(hparams)
        self.vocabs: Dict[str, Vocab] = dict(vocabs)
        self.dropout_generator = make_generator(self.seed + 1)

    @property
    def seed(self) -> int:
        return int(self.hparams.get("seed", 1))

    def finish_init(self) -> None:
        init_module(self, make_generator(self.seed))

    def reseed(self, seed: int) -> None:
        self.dropout_generator.manual_seed(int(seed))

    def drop(self, x: torch.Tensor) -> torch.Tensor:
        return dropout(x, float(self.hparams.get("dropout", 0.0)), self.dropout_generator, self.training)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def clone(self: ModelT) -> ModelT:
        twin = type(self)(self.hparams, self.vocabs)
        twin.load_state_dict(self.state_dict())
        return twin

    def save(self, path: str) -> None:
        save_params(path, self.KIND, self.hparams, self.vocabs, self.state_dict())

    @classmethod
    def load(cls: Type[ModelT], path: str) -> ModelT:
        header, tensors = load_params(path)
        if header["kind"] != cls.KIND:
            raise ModelFormatError(f"{path} holds a {header['kind']!r} model, expected {cls.KIND!r}")
        vocabs = {k: Vocab.from_list(v) for k, v in header["vocabs"].items()}
        model = cls(header["hparams"], vocabs)
        expected = model.state_dict()
        for name, t in tensors.items():
            if name not in expected:
                raise DimensionMismatchError(f"{path}: unexpected tensor {name!r}")
            if tuple(expected[name].shape) != tuple(t.shape):
                raise DimensionMismatchError(
                    f"{path}: tensor {name!r} has shape {tuple(t.shape)}, network expects {tuple(expected[name].shape)}"
                )
        missing = set(expected) - set(tensors)
        if missing:
            raise DimensionMismatchError(f"{path}: missing tensors {sorted(missing)}")
        model.load_state_dict(tensors)
        model.eval()
        logger.debug(f"Loaded {cls.KIND} model from {path}")
        return model


# ---------------------------------------------------------- forward/backward

@dataclass
class Tape:
    """One recorded forward pass. torch's autograd graph hangs off ``outputs``."""
    outputs: torch.Tensor
    model: nn.Module
    versions: Dict[str, int] = field(default_factory=dict)
    consumed: bool = False


def _param_versions(model: nn.Module) -> Dict[str, int]:
    return {name: p._version for name, p in model.named_parameters()}


def record(model: nn.Module, outputs: torch.Tensor) -> Tape:
    return Tape(outputs=outputs, model=model, versions=_param_versions(model))


def forward(model: NeuralModel, inputs: Any, seed: Optional[int] = None, train: bool = False) -> Tuple[torch.Tensor, Tape]:
    """Run ``model`` on ``inputs`` and return the outputs with their tape.

    Dropout draws from the model's own generator, reseeded with ``seed``
    when given, so the pass is reproducible.
    """
    model.train(train)
    if seed is not None:
        model.reseed(seed)
    outputs = model(*inputs) if isinstance(inputs, tuple) else model(inputs)
    return outputs, record(model, outputs)


def backward(tape: Tape, loss_gradient: Any = None) -> Dict[str, torch.Tensor]:
    """Gradients of the taped outputs, keyed like ``model.named_parameters()``.

    Parameters the pass never touched get zero gradients. A tape can be
    used once, and not after any parameter changed.
    """
    if tape.consumed:
        raise TapeInvalidatedError("tape was already consumed by an earlier backward pass")
    now = _param_versions(tape.model)
    changed = [name for name, v in tape.versions.items() if now.get(name) != v]
    if changed:
        raise TapeInvalidatedError(f"parameters changed since the forward pass: {changed[:3]}")
    if loss_gradient is None:
        grad_out = torch.ones_like(tape.outputs)
    else:
        grad_out = torch.as_tensor(loss_gradient, dtype=tape.outputs.dtype).expand_as(tape.outputs)
    named = [(n, p) for n, p in tape.model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(tape.outputs, [p for _, p in named], grad_outputs=grad_out, allow_unused=True)
    tape.consumed = True
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named, grads)
    }


def finite_diff_check(
    model: NeuralModel,
    loss_fn: Callable[[NeuralModel], torch.Tensor],
    epsilon: float = 1e-5,
    samples: int = 100,
    seed: int = 0,
    min_gradient: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a float64 clone in eval mode. Coordinates are sampled among
    those whose analytic gradient magnitude is at least ``min_gradient``;
    below that the central difference is dominated by rounding.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    replica = model.clone().double()
    replica.eval()
    loss = loss_fn(replica)
    grads = backward(record(replica, loss))
    params = dict(replica.named_parameters())

    candidates: List[Tuple[str, int]] = []
    for name, g in grads.items():
        flat = g.reshape(-1)
        idx = torch.nonzero(flat.abs() >= min_gradient).reshape(-1).tolist()
        candidates.extend((name, i) for i in idx)
    if not candidates:
        return 0.0
    rng = np.random.default_rng(seed)
    if len(candidates) > samples:
        picked = rng.choice(len(candidates), size=samples, replace=False)
        candidates = [candidates[i] for i in sorted(picked)]

    worst = 0.0
    with torch.no_grad():
        for name, i in candidates:
            flat = params[name].view(-1)
            original = float(flat[i])
            flat[i] = original + epsilon
            plus = float(loss_fn(replica))
            flat[i] = original - epsilon
            minus = float(loss_fn(replica))
            flat[i] = original
            numeric = (plus - minus) / (2 * epsilon)
            analytic = float(grads[name].reshape(-1)[i])
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- training

def make_optimizer(model: nn.Module, config: TrainingConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate)


def set_epoch_learning_rate(optimizer: torch.optim.Optimizer, config: TrainingConfig, epoch: int) -> float:
    lr = config.learning_rate / (1.0 + config.learning_rate_decay * epoch)
    for group in optimizer.param_groups:
        group["lr"] = lr
    return lr


def optimize_step(model: nn.Module, optimizer: torch.optim.Optimizer, clip_norm: float) -> float:
    """Clip the gradient norm, then apply one optimizer update.

    Returns the pre-clipping gradient norm. A non-finite gradient aborts the
    step before any parameter changes.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    for name, p in named:
        if not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradientError(name)
    norm = torch.nn.utils.clip_grad_norm_([p for _, p in named], clip_norm)
    optimizer.step()
    return float(norm)


def fit(
    model: NeuralModel,
    epoch_items: Callable[[int], Sequence[T]],
    loss_fn: Callable[[NeuralModel, T], torch.Tensor],
    evaluate: Callable[[NeuralModel], float],
    config: TrainingConfig,
    name: str,
    perfect: float = 100.0,
) -> float:
    """SGD over shuffled items, one update per item; keeps the best epoch by ``evaluate``.

    ``epoch_items(epoch)`` may return a different list each epoch. Training
    stops early once the score reaches ``perfect``. Returns the best score.
    """
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    best_score = -math.inf
    best_state: Optional[Dict[str, torch.Tensor]] = None
    for epoch in range(config.epochs):
        lr = set_epoch_learning_rate(optimizer, config, epoch)
        items = epoch_items(epoch)
        model.train()
        model.reseed(config.seed * 1000 + epoch)
        total = 0.0
        order = rng.permutation(len(items))
        for i in tqdm(order, desc=f"{name} epoch {epoch + 1}", leave=False, disable=not config.progress):
            optimizer.zero_grad()
            loss = loss_fn(model, items[int(i)])
            loss.backward()
            optimize_step(model, optimizer, config.clip_norm)
            total += float(loss)
        model.eval()
        with torch.no_grad():
            score = evaluate(model)
        logger.debug(f"{name} epoch {epoch + 1}: loss={total:.4f} lr={lr:.4f} dev={score:.2f}")
        if score > best_score:
            best_score = score
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if score >= perfect:
            logger.debug(f"{name}: dev score reached {perfect}, stopping after epoch {epoch + 1}")
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return best_score


# ---------------------------------------------------------- serialisation

def save_params(
    path: str,
    kind: str,
    hparams: Mapping[str, Any],
    vocabs: Mapping[str, Vocab],
    state: Mapping[str, torch.Tensor],
) -> None:
    """Write MAGIC, uint32 version, uint64 header size, JSON header, float32 tensors."""
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "hparams": dict(hparams),
        "vocabs": {k: v.to_list() for k, v in vocabs.items()},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in state.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for t in state.values():
            f.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes(order="C"))
    logger.debug(f"Saved {kind} model ({len(state)} tensors) to {path}")


def load_params(path: str) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise ModelFormatError(f"{path} is not a model file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    (size,) = struct.unpack("<Q", data[8:16])
    if 16 + size > len(data):
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + size].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise ModelFormatError(f"{path}: unreadable header ({e})") from e
    if not isinstance(header, dict):
        raise ModelFormatError(f"{path}: header is not a JSON object")
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise ModelFormatError(f"{path}: header lacks {', '.join(missing)}")
    if not isinstance(header["tensors"], list):
        raise ModelFormatError(f"{path}: header tensors must be a list")
    offset = 16 + size
    tensors: Dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        try:
            name, shape = entry["name"], tuple(int(d) for d in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise ModelFormatError(f"{path}: malformed tensor entry {entry!r}") from e
        if any(d < 0 for d in shape):
            raise ModelFormatError(f"{path}: negative dimension in {name!r}")
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise ModelFormatError(f"{path}: truncated tensor data for {name!r}")
        array = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(array.astype(np.float32))
        offset = end
    if offset != len(data):
        raise ModelFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return header, tensors


# --------------------------------------------------------- word vectors

def load_word_vectors(path: str) -> Dict[str, np.ndarray]:
    """Read ``word v1 ... vd`` lines. A leading ``count dim`` line is skipped."""
    vectors: Dict[str, np.ndarray] = {}
    dim: Optional[int] = None
    for lineno, line in enumerate(read_text(path).splitlines(), start=1):
        parts = line.rstrip().split(" ")
        if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
            continue
        if len(parts) < 2:
            continue
        try:
            values = np.asarray(parts[1:], dtype=np.float32)
        except ValueError as e:
            raise ModelFormatError(f"{path}:{lineno}: non-numeric vector for {parts[0]!r}") from e
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise DimensionMismatchError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
        vectors[parts[0]] = values
    logger.info(f"Loaded {len(vectors)} pretrained vectors (dim={dim}) from {path}")
    return vectors


def apply_pretrained(embedding: nn.Embedding, vocab: Vocab, vectors: Mapping[str, np.ndarray]) -> int:
    """Copy pretrained rows into ``embedding`` for every vocabulary item that has one."""
    hits = 0
    with torch.no_grad():
        for index, item in enumerate(vocab.to_list()):
            vec = vectors.get(item)
            if vec is None:
                continue
            if vec.shape[0] != embedding.embedding_dim:
                raise DimensionMismatchError(
                    f"pretrained dim {vec.shape[0]} != embedding dim {embedding.embedding_dim}"
                )
            embedding.weight[index] = torch.from_numpy(vec)
            hits += 1
    logger.debug(f"Pretrained vectors cover {hits}/{len(vocab)} vocabulary entries")
    return hits
