"""Tweet pipeline - raw tweets to parsed CoNLL-U.

This module chains the three trained models:
1. Tokenize each raw tweet (character tagger, multiword ranges kept)
2. Tag every token with a UPOS
3. Parse with a single greedy parser or an averaged ensemble

Optionally anonymizes at-mentions and URLs before tokenization.
"""
from __future__ import annotations
from typing import Callable, Iterable, List, Union

from tqdm import tqdm

from ..conllu import Sentence, Treebank, read_text
from ..distill import MANIFEST_HEADER, Ensemble, ensemble_parse, load_ensemble
from ..lint import anonymize as anonymize_text
from ..logger import get_logger
from ..parser import ParserModel, greedy_parse
from ..tagger import TaggerModel, tag_tokens
from ..tokenizer import TokenizerModel, tokenize

logger = get_logger(__name__)

Parser = Union[ParserModel, Ensemble]


def is_manifest(path: str) -> bool:
    """True when ``path`` is an ensemble manifest rather than a single model file."""
    try:
        with open(path, "rb") as f:
            return f.read(len(MANIFEST_HEADER)) == MANIFEST_HEADER.encode("utf-8")
    except OSError:
        return False


def load_parser(path: str) -> Parser:
    """A single parser model, or an ensemble when ``path`` is a manifest."""
    return load_ensemble(path) if is_manifest(path) else ParserModel.load(path)


def parse_function(parser: Parser) -> Callable[[Sentence], Sentence]:
    if isinstance(parser, Ensemble):
        return lambda s: ensemble_parse(parser, s)
    return lambda s: greedy_parse(parser, s)


class TweetPipeline:
    def __init__(self, tokenizer: TokenizerModel, tagger: TaggerModel, parser: Parser, progress: bool = False):
        self.tokenizer = tokenizer
        self.tagger = tagger
        self.parser = parser
        self.progress = progress

    @classmethod
    def from_paths(cls, tokenizer: str, tagger: str, parser: str, progress: bool = False) -> "TweetPipeline":
        """Load the three models; ``parser`` may name a model file or an ensemble manifest."""
        logger.info(f"Loading pipeline models: tokenizer={tokenizer} tagger={tagger} parser={parser}")
        return cls(TokenizerModel.load(tokenizer), TaggerModel.load(tagger), load_parser(parser), progress)

    @property
    def parse_fn(self) -> Callable[[Sentence], Sentence]:
        return parse_function(self.parser)

    def process_one(self, raw: str, sent_id: str, anonymize: bool = False) -> Sentence:
        text = anonymize_text(raw) if anonymize else raw
        s = tokenize(self.tokenizer, text, sent_id)
        return self.parse_fn(tag_tokens(self.tagger, s))

    def process(
        self,
        raw_tweets: Iterable[str],
        anonymize: bool = False,
        id_prefix: str = "tweet",
    ) -> Treebank:
        """One parsed sentence per non-blank tweet, with ``sent_id`` numbered by input line."""
        out: List[Sentence] = []
        skipped = 0
        lines = list(raw_tweets)
        for lineno, raw in enumerate(tqdm(lines, desc="pipeline", leave=False, disable=not self.progress), start=1):
            raw = raw.rstrip("\r\n")
            if not raw.strip():
                skipped += 1
                continue
            out.append(self.process_one(raw, f"{id_prefix}-{lineno}", anonymize))
        if skipped:
            logger.warning(f"Skipped {skipped} empty input lines")
        logger.info(f"Pipeline processed {len(out)} tweets ({sum(len(s) for s in out)} tokens)")
        return Treebank(tuple(out))


def read_tweets(path: str) -> List[str]:
    """One raw tweet per line; ``-`` reads stdin."""
    return read_text(path).splitlines()
