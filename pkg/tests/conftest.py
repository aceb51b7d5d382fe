import pytest

from src.config import ParserConfig, TaggerConfig, TokenizerConfig, TrainingConfig

from .treebank_factory import grammar_treebank


@pytest.fixture
def training():
    return TrainingConfig(epochs=2, learning_rate=0.1, seed=1, progress=False)


@pytest.fixture
def tokenizer_config():
    return TokenizerConfig(char_dim=8, hidden_dim=8, min_char_freq=1)


@pytest.fixture
def tagger_config():
    return TaggerConfig(word_dim=8, char_dim=4, char_hidden=4, hidden_dim=8, min_word_freq=1)


@pytest.fixture
def parser_config():
    return ParserConfig(
        word_dim=8, char_dim=4, char_hidden=4, pos_dim=4,
        hidden_dim=8, action_dim=4, mlp_dim=16, min_word_freq=1,
    )


@pytest.fixture
def toy_treebank():
    return grammar_treebank(12, seed=3)
