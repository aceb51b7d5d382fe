import numpy as np
import pytest

from src.conllu import MultiwordRange, Sentence, Token, Treebank
from src.errors import AllowlistError, InputEncodingError
from src.lint import (
    RULES,
    TokenClass,
    anonymize,
    classify_token,
    corpus_stats,
    lint_sentence,
    lint_treebank,
    load_allowlist,
    write_allowlist,
)

from .treebank_factory import grammar_treebank, make_sentence, retweet_sentence


def codes(s):
    return [v.rule.code for v in lint_sentence(s)]


@pytest.mark.parametrize("form,expected", [
    ("RT", TokenClass.RT_MARKER),
    ("@coldplay", TokenClass.AT_MENTION),
    ("#ColdplayMinneapolis", TokenClass.HASHTAG),
    ("http://bit.ly/2dj2WCl", TokenClass.URL),
    ("www.example.com", TokenClass.URL),
    ("x.co", TokenClass.URL),
    (":)", TokenClass.EMOTICON),
    (":-D", TokenClass.EMOTICON),
    ("<3", TokenClass.EMOTICON),
    ("\U0001F602", TokenClass.EMOTICON),
    ("\U0001F602\U0001F602", TokenClass.EMOTICON),
    ("back", TokenClass.PLAIN),
    ("#", TokenClass.PLAIN),
    ("@", TokenClass.PLAIN),
])
def test_classify_token(form, expected):
    assert classify_token(form) is expected


def test_truncated_word_only_at_the_end():
    assert classify_token("amazi…", 4, 5) is TokenClass.TRUNCATED_WORD
    assert classify_token("amazi...", 4, 5) is TokenClass.TRUNCATED_WORD
    assert classify_token("amazi…", 2, 5) is TokenClass.PLAIN
    assert classify_token("...", 4, 5) is TokenClass.PLAIN


def test_anonymize():
    assert anonymize("hi @bob see http://x.co") == "hi @USER see URL"
    assert anonymize("no handles here") == "no handles here"
    assert anonymize("mail me at bob@example") == "mail me at bob@example"


@pytest.mark.parametrize("email", ["bob@gmail.com", "bob@mail.co.uk", "a.b@my-mail.co.uk", "me@www.site.org"])
def test_anonymize_leaves_email_addresses(email):
    assert anonymize(f"write to {email} or @bob") == f"write to {email} or @USER"
    assert classify_token(email) is TokenClass.PLAIN


def test_anonymize_is_idempotent_and_keeps_chunks():
    rng = np.random.default_rng(0)
    pieces = ["hi", "@bob", "@a_b", "see", "http://x.co/a?b=1", "www.foo.org", "bit.ly/xyz", "#tag", "lol", ":)"]
    for _ in range(200):
        raw = " ".join(pieces[int(i)] for i in rng.integers(len(pieces), size=int(rng.integers(1, 8))))
        once = anonymize(raw)
        assert anonymize(once) == once
        assert len(once.split()) == len(raw.split())


def test_rule_codes_are_unique():
    assert len(RULES) == 8
    assert RULES["unsplit-contraction"].severity == "warning"


def test_retweet_annotated_by_convention_is_clean():
    assert lint_sentence(retweet_sentence()) == []


def test_url_attached_as_discourse():
    s = make_sentence(["see", "http://x.co"], ["VERB", "X"], [0, 1], ["root", "discourse"])
    assert codes(s) == ["url-list"]


def test_emoticon_tagged_x():
    s = make_sentence(["great", ":)"], ["ADJ", "X"], [0, 1], ["root", "discourse"])
    violations = lint_sentence(s)
    assert [v.rule.code for v in violations] == ["nonsyntactic-upos"]
    assert violations[0].token_id == 2


def test_hashtag_attached_as_list():
    s = make_sentence(["great", "#tbt"], ["ADJ", "X"], [0, 1], ["root", "list"])
    assert codes(s) == ["nonsyntactic-discourse"]


def test_syntactic_hashtag_is_left_alone():
    s = make_sentence(["love", "#Coldplay"], ["VERB", "PROPN"], [0, 1], ["root", "obj"])
    assert codes(s) == []


def test_retweet_mention_attached_elsewhere():
    s = retweet_sentence()
    tokens = list(s.tokens)
    tokens[1] = Token(2, "@coldplay", upos="X", head=4, deprel="discourse")
    violations = lint_sentence(Sentence(s.comments, tuple(tokens)))
    assert [(v.rule.code, v.token_id) for v in violations] == [("retweet", 2)]


def test_retweet_colon_attached_elsewhere():
    s = retweet_sentence()
    tokens = list(s.tokens)
    tokens[2] = Token(3, ":", upos="PUNCT", head=4, deprel="punct")
    assert [(v.rule.code, v.token_id) for v in lint_sentence(Sentence(s.comments, tuple(tokens)))] == [("retweet", 3)]


def test_vocative_mention_needs_propn():
    s = make_sentence(["@bob", "thanks"], ["NOUN", "VERB"], [2, 0], ["vocative", "root"])
    assert codes(s) == ["vocative-propn"]
    ok = make_sentence(["@bob", "thanks"], ["PROPN", "VERB"], [2, 0], ["vocative", "root"])
    assert codes(ok) == []


def test_entirely_non_syntactic_tweet():
    chained = make_sentence(["@bob", "#tbt", "http://x.co"], ["X", "X", "X"], [0, 1, 2], ["root", "discourse", "list"])
    violations = lint_sentence(chained)
    assert [(v.rule.code, v.token_id) for v in violations] == [("all-nonsyntactic", 3)]
    flat = make_sentence(["@bob", "#tbt", "http://x.co"], ["X", "X", "X"], [0, 1, 1], ["root", "discourse", "list"])
    assert codes(flat) == []


def test_unsplit_contractions_warn():
    s = make_sentence(["im", "gonna", "win"], ["PRON", "AUX", "VERB"], [3, 3, 0], ["nsubj", "aux", "root"])
    violations = lint_sentence(s)
    assert codes(s) == ["unsplit-contraction"]
    assert not violations[0].is_error
    cop = make_sentence(["its", "great"], ["AUX", "ADJ"], [2, 0], ["cop", "root"])
    assert codes(cop) == ["unsplit-contraction"]


def test_split_contraction_is_fine():
    s = Sentence(
        ("# sent_id = c1", "# text = gonna win"),
        (Token(1, "gon", upos="AUX", head=3, deprel="aux"),
         Token(2, "na", upos="PART", head=3, deprel="mark"),
         Token(3, "win", upos="VERB", head=0, deprel="root")),
        (MultiwordRange(1, 2, "gonna"),),
    )
    assert codes(s) == []


def test_goeswith_must_follow_head():
    s = make_sentence(["some", "thing"], ["X", "NOUN"], [2, 0], ["goeswith", "root"])
    assert codes(s) == ["goeswith-order"]
    fine = make_sentence(["some", "thing"], ["DET", "X"], [0, 1], ["root", "goeswith"])
    assert codes(fine) == []


def test_violation_format():
    s = make_sentence(["see", "http://x.co"], ["VERB", "X"], [0, 1], ["root", "discourse"], sent_id="tw9")
    line = lint_sentence(s)[0].format()
    assert line.split("\t")[:3] == ["tw9", "2", "url-list"]


def test_allowlist_round_trip(tmp_path):
    bad = make_sentence(["see", "http://x.co"], ["VERB", "X"], [0, 1], ["root", "discourse"], sent_id="a")
    warn = make_sentence(["gonna", "win"], ["AUX", "VERB"], [2, 0], ["aux", "root"], sent_id="b")
    tb = Treebank((bad, warn, retweet_sentence()))
    first = lint_treebank(tb)
    assert len(first.errors) == 1
    assert len(first.warnings) == 1

    path = tmp_path / "allow.tsv"
    assert write_allowlist(str(path), first.violations) == 1
    allowlist = load_allowlist(str(path))
    assert allowlist == {("a", 2, "url-list")}

    second = lint_treebank(tb, allowlist)
    assert second.errors == []
    assert second.allowed == 1
    assert len(second.warnings) == 1
    assert load_allowlist(None) == set()


@pytest.mark.parametrize("line,lineno", [
    ("a\t2", 2),
    ("a\ttwo\turl-list", 2),
    ("a\t2\tno-such-rule", 2),
])
def test_allowlist_rejects_malformed_lines(tmp_path, line, lineno):
    path = tmp_path / "allow.tsv"
    path.write_text(f"# sent_id\ttoken_id\tcode\n{line}\n", encoding="utf-8")
    with pytest.raises(AllowlistError) as err:
        load_allowlist(str(path))
    assert err.value.line == lineno


def test_allowlist_rejects_invalid_utf8(tmp_path):
    path = tmp_path / "allow.tsv"
    path.write_bytes(b"a\xff\t2\turl-list\n")
    with pytest.raises(InputEncodingError):
        load_allowlist(str(path))


def test_plain_treebank_has_zero_shares():
    stats = corpus_stats(grammar_treebank(5))
    assert all(row.total == 0.0 for row in stats.rows)
    assert stats.non_syntactic_total == 0.0
    assert TokenClass.PLAIN not in {row.token_class for row in stats.rows}


def test_retweet_shares():
    stats = corpus_stats(Treebank((retweet_sentence(),)))
    rows = {row.token_class: row for row in stats.rows}
    assert stats.tokens == 10
    for cls in (TokenClass.RT_MARKER, TokenClass.AT_MENTION, TokenClass.HASHTAG, TokenClass.URL):
        assert rows[cls].non_syntactic == pytest.approx(10.0)
        assert rows[cls].syntactic == 0.0
        assert rows[cls].total == rows[cls].syntactic + rows[cls].non_syntactic
    assert stats.non_syntactic_total == pytest.approx(40.0)
