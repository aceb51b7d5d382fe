import numpy as np
import pytest

from src.conllu import (
    MultiwordRange,
    Sentence,
    Token,
    Treebank,
    align_forms,
    crossing_arcs,
    ingestion_report,
    is_projective,
    parse_conllu,
    read_conllu,
    sentence_spans,
    validate_sentence,
    write_conllu,
    write_conllu_file,
    write_sentence,
)
from src.errors import AlignmentFailure, ConlluFormatError, InputEncodingError, InvalidSentenceError

from .treebank_factory import make_sentence, random_sentence, random_treebank

HI = (
    "# sent_id = t1\n"
    "# text = Hi !\n"
    "1\tHi\t_\tINTJ\t_\t_\t0\troot\t_\t_\n"
    "2\t!\t_\tPUNCT\t_\t_\t1\tpunct\t_\t_\n"
    "\n"
)

GONNA = (
    "# sent_id = t2\n"
    "# text = gonna win\n"
    "1-2\tgonna\t_\t_\t_\t_\t_\t_\t_\t_\n"
    "1\tgon\t_\tAUX\t_\t_\t3\taux\t_\t_\n"
    "2\tna\t_\tPART\t_\t_\t3\tmark\t_\t_\n"
    "3\twin\t_\tVERB\t_\t_\t0\troot\t_\t_\n"
    "\n"
)


def block(rows, sent_id="x", text=None):
    forms = [r[0] for r in rows]
    lines = [f"# sent_id = {sent_id}", f"# text = {text or ' '.join(forms)}"]
    for i, (form, head, deprel) in enumerate(rows, start=1):
        lines.append(f"{i}\t{form}\t_\tX\t_\t_\t{head}\t{deprel}\t_\t_")
    return "\n".join(lines) + "\n\n"


def test_parse_minimal_sentence():
    tb = parse_conllu(HI)
    assert len(tb) == 1
    s = tb.sentences[0]
    assert s.forms == ["Hi", "!"]
    assert [t.head for t in s.tokens] == [0, 1]
    assert s.sent_id == "t1"
    assert s.text == "Hi !"


def test_write_round_trip_is_byte_identical():
    assert write_conllu(parse_conllu(HI + GONNA)) == HI + GONNA


def test_multiword_range_is_kept():
    s = parse_conllu(GONNA).sentences[0]
    assert s.ranges == (MultiwordRange(1, 2, "gonna"),)
    assert s.forms == ["gon", "na", "win"]


def test_write_empty_treebank():
    assert write_conllu(Treebank()) == ""


def test_single_sentence_ends_with_blank_line():
    assert write_sentence(parse_conllu(HI).sentences[0]).endswith("\n\n")


def test_random_trees_round_trip():
    tb = random_treebank(200, seed=11)
    text = write_conllu(tb)
    again = parse_conllu(text)
    assert again == tb
    assert write_conllu(again) == text


def test_cycle_is_reported_with_line():
    text = block([("a", 0, "root"), ("b", 3, "dep"), ("c", 2, "dep")])
    with pytest.raises(InvalidSentenceError) as excinfo:
        parse_conllu(text)
    assert "cycle through tokens 2,3" in str(excinfo.value)
    assert excinfo.value.line == 4


def test_two_roots_rejected():
    s = make_sentence(["a", "b"], heads=[0, 0], deprels=["root", "root"])
    assert [v.code for v in validate_sentence(s)] == ["MultipleRoots"]


def test_head_out_of_range():
    s = make_sentence(["a", "b", "c"], heads=[0, 5, 1], deprels=["root", "dep", "dep"])
    violations = validate_sentence(s)
    assert [v.code for v in violations] == ["HeadOutOfRange"]
    assert violations[0].detail == "5"


def test_valid_sentence_has_no_violations():
    s = make_sentence(["a", "b"], heads=[0, 1], deprels=["root", "dep"])
    assert validate_sentence(s) == []


def test_unannotated_sentence_is_valid():
    s = make_sentence(["a", "b"])
    assert not s.has_tree
    assert validate_sentence(s) == []


def test_text_mismatch_detected():
    s = make_sentence(["a", "b"], heads=[0, 1], deprels=["root", "dep"], text="a c")
    assert [v.code for v in validate_sentence(s)] == ["TextMismatch"]


def test_multi_root_attached_as_parataxis():
    text = block([("Perfect", 0, "root"), ("Nice", 0, "root")])
    with pytest.raises(InvalidSentenceError):
        parse_conllu(text)
    s = parse_conllu(text, allow_multi_root=True).sentences[0]
    assert [(t.head, t.deprel) for t in s.tokens] == [(0, "root"), (1, "parataxis")]


def test_wrong_column_count():
    with pytest.raises(ConlluFormatError) as excinfo:
        parse_conllu("# sent_id = a\n# text = a\n1\ta\t_\n\n")
    assert excinfo.value.line == 3


def test_empty_nodes_rejected():
    text = HI.replace("2\t!", "1.1\t!")
    with pytest.raises(ConlluFormatError):
        parse_conllu(text)


def test_duplicate_sent_id_rejected():
    with pytest.raises(ConlluFormatError, match="duplicate sent_id"):
        parse_conllu(HI + HI)


def test_crossing_arcs_found():
    s = make_sentence(["a", "b", "c", "d"], heads=[3, 0, 2, 1], deprels=["dep", "root", "dep", "dep"])
    assert not is_projective(s)
    assert crossing_arcs(s) is not None


def test_random_projective_trees_are_projective():
    rng = np.random.default_rng(5)
    for i in range(100):
        assert is_projective(random_sentence(rng, f"p{i}"))


def test_align_forms_falls_back_to_case_insensitive():
    assert align_forms("LOL ok", ["lol", "ok"]) == [(0, 3), (4, 6)]
    with pytest.raises(AlignmentFailure) as excinfo:
        align_forms("a b", ["a", "c"])
    assert excinfo.value.token == "c"


def test_sentence_spans_use_multiword_surface():
    s = Sentence(
        ("# sent_id = m", "# text = dont go"),
        (Token(1, "do"), Token(2, "n't"), Token(3, "go")),
        (MultiwordRange(1, 2, "dont"),),
    )
    assert sentence_spans("dont go", s) == [(0, 2), (2, 4), (5, 7)]


def test_file_round_trip(tmp_path):
    tb = parse_conllu(HI + GONNA)
    path = tmp_path / "out" / "tb.conllu"
    write_conllu_file(str(path), tb)
    assert read_conllu(str(path), split_name="dev") == Treebank(tb.sentences, "dev")


def test_read_rejects_invalid_utf8(tmp_path):
    path = tmp_path / "bad.conllu"
    path.write_bytes(HI.encode("utf-8").replace(b"Hi", b"H\xff", 1))
    with pytest.raises(InputEncodingError) as err:
        read_conllu(str(path))
    assert err.value.offset == HI.encode("utf-8").index(b"Hi") + 1
    assert isinstance(err.value, ValueError)


def test_with_comment_replaces_key():
    s = parse_conllu(HI).sentences[0].with_comment("text", "Hi!")
    assert s.text == "Hi!"
    assert sum(c.startswith("# text") for c in s.comments) == 1


def test_ingestion_report_counts():
    non_projective = make_sentence(
        ["a", "b", "c", "d"], heads=[3, 0, 2, 1], deprels=["dep", "root", "dep", "dep"], sent_id="np",
    )
    tb = Treebank(parse_conllu(HI + GONNA).sentences + (non_projective,))
    report = ingestion_report(tb)
    assert report.sentences == 3
    assert report.tokens == 9
    assert report.non_projective == 1
    assert report.multiword_ranges == 1
    assert report.label_counts["root"] == 3
