import pytest

from ssnt.data import (EOS_ID, UNK_ID, CorpusFormatError, RawPair, Vocab, apply_length_filters,
                       build_vocab, detokenize, encode_pairs, load_corpus, parse_lines, tokenize)


def pair(n_src, n_tgt):
    return RawPair(("x",) * n_src, ("y",) * n_tgt)


class TestLoading:
    def test_german_stem(self, tmp_path):
        f = tmp_path / "c.tsv"
        f.write_text("abgang\tabgängen\n", encoding="utf-8")
        (p,) = load_corpus(f, "char")
        assert len(p.source) == 6 and len(p.target) == 8
        assert p.target[3] == "ä"

    def test_empty_file(self, tmp_path):
        f = tmp_path / "c.tsv"
        f.write_text("")
        assert load_corpus(f) == []

    def test_two_tabs_reports_line(self, tmp_path):
        f = tmp_path / "c.tsv"
        f.write_text("a\tb\n\nc\td\te\n")
        with pytest.raises(CorpusFormatError, match=":3:") as info:
            load_corpus(f)
        assert info.value.lineno == 3

    def test_missing_tab(self):
        with pytest.raises(CorpusFormatError):
            parse_lines(["abc"], "char")

    def test_word_level_and_blank_lines(self):
        pairs = parse_lines(["the cat  sat\ta cat", "   ", "x\ty"], "word")
        assert pairs[0] == RawPair(("the", "cat", "sat"), ("a", "cat"))
        assert len(pairs) == 2

    def test_attributes_prefixed(self):
        (p,) = parse_lines(["haus\thäusern\tcase=dat;num=pl"], "char", attributes=True)
        assert p.source[:2] == ("<case=dat>", "<num=pl>") and p.source[2:] == tuple("haus")

    def test_attributes_off_rejects_third_field(self):
        with pytest.raises(CorpusFormatError):
            parse_lines(["a\tb\tc"], "char")

    def test_unknown_level(self):
        with pytest.raises(ValueError):
            tokenize("abc", "byte")

    def test_detokenize(self):
        assert detokenize(list("abc"), "char") == "abc"
        assert detokenize(["a", "b"], "word") == "a b"


class TestFilters:
    def test_product_boundary_kept(self):
        assert apply_length_filters([pair(50, 10)]) == [pair(50, 10)]

    def test_product_exceeded(self):
        assert apply_length_filters([pair(50, 11)]) == []

    def test_source_cap(self):
        assert apply_length_filters([pair(51, 1)]) == []

    def test_target_cap(self):
        assert apply_length_filters([pair(1, 26)]) == []

    def test_order_preserving_and_idempotent(self):
        pairs = [pair(3, 3), pair(60, 1), pair(2, 9), pair(30, 20), pair(1, 1)]
        once = apply_length_filters(pairs)
        assert once == [pairs[0], pairs[2], pairs[4]]
        assert apply_length_filters(once) == once

    def test_configurable(self):
        assert apply_length_filters([pair(4, 4)], max_src=3) == []


class TestVocab:
    def test_reserved_and_tokens(self):
        src, tgt = build_vocab([RawPair(("a", "b"), ("a", "b"))])
        assert src.itos == ["<pad>", "<unk>", "<s>", "</s>", "a", "b"]
        assert tgt == src

    def test_min_count(self):
        pairs = [RawPair(("a", "a", "b"), ("c",)), RawPair(("a",), ("c",))]
        src, _ = build_vocab(pairs, min_count=2)
        assert "b" not in src and "a" in src
        assert src.encode(["b", "a"]) == (UNK_ID, src.stoi["a"], EOS_ID)

    def test_frequency_then_lexicographic(self):
        src, _ = build_vocab([RawPair(tuple("zzyxxw"), ("a",))])
        assert src.itos[4:] == ["x", "z", "w", "y"]

    def test_round_trip(self):
        src, _ = build_vocab([RawPair(tuple("hello"), ("a",))])
        assert src.decode(src.encode(tuple("hole"))) == list("hole")

    def test_save_load(self, tmp_path):
        src, _ = build_vocab([RawPair(tuple("hello wörld"), ("a",))])
        src.save(tmp_path / "v.txt")
        assert Vocab.load(tmp_path / "v.txt") == src
        assert (tmp_path / "v.txt").read_text(encoding="utf-8").split("\n")[:4] == \
            ["<pad>", "<unk>", "<s>", "</s>"]

    def test_deterministic_files(self, tmp_path):
        pairs = parse_lines(["abc\tcab", "bca\tabc", "ddd\te"], "char")
        build_vocab(pairs)[0].save(tmp_path / "a")
        build_vocab(list(pairs))[0].save(tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_rejects_bad_files(self):
        with pytest.raises(ValueError):
            Vocab.from_tokens(["a", "b"])
        with pytest.raises(ValueError):
            Vocab.from_tokens(["<pad>", "<unk>", "<s>", "</s>", "a", "a"])

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_encode_pairs_appends_eos(self):
        pairs = [RawPair(("a",), ("b", "c"))]
        src, tgt = build_vocab(pairs)
        (ex,) = encode_pairs(pairs, src, tgt)
        assert ex.source[-1] == EOS_ID and ex.target[-1] == EOS_ID and len(ex.target) == 3
