import json

import numpy as np
import pytest

from ssnt.cli import UsageError, main, resolve_config
from ssnt.data import Vocab
from ssnt.train import Checkpoint, TrainConfig

from conftest import make_model


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny model trained through the CLI on a two-letter copy task."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    lines = ["".join(rng.choice(list("ab"), int(rng.integers(1, 4)))) for _ in range(40)]
    (root / "train.tsv").write_text("".join(f"{s}\t{s}\n" for s in lines))
    (root / "dev.tsv").write_text("ab\tab\nba\tba\n")
    code = main(["train", "--train", str(root / "train.tsv"), "--dev", str(root / "dev.tsv"),
                 "--out", str(root / "run"), "--set", "hidden=8", "--set", "max_epochs=3",
                 "--set", "batch_size=4", "--set", "lr=0.01"])
    assert code == 0
    return root


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestTrain:
    def test_writes_checkpoint_with_override(self, trained):
        ck = trained / "run" / "best.ckpt"
        header, _ = Checkpoint.read_header(ck)
        assert header["config"]["hidden"] == 8 and header["net"]["hidden"] == 8
        assert (trained / "run" / "metrics.csv").read_text().count("\n") == 4

    def test_missing_train_file(self, tmp_path, capsys):
        code, _, err = run(["train", "--train", tmp_path / "nope.tsv", "--dev", tmp_path / "nope.tsv",
                            "--out", tmp_path / "run"], capsys)
        assert code == 2 and "not found" in err
        assert not (tmp_path / "run").exists()

    def test_unknown_override(self, tmp_path, capsys):
        (tmp_path / "t.tsv").write_text("a\ta\n")
        code, _, err = run(["train", "--train", tmp_path / "t.tsv", "--dev", tmp_path / "t.tsv",
                            "--out", tmp_path / "run", "--set", "colour=red"], capsys)
        assert code == 1 and "colour" in err

    def test_malformed_corpus(self, tmp_path, capsys):
        (tmp_path / "t.tsv").write_text("a\ta\nbroken\n")
        code, _, err = run(["train", "--train", tmp_path / "t.tsv", "--dev", tmp_path / "t.tsv",
                            "--out", tmp_path / "run"], capsys)
        assert code == 2 and ":2:" in err

    def test_config_file_then_flags(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"preset": "inflection", "hidden": 64}))
        cfg = resolve_config(str(tmp_path / "c.json"), ["hidden=16", "encoder=bi", "mlp_hidden=none"])
        assert cfg.hidden == 16 and cfg.encoder == "bi" and cfg.dropout_in == 0.5 and cfg.mlp_hidden is None
        with pytest.raises(UsageError):
            resolve_config(None, ["hidden=lots"])


class TestDecode:
    def test_beam_one_equals_greedy(self, trained, capsys):
        (trained / "in.txt").write_text("ab\nbba\nzz\n")
        ck = trained / "run" / "best.ckpt"
        _, greedy, _ = run(["decode", ck, "--input", trained / "in.txt", "--greedy"], capsys)
        code, beam, _ = run(["decode", ck, "--input", trained / "in.txt", "--beam", 1], capsys)
        assert code == 0 and greedy == beam
        records = [json.loads(line) for line in greedy.splitlines()]
        assert [r["input"] for r in records] == ["ab", "bba", "zz"]  # "z" is unseen -> UNK
        for r in records:
            assert set(r) == {"input", "output", "score", "alignment", "truncated"}
            rows = [i for i, _ in r["alignment"]]
            assert rows == sorted(rows) and [j for _, j in r["alignment"]] == list(range(len(rows)))

    def test_output_file_and_beam(self, trained, capsys):
        (trained / "in2.txt").write_text("ab\tignored\n")
        code, _, _ = run(["decode", trained / "run" / "best.ckpt", "--input", trained / "in2.txt",
                          "--beam", 3, "--output", trained / "out.jsonl"], capsys)
        assert code == 0
        assert json.loads((trained / "out.jsonl").read_text())["input"] == "ab"

    def test_vocab_mismatch(self, trained, tmp_path, capsys):
        (tmp_path / "v.txt").write_text("<pad>\n<unk>\n<s>\n</s>\nq\n")
        code, _, err = run(["decode", trained / "run" / "best.ckpt", "--src-vocab", tmp_path / "v.txt",
                            "--input", tmp_path / "v.txt"], capsys)
        assert code == 2 and "vocab" in err

    def test_level_mismatch(self, trained, capsys):
        code, _, _ = run(["decode", trained / "run" / "best.ckpt", "--level", "word"], capsys)
        assert code == 2

    def test_bad_beam(self, trained, tmp_path, capsys):
        (tmp_path / "i").write_text("a\n")
        code, _, _ = run(["decode", trained / "run" / "best.ckpt", "--beam", 0, "--input", tmp_path / "i"],
                         capsys)
        assert code == 1

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(["decode", tmp_path / "none.ckpt"], capsys)[0] == 2


class TestAlign:
    def test_tsv_columns_sum_to_one(self, trained, capsys):
        code, out, err = run(["align", trained / "run" / "best.ckpt", "--source", "abba",
                              "--target", "abb", "--svg", trained / "a.svg"], capsys)
        assert code == 0
        grid = np.array([[float(v) for v in line.split("\t")] for line in out.splitlines()])
        assert grid.shape == (5, 4)
        np.testing.assert_allclose(grid.sum(axis=0), 1.0, atol=1e-6)
        info = json.loads(err)
        assert len(info["viterbi_path"]) == 4
        svg = (trained / "a.svg").read_text()
        assert svg.startswith("<svg") and svg.count('stroke="red"') == 4

    def test_single_row(self, trained, tmp_path, capsys):
        ck = Checkpoint.load(trained / "run" / "best.ckpt")
        # a source that is only </s> gives I = 1
        model_src = ck.src_vocab.encode(())
        gamma = ck.model().align(model_src, ck.tgt_vocab.encode(tuple("ab"))).posteriors
        assert gamma.shape[0] == 1 and np.allclose(gamma, 1.0)

    def test_zero_probability_pair(self, tmp_path, capsys):
        # at word level "<s>" is a literal vocab entry, masked out of the output softmax
        vocab = Vocab(["x"])
        cfg = TrainConfig(hidden=4, level="word")
        model = make_model(src_vocab=len(vocab), tgt_vocab=len(vocab))
        Checkpoint.from_model(model, cfg, vocab, vocab).save(tmp_path / "w.ckpt")
        code, _, err = run(["align", tmp_path / "w.ckpt", "--source", "x x", "--target", "x <s>"], capsys)
        assert code == 3 and "column: 1" in err

    def test_empty_pair(self, trained, capsys):
        assert run(["align", trained / "run" / "best.ckpt", "--source", "", "--target", "a"], capsys)[0] == 1


class TestEval:
    def test_identical_files(self, tmp_path, capsys):
        (tmp_path / "r").write_text("x\ta b c\nx\td e\n")
        code, out, _ = run(["eval", tmp_path / "r", tmp_path / "r", "--metric", "rouge",
                            "--out-prefix", tmp_path / "rep"], capsys)
        summary = json.loads(out)
        assert code == 0 and summary["rouge1"] == summary["rouge2"] == summary["rougeL"] == 1.0
        assert (tmp_path / "rep.csv").exists() and (tmp_path / "rep.json").exists()

    def test_hand_values(self, tmp_path, capsys):
        (tmp_path / "r").write_text("a b c\na b c d\n")
        (tmp_path / "h").write_text("a b d\na c d\n")
        _, out, _ = run(["eval", tmp_path / "r", tmp_path / "h", "--metric", "rouge",
                         "--out-prefix", tmp_path / "rep"], capsys)
        rows = (tmp_path / "rep.csv").read_text().splitlines()[1:]
        r1, r2, _ = map(float, rows[0].split(",")[2:])
        assert abs(r1 - 2 / 3) < 1e-12 and abs(r2 - 1 / 2) < 1e-12
        assert abs(float(rows[1].split(",")[4]) - 6 / 7) < 1e-12

    def test_line_count_mismatch(self, tmp_path, capsys):
        (tmp_path / "r").write_text("a\nb\n")
        (tmp_path / "h").write_text("a\n")
        assert run(["eval", tmp_path / "r", tmp_path / "h"], capsys)[0] == 2

    def test_exact_char(self, tmp_path, capsys):
        (tmp_path / "r").write_text("abc\nab\n")
        (tmp_path / "h").write_text("abc\nba\n")
        _, out, _ = run(["eval", tmp_path / "r", tmp_path / "h", "--level", "char"], capsys)
        assert json.loads(out)["correct"] == 0.5


class TestEstimateE:
    def test_single_pair(self, tmp_path, capsys):
        (tmp_path / "t").write_text("abc\tab\n")
        code, out, _ = run(["estimate-e", tmp_path / "t"], capsys)
        assert code == 0 and out.strip() == "0.40000000000000002"
        assert float(out) == 0.4

    def test_duplicated_corpus(self, tmp_path, capsys):
        (tmp_path / "a").write_text("abc\tab\nx\txyz\n")
        (tmp_path / "b").write_text("abc\tab\nx\txyz\n" * 2)
        assert run(["estimate-e", tmp_path / "a"], capsys)[1] == run(["estimate-e", tmp_path / "b"], capsys)[1]

    def test_three_mixed_pairs(self, tmp_path, capsys):
        (tmp_path / "t").write_text("abcd\tab\nx\txyz\nhello\thi\n")
        # sum J = 2 + 3 + 2 = 7, sum I = 4 + 1 + 5 = 10
        assert float(run(["estimate-e", tmp_path / "t"], capsys)[1]) == 7 / 17

    def test_word_level(self, tmp_path, capsys):
        (tmp_path / "t").write_text("a b c\td e\n")
        assert float(run(["estimate-e", tmp_path / "t", "--level", "word"], capsys)[1]) == 0.4

    def test_empty_corpus(self, tmp_path, capsys):
        (tmp_path / "t").write_text("")
        assert run(["estimate-e", tmp_path / "t"], capsys)[0] == 2


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["--help"]) == 0
