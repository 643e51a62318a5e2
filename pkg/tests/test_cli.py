import numpy as np
import pytest

from dual_lora import cli
from dual_lora.checkpoint import save_checkpoint
from dual_lora.gradcheck import CaseReport, tiny_model
from dual_lora.tensor import GradCheckResult

TINY_CFG = """seed = 2
n_speakers = 10
n_languages = 2
utts_per_speaker = 6
frames_per_utt = 4
feat_dim = 8
speaker_dim = 3
language_dim = 2
trials_per_scenario = 30
width = 10
depth = 2
d_emb = 6
d_emb_lang = 4
r_spk = 4
r_lang = 2
disc_proj = 4
disc_hidden = 6
batch_size = 16
warmup_epochs = 1
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.cfg").write_text(TINY_CFG)
    return tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestPipeline:
    def test_full_pipeline(self, workdir, capsys):
        cfg, corpus = workdir / "run.cfg", workdir / "corpus"
        assert run("-q", "gen-data", "--config", cfg, "--out", corpus) == 0
        for name in ("source.feat", "train.feat", "dev.feat", "dev.meta", "dev.trials", "config.cfg"):
            assert (corpus / name).exists()
        ckpt = workdir / "dual.ckpt"
        assert run("-q", "train", "--config", cfg, "--corpus", corpus, "--mode", "dual-lora", "--out", ckpt) == 0
        assert (workdir / "dual.metrics.tsv").read_text().startswith("#epoch\tphase")
        merged = workdir / "merged.ckpt"
        assert run("-q", "merge", "--checkpoint", ckpt, "--out", merged) == 0
        scores = workdir / "dev.scores"
        assert run("-q", "score", "--checkpoint", merged, "--corpus", corpus, "--out", scores) == 0
        capsys.readouterr()
        assert run("-q", "eval", "--corpus", corpus, "--scores", scores, "--report", workdir / "eer.tsv") == 0
        out = capsys.readouterr().out
        assert out.count("\n") == 6 and "SS-DL vs DS-SL" in out and out == (workdir / "eer.tsv").read_text()

        # merged scores agree with scoring the adapted checkpoint directly
        assert run("-q", "eval", "--corpus", corpus, "--checkpoint", ckpt) == 0
        assert capsys.readouterr().out == out

        assert run("-q", "eval", "--corpus", corpus, "--scores", scores, "--scenario", "worst-case",
                   "--histogram", workdir / "h.csv", "--bins", "5") == 0
        worst = capsys.readouterr().out.splitlines()
        assert [line.split("\t")[0] for line in worst] == ["pairing", "SS-DL vs DS-SL", "overall"]
        assert len((workdir / "h.csv").read_text().splitlines()) == 6

        assert run("-q", "probe", "--config", cfg, "--checkpoint", merged, "--corpus", corpus) == 0
        assert capsys.readouterr().out.startswith("lid_accuracy=")

        assert run("-q", "fuse", "--corpus", corpus, "--scores", scores, scores, "--out", workdir / "f.scores") == 0
        assert len((workdir / "f.scores").read_text().splitlines()) == len(scores.read_text().splitlines())

    def test_echoed_config_reproduces_run(self, workdir):
        corpus = workdir / "corpus"
        assert run("-q", "gen-data", "--config", workdir / "run.cfg", "--out", corpus) == 0
        a, b = workdir / "a.ckpt", workdir / "b.ckpt"
        assert run("-q", "train", "--config", workdir / "run.cfg", "--corpus", corpus, "--out", a) == 0
        assert run("-q", "train", "--config", corpus / "config.cfg", "--corpus", corpus, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()


class TestExitCodes:
    def test_usage_errors(self, capsys):
        assert run("frobnicate") == 2
        assert run() == 2
        assert run("merge", "--checkpoint", "x") == 2
        assert run("--help") == 0

    def test_runtime_error_is_one_line(self, workdir, capsys):
        assert run("-q", "merge", "--checkpoint", workdir / "missing.ckpt", "--out", workdir / "m") == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("error: ")

    def test_bad_config_reports_line(self, workdir, capsys):
        (workdir / "bad.cfg").write_text("seed = 1\nwidth = -3\n")
        assert run("-q", "gen-data", "--config", workdir / "bad.cfg", "--out", workdir / "c") == 1
        assert "line 2: width" in capsys.readouterr().err

    def test_merge_refuses_merged(self, workdir, capsys):
        save_checkpoint(tiny_model(np.random.default_rng(0)).merge(), workdir / "m.ckpt")
        assert run("-q", "merge", "--checkpoint", workdir / "m.ckpt", "--out", workdir / "n.ckpt") == 1
        assert "already a merged model" in capsys.readouterr().err

    def test_gradcheck_passes(self, capsys):
        assert run("-q", "gradcheck", "--batches", "1") == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 7 and all(line.endswith("ok") for line in lines)

    def test_gradcheck_failure_exit_code(self, monkeypatch, capsys):
        import dual_lora.gradcheck as gc

        bad = GradCheckResult("W", 0.5, "fail", 4)
        monkeypatch.setattr(gc, "gradient_suite", lambda **kw: [CaseReport("linear", 0, [bad], 1e-5)])
        assert run("-q", "gradcheck", "--batches", "1") == 3
        assert "FAIL" in capsys.readouterr().out
