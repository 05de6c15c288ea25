import json
from pathlib import Path

import numpy as np
import pytest

from tetherlm import cli, corpus
from tetherlm.harness import (
    ExperimentSpec,
    SpecError,
    diagnostics,
    evaluate,
    load_summary,
    prepare,
    run_experiment,
    run_sweep,
    write_reports,
)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """A miniature end-to-end run exercising every method family."""
    root = tmp_path_factory.mktemp("small")
    c = corpus.synth_corpora(7, lexicon_size=2600, n_open_docs=12, n_heldout_docs=40,
                             n_passages=6, passage_chars=320)
    corpus.write_documents(c["passages"], root / "protected.txt")
    corpus.write_documents(c["open"], root / "open.txt")
    corpus.write_documents(c["heldout"], root / "heldout.txt")
    spec = ExperimentSpec(
        protected_path=str(root / "protected.txt"),
        open_path=str(root / "open.txt"),
        heldout_path=str(root / "heldout.txt"),
        out_dir=str(root / "out"),
        methods=("safe", "risky", "anchored", "renyi", "no_opt", "cold_start",
                 "no_debt", "avg_debt", "fixed", "global", "memfree", "rcad",
                 "cpfuse", "tokenswap"),
        k_grid=(0.2, 2.0),
        seeds=(0,),
        order=5,
        safe_order=3,
        t_max=30,
        prompt_len=60,
        ref_len=60,
        prompts_per_passage=1,
    )
    out = run_experiment(spec)
    return {"root": root, "spec": spec, "out": out}


class TestSpec:
    def test_unknown_method_rejected(self, small_run):
        spec = small_run["spec"]
        bad = ExperimentSpec(**{**spec.__dict__, "methods": ("teleport",)})
        with pytest.raises(SpecError):
            bad.validate()

    def test_missing_file_rejected(self, small_run, tmp_path):
        spec = small_run["spec"]
        bad = ExperimentSpec(**{**spec.__dict__, "open_path": str(tmp_path / "nope.txt")})
        with pytest.raises(SpecError):
            bad.validate()

    def test_json_loading_rejects_unknown_fields(self, small_run, tmp_path):
        doc = {**small_run["spec"].__dict__, "bogus": 1}
        doc = {k: list(v) if isinstance(v, tuple) else v for k, v in doc.items()}
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SpecError):
            ExperimentSpec.from_file(str(path))

    def test_from_file_roundtrip(self, small_run, tmp_path):
        doc = {k: list(v) if isinstance(v, tuple) else v for k, v in small_run["spec"].__dict__.items()}
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(doc))
        spec = ExperimentSpec.from_file(str(path))
        assert spec == small_run["spec"]


class TestRunOutputs:
    def test_reference_endpoints(self, small_run):
        summary = load_summary(small_run["out"])
        reports = summary["reports"]
        assert reports["safe"]["ncr_mean"] == pytest.approx(1.0)
        assert reports["risky"]["ncr_mean"] == pytest.approx(0.0)

    def test_summary_schema_roundtrip(self, small_run):
        out = small_run["out"]
        text = (out / "summary.json").read_text()
        doc = json.loads(text)
        assert json.loads(json.dumps(doc)) == doc
        assert (out / "metrics.csv").exists()
        rows = (out / "metrics.csv").read_text().splitlines()
        assert rows[0] == "configuration,metric,value,ncr"
        # one row per configuration-metric plus ncr_mean and utility lines
        n_configs = len(doc["reports"])
        assert len(rows) - 1 == n_configs * 8

    def test_traces_satisfy_budget_invariants(self, small_run):
        # re-parse every trace file and re-check the adaptive bound
        out = small_run["out"]
        index = [json.loads(l) for l in (out / "decodes.jsonl").read_text().splitlines()]
        checked = 0
        for rec in index:
            if rec["method"] not in ("anchored", "renyi", "no_debt", "avg_debt", "no_opt"):
                continue
            steps = [json.loads(l) for l in (out / rec["trace_file"]).read_text().splitlines()]
            running = 0.0
            for s in steps:
                running += s["spent"]
                bound = max(0.0, (s["t"] + 1) * rec["k"] - rec["delta_init"])
                assert running <= bound + 1e-8
            checked += 1
        assert checked > 0

    def test_rerun_is_byte_identical(self, small_run, tmp_path_factory):
        spec = small_run["spec"]
        other = tmp_path_factory.mktemp("rerun")
        spec2 = ExperimentSpec(**{**spec.__dict__, "out_dir": str(other / "out")})
        out2 = run_experiment(spec2)
        a = (small_run["out"] / "summary.json").read_text()
        b = (out2 / "summary.json").read_text()
        assert json.loads(a)["reports"] == json.loads(b)["reports"]
        assert (small_run["out"] / "metrics.csv").read_text() == (out2 / "metrics.csv").read_text()
        assert (small_run["out"] / "decodes.jsonl").read_text() == (out2 / "decodes.jsonl").read_text()

    def test_memfree_scan(self, small_run):
        out = small_run["out"]
        ctx = prepare(small_run["spec"])
        index = [json.loads(l) for l in (out / "decodes.jsonl").read_text().splitlines()]
        n = small_run["spec"].memfree_n
        for rec in index:
            if rec["method"] != "memfree":
                continue
            text = list(rec["text"])
            for i in range(len(text) - n + 1):
                assert tuple(text[i:i + n]) not in ctx.blocklist.grams


class TestDiagnostics:
    def test_identical_models_zero_kl(self, small_run):
        ctx = prepare(small_run["spec"])
        ctx.risky = ctx.safe
        bundle = diagnostics(ctx, steps=10)
        assert max(bundle["domains"]["protected"]["per_step_kl"]) <= 1e-12
        assert bundle["domains"]["protected"]["delta_init_mean"] == 0.0

    def test_domain_separation(self, small_run):
        ctx = prepare(small_run["spec"])
        bundle = diagnostics(ctx, steps=25)
        prot = bundle["domains"]["protected"]
        held = bundle["domains"]["heldout"]
        assert prot["kl_q90"] > held["kl_q90"]
        assert prot["delta_init_mean"] > held["delta_init_mean"]

    def test_copy_starts_front_loaded(self, small_run):
        ctx = prepare(small_run["spec"])
        bundle = diagnostics(ctx, steps=30)
        starts = bundle["domains"]["protected"]["lcs_start_positions"]
        assert starts, "risky rollouts on protected prompts must copy"
        assert float(np.median(starts)) <= 0.25 * 30


class TestCli:
    def test_decode_and_trace(self, small_run, tmp_path):
        doc = {k: list(v) if isinstance(v, tuple) else v for k, v in small_run["spec"].__dict__.items()}
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(doc))
        trace_path = tmp_path / "trace.jsonl"
        code = cli.main([
            "decode", "--spec", str(spec_path), "--method", "anchored",
            "--k", "0.5", "--prompt", "0", "--trace-out", str(trace_path),
        ])
        assert code == 0
        steps = [json.loads(l) for l in trace_path.read_text().splitlines()]
        assert set(steps[0]) == {"t", "k_t", "beta", "spent", "kl_rs", "symbol"}

    def test_spec_error_exit_code(self, tmp_path):
        bad = tmp_path / "spec.json"
        bad.write_text(json.dumps({"protected_path": "missing.txt", "open_path": "x",
                                   "heldout_path": "y", "out_dir": str(tmp_path)}))
        assert cli.main(["train", "--spec", str(bad)]) == 1

    def test_report_table(self, small_run, tmp_path, capsys):
        doc = {k: list(v) if isinstance(v, tuple) else v for k, v in small_run["spec"].__dict__.items()}
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(doc))
        assert cli.main(["report", "--spec", str(spec_path)]) == 0
        table = capsys.readouterr().out
        assert "risky" in table and "ncr_mean" in table

    def test_train_writes_artifacts(self, small_run, tmp_path):
        doc = {k: list(v) if isinstance(v, tuple) else v for k, v in small_run["spec"].__dict__.items()}
        doc["out_dir"] = str(tmp_path / "t")
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(doc))
        assert cli.main(["train", "--spec", str(spec_path)]) == 0
        assert (tmp_path / "t" / "blocklist.txt").exists()
        assert (tmp_path / "t" / "models.json").exists()
