import json
import time
from decimal import Decimal as D
from pathlib import Path

import pytest

from txdoc.cli import main
from txdoc.llm import BackendError
from txdoc.pipeline import (
    DataError,
    RunConfig,
    cmd_distill,
    cmd_evaluate,
    cmd_extract,
    cmd_resolve,
    cmd_select,
    cmd_validate,
    load_dataset,
    read_jsonl,
    write_jsonl,
)
from txdoc.schema import builtin_transactional_schema
from txdoc.synth import golden_corpus, make_receipt, wrap_answer
from txdoc.validation import CascadeLevel, run_cascade


@pytest.fixture()
def golden(tmp_path):
    records, candidates = golden_corpus()
    dataset = tmp_path / "dataset.jsonl"
    fixtures = tmp_path / "fixtures.jsonl"
    write_jsonl(dataset, (r for r in records))
    write_jsonl(fixtures, (c.to_json() for c in candidates))
    return dataset, fixtures, records


def _config(tmp_path, fixtures, **overrides):
    kwargs = dict(out_dir=tmp_path / "out", backend="replay",
                  endpoint=str(fixtures), temperature=1.0, n_samples=4)
    kwargs.update(overrides)
    return RunConfig(**kwargs)


class TestDataset:
    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_jsonl(path, [{"id": "a", "ocr_text": "x"},
                           {"id": "a", "ocr_text": "y"}])
        with pytest.raises(DataError, match="duplicate"):
            load_dataset(path)

    def test_empty_ocr_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_jsonl(path, [{"id": "a", "ocr_text": ""}])
        with pytest.raises(DataError, match="empty ocr_text"):
            load_dataset(path)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_jsonl(path, [{"id": "a"}])
        with pytest.raises(DataError):
            load_dataset(path)


class TestExtract:
    def test_cardinality(self, tmp_path, golden):
        dataset, fixtures, records = golden
        config = _config(tmp_path, fixtures)
        out = cmd_extract(dataset, config)
        rows = read_jsonl(out)
        assert len(rows) == len(records) * 4
        keys = {(r["doc_id"], r["sample_index"]) for r in rows}
        assert len(keys) == 40

    def test_resume_no_duplicates(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        config = _config(tmp_path, fixtures)
        out = cmd_extract(dataset, config)
        first = out.read_bytes()
        cmd_extract(dataset, config)
        assert out.read_bytes() == first

    def test_replay_runs_byte_identical(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        out_a = cmd_extract(dataset, _config(tmp_path, fixtures,
                                             out_dir=tmp_path / "a"))
        out_b = cmd_extract(dataset, _config(tmp_path, fixtures,
                                             out_dir=tmp_path / "b"))
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_all_documents_failing_is_a_backend_error(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        empty_fixtures = tmp_path / "none.jsonl"
        empty_fixtures.write_text("")
        config = _config(tmp_path, empty_fixtures)
        with pytest.raises(BackendError, match="all 10"):
            cmd_extract(dataset, config)
        errors = read_jsonl(config.out_dir / "extract_errors.jsonl")
        assert len(errors) == 10


class TestValidate:
    def test_survivors_match_standalone_cascade(self, tmp_path, golden):
        dataset, fixtures, records = golden
        config = _config(tmp_path, fixtures)
        candidates_path = cmd_extract(dataset, config)
        _, survivors_path = cmd_validate(candidates_path, dataset, config,
                                         level="domain")
        got = [row["doc_id"] for row in read_jsonl(survivors_path)]

        # independent recheck, one standalone cascade call per candidate
        schema = builtin_transactional_schema()
        ocr = {r["id"]: r["ocr_text"] for r in records}
        expected = []
        for record in records:
            ok = any(
                run_cascade(row["raw_text"], ocr[row["doc_id"]], schema,
                            D("0.005")).passed
                for row in read_jsonl(candidates_path)
                if row["doc_id"] == record["id"]
            )
            if ok:
                expected.append(record["id"])
        assert got == expected == ["g00", "g01"]

    def test_level_controls_survivors(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        config = _config(tmp_path, fixtures)
        candidates_path = cmd_extract(dataset, config)
        _, task_path = cmd_validate(candidates_path, dataset, config, level="task")
        task_survivors = [row["doc_id"] for row in read_jsonl(task_path)]
        assert task_survivors == ["g00", "g01", "g07", "g08", "g09"]
        _, syn_path = cmd_validate(candidates_path, dataset, config,
                                   level="syntactic")
        assert len(read_jsonl(syn_path)) == 8

    def test_unknown_doc_id(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        config = _config(tmp_path, fixtures)
        rogue = tmp_path / "rogue.jsonl"
        write_jsonl(rogue, [{"doc_id": "nope", "sample_index": 0,
                             "raw_text": "{}", "tokens": []}])
        with pytest.raises(DataError, match="nope"):
            cmd_validate(rogue, dataset, config)


class TestSelect:
    def _run(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        config = _config(tmp_path, fixtures)
        candidates = cmd_extract(dataset, config)
        verdicts, _ = cmd_validate(candidates, dataset, config)
        return cmd_select(candidates, verdicts, config)

    def test_one_row_per_valid_document(self, tmp_path, golden):
        selected = read_jsonl(self._run(tmp_path, golden))
        assert [row["doc_id"] for row in selected] == ["g00", "g01"]

    def test_highest_mean_probability_wins(self, tmp_path, golden):
        selected = read_jsonl(self._run(tmp_path, golden))
        # sample 1 carries the highest mean token probability in the fixture
        assert all(row["sample_index"] == 1 for row in selected)
        assert all(row["mean_token_prob"] == pytest.approx(0.96)
                   for row in selected)


class TestEvaluate:
    def test_perfect_fixture_scores_perfect(self, tmp_path, schema):
        records = []
        candidates = []
        for i in range(3):
            receipt = make_receipt(schema, f"p{i}", i)
            records.append({"id": receipt.doc_id, "ocr_text": receipt.ocr_text,
                            "ground_truth": receipt.ground_truth})
            candidates.append({"doc_id": receipt.doc_id, "sample_index": 0,
                               "raw_text": wrap_answer(receipt.ground_truth),
                               "tokens": [{"t": "a", "p": 0.9}]})
        dataset = tmp_path / "d.jsonl"
        fixtures = tmp_path / "f.jsonl"
        write_jsonl(dataset, records)
        write_jsonl(fixtures, candidates)
        config = _config(tmp_path, fixtures, n_samples=1)
        candidates_path = cmd_extract(dataset, config)
        verdicts, _ = cmd_validate(candidates_path, dataset, config)
        table = cmd_evaluate(candidates_path, verdicts, dataset, config)
        for row in table.rows:
            assert row.remaining == 100.0
            assert row.f1 == pytest.approx(100.0)
            assert row.nted == 0.0
            assert row.valid == 100.0
            assert row.doc_acc == 100.0

    def test_missing_ground_truth(self, tmp_path, golden):
        dataset, fixtures, records = golden
        bare = tmp_path / "bare.jsonl"
        write_jsonl(bare, [{"id": r["id"], "ocr_text": r["ocr_text"]}
                           for r in records])
        config = _config(tmp_path, fixtures)
        candidates = cmd_extract(bare, config)
        verdicts, _ = cmd_validate(candidates, bare, config)
        with pytest.raises(DataError, match="ground truth"):
            cmd_evaluate(candidates, verdicts, bare, config)

    def test_gt_valid_flagged(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        config = _config(tmp_path, fixtures)
        candidates = cmd_extract(dataset, config)
        verdicts, _ = cmd_validate(candidates, dataset, config)
        cmd_evaluate(candidates, verdicts, dataset, config)
        scores = read_jsonl(config.out_dir / "scores.jsonl")
        assert all(row["gt_valid"] for row in scores)

    def test_report_files_written(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        config = _config(tmp_path, fixtures)
        candidates = cmd_extract(dataset, config)
        verdicts, _ = cmd_validate(candidates, dataset, config)
        cmd_evaluate(candidates, verdicts, dataset, config)
        for name in ("report.txt", "report.csv", "report.json", "scores.jsonl"):
            assert (config.out_dir / name).exists()
        report = json.loads((config.out_dir / "report.json").read_text())
        assert [row["filter"] for row in report["rows"]] == [
            "Base", "Syntactic", "Task", "Domain"]


class TestDistill:
    def _outputs(self, tmp_path, golden, subset):
        dataset, fixtures, _ = golden
        config = _config(tmp_path, fixtures, subset=subset)
        candidates = cmd_extract(dataset, config)
        verdicts, _ = cmd_validate(candidates, dataset, config)
        return read_jsonl(cmd_distill(candidates, verdicts, dataset, config))

    def test_domain_subset_only_survivors(self, tmp_path, golden):
        rows = self._outputs(tmp_path, golden, "domain")
        assert [row["doc_id"] for row in rows] == ["g00", "g01"]
        assert all(row["filter_level"] == "passed" for row in rows)

    def test_base_subset_keeps_parseable_documents(self, tmp_path, golden):
        rows = self._outputs(tmp_path, golden, "base")
        assert len(rows) == 8  # all but the two syntax-broken documents

    def test_domain_completions_repass_the_cascade(self, tmp_path, golden):
        dataset, fixtures, records = golden
        rows = self._outputs(tmp_path, golden, "domain")
        schema = builtin_transactional_schema()
        ocr = {r["id"]: r["ocr_text"] for r in records}
        for row in rows:
            verdict = run_cascade(row["completion"], ocr[row["doc_id"]], schema)
            assert verdict.level_reached is CascadeLevel.PASSED

    def test_prompt_contains_ocr(self, tmp_path, golden):
        rows = self._outputs(tmp_path, golden, "domain")
        assert all("<ocr>" in row["prompt"] for row in rows)


class TestResolveCommand:
    def test_coherent_document(self, tmp_path, schema):
        receipt = make_receipt(schema, "r", 1)
        doc_path = tmp_path / "doc.json"
        doc_path.write_text(json.dumps(receipt.ground_truth))
        result = cmd_resolve(doc_path, RunConfig(out_dir=tmp_path))
        assert result["valid"] is True
        assert result["document"]["due_amount"] == result["document"]["gross_total"]
        assert any(step["path"] == "due_amount" for step in result["trace"])
        assert result["provenance"]["due_amount"] == "inferred"
        assert result["provenance"]["commission"] == "defaulted"

    def test_incoherent_document_names_equations(self, tmp_path, schema):
        receipt = make_receipt(schema, "r", 1)
        data = json.loads(json.dumps(receipt.ground_truth))
        data["gross_total"] = receipt.cash_str
        doc_path = tmp_path / "doc.json"
        doc_path.write_text(json.dumps(data))
        result = cmd_resolve(doc_path, RunConfig(out_dir=tmp_path))
        assert result["valid"] is False
        violated = [e["equation"] for e in result["report"]["equations"]
                    if e["status"] == "violated"]
        assert "E1" in violated

    def test_parse_failure(self, tmp_path):
        bad = tmp_path / "doc.json"
        bad.write_text("{ not json")
        with pytest.raises(DataError):
            cmd_resolve(bad, RunConfig(out_dir=tmp_path))


class TestEndToEndDeterminism:
    def _run_all(self, dataset, fixtures, out_dir, concurrency=4):
        config = RunConfig(out_dir=out_dir, backend="replay",
                           endpoint=str(fixtures), temperature=1.0, n_samples=4,
                           concurrency=concurrency)
        candidates = cmd_extract(dataset, config)
        verdicts, survivors = cmd_validate(candidates, dataset, config)
        selected = cmd_select(candidates, verdicts, config)
        cmd_evaluate(candidates, verdicts, dataset, config)
        distilled = cmd_distill(candidates, verdicts, dataset, config)
        return [candidates, verdicts, survivors, selected, distilled,
                out_dir / "report.txt", out_dir / "report.csv",
                out_dir / "report.json", out_dir / "scores.jsonl"]

    def test_two_runs_byte_identical(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        files_a = self._run_all(dataset, fixtures, tmp_path / "run_a")
        files_b = self._run_all(dataset, fixtures, tmp_path / "run_b")
        for a, b in zip(files_a, files_b):
            assert a.read_bytes() == b.read_bytes(), a.name

    def test_concurrency_level_does_not_change_bytes(self, tmp_path, golden):
        dataset, fixtures, _ = golden
        serial = self._run_all(dataset, fixtures, tmp_path / "c1", concurrency=1)
        parallel = self._run_all(dataset, fixtures, tmp_path / "c8", concurrency=8)
        for a, b in zip(serial, parallel):
            assert a.read_bytes() == b.read_bytes(), a.name


class TestInvalidGroundTruth:
    def test_scored_normally_but_flagged(self, tmp_path, schema):
        receipt = make_receipt(schema, "bad", 0)
        broken_gt = json.loads(json.dumps(receipt.ground_truth))
        broken_gt["gross_total"] = receipt.cash_str  # arithmetic no longer holds
        dataset = tmp_path / "d.jsonl"
        fixtures = tmp_path / "f.jsonl"
        write_jsonl(dataset, [{"id": "bad", "ocr_text": receipt.ocr_text,
                               "ground_truth": broken_gt}])
        write_jsonl(fixtures, [{"doc_id": "bad", "sample_index": 0,
                                "raw_text": wrap_answer(broken_gt),
                                "tokens": [{"t": "a", "p": 0.9}]}])
        config = _config(tmp_path, fixtures, n_samples=1)
        candidates = cmd_extract(dataset, config)
        verdicts, _ = cmd_validate(candidates, dataset, config)
        table = cmd_evaluate(candidates, verdicts, dataset, config)
        scores = read_jsonl(config.out_dir / "scores.jsonl")
        assert scores[0]["gt_valid"] is False
        base = next(r for r in table.rows if r.name == "Base")
        assert base.f1 == pytest.approx(100.0)  # prediction equals the flawed GT


def test_api_key_read_from_environment(monkeypatch):
    from txdoc.llm import HttpBackend

    monkeypatch.setenv("TXDOC_API_KEY", "sekrit")
    config = RunConfig(out_dir=Path("unused"), backend="http",
                       endpoint="http://example.test/v1", model="m")
    backend = config.build_backend()
    assert isinstance(backend, HttpBackend)
    assert backend.config.api_key == "sekrit"

    monkeypatch.delenv("TXDOC_API_KEY")
    monkeypatch.setenv("OPENAI_API_KEY", "fallback")
    assert config.build_backend().config.api_key == "fallback"


class TestCli:
    def test_usage_error_exits_1(self, capsys):
        assert main(["extract"]) == 1  # missing --dataset
        assert main(["no-such-command"]) == 1

    def test_data_error_exits_2(self, tmp_path):
        missing = tmp_path / "missing.jsonl"
        assert main(["validate", "--dataset", str(missing),
                     "--candidates", str(missing),
                     "--out", str(tmp_path / "out")]) == 2

    def test_backend_error_exits_3(self, tmp_path, golden, monkeypatch):
        dataset, _, _ = golden
        monkeypatch.setattr(time, "sleep", lambda seconds: None)
        code = main([
            "extract", "--dataset", str(dataset), "--backend", "http",
            "--endpoint", "http://127.0.0.1:9", "--model", "m",
            "--out", str(tmp_path / "out"), "--concurrency", "1",
        ])
        assert code == 3

    def test_schema_subcommand(self, capsys):
        assert main(["schema"]) == 0
        out = capsys.readouterr().out
        assert "gross_total = net_total + total_tax" in out
        assert main(["schema", "--format", "jsonschema"]) == 0
        out = capsys.readouterr().out
        assert '"$defs"' in out

    def test_full_cli_run(self, tmp_path, golden, capsys):
        dataset, fixtures, _ = golden
        out = str(tmp_path / "out")
        common = ["--out", out]
        assert main(["extract", "--dataset", str(dataset), "--backend", "replay",
                     "--endpoint", str(fixtures), "--samples", "4",
                     "--temperature", "1.0", *common]) == 0
        candidates = f"{out}/candidates.jsonl"
        assert main(["validate", "--dataset", str(dataset),
                     "--candidates", candidates, "--level", "domain",
                     *common]) == 0
        verdicts = f"{out}/verdicts.jsonl"
        assert main(["select", "--candidates", candidates,
                     "--verdicts", verdicts, *common]) == 0
        assert main(["evaluate", "--dataset", str(dataset),
                     "--candidates", candidates, "--verdicts", verdicts,
                     *common]) == 0
        table_text = capsys.readouterr().out
        assert "Domain" in table_text and "100.0" in table_text
        assert main(["distill", "--dataset", str(dataset),
                     "--candidates", candidates, "--verdicts", verdicts,
                     "--subset", "domain", *common]) == 0
        assert Path(out, "distill_domain.jsonl").exists()

    def test_resolve_command(self, tmp_path, schema, capsys):
        receipt = make_receipt(schema, "r", 0)
        doc = tmp_path / "doc.json"
        doc.write_text(json.dumps(receipt.ground_truth))
        assert main(["resolve", "--document", str(doc)]) == 0
        out = capsys.readouterr().out
        assert '"valid": true' in out
