import pytest

from agents.evaluation_agent import EvalManifest, EvaluationAgent, ManifestEntry, OVERALL
from agents.planning_agent import (
    ABLATION_STAGES, BASELINE_STAGE, PlanningAgent, enable_stage, greedy_only,
)
from agents.transcription_agent import TranscribeOptions, TranscriptionAgent
from conftest import ScriptedDecoder, ScriptedModel, scripted_result
from speech_agent_framework import Transcript
from speech_audio import load_wav
from speech_metrics import EvaluationError


def beam_sensitive_decoder(vocab):
    """Gets the last word right only when beam search is on"""

    def decode(model, vocab_, states, prompt, options):
        text = " hello world" if options.beam_size > 1 else " hello word"
        return scripted_result(vocab, [0.0, text, 1.0])

    return decode


@pytest.fixture
def planner(vocab):
    transcription = TranscriptionAgent(ScriptedModel(), vocab, decode_fn=beam_sensitive_decoder(vocab))
    return PlanningAgent(transcription, EvaluationAgent())


@pytest.fixture
def manifest(write_tone):
    return EvalManifest([
        ManifestEntry(write_tone("a.wav"), "hello world", tag="clean", language="en"),
        ManifestEntry(write_tone("b.wav"), "hello world", tag="noisy", language="en"),
    ])


def test_greedy_only_strips_every_heuristic():
    options = greedy_only(TranscribeOptions())
    assert options.decode.beam_size == 1
    assert not options.decode.temperature_fallback
    assert options.decode.temperatures == (0.0,)
    assert options.decode.initial_timestamp_max is None
    assert not options.vad_enabled and not options.condition_on_previous_text


def test_stages_are_cumulative(planner):
    stages = planner.ablation_stages()
    assert [label for label, _ in stages] == [BASELINE_STAGE] + [label for _, label in ABLATION_STAGES]
    assert stages[1][1].decode.beam_size == 5 and not stages[1][1].decode.temperature_fallback
    assert stages[3][1].vad_enabled and stages[3][1].decode.temperature_fallback
    assert not stages[3][1].condition_on_previous_text
    assert stages[-1][1] == TranscribeOptions()


def test_stage_toggles(planner):
    assert len(planner.ablation_stages(toggles={stage: False for stage, _ in ABLATION_STAGES})) == 1
    stages = planner.ablation_stages(toggles={"vad": True})
    assert [label for label, _ in stages] == [BASELINE_STAGE, "+ Voice activity detection"]
    assert stages[1][1].decode.beam_size == 1
    with pytest.raises(EvaluationError):
        planner.ablation_stages(toggles={"language_model": True})
    with pytest.raises(EvaluationError):
        enable_stage(TranscribeOptions(), "language_model", TranscribeOptions())


def test_stage_settings_come_from_base_options(planner):
    base = TranscribeOptions()
    base.decode.beam_size = 3
    stages = planner.ablation_stages(base, toggles={"beam_search": True})
    assert stages[1][1].decode.beam_size == 3


def test_ablation_matrix(planner, manifest):
    table = planner.ablation_matrix(manifest)
    assert len(table.rows) == len(ABLATION_STAGES) + 1
    assert table.columns == ["clean", "noisy", OVERALL]
    assert table.rows[0].wer == {"clean": 0.5, "noisy": 0.5, OVERALL: 0.5}
    assert all(row.wer[OVERALL] == 0.0 for row in table.rows[1:])
    assert all(set(row.wer) == set(table.columns) for row in table.rows)

    lines = table.to_tsv().splitlines()
    assert lines[0] == "stage\tclean\tnoisy\toverall"
    assert lines[1] == "Greedy decoding only\t0.5000\t0.5000\t0.5000"
    assert table.to_dict()["rows"][0]["failed"] == 0


def test_ablation_is_deterministic(planner, manifest):
    first = planner.ablation_matrix(manifest, jobs=1)
    second = planner.ablation_matrix(manifest, jobs=2)
    assert first.to_dict() == second.to_dict()


def test_pipeline_uses_manifest_language(vocab, write_tone):
    decoder = ScriptedDecoder([scripted_result(vocab, [0.0, " hallo", 1.0])])
    planner = PlanningAgent(TranscriptionAgent(ScriptedModel(), vocab, decode_fn=decoder), EvaluationAgent())
    pipeline = planner.pipeline_for(TranscribeOptions(language="en"))
    path = write_tone("de.wav")
    assert pipeline(load_wav(path), ManifestEntry(path, "hallo", language="de")) == "hallo"
    assert decoder.prompts[-1][1] == vocab.specials.languages["de"]
    pipeline(load_wav(path), ManifestEntry(path, "hallo"))
    assert decoder.prompts[-1][1] == vocab.specials.languages["en"]


def test_transcribe_batch_keeps_order_and_failures(planner, write_tone, tmp_path):
    paths = [write_tone("one.wav"), str(tmp_path / "missing.wav"), write_tone("two.wav")]
    options = TranscribeOptions(language="en")
    for jobs in (1, 3):
        results = planner.transcribe_batch(paths, options, jobs=jobs)
        assert [path for path, _ in results] == paths
        assert isinstance(results[0][1], Transcript) and isinstance(results[2][1], Transcript)
        assert isinstance(results[1][1], Exception)
        assert results[0][1].text == "hello world"
