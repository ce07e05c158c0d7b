from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from agents.agent import Agent
from agents.evaluation_agent import EvalManifest, EvalReport, ManifestEntry, OVERALL
from agents.transcription_agent import TranscribeOptions
from speech_agent_framework import Transcript
from speech_audio import AudioBuffer
from speech_metrics import EvaluationError

# Long-form heuristics in the order they are stacked on top of greedy decoding
ABLATION_STAGES = [
    ("beam_search", "+ Beam search"),
    ("temperature_fallback", "+ Temperature fallback"),
    ("vad", "+ Voice activity detection"),
    ("condition_on_previous_text", "+ Previous text conditioning"),
    ("initial_timestamp_constraint", "+ Initial timestamp constraint"),
]
BASELINE_STAGE = "Greedy decoding only"


def greedy_only(options: TranscribeOptions) -> TranscribeOptions:
    """Strip every long-form heuristic from options"""
    decode = replace(options.decode, beam_size=1, temperature_fallback=False,
                     temperatures=options.decode.temperatures[:1], initial_timestamp_max=None)
    return replace(options, decode=decode, vad_enabled=False, condition_on_previous_text=False)


def enable_stage(options: TranscribeOptions, stage: str, reference: TranscribeOptions) -> TranscribeOptions:
    """Turn one heuristic back on, taking its settings from reference"""
    decode = options.decode
    if stage == "beam_search":
        decode = replace(decode, beam_size=reference.decode.beam_size)
    elif stage == "temperature_fallback":
        decode = replace(decode, temperature_fallback=True, temperatures=reference.decode.temperatures)
    elif stage == "vad":
        return replace(options, vad_enabled=True)
    elif stage == "condition_on_previous_text":
        return replace(options, condition_on_previous_text=True)
    elif stage == "initial_timestamp_constraint":
        decode = replace(decode, initial_timestamp_max=reference.decode.initial_timestamp_max or 1.0)
    else:
        raise EvaluationError(f"unknown ablation stage {stage!r}")
    return replace(options, decode=decode)


@dataclass
class AblationRow:
    stage: str
    wer: Dict[str, float]
    report: EvalReport

    def to_dict(self) -> Dict[str, Any]:
        return {"stage": self.stage, "wer": dict(self.wer), "failed": len(self.report.failures)}


@dataclass
class AblationTable:
    """One row per cumulative stage; every row has the same dataset columns"""
    rows: List[AblationRow] = field(default_factory=list)

    @property
    def columns(self) -> List[str]:
        columns = []
        for row in self.rows:
            for tag in row.wer:
                if tag != OVERALL and tag not in columns:
                    columns.append(tag)
        return columns + [OVERALL]

    def to_dict(self) -> Dict[str, Any]:
        return {"columns": self.columns, "rows": [row.to_dict() for row in self.rows]}

    def to_tsv(self) -> str:
        lines = ["\t".join(["stage"] + self.columns)]
        for row in self.rows:
            lines.append("\t".join([row.stage] + [f"{row.wer.get(column, float('nan')):.4f}" for column in self.columns]))
        return "\n".join(lines) + "\n"


class PlanningAgent(Agent):
    """
    Agent responsible for coordinating the transcription and evaluation
    agents: batch transcription, evaluation pipelines and ablations.
    """

    name = "Planning Agent"
    color = Agent.BLUE

    def __init__(self, transcription_agent, evaluation_agent):
        """
        Initialize the planning agent with references to other agents.

        Args:
            transcription_agent: Agent turning audio into transcripts
            evaluation_agent: Agent scoring pipelines against references
        """
        self.log("Initializing Planning Agent")
        self.transcription_agent = transcription_agent
        self.evaluation_agent = evaluation_agent
        self.log("Planning Agent is ready")

    def pipeline_for(self, options: Optional[TranscribeOptions] = None) -> Callable[[AudioBuffer, ManifestEntry], str]:
        """Evaluation pipeline transcribing with options; a manifest language overrides the options"""
        options = options or TranscribeOptions()

        def pipeline(audio: AudioBuffer, entry: ManifestEntry) -> str:
            item_options = replace(options, language=entry.language) if entry.language else options
            return self.transcription_agent.transcribe(audio, item_options).text

        return pipeline

    def transcribe_batch(self, paths: Sequence[str], options: Optional[TranscribeOptions] = None,
                         jobs: int = 1) -> List[Tuple[str, Union[Transcript, Exception]]]:
        """
        Transcribe several files, at most jobs at a time.

        Returns:
            (path, Transcript or the exception raised) in input order
        """
        results: List[Optional[Tuple[str, Union[Transcript, Exception]]]] = [None] * len(paths)

        def run(path: str) -> Union[Transcript, Exception]:
            try:
                return self.transcription_agent.transcribe_file(path, options)
            except Exception as e:
                self.error(f"Failed to transcribe {path}: {e}")
                return e

        if jobs <= 1:
            for index, path in enumerate(paths):
                results[index] = (path, run(path))
        else:
            with ThreadPoolExecutor(max_workers=jobs) as executor:
                futures = {executor.submit(run, path): index for index, path in enumerate(paths)}
                for future in as_completed(futures):
                    index = futures[future]
                    results[index] = (paths[index], future.result())
        return results

    def ablation_stages(self, base_options: Optional[TranscribeOptions] = None,
                        toggles: Optional[Dict[str, bool]] = None) -> List[Tuple[str, TranscribeOptions]]:
        """
        Cumulative stage list: greedy decoding first, then each enabled
        heuristic added on top of the ones before it.
        """
        reference = base_options or TranscribeOptions()
        toggles = {stage: True for stage, _ in ABLATION_STAGES} if toggles is None else toggles
        unknown = set(toggles) - {stage for stage, _ in ABLATION_STAGES}
        if unknown:
            raise EvaluationError(f"unknown ablation stage(s): {', '.join(sorted(unknown))}")

        options = greedy_only(reference)
        stages = [(BASELINE_STAGE, options)]
        for stage, label in ABLATION_STAGES:
            if toggles.get(stage, False):
                options = enable_stage(options, stage, reference)
                stages.append((label, options))
        return stages

    def ablation_matrix(self, manifest: EvalManifest, base_options: Optional[TranscribeOptions] = None,
                        toggles: Optional[Dict[str, bool]] = None, normalizer=None,
                        jobs: int = 1) -> AblationTable:
        """
        Evaluate the manifest once per cumulative heuristic stage.

        Args:
            manifest: Evaluation items
            base_options: Settings each heuristic takes when switched on
            toggles: Stage name -> enabled; all stages when None
            normalizer: Text normalizer applied before scoring
            jobs: Worker threads per evaluation

        Returns:
            AblationTable with one row per stage
        """
        table = AblationTable()
        for label, options in self.ablation_stages(base_options, toggles):
            with self.timed(f"Ablation stage '{label}'"):
                report = self.evaluation_agent.evaluate(manifest, self.pipeline_for(options), normalizer=normalizer,
                                                        jobs=jobs, label=label)
            table.rows.append(AblationRow(label, report.dataset_wer(), report))
        return table
