import os
import io
import csv
import json
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from agents.agent import Agent
from speech_audio import AudioBuffer, add_noise, load_wav
from speech_metrics import EvaluationError, word_error_rate
from subtitle_writers import write_atomic

TSV_COLUMNS = ["index", "audio_path", "tag", "language", "wer", "substitutions", "insertions",
               "deletions", "reference_words", "reference", "hypothesis", "error"]
OVERALL = "overall"


@dataclass
class ManifestEntry:
    audio_path: str
    reference: str
    tag: str = "default"
    language: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalManifest:
    """Ordered (audio, reference) pairs with a dataset tag per item"""
    entries: List[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            if entry.reference is None:
                raise EvaluationError(f"{entry.audio_path} has no reference")
            if entry.audio_path in seen:
                raise EvaluationError(f"duplicate audio path in manifest: {entry.audio_path}")
            seen.add(entry.audio_path)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def load(cls, path: str) -> 'EvalManifest':
        """
        Read a tab-separated manifest: audio_path, reference, optional tag and
        language. Blank lines, '#' comments and an 'audio_path' header row are
        skipped; relative audio paths resolve against the manifest directory.
        """
        if not os.path.isfile(path):
            raise EvaluationError(f"manifest not found: {path}")
        base = os.path.dirname(os.path.abspath(path))
        entries = []
        with open(path, "r", encoding="utf-8", newline="") as f:
            for line_number, row in enumerate(csv.reader(f, delimiter="\t", quoting=csv.QUOTE_NONE), start=1):
                if not row or not "".join(row).strip() or row[0].startswith("#"):
                    continue
                if line_number == 1 and row[0] == "audio_path":
                    continue
                if len(row) < 2:
                    raise EvaluationError(f"{path}:{line_number}: expected audio_path<TAB>reference")
                audio_path = row[0] if os.path.isabs(row[0]) else os.path.join(base, row[0])
                tag = row[2] if len(row) > 2 and row[2] else "default"
                language = row[3] if len(row) > 3 and row[3] else None
                entries.append(ManifestEntry(audio_path, row[1], tag, language))
        return cls(entries)


@dataclass
class ItemResult:
    index: int
    audio_path: str
    tag: str
    language: Optional[str]
    reference: str
    hypothesis: str = ""
    wer: float = 0.0
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_words: int = 0
    error: Optional[str] = None

    @property
    def edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def pooled_wer(items: Sequence[ItemResult]) -> float:
    """Total edits over total reference words"""
    words = sum(item.reference_words for item in items)
    return sum(item.edits for item in items) / max(1, words)


@dataclass
class EvalReport:
    items: List[ItemResult] = field(default_factory=list)
    snr_db: Optional[float] = None
    label: Optional[str] = None

    @property
    def scored(self) -> List[ItemResult]:
        return [item for item in self.items if item.error is None]

    @property
    def failures(self) -> List[ItemResult]:
        return [item for item in self.items if item.error is not None]

    @property
    def tags(self) -> List[str]:
        tags = []
        for item in self.items:
            if item.tag not in tags:
                tags.append(item.tag)
        return tags

    def dataset_wer(self) -> Dict[str, float]:
        """Pooled WER per dataset tag plus an overall entry"""
        scored = self.scored
        rates = {tag: pooled_wer([item for item in scored if item.tag == tag]) for tag in self.tags}
        rates[OVERALL] = pooled_wer(scored)
        return rates

    def summary(self) -> Dict[str, Any]:
        rates = [item.wer for item in self.scored]
        distribution = {}
        if rates:
            q1, median, q3, p90 = np.percentile(rates, [25, 50, 75, 90])
            distribution = {
                "mean": float(np.mean(rates)),
                "min": float(np.min(rates)),
                "q1": float(q1),
                "median": float(median),
                "q3": float(q3),
                "p90": float(p90),
                "max": float(np.max(rates)),
            }
        return {
            "label": self.label,
            "snr_db": self.snr_db,
            "items": len(self.items),
            "failed": len(self.failures),
            "wer": self.dataset_wer(),
            "item_wer": distribution,
            "failures": [{"audio_path": item.audio_path, "error": item.error} for item in self.failures],
        }

    def to_tsv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(TSV_COLUMNS)
        for item in self.items:
            row = item.to_dict()
            row["wer"] = f"{item.wer:.6f}"
            writer.writerow(["" if row[column] is None else row[column] for column in TSV_COLUMNS])
        return buffer.getvalue()

    def write(self, output_dir: str, prefix: str = "eval") -> Tuple[str, str]:
        """Write <prefix>.json (summary) and <prefix>.tsv (one row per item)"""
        summary_path = os.path.join(output_dir, f"{prefix}.json")
        rows_path = os.path.join(output_dir, f"{prefix}.tsv")
        write_atomic(summary_path, json.dumps(self.summary(), indent=2, ensure_ascii=False) + "\n")
        write_atomic(rows_path, self.to_tsv())
        return summary_path, rows_path


@dataclass
class NoiseCurve:
    """One EvalReport per SNR level, in the order the levels were requested"""
    reports: List[EvalReport] = field(default_factory=list)

    def points(self, tag: str = OVERALL) -> List[Tuple[float, float]]:
        return [(report.snr_db, report.dataset_wer().get(tag, float("nan"))) for report in self.reports]

    def summary(self) -> Dict[str, Any]:
        return {
            "snr_db": [report.snr_db for report in self.reports],
            "wer": {tag: [wer for _, wer in self.points(tag)] for tag in self._tags()},
        }

    def _tags(self) -> List[str]:
        tags = []
        for report in self.reports:
            for tag in report.tags:
                if tag not in tags:
                    tags.append(tag)
        return tags + [OVERALL]

    def write(self, output_dir: str, prefix: str = "noise") -> str:
        path = os.path.join(output_dir, f"{prefix}.json")
        write_atomic(path, json.dumps(self.summary(), indent=2) + "\n")
        for report in self.reports:
            report.write(output_dir, prefix=f"{prefix}_{report.snr_db:g}dB")
        return path


class EchoPipeline:
    """Returns the reference as the hypothesis; a harness self-check that must score zero"""

    def __call__(self, audio: AudioBuffer, entry: ManifestEntry) -> str:
        return entry.reference


Pipeline = Callable[[AudioBuffer, ManifestEntry], str]
Normalizer = Callable[[str, Optional[str]], str]


class EvaluationAgent(Agent):
    """
    Scores a transcription pipeline against a manifest of references,
    optionally after mixing noise into every item.
    """

    name = "Evaluation Agent"
    color = Agent.YELLOW

    def __init__(self):
        self.log("Evaluation Agent is ready")

    def _score(self, index: int, entry: ManifestEntry, pipeline: Pipeline, normalizer: Optional[Normalizer],
               transform: Optional[Callable[[int, AudioBuffer], AudioBuffer]]) -> ItemResult:
        result = ItemResult(index, entry.audio_path, entry.tag, entry.language, entry.reference)
        try:
            audio = load_wav(entry.audio_path)
            if transform is not None:
                audio = transform(index, audio)
            result.hypothesis = pipeline(audio, entry)
        except Exception as e:
            code = getattr(e, "code", type(e).__name__)
            result.error = f"{code}: {e}"
            self.error(f"Item {index} ({entry.audio_path}) failed: {result.error}")
            return result

        reference, hypothesis = entry.reference, result.hypothesis
        if normalizer is not None:
            reference = normalizer(reference, entry.language)
            hypothesis = normalizer(hypothesis, entry.language)
        rate = word_error_rate(reference, hypothesis)
        result.wer = rate.rate
        result.substitutions, result.insertions, result.deletions = rate.substitutions, rate.insertions, rate.deletions
        result.reference_words = len(reference.split())
        self.debug(f"Item {index}: WER {result.wer:.3f} ({result.edits} edits / {result.reference_words} words)")
        return result

    def evaluate(self, manifest: EvalManifest, pipeline: Pipeline, normalizer: Optional[Normalizer] = None,
                 jobs: int = 1, transform: Optional[Callable[[int, AudioBuffer], AudioBuffer]] = None,
                 label: Optional[str] = None, progress: bool = False) -> EvalReport:
        """
        Run the pipeline on every manifest item and score it.

        Args:
            manifest: Items to evaluate
            pipeline: Callable (audio, entry) -> hypothesis text
            normalizer: Applied to reference and hypothesis before scoring
            jobs: Worker threads; results keep manifest order regardless
            transform: Optional (index, audio) -> audio applied before the pipeline
            label: Name stored on the report
            progress: Show a tqdm bar over items

        Returns:
            EvalReport with one ItemResult per manifest entry
        """
        self.log(f"Evaluating {len(manifest)} item(s) with {jobs} worker(s)")
        results: List[Optional[ItemResult]] = [None] * len(manifest)
        with self.timed(f"Scoring {len(manifest)} item(s)"), \
                tqdm(total=len(manifest), unit="item", desc=label, disable=not progress) as bar:
            if jobs <= 1:
                for index, entry in enumerate(manifest):
                    results[index] = self._score(index, entry, pipeline, normalizer, transform)
                    bar.update(1)
            else:
                with ThreadPoolExecutor(max_workers=jobs) as executor:
                    futures = {
                        executor.submit(self._score, index, entry, pipeline, normalizer, transform): index
                        for index, entry in enumerate(manifest)
                    }
                    for future in as_completed(futures):
                        results[futures[future]] = future.result()
                        bar.update(1)

        report = EvalReport(items=results, label=label)
        failed = len(report.failures)
        self.log(f"Overall WER {report.dataset_wer()[OVERALL]:.4f}" + (f", {failed} item(s) failed" if failed else ""))
        return report

    def noise_sweep(self, manifest: EvalManifest, pipeline: Pipeline, snr_list: Sequence[float],
                    noise: Optional[AudioBuffer] = None, seed: int = 0, normalizer: Optional[Normalizer] = None,
                    jobs: int = 1, progress: bool = False) -> NoiseCurve:
        """
        Evaluate once per SNR level with noise mixed into every item.

        Args:
            noise: Noise clip to tile ("sample" kind); seeded white noise when None
            seed: Base seed; item i uses seed + i so results do not depend on scheduling
        """
        curve = NoiseCurve()
        for snr_db in snr_list:
            self.log(f"Noise sweep at {snr_db:g} dB SNR")

            def transform(index, audio, snr_db=snr_db):
                return add_noise(audio, noise, snr_db, seed=seed + index)

            report = self.evaluate(manifest, pipeline, normalizer=normalizer, jobs=jobs,
                                   transform=transform, label=f"{snr_db:g} dB", progress=progress)
            report.snr_db = float(snr_db)
            curve.reports.append(report)
        return curve
