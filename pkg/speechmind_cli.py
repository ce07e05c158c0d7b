"""
SpeechMind command line: transcribe, detect-language, evaluate, noise-sweep,
ablate and normalize.

Exit codes: 0 success, 1 bad input (audio, vocabulary, config, weights,
manifest), 2 any other failure, 64 usage error.
"""
import os
import sys
import json
import logging
import argparse
from typing import List, Optional

import torch

from speech_agent_framework import SpeechAgentFramework, SpeechMindError, Transcript
from speech_decoding import DEFAULT_TEMPERATURES, DecodeOptions, DecodingError
from speech_vocab import LANGUAGES, TASKS
from subtitle_writers import OUTPUT_FORMATS, check_distinct_outputs, write_atomic, write_transcript
from text_normalizer import MODES, TextNormalizer, normalize

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_INTERNAL_ERROR = 2
EXIT_USAGE = 64

DEFAULT_SNR_LIST = "40,30,20,10,0,-10"
STAGE_NAMES = ("beam_search", "temperature_fallback", "vad", "condition_on_previous_text",
               "initial_timestamp_constraint")


class SpeechMindArgumentParser(argparse.ArgumentParser):
    """argparse with the usage-error exit code the tools expect"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(value: str) -> List[float]:
    try:
        values = [float(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}")
    if not values:
        raise argparse.ArgumentTypeError("list is empty")
    return values


def _stage_list(value: str) -> List[str]:
    stages = [item.strip() for item in value.split(",") if item.strip()]
    unknown = [stage for stage in stages if stage not in STAGE_NAMES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown stage(s) {', '.join(unknown)}; choose from {', '.join(STAGE_NAMES)}")
    return stages


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def build_parser() -> argparse.ArgumentParser:
    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--model", help="Weight file (WSPRWT01); seeded random weights when omitted")
    model_flags.add_argument("--config", help="Model config file (KEY=VALUE)")
    model_flags.add_argument("--preset", default="tiny", help="Model size when no --config is given")
    model_flags.add_argument("--vocab", help="Vocabulary file; built-in toy vocabulary when omitted")
    model_flags.add_argument("--manifest-specials", help="JSON special-token manifest for --vocab")
    model_flags.add_argument("--seed", type=int, default=0, help="Seed for random weights and sampling")
    model_flags.add_argument("--threads", type=_positive_int, default=1, help="torch intra-op threads")
    model_flags.add_argument("--jobs", type=_positive_int, default=os.cpu_count() or 1,
                             help="Files or manifest items processed in parallel")
    model_flags.add_argument("--verbose", action="store_true", help="Debug logging")

    decode_flags = argparse.ArgumentParser(add_help=False)
    decode_flags.add_argument("--language", default="auto", help="Language code, or auto to detect it")
    decode_flags.add_argument("--task", choices=TASKS, default="transcribe")
    decode_flags.add_argument("--beam-size", type=_positive_int, default=5)
    decode_flags.add_argument("--temperature", type=float, default=0.0,
                              help="First temperature of the fallback schedule")
    decode_flags.add_argument("--no-fallback", action="store_true", help="Disable temperature fallback")
    decode_flags.add_argument("--no-timestamps", action="store_true")
    decode_flags.add_argument("--no-condition-on-previous", action="store_true")
    decode_flags.add_argument("--no-vad", action="store_true", help="Keep windows the model marks as silent")

    eval_flags = argparse.ArgumentParser(add_help=False)
    eval_flags.add_argument("manifest", help="Evaluation manifest (TSV)")
    eval_flags.add_argument("--normalizer", choices=MODES, default="auto")
    eval_flags.add_argument("--output-dir", default=".")

    parser = SpeechMindArgumentParser(prog="speechmind", description="SpeechMind speech recognition toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    transcribe = commands.add_parser("transcribe", parents=[model_flags, decode_flags], help="Transcribe audio files")
    transcribe.add_argument("audio", nargs="+", help="WAV files")
    transcribe.add_argument("--output-format", default="txt",
                            help=f"Comma-separated list of {', '.join(OUTPUT_FORMATS)}, or all")
    transcribe.add_argument("--output-dir", default=".")

    detect = commands.add_parser("detect-language", parents=[model_flags], help="Language probabilities")
    detect.add_argument("audio", help="WAV file")
    detect.add_argument("--top", type=_positive_int, default=5)

    commands.add_parser("evaluate", parents=[model_flags, decode_flags, eval_flags], help="WER on a manifest")

    sweep = commands.add_parser("noise-sweep", parents=[model_flags, decode_flags, eval_flags],
                                help="WER against signal-to-noise ratio")
    sweep.add_argument("--snr", type=_float_list, default=_float_list(DEFAULT_SNR_LIST), help="SNR levels in dB")
    sweep.add_argument("--noise", help="Noise WAV to tile; white noise when omitted")

    ablate = commands.add_parser("ablate", parents=[model_flags, decode_flags, eval_flags],
                                 help="WER with long-form heuristics added one at a time")
    ablate.add_argument("--stages", type=_stage_list, default=list(STAGE_NAMES),
                        help=f"Comma-separated subset of {', '.join(STAGE_NAMES)}")

    norm = commands.add_parser("normalize", help="Normalize text read from --text or stdin")
    norm.add_argument("--text")
    norm.add_argument("--mode", choices=MODES, default="english")
    norm.add_argument("--language")
    return parser


def _output_formats(value: str) -> List[str]:
    if value == "all":
        return list(OUTPUT_FORMATS)
    formats = [item.strip() for item in value.split(",") if item.strip()]
    unknown = [item for item in formats if item not in OUTPUT_FORMATS]
    if unknown or not formats:
        SpeechMindArgumentParser(prog="speechmind transcribe").error(
            f"unknown output format(s): {', '.join(unknown) or value!r}")
    return formats


class SpeechMindCLI:
    """Runs one parsed command and maps failures onto exit codes"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self._framework = None

    @property
    def framework(self) -> SpeechAgentFramework:
        if self._framework is None:
            torch.set_num_threads(self.args.threads)
            self._framework = SpeechAgentFramework.from_files(
                config_path=self.args.config,
                weights_path=self.args.model,
                vocab_path=self.args.vocab,
                manifest_path=self.args.manifest_specials,
                seed=self.args.seed,
                verbose=self.args.verbose,
                preset=self.args.preset,
            )
        return self._framework

    def _transcribe_options(self):
        from agents.transcription_agent import TranscribeOptions

        args = self.args
        usage = SpeechMindArgumentParser(prog=f"speechmind {args.command}")
        language = None if args.language == "auto" else args.language
        if language is not None and language not in LANGUAGES:
            usage.error(f"unknown language {language!r}")
        temperatures = (args.temperature,) + tuple(t for t in DEFAULT_TEMPERATURES if t > args.temperature)
        decode = DecodeOptions(
            temperature=args.temperature,
            beam_size=args.beam_size,
            temperatures=temperatures,
            temperature_fallback=not args.no_fallback,
            seed=args.seed,
        )
        try:
            decode.validate()
        except DecodingError as e:
            usage.error(str(e))
        return TranscribeOptions(
            language=language,
            task=args.task,
            timestamps=not args.no_timestamps,
            decode=decode,
            vad_enabled=not args.no_vad,
            condition_on_previous_text=not args.no_condition_on_previous,
        )

    def _manifest(self):
        from agents.evaluation_agent import EvalManifest
        return EvalManifest.load(self.args.manifest)

    def _process_transcribe(self) -> int:
        formats = _output_formats(self.args.output_format)
        options = self._transcribe_options()
        check_distinct_outputs(self.args.audio)
        results = self.framework.transcribe_files(self.args.audio, options, jobs=self.args.jobs)
        exit_code = EXIT_OK
        for path, result in results:
            if isinstance(result, Transcript):
                written = write_transcript(result, path, self.args.output_dir, formats)
                self.framework.log(f"{path}: {len(result.segments)} segment(s) -> {', '.join(written.values())}")
            elif exit_code == EXIT_OK:
                exit_code = _exit_code(result)
        return exit_code

    def _process_detect_language(self) -> int:
        from speech_audio import load_wav

        probs = self.framework.detect_language(load_wav(self.args.audio))
        ranked = sorted(probs.items(), key=lambda item: (-item[1], item[0]))[:self.args.top]
        print(json.dumps({code: round(p, 6) for code, p in ranked}))
        return EXIT_OK

    def _process_evaluate(self) -> int:
        report = self.framework.evaluate(self._manifest(), self._transcribe_options(),
                                         normalizer=TextNormalizer(self.args.normalizer), jobs=self.args.jobs)
        summary_path, _ = report.write(self.args.output_dir)
        self.framework.log(f"Evaluation summary written to {summary_path}")
        return EXIT_OK

    def _process_noise_sweep(self) -> int:
        from speech_audio import load_wav

        noise = load_wav(self.args.noise) if self.args.noise else None
        curve = self.framework.noise_sweep(self._manifest(), self.args.snr, noise=noise, seed=self.args.seed,
                                           options=self._transcribe_options(),
                                           normalizer=TextNormalizer(self.args.normalizer), jobs=self.args.jobs)
        path = curve.write(self.args.output_dir)
        self.framework.log(f"Noise curve written to {path}")
        return EXIT_OK

    def _process_ablate(self) -> int:
        toggles = {stage: stage in self.args.stages for stage in STAGE_NAMES}
        table = self.framework.ablate(self._manifest(), self._transcribe_options(), toggles=toggles,
                                      normalizer=TextNormalizer(self.args.normalizer), jobs=self.args.jobs)
        write_atomic(os.path.join(self.args.output_dir, "ablation.tsv"), table.to_tsv())
        write_atomic(os.path.join(self.args.output_dir, "ablation.json"), json.dumps(table.to_dict(), indent=2) + "\n")
        self.framework.log(f"Ablation table with {len(table.rows)} stage(s) written to {self.args.output_dir}")
        return EXIT_OK

    def _process_normalize(self) -> int:
        text = self.args.text if self.args.text is not None else sys.stdin.read()
        for line in text.splitlines() or [""]:
            print(normalize(line, self.args.mode, self.args.language))
        return EXIT_OK

    def run(self) -> int:
        handler = getattr(self, "_process_" + self.args.command.replace("-", "_"))
        try:
            return handler()
        except Exception as e:
            logging.error(f"{self.args.command} failed: {e}")
            return _exit_code(e)


def _exit_code(error: BaseException) -> int:
    if isinstance(error, SpeechMindError) and error.input_error:
        return EXIT_INPUT_ERROR
    return EXIT_INTERNAL_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return SpeechMindCLI(args).run()
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
