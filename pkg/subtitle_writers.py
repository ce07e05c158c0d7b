"""
Output formats for finished transcripts: txt, json, srt, vtt and tsv.

Files are written atomically: content goes to a temporary file in the
destination directory, which is then renamed over the target.
"""
import os
import json
import tempfile
from typing import Dict, List, Sequence

from speech_agent_framework import SpeechMindError, Transcript

OUTPUT_FORMATS = ("txt", "json", "srt", "vtt", "tsv")


def format_timestamp(seconds: float, decimal_marker: str = ",") -> str:
    """HH:MM:SS,mmm (rounded to the nearest millisecond)"""
    milliseconds = int(round(seconds * 1000))
    hours, milliseconds = divmod(milliseconds, 3_600_000)
    minutes, milliseconds = divmod(milliseconds, 60_000)
    whole_seconds, milliseconds = divmod(milliseconds, 1000)
    return f"{hours:02d}:{minutes:02d}:{whole_seconds:02d}{decimal_marker}{milliseconds:03d}"


class TextWriter:
    extension = "txt"

    def content(self, transcript: Transcript) -> str:
        return "".join(f"{segment.text.strip()}\n" for segment in transcript.segments)


class JSONWriter:
    extension = "json"

    def content(self, transcript: Transcript) -> str:
        return json.dumps(transcript.to_dict(), indent=2, ensure_ascii=False) + "\n"


class SRTWriter:
    extension = "srt"

    def content(self, transcript: Transcript) -> str:
        blocks = []
        for line_number, segment in enumerate(transcript.segments, start=1):
            blocks.append(
                f"{line_number}\n"
                f"{format_timestamp(segment.start)} --> {format_timestamp(segment.end)}\n"
                f"{segment.text.strip()}\n"
            )
        return "\n".join(blocks)


class WebVTTWriter:
    extension = "vtt"

    def content(self, transcript: Transcript) -> str:
        output = ["WEBVTT"]
        for segment in transcript.segments:
            output.append("")
            output.append(f"{format_timestamp(segment.start, '.')} --> {format_timestamp(segment.end, '.')}")
            output.append(segment.text.strip())
        return "\n".join(output) + "\n"


class TSVWriter:
    """start and end in integer milliseconds, then the text"""
    extension = "tsv"

    def content(self, transcript: Transcript) -> str:
        rows = ["start\tend\ttext"]
        for segment in transcript.segments:
            text = segment.text.strip().replace("\t", " ")
            rows.append(f"{int(round(segment.start * 1000))}\t{int(round(segment.end * 1000))}\t{text}")
        return "\n".join(rows) + "\n"


WRITERS = {
    "txt": TextWriter,
    "json": JSONWriter,
    "srt": SRTWriter,
    "vtt": WebVTTWriter,
    "tsv": TSVWriter,
}


def write_atomic(path: str, content: str):
    """Write text to path so readers never see a half-written file"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".speechmind-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(content)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


class OutputCollisionError(SpeechMindError):
    """Two inputs would write to the same output files"""
    code = "output_collision"
    input_error = True


def output_stem(audio_path: str) -> str:
    return os.path.splitext(os.path.basename(audio_path))[0]


def check_distinct_outputs(audio_paths: Sequence[str]):
    """Refuse inputs whose file names collide once directories and extensions are dropped"""
    seen: Dict[str, str] = {}
    for path in audio_paths:
        stem = output_stem(path)
        if stem in seen and seen[stem] != path:
            raise OutputCollisionError(f"{seen[stem]} and {path} would both be written as {stem}.*")
        seen[stem] = path


def write_transcript(transcript: Transcript, audio_path: str, output_dir: str, formats: List[str]) -> Dict[str, str]:
    """
    Write one file per requested format next to each other in output_dir.

    Returns:
        Mapping of format to written path
    """
    basename = output_stem(audio_path)
    written = {}
    for name in formats:
        writer = WRITERS[name]()
        path = os.path.join(output_dir, f"{basename}.{writer.extension}")
        write_atomic(path, writer.content(transcript))
        written[name] = path
    return written
