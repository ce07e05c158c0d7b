"""
Audio frontend: WAV loading, resampling, log-mel features and additive noise.

Everything downstream sees 16 kHz mono float32 audio and 80-channel log-mel
frames at 100 frames per second, normalized into [-1, 1].
"""
import os
import math
import struct
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import torch
import librosa
import soundfile as sf
from scipy import signal

from speech_agent_framework import SpeechMindError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_FFT = 400
HOP_LENGTH = 160
N_MELS = 80
CHUNK_LENGTH = 30
N_SAMPLES = CHUNK_LENGTH * SAMPLE_RATE  # 480000 samples in a 30-second chunk
N_FRAMES = N_SAMPLES // HOP_LENGTH  # 3000 frames in a mel spectrogram input
FRAMES_PER_SECOND = SAMPLE_RATE // HOP_LENGTH  # 100

LOG_FLOOR = 1e-10
DYNAMIC_RANGE_DB = 8.0  # in log10 units, i.e. 80 dB
SILENCE_VALUE = -1.0

RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 8.0

WAV_FORMATS = ("WAV", "WAVEX")
SUPPORTED_SUBTYPES = ("PCM_16", "FLOAT")
GOLDEN_MAGIC = b"MELSPEC1"
NOISE_KINDS = ("white", "sample")


class AudioError(SpeechMindError):
    code = "audio_error"
    input_error = True


class AudioFormatError(AudioError):
    """Malformed or unreadable WAV container"""
    code = "audio_format"


class UnsupportedAudioError(AudioError):
    """Well-formed file using an encoding we do not decode"""
    code = "audio_unsupported"


class EmptyAudioError(AudioError):
    code = "audio_empty"


class DegenerateAudioError(AudioError):
    """Signal or noise with zero power where a power ratio is needed"""
    code = "audio_degenerate"


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Immutable mono float32 samples plus their sample rate"""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioFormatError(f"sample rate must be positive, got {self.sample_rate}")
        samples = np.array(self.samples, dtype=np.float32, copy=True)
        if samples.ndim != 1:
            raise AudioFormatError(f"expected mono samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError("audio contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Log-mel frames laid out as [n_frames, n_mels], values in [-1, 1]"""
    data: np.ndarray
    frame_rate: int = FRAMES_PER_SECOND

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise AudioError(f"mel spectrogram must be 2-D, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_mels(self) -> int:
        return self.data.shape[1]

    def window(self, start_frame: int, n_frames: int = N_FRAMES) -> 'MelSpectrogram':
        """Slice a fixed-size window starting at start_frame, padding past the end with silence"""
        return pad_or_trim(MelSpectrogram(self.data[start_frame:start_frame + n_frames], self.frame_rate), n_frames)


@dataclass(frozen=True)
class NoiseSpec:
    """Which noise to mix in and how loud; "sample" tiles a recorded noise clip"""
    kind: str = "white"
    snr_db: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise AudioError(f"unknown noise kind {self.kind!r}, expected one of {NOISE_KINDS}")
        if not math.isfinite(self.snr_db):
            raise AudioError(f"SNR must be finite, got {self.snr_db}")


def load_wav(path: str) -> AudioBuffer:
    """
    Read a RIFF/WAVE file with PCM 16-bit or IEEE float 32-bit samples.

    Stereo input is averaged to mono. The sample rate is kept as stored;
    call resample() to bring it to 16 kHz.

    Args:
        path: Path to the WAV file

    Returns:
        AudioBuffer with samples in [-1, 1]
    """
    if not os.path.isfile(path):
        raise AudioFormatError(f"no such audio file: {path}")

    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise AudioFormatError(f"cannot parse {path}: {e}") from e

    if info.format not in WAV_FORMATS:
        raise UnsupportedAudioError(f"{path}: container {info.format} is not WAV")
    if info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedAudioError(f"{path}: sample encoding {info.subtype} is not supported")
    if info.channels not in (1, 2):
        raise UnsupportedAudioError(f"{path}: {info.channels} channels, expected mono or stereo")

    try:
        data, sample_rate = sf.read(path, dtype="float32", always_2d=True)
    except RuntimeError as e:
        raise AudioFormatError(f"cannot decode {path}: {e}") from e

    if not np.all(np.isfinite(data)):
        raise AudioFormatError(f"{path}: float samples contain NaN or infinity")

    samples = data.mean(axis=1) if data.shape[1] > 1 else data[:, 0]
    samples = np.clip(samples, -1.0, 1.0)
    logger.debug("Loaded %s: %d samples at %d Hz (%s, %d ch)",
                 path, len(samples), sample_rate, info.subtype, info.channels)
    return AudioBuffer(samples, int(sample_rate))


def save_wav(path: str, audio: AudioBuffer, subtype: str = "PCM_16"):
    """Write mono audio as a WAV file (PCM_16 or FLOAT)"""
    if subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedAudioError(f"cannot write sample encoding {subtype}")
    samples = audio.samples
    if subtype == "PCM_16":
        samples = np.clip(samples, -1.0, 1.0)
    sf.write(path, samples, audio.sample_rate, subtype=subtype, format="WAV")


@lru_cache(maxsize=None)
def _resample_taps(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    n_taps = RESAMPLE_TAPS_PER_PHASE * max_rate + 1
    return signal.firwin(n_taps, 1.0 / max_rate, window=("kaiser", RESAMPLE_KAISER_BETA))


def resample(audio: AudioBuffer, target_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """
    Band-limited rational resampling with a Kaiser-windowed sinc filter.

    Identity when the rates already match. The output holds
    ceil(n * target_rate / source_rate) samples.
    """
    if target_rate <= 0:
        raise AudioError(f"target rate must be positive, got {target_rate}")
    if audio.sample_rate == target_rate:
        return audio

    divisor = math.gcd(audio.sample_rate, target_rate)
    up, down = target_rate // divisor, audio.sample_rate // divisor
    if len(audio) == 0:
        return AudioBuffer(np.zeros(0, dtype=np.float32), target_rate)

    taps = _resample_taps(up, down)
    resampled = signal.resample_poly(audio.samples.astype(np.float64), up, down, window=taps)
    logger.debug("Resampled %d Hz -> %d Hz (up=%d, down=%d, %d taps)",
                 audio.sample_rate, target_rate, up, down, len(taps))
    return AudioBuffer(resampled.astype(np.float32), target_rate)


@lru_cache(maxsize=None)
def mel_filters(n_mels: int = N_MELS) -> np.ndarray:
    """Slaney-style triangular filterbank over 0 Hz to 8 kHz, shape [n_mels, N_FFT // 2 + 1]"""
    return librosa.filters.mel(
        sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=n_mels,
        fmin=0.0, fmax=SAMPLE_RATE / 2, htk=False, norm="slaney",
    )


def mel_power(audio: AudioBuffer, n_mels: int = N_MELS) -> np.ndarray:
    """
    Mel-band power before the log compression, shape [n_frames, n_mels].

    Frames are centered with reflect padding (constant padding when the clip is
    shorter than half a window) and n_frames = ceil(samples / HOP_LENGTH).
    """
    if audio.sample_rate != SAMPLE_RATE:
        raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate} Hz; resample first")
    n_samples = len(audio)
    if n_samples == 0:
        raise EmptyAudioError("cannot compute features of empty audio")

    n_frames = math.ceil(n_samples / HOP_LENGTH)
    samples = torch.from_numpy(audio.samples.astype(np.float64))
    window = torch.hann_window(N_FFT, periodic=True, dtype=torch.float64)
    pad_mode = "reflect" if n_samples > N_FFT // 2 else "constant"
    stft = torch.stft(samples, N_FFT, HOP_LENGTH, window=window, center=True,
                      pad_mode=pad_mode, return_complex=True)
    magnitudes = stft.abs() ** 2  # [N_FFT // 2 + 1, frames]
    magnitudes = magnitudes[:, :n_frames]

    filters = torch.from_numpy(mel_filters(n_mels).astype(np.float64))
    return (filters @ magnitudes).T.numpy()


def log_mel_spectrogram(audio: AudioBuffer, n_mels: int = N_MELS) -> MelSpectrogram:
    """
    80-channel log-mel features at 100 frames per second.

    log10 with a 1e-10 floor, clamped to 8 log10 units below the peak, then
    mapped affinely so the peak sits at +1 and the clamp floor at -1. Silence
    (all values at the floor) maps to exactly -1.
    """
    power = mel_power(audio, n_mels)
    log_spec = np.log10(np.maximum(power, LOG_FLOOR))
    top = max(float(log_spec.max()), math.log10(LOG_FLOOR) + DYNAMIC_RANGE_DB)
    log_spec = np.clip(log_spec, top - DYNAMIC_RANGE_DB, top)
    normalized = (log_spec - top) / (DYNAMIC_RANGE_DB / 2) + 1.0
    return MelSpectrogram(normalized.astype(np.float32))


def pad_or_trim(mel: MelSpectrogram, n_frames: int = N_FRAMES) -> MelSpectrogram:
    """Truncate or pad with the silence value to exactly n_frames frames"""
    if mel.n_frames == n_frames:
        return mel
    if mel.n_frames > n_frames:
        return MelSpectrogram(mel.data[:n_frames], mel.frame_rate)
    padding = np.full((n_frames - mel.n_frames, mel.n_mels), SILENCE_VALUE, dtype=np.float32)
    return MelSpectrogram(np.concatenate([mel.data, padding], axis=0), mel.frame_rate)


def signal_power(samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    return float(np.mean(samples ** 2)) if len(samples) else 0.0


def white_noise(n_samples: int, seed: int = 0) -> np.ndarray:
    """Seeded Gaussian white noise with unit variance"""
    return np.random.default_rng(seed).standard_normal(n_samples)


def make_noise(spec: NoiseSpec, n_samples: int, seed: int = 0, sample: Optional[AudioBuffer] = None) -> np.ndarray:
    """Noise of the requested kind, n_samples long, before any SNR scaling"""
    if spec.kind == "white":
        return white_noise(n_samples, seed)
    if sample is None:
        raise AudioError("noise kind 'sample' needs a noise clip")
    if len(sample) == 0:
        raise DegenerateAudioError("noise sample is empty")
    return np.resize(sample.samples.astype(np.float64), n_samples)


def add_noise(audio: AudioBuffer, noise: Optional[AudioBuffer], snr_db: float, seed: int = 0) -> AudioBuffer:
    """
    Mix noise into audio at a target signal-to-noise ratio.

    Args:
        audio: Clean signal
        noise: Noise sample, tiled or truncated to the signal length; seeded white noise when None
        snr_db: Target SNR in dB
        seed: Seed for generated white noise

    Returns:
        The noisy signal. Samples are not clipped, so loud mixes can exceed [-1, 1].
    """
    spec = NoiseSpec("white" if noise is None else "sample", snr_db)

    clean = audio.samples.astype(np.float64)
    p_signal = signal_power(clean)
    if p_signal == 0.0:
        raise DegenerateAudioError("cannot set an SNR for a silent signal")

    if noise is not None and noise.sample_rate != audio.sample_rate:
        noise = resample(noise, audio.sample_rate)
    noise_samples = make_noise(spec, len(clean), seed, noise)

    p_noise = signal_power(noise_samples)
    if p_noise == 0.0:
        raise DegenerateAudioError("noise sample is silent")

    gain = math.sqrt(p_signal / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
    mixed = clean + gain * noise_samples
    return AudioBuffer(mixed.astype(np.float32), audio.sample_rate)


def measure_snr_db(clean: AudioBuffer, noisy: AudioBuffer) -> float:
    """Empirical SNR of noisy against its clean source, in dB"""
    if len(clean) != len(noisy):
        raise AudioError("signals differ in length")
    reference = clean.samples.astype(np.float64)
    residual = noisy.samples.astype(np.float64) - reference
    p_residual = signal_power(residual)
    if p_residual == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_power(reference) / p_residual)


def write_mel_golden(path: str, mel: MelSpectrogram):
    """Store a spectrogram as MELSPEC1: magic, uint32 frames, uint32 channels, float32 LE data"""
    with open(path, "wb") as f:
        f.write(GOLDEN_MAGIC)
        f.write(struct.pack("<II", mel.n_frames, mel.n_mels))
        f.write(mel.data.astype("<f4").tobytes())


def read_mel_golden(path: str) -> MelSpectrogram:
    with open(path, "rb") as f:
        payload = f.read()
    header_size = len(GOLDEN_MAGIC) + 8
    if len(payload) < header_size or payload[:len(GOLDEN_MAGIC)] != GOLDEN_MAGIC:
        raise AudioFormatError(f"{path} is not a MELSPEC1 file")
    n_frames, n_mels = struct.unpack("<II", payload[len(GOLDEN_MAGIC):header_size])
    expected = n_frames * n_mels * 4
    if len(payload) - header_size != expected:
        raise AudioFormatError(f"{path}: expected {expected} data bytes, found {len(payload) - header_size}")
    data = np.frombuffer(payload, dtype="<f4", offset=header_size).reshape(n_frames, n_mels)
    return MelSpectrogram(data.astype(np.float32))
