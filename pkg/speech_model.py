"""
Encoder-decoder transformer for 30-second log-mel windows.

The encoder runs two convolutions (the second halves the frame rate), adds
sinusoidal positions and applies pre-norm residual blocks. The decoder embeds
tokens with learned positions, attends causally to itself and fully to the
audio states, and projects back through the transposed token embedding.
"""
import os
import math
import struct
import logging
from dataclasses import dataclass, asdict
from typing import ClassVar, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from dotenv import dotenv_values

from speech_agent_framework import SpeechMindError
from speech_audio import MelSpectrogram, N_FRAMES, N_MELS
from speech_vocab import SpecialTokens, DEFAULT_TEXT_CTX

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"WSPRWT01"


class ModelError(SpeechMindError):
    code = "model_error"


class ShapeError(ModelError):
    code = "shape_mismatch"
    input_error = True


class NumericError(ModelError):
    code = "numeric_error"


class ContextOverflowError(ModelError):
    code = "context_overflow"


class WeightLoadError(ModelError):
    code = "weight_load"
    input_error = True


class ConfigError(ModelError):
    code = "config_error"
    input_error = True


@dataclass(frozen=True)
class ModelConfig:
    """Model geometry; the same config must be used to save and load weights"""
    name: str
    n_layers: int
    width: int
    heads: int
    vocab_size: int
    n_text_ctx: int = DEFAULT_TEXT_CTX
    n_mels: int = N_MELS
    n_audio_ctx: int = N_FRAMES // 2

    # (layers, width, heads) of the standard sizes
    PRESETS: ClassVar[Dict[str, Tuple[int, int, int]]] = {
        "tiny": (4, 384, 6),
        "base": (6, 512, 8),
        "small": (12, 768, 12),
        "medium": (24, 1024, 16),
        "large": (32, 1280, 20),
    }
    # Published parameter totals for the 51865-token vocabulary
    PUBLISHED_PARAMETERS: ClassVar[Dict[str, int]] = {
        "tiny": 39_000_000,
        "base": 74_000_000,
        "small": 244_000_000,
        "medium": 769_000_000,
        "large": 1_550_000_000,
    }
    FILE_KEYS: ClassVar[Dict[str, str]] = {
        "NAME": "name",
        "N_LAYERS": "n_layers",
        "WIDTH": "width",
        "HEADS": "heads",
        "VOCAB_SIZE": "vocab_size",
        "N_TEXT_CTX": "n_text_ctx",
        "N_MELS": "n_mels",
        "N_AUDIO_CTX": "n_audio_ctx",
    }

    def __post_init__(self):
        for key in ("n_layers", "width", "heads", "vocab_size", "n_text_ctx", "n_mels", "n_audio_ctx"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.width < 4 or self.width % 2:
            raise ConfigError(f"width must be even and at least 4, got {self.width}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @classmethod
    def preset(cls, name: str, vocab_size: int, n_text_ctx: int = DEFAULT_TEXT_CTX) -> 'ModelConfig':
        if name not in cls.PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose one of {', '.join(cls.PRESETS)}")
        n_layers, width, heads = cls.PRESETS[name]
        return cls(name=name, n_layers=n_layers, width=width, heads=heads,
                   vocab_size=vocab_size, n_text_ctx=n_text_ctx)

    @classmethod
    def from_file(cls, path: str) -> 'ModelConfig':
        """
        Read KEY=VALUE lines (NAME, N_LAYERS, WIDTH, HEADS, VOCAB_SIZE and the
        optional N_TEXT_CTX, N_MELS, N_AUDIO_CTX). PRESET=<name> fills in
        layers, width and heads from a standard size.
        """
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        values = {key.upper(): value for key, value in dotenv_values(path).items() if value is not None}

        fields = {}
        preset = values.pop("PRESET", None)
        if preset:
            if preset not in cls.PRESETS:
                raise ConfigError(f"{path}: unknown preset {preset!r}")
            fields["name"] = preset
            fields["n_layers"], fields["width"], fields["heads"] = cls.PRESETS[preset]

        for key, value in values.items():
            if key not in cls.FILE_KEYS:
                raise ConfigError(f"{path}: unknown key {key}")
            attribute = cls.FILE_KEYS[key]
            if attribute == "name":
                fields[attribute] = value
                continue
            try:
                fields[attribute] = int(value)
            except ValueError as e:
                raise ConfigError(f"{path}: {key} must be an integer, got {value!r}") from e

        missing = [key for key, attribute in cls.FILE_KEYS.items()
                   if attribute in ("n_layers", "width", "heads", "vocab_size") and attribute not in fields]
        if missing:
            raise ConfigError(f"{path}: missing {', '.join(missing)}")
        fields.setdefault("name", "custom")
        return cls(**fields)

    def save(self, path: str):
        values = asdict(self)
        with open(path, "w", encoding="utf-8") as f:
            for key, attribute in self.FILE_KEYS.items():
                f.write(f"{key}={values[attribute]}\n")

    def tensor_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Every named weight tensor and its shape, in canonical file order"""
        w = self.width
        shapes: Dict[str, Tuple[int, ...]] = {
            "encoder.conv1.weight": (w, self.n_mels, 3),
            "encoder.conv1.bias": (w,),
            "encoder.conv2.weight": (w, w, 3),
            "encoder.conv2.bias": (w,),
        }

        def attention(prefix):
            shapes.update({
                f"{prefix}.query.weight": (w, w), f"{prefix}.query.bias": (w,),
                f"{prefix}.key.weight": (w, w),
                f"{prefix}.value.weight": (w, w), f"{prefix}.value.bias": (w,),
                f"{prefix}.out.weight": (w, w), f"{prefix}.out.bias": (w,),
            })

        def norm(prefix):
            shapes.update({f"{prefix}.weight": (w,), f"{prefix}.bias": (w,)})

        def block(prefix, cross):
            attention(f"{prefix}.attn")
            norm(f"{prefix}.attn_ln")
            if cross:
                attention(f"{prefix}.cross_attn")
                norm(f"{prefix}.cross_attn_ln")
            shapes.update({
                f"{prefix}.mlp.0.weight": (4 * w, w), f"{prefix}.mlp.0.bias": (4 * w,),
                f"{prefix}.mlp.2.weight": (w, 4 * w), f"{prefix}.mlp.2.bias": (w,),
            })
            norm(f"{prefix}.mlp_ln")

        for i in range(self.n_layers):
            block(f"encoder.blocks.{i}", cross=False)
        norm("encoder.ln_post")

        shapes["decoder.token_embedding.weight"] = (self.vocab_size, w)
        shapes["decoder.positional_embedding"] = (self.n_text_ctx, w)
        for i in range(self.n_layers):
            block(f"decoder.blocks.{i}", cross=True)
        norm("decoder.ln")
        return shapes

    def parameter_count(self) -> int:
        return sum(math.prod(shape) for shape in self.tensor_shapes().values())


class ModelWeights:
    """Named float32 tensors matching ModelConfig.tensor_shapes()"""

    def __init__(self, tensors: Dict[str, torch.Tensor]):
        self.tensors = {name: tensor.detach().to(torch.float32).contiguous() for name, tensor in tensors.items()}

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def validate(self, config: ModelConfig):
        expected = config.tensor_shapes()
        for name, shape in expected.items():
            if name not in self.tensors:
                raise WeightLoadError(f"missing tensor {name}")
            if tuple(self.tensors[name].shape) != shape:
                raise WeightLoadError(
                    f"tensor {name} has shape {tuple(self.tensors[name].shape)}, expected {shape}")
            if not torch.isfinite(self.tensors[name]).all():
                raise WeightLoadError(f"tensor {name} contains non-finite values")
        unexpected = sorted(set(self.tensors) - set(expected))
        if unexpected:
            raise WeightLoadError(f"unexpected tensor {unexpected[0]}")


def random_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """
    Seeded random weights: matrices draw N(0, 1/fan_in), biases are zero and
    layer norms start at identity.
    """
    generator = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith("ln.weight") or name.endswith("ln_post.weight"):
            tensors[name] = torch.ones(shape)
        elif len(shape) == 1:
            tensors[name] = torch.zeros(shape)
        else:
            fan_in = math.prod(shape[1:])
            tensors[name] = torch.randn(shape, generator=generator) / math.sqrt(fan_in)
    return ModelWeights(tensors)


def save_weights(path: str, weights: ModelWeights, config: ModelConfig):
    """
    Write WSPRWT01: magic, uint32 tensor count, then per tensor a uint32
    name length, UTF-8 name, uint32 rank, uint64 dims and float32 LE data.
    """
    weights.validate(config)
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        names = list(config.tensor_shapes())
        f.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = weights[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", tensor.dim()))
            f.write(struct.pack(f"<{tensor.dim()}Q", *tensor.shape))
            f.write(tensor.numpy().astype("<f4").tobytes())


def load_weights(path: str, config: ModelConfig) -> ModelWeights:
    """Read a WSPRWT01 file and check every tensor against the config"""
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise WeightLoadError(f"cannot read weights {path}: {e}") from e

    if payload[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise WeightLoadError(f"{path} is not a WSPRWT01 weight file")

    offset = len(WEIGHTS_MAGIC)

    def take(n_bytes):
        nonlocal offset
        if offset + n_bytes > len(payload):
            raise EOFError
        chunk = payload[offset:offset + n_bytes]
        offset += n_bytes
        return chunk

    tensors = {}
    try:
        (count,) = struct.unpack("<I", take(4))
        for _ in range(count):
            (name_length,) = struct.unpack("<I", take(4))
            name = take(name_length).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}Q", take(8 * rank))
            data = np.frombuffer(take(4 * math.prod(shape)), dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(data.astype(np.float32))
    except EOFError:
        logger.debug("Weight file %s is truncated after %d tensors", path, len(tensors))
    except UnicodeDecodeError as e:
        raise WeightLoadError(f"{path}: tensor name is not UTF-8") from e

    weights = ModelWeights(tensors)
    weights.validate(config)
    logger.debug("Loaded %d tensors from %s", len(weights), path)
    return weights


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> torch.Tensor:
    """Fixed sin/cos position table of shape [length, channels]"""
    log_timescale_increment = math.log(max_timescale) / (channels // 2 - 1)
    inv_timescales = torch.exp(-log_timescale_increment * torch.arange(channels // 2, dtype=torch.float32))
    scaled_time = torch.arange(length, dtype=torch.float32)[:, None] * inv_timescales[None, :]
    return torch.cat([torch.sin(scaled_time), torch.cos(scaled_time)], dim=1)


class DecodeCache:
    """
    Per-layer self-attention keys/values for the tokens seen so far, plus the
    cross-attention keys/values of the audio states (computed once).
    """

    def __init__(self, n_layers: int, max_length: int, batch_size: int = 1):
        self.keys: List[Optional[torch.Tensor]] = [None] * n_layers
        self.values: List[Optional[torch.Tensor]] = [None] * n_layers
        self.cross_keys: List[Optional[torch.Tensor]] = [None] * n_layers
        self.cross_values: List[Optional[torch.Tensor]] = [None] * n_layers
        self.max_length = max_length
        self.batch_size = batch_size
        self.length = 0

    def reorder(self, indices: Sequence[int]):
        """Select (and duplicate) batch rows, e.g. to follow surviving beam hypotheses"""
        index = torch.tensor(list(indices), dtype=torch.long)
        self.keys = [None if k is None else k.index_select(0, index) for k in self.keys]
        self.values = [None if v is None else v.index_select(0, index) for v in self.values]
        self.batch_size = len(index)


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width, bias=False)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, xa: Optional[torch.Tensor] = None, mask: Optional[torch.Tensor] = None,
                cache: Optional[DecodeCache] = None, layer: int = 0) -> torch.Tensor:
        q = self.query(x)
        if xa is None:
            k, v = self.key(x), self.value(x)
            if cache is not None:
                if cache.keys[layer] is not None:
                    k = torch.cat([cache.keys[layer], k], dim=1)
                    v = torch.cat([cache.values[layer], v], dim=1)
                cache.keys[layer], cache.values[layer] = k, v
        elif cache is not None and cache.cross_keys[layer] is not None:
            k, v = cache.cross_keys[layer], cache.cross_values[layer]
        else:
            k, v = self.key(xa), self.value(xa)
            if cache is not None:
                cache.cross_keys[layer], cache.cross_values[layer] = k, v
        return self.out(self.qkv_attention(q, k, v, mask))

    def qkv_attention(self, q, k, v, mask=None):
        n_batch, n_ctx, width = q.shape
        head_dim = width // self.heads
        q = q.view(n_batch, n_ctx, self.heads, head_dim).transpose(1, 2)
        k = k.view(k.shape[0], k.shape[1], self.heads, head_dim).transpose(1, 2)
        v = v.view(v.shape[0], v.shape[1], self.heads, head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) * head_dim ** -0.5
        if mask is not None:
            scores = scores + mask
        weights = F.softmax(scores, dim=-1)
        return (weights @ v).transpose(1, 2).reshape(n_batch, n_ctx, width)


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, cross_attention: bool = False):
        super().__init__()
        self.attn = MultiHeadAttention(width, heads)
        self.attn_ln = nn.LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, heads) if cross_attention else None
        self.cross_attn_ln = nn.LayerNorm(width) if cross_attention else None
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))
        self.mlp_ln = nn.LayerNorm(width)

    def forward(self, x, xa=None, mask=None, cache=None, layer=0):
        x = x + self.attn(self.attn_ln(x), mask=mask, cache=cache, layer=layer)
        if self.cross_attn is not None:
            x = x + self.cross_attn(self.cross_attn_ln(x), xa, cache=cache, layer=layer)
        return x + self.mlp(self.mlp_ln(x))


class AudioEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv1d(config.n_mels, config.width, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(config.width, config.width, kernel_size=3, stride=2, padding=1)
        self.register_buffer("positional_embedding", sinusoids(config.n_audio_ctx, config.width), persistent=False)
        self.blocks = nn.ModuleList(
            [ResidualAttentionBlock(config.width, config.heads) for _ in range(config.n_layers)])
        self.ln_post = nn.LayerNorm(config.width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [batch, n_mels, frames] -> [batch, ceil(frames / 2), width]"""
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = x.permute(0, 2, 1)
        if x.shape[1] > self.positional_embedding.shape[0]:
            raise ShapeError(f"{x.shape[1]} audio positions exceed the context of {self.positional_embedding.shape[0]}")
        x = x + self.positional_embedding[:x.shape[1]]
        for block in self.blocks:
            x = block(x)
        return self.ln_post(x)


class TextDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_text_ctx = config.n_text_ctx
        self.token_embedding = nn.Embedding(config.vocab_size, config.width)
        self.positional_embedding = nn.Parameter(torch.empty(config.n_text_ctx, config.width))
        self.blocks = nn.ModuleList(
            [ResidualAttentionBlock(config.width, config.heads, cross_attention=True)
             for _ in range(config.n_layers)])
        self.ln = nn.LayerNorm(config.width)

    def forward(self, tokens: torch.Tensor, xa: torch.Tensor, cache: Optional[DecodeCache] = None) -> torch.Tensor:
        """tokens: [batch, n_new], xa: [1 or batch, n_audio, width] -> logits [batch, n_new, vocab]"""
        offset = cache.length if cache is not None else 0
        n_new = tokens.shape[-1]
        if offset + n_new > self.n_text_ctx:
            raise ContextOverflowError(f"{offset + n_new} tokens exceed the text context of {self.n_text_ctx}")

        x = self.token_embedding(tokens) + self.positional_embedding[offset:offset + n_new]
        mask = torch.full((n_new, offset + n_new), float("-inf")).triu_(offset + 1)
        for layer, block in enumerate(self.blocks):
            x = block(x, xa, mask=mask, cache=cache, layer=layer)
        x = self.ln(x)
        if cache is not None:
            cache.length += n_new
        return x @ self.token_embedding.weight.T


class SpeechModel(nn.Module):
    """Inference-only encoder-decoder bound to one ModelConfig"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = AudioEncoder(config)
        self.decoder = TextDecoder(config)

    @classmethod
    def from_weights(cls, config: ModelConfig, weights: ModelWeights) -> 'SpeechModel':
        weights.validate(config)
        model = cls(config)
        model.load_state_dict(weights.tensors, strict=True)
        model.eval()
        model.requires_grad_(False)
        logger.info("Model %s ready: %d layers, width %d, %d heads, %.1fM parameters",
                    config.name, config.n_layers, config.width, config.heads, config.parameter_count() / 1e6)
        return model

    @property
    def n_text_ctx(self) -> int:
        return self.config.n_text_ctx

    @property
    def n_vocab(self) -> int:
        return self.config.vocab_size

    @torch.no_grad()
    def encode_audio(self, mel: MelSpectrogram) -> torch.Tensor:
        """[3000, n_mels] log-mel window -> audio states [n_audio_ctx, width]"""
        expected = (2 * self.config.n_audio_ctx, self.config.n_mels)
        if tuple(mel.data.shape) != expected:
            raise ShapeError(f"mel window has shape {tuple(mel.data.shape)}, expected {expected}")
        x = torch.from_numpy(np.ascontiguousarray(mel.data.T))[None]
        states = self.encoder(x)[0]
        if not torch.isfinite(states).all():
            raise NumericError("encoder produced non-finite activations")
        return states

    def new_cache(self, batch_size: int = 1) -> DecodeCache:
        return DecodeCache(self.config.n_layers, self.config.n_text_ctx, batch_size)

    @staticmethod
    def _batched(audio_states: torch.Tensor) -> torch.Tensor:
        return audio_states[None] if audio_states.dim() == 2 else audio_states

    @torch.no_grad()
    def decode_tokens(self, tokens: torch.Tensor, cache: Optional[DecodeCache],
                      audio_states: torch.Tensor) -> torch.Tensor:
        """Logits for every new position: [batch, n_new, vocab]"""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None]
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.n_vocab):
            raise ShapeError(f"token ids must lie in [0, {self.n_vocab})")
        logits = self.decoder(tokens, self._batched(audio_states), cache)
        if not torch.isfinite(logits).all():
            raise NumericError("decoder produced non-finite logits")
        return logits

    def decode_step(self, tokens, cache: DecodeCache, audio_states: torch.Tensor) -> Tuple[torch.Tensor, DecodeCache]:
        """Feed new tokens through the cache and return logits for the last position: [batch, vocab]"""
        logits = self.decode_tokens(tokens, cache, audio_states)
        return logits[:, -1], cache

    def logits(self, tokens: Sequence[int], audio_states: torch.Tensor) -> torch.Tensor:
        """Full recompute without a cache: [n_tokens, vocab]"""
        return self.decode_tokens(torch.tensor([list(tokens)], dtype=torch.long), None, audio_states)[0]

    def detect_language(self, audio_states: torch.Tensor, specials: SpecialTokens) -> Dict[str, float]:
        """Softmax over the language tokens at the position after <|startoftranscript|>"""
        logits = self.logits([specials.sot], audio_states)[-1]
        codes = list(specials.languages)
        probs = F.softmax(logits[[specials.languages[code] for code in codes]].double(), dim=-1)
        return {code: float(p) for code, p in zip(codes, probs)}

    def no_speech_probability(self, audio_states: torch.Tensor, prompt: Sequence[int],
                              specials: SpecialTokens) -> float:
        prompt = list(prompt)
        if specials.sot not in prompt:
            raise ModelError("prompt has no <|startoftranscript|> token")
        sot_index = len(prompt) - 1 - prompt[::-1].index(specials.sot)
        logits = self.logits(prompt[:sot_index + 1], audio_states)[-1]
        return float(F.softmax(logits.double(), dim=-1)[specials.no_speech])
