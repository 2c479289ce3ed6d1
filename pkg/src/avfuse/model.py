"""The captioning network: patch-embedding audio encoder, visual projection,
Transformer text decoder, and the adaptive audio-visual fusion block.

The decoder uses a pre-norm layout (norm -> sublayer -> residual).  Each block
runs causal self-attention, then a fusion sublayer chosen by ``fusion_mode``:

* ``audio_only`` / ``video_only`` / ``concatenate``: one cross-attention over
  the selected modality features (time-axis concatenation for the latter),
  with the usual residual;
* ``adaava_audio`` / ``adaava_video``: both cross-attentions, an elementwise
  confidence score in (0, 1) from a 2d->d linear layer over
  [primary_cross; hidden], hard threshold masks at ``beta``, and the gated
  combination ``conf * A_cross * M_a + (1 - conf) * V_cross * M_v`` which
  replaces the residual stream entirely (no residual into the fusion output).

Threshold masks are constants in the backward pass; gradients reach the
confidence score only through the multiplicative gating terms.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as N
from .data import Vocabulary
from .errors import ConfigError, DataFormatError, DimensionError, DomainError
from .numerics import AttentionParams, Tensor

FUSION_MODES = ("audio_only", "video_only", "concatenate", "adaava_audio", "adaava_video")


def mode_uses_audio(mode: str) -> bool:
    return mode != "video_only"


def mode_uses_visual(mode: str) -> bool:
    return mode != "audio_only"


@dataclass
class ModelConfig:
    """Architecture and fusion hyperparameters.

    Defaults are the desk-scale test configuration; ``full_size_config`` gives
    the 512-wide, 8-head, 12+4-block variant.
    """

    vocab_size: int
    d: int = 128
    heads: int = 4
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    mlp_ratio: float = 4.0
    beta: float = 0.13
    fusion_mode: str = "adaava_audio"
    max_caption_len: int = 22
    audio_in_dim: int = 256
    visual_in_dim: int = 512
    max_audio_len: int = 250
    dropout: float = 0.1
    ln_eps: float = 1e-5

    def validate(self) -> None:
        problems = []
        if self.vocab_size < 5:
            problems.append(f"vocab_size must cover the reserved ids, got {self.vocab_size}")
        if self.d < 1 or self.d % self.heads != 0:
            problems.append(f"d={self.d} must be positive and divisible by heads={self.heads}")
        if not 0.0 <= self.beta <= 1.0:
            problems.append(f"beta must be in [0, 1], got {self.beta}")
        if self.fusion_mode not in FUSION_MODES:
            problems.append(f"fusion_mode {self.fusion_mode!r} not one of {FUSION_MODES}")
        if self.max_caption_len < 3:
            problems.append(f"max_caption_len must be >= 3, got {self.max_caption_len}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.encoder_blocks, self.decoder_blocks) < 0 or self.decoder_blocks == 0:
            problems.append("decoder_blocks must be >= 1 and encoder_blocks >= 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


def full_size_config(vocab_size: int, **overrides) -> ModelConfig:
    """Full-size configuration (512-wide, 8 heads, 12 encoder / 4 decoder blocks)."""
    base = dict(
        vocab_size=vocab_size, d=512, heads=8, encoder_blocks=12, decoder_blocks=4,
        visual_in_dim=512,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class EncoderBlockParams:
    norm_attn: NormParams
    attn: AttentionParams
    norm_mlp: NormParams
    mlp: MlpParams


@dataclass
class DecoderBlockParams:
    norm_self: NormParams
    self_attn: AttentionParams
    norm_fuse: NormParams
    norm_mlp: NormParams
    mlp: MlpParams
    cross_audio: AttentionParams | None = None
    cross_video: AttentionParams | None = None
    conf_fc: LinearParams | None = None


@dataclass
class ModelParams:
    word_embedding: Tensor
    decoder_pos: Tensor
    decoder: list[DecoderBlockParams]
    final_norm: NormParams
    out_proj: LinearParams
    patch_proj: LinearParams | None = None
    encoder_pos: Tensor | None = None
    encoder: list[EncoderBlockParams] = field(default_factory=list)
    visual_proj: LinearParams | None = None


WEIGHT_STD = 0.02


def _make_tensor(name: str, shape: tuple[int, ...], kind: str, seed: int | None) -> Tensor:
    if seed is None or kind == "bias":
        arr = np.zeros(shape)
    elif kind == "gain":
        arr = np.ones(shape)
    else:  # weight or embedding
        ss = np.random.SeedSequence((seed, zlib.crc32(name.encode("utf-8"))))
        arr = np.random.Generator(np.random.PCG64(ss)).normal(0.0, WEIGHT_STD, size=shape)
    return Tensor(arr, requires_grad=True)


def _build_params(config: ModelConfig, seed: int | None) -> ModelParams:
    """Construct the parameter tree for ``config``.

    Every tensor is drawn from its own seed substream keyed by (seed, name),
    so a parameter shared between two fusion modes initializes identically
    regardless of which other parameters exist.
    """
    d, V = config.d, config.vocab_size
    hidden = int(round(config.mlp_ratio * d))

    def lin(name, k, n):
        return LinearParams(
            _make_tensor(f"{name}.weight", (k, n), "weight", seed),
            _make_tensor(f"{name}.bias", (n,), "bias", seed),
        )

    def norm(name):
        return NormParams(
            _make_tensor(f"{name}.gain", (d,), "gain", seed),
            _make_tensor(f"{name}.bias", (d,), "bias", seed),
        )

    def attn(name):
        kw = {}
        for part in ("wq", "wk", "wv", "wo"):
            kw[part] = _make_tensor(f"{name}.{part}", (d, d), "weight", seed)
        for part in ("bq", "bk", "bv", "bo"):
            kw[part] = _make_tensor(f"{name}.{part}", (d,), "bias", seed)
        return AttentionParams(**kw)

    def mlp(name):
        return MlpParams(lin(f"{name}.fc1", d, hidden), lin(f"{name}.fc2", hidden, d))

    mode = config.fusion_mode
    params = ModelParams(
        word_embedding=_make_tensor("word_embedding", (V, d), "embedding", seed),
        decoder_pos=_make_tensor("decoder_pos", (config.max_caption_len, d), "embedding", seed),
        decoder=[],
        final_norm=norm("final_norm"),
        out_proj=lin("out_proj", d, V),
    )
    if mode_uses_audio(mode):
        params.patch_proj = lin("patch_proj", config.audio_in_dim, d)
        params.encoder_pos = _make_tensor(
            "encoder_pos", (config.max_audio_len, d), "embedding", seed
        )
        params.encoder = [
            EncoderBlockParams(
                norm_attn=norm(f"encoder.{i}.norm_attn"),
                attn=attn(f"encoder.{i}.attn"),
                norm_mlp=norm(f"encoder.{i}.norm_mlp"),
                mlp=mlp(f"encoder.{i}.mlp"),
            )
            for i in range(config.encoder_blocks)
        ]
    if mode_uses_visual(mode):
        params.visual_proj = lin("visual_proj", config.visual_in_dim, d)

    adaava = mode.startswith("adaava")
    for i in range(config.decoder_blocks):
        blk = DecoderBlockParams(
            norm_self=norm(f"decoder.{i}.norm_self"),
            self_attn=attn(f"decoder.{i}.self_attn"),
            norm_fuse=norm(f"decoder.{i}.norm_fuse"),
            norm_mlp=norm(f"decoder.{i}.norm_mlp"),
            mlp=mlp(f"decoder.{i}.mlp"),
        )
        if mode in ("audio_only", "concatenate") or adaava:
            blk.cross_audio = attn(f"decoder.{i}.cross_audio")
        if mode == "video_only" or adaava:
            blk.cross_video = attn(f"decoder.{i}.cross_video")
        if adaava:
            blk.conf_fc = lin(f"decoder.{i}.conf_fc", 2 * d, d)
        params.decoder.append(blk)
    return params


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    config.validate()
    return _build_params(config, seed)


def parameter_slots(params: ModelParams) -> list[tuple[str, object, str]]:
    """(name, owner, attribute) triples in a stable order.

    ``setattr(owner, attribute, tensor)`` swaps a parameter structurally,
    which is how gradcheck substitutes probe leaves into the network.
    """
    out: list[tuple[str, object, str]] = []

    def lin(name, p: LinearParams):
        out.append((f"{name}.weight", p, "weight"))
        out.append((f"{name}.bias", p, "bias"))

    def norm(name, p: NormParams):
        out.append((f"{name}.gain", p, "gain"))
        out.append((f"{name}.bias", p, "bias"))

    def attn(name, p: AttentionParams):
        for part in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            out.append((f"{name}.{part}", p, part))

    def mlp(name, p: MlpParams):
        lin(f"{name}.fc1", p.fc1)
        lin(f"{name}.fc2", p.fc2)

    out.append(("word_embedding", params, "word_embedding"))
    out.append(("decoder_pos", params, "decoder_pos"))
    if params.patch_proj is not None:
        lin("patch_proj", params.patch_proj)
        out.append(("encoder_pos", params, "encoder_pos"))
        for i, blk in enumerate(params.encoder):
            norm(f"encoder.{i}.norm_attn", blk.norm_attn)
            attn(f"encoder.{i}.attn", blk.attn)
            norm(f"encoder.{i}.norm_mlp", blk.norm_mlp)
            mlp(f"encoder.{i}.mlp", blk.mlp)
    if params.visual_proj is not None:
        lin("visual_proj", params.visual_proj)
    for i, blk in enumerate(params.decoder):
        norm(f"decoder.{i}.norm_self", blk.norm_self)
        attn(f"decoder.{i}.self_attn", blk.self_attn)
        norm(f"decoder.{i}.norm_fuse", blk.norm_fuse)
        if blk.cross_audio is not None:
            attn(f"decoder.{i}.cross_audio", blk.cross_audio)
        if blk.cross_video is not None:
            attn(f"decoder.{i}.cross_video", blk.cross_video)
        if blk.conf_fc is not None:
            lin(f"decoder.{i}.conf_fc", blk.conf_fc)
        norm(f"decoder.{i}.norm_mlp", blk.norm_mlp)
        mlp(f"decoder.{i}.mlp", blk.mlp)
    out.append(("final_norm.gain", params.final_norm, "gain"))
    out.append(("final_norm.bias", params.final_norm, "bias"))
    lin("out_proj", params.out_proj)
    return out


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Flat (name, tensor) view in a stable order; names match init substreams."""
    return [(name, getattr(owner, attr)) for name, owner, attr in parameter_slots(params)]


# ---------------------------------------------------------------------------
# fusion primitives
# ---------------------------------------------------------------------------


@dataclass
class AdaAVATrace:
    """Intermediate tensors of one fusion pass, kept for tests and --trace."""

    h_hidden: Tensor
    a_cross: Tensor
    v_cross: Tensor
    a_conf: Tensor
    m_a: Tensor
    m_v: Tensor
    av_out: Tensor


@dataclass
class EncodedModalities:
    """Post-projection modality features at common width d, plus padding masks."""

    audio: Tensor | None = None
    visual: Tensor | None = None
    audio_mask: np.ndarray | None = None
    visual_mask: np.ndarray | None = None


def threshold_mask(x, beta: float):
    """Elementwise strict comparison ``x > beta`` as a {0, 1} constant.

    The result never carries gradients: the threshold is piecewise constant.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"threshold beta must be in [0, 1], got {beta}")
    if isinstance(x, Tensor):
        return Tensor((x.data > beta).astype(x.data.dtype))
    arr = np.asarray(x)
    return (arr > beta).astype(arr.dtype)


def confidence(primary_cross: Tensor, h_hidden: Tensor, fc: LinearParams) -> Tensor:
    """sigmoid(FC([primary_cross; h_hidden])), mapping 2d -> d."""
    if primary_cross.shape != h_hidden.shape:
        raise DimensionError(
            f"confidence inputs disagree: {primary_cross.shape} vs {h_hidden.shape}"
        )
    d = h_hidden.shape[-1]
    if fc.weight.shape != (2 * d, d):
        raise DimensionError(f"confidence FC must map 2d->d, got {fc.weight.shape}")
    stacked = N.concat([primary_cross, h_hidden], axis=-1)
    return N.sigmoid(N.linear(stacked, fc.weight, fc.bias))


def adaava_fuse(a_cross: Tensor, v_cross: Tensor, a_conf: Tensor, beta: float,
                h_hidden: Tensor | None = None) -> AdaAVATrace:
    """Gated fusion: conf * A_cross * M_a + (1 - conf) * V_cross * M_v.

    Masks come from strict thresholding of the confidence (audio side) and its
    complement (video side).  The output replaces the stream: callers must not
    add a residual.
    """
    if not (a_cross.shape == v_cross.shape == a_conf.shape):
        raise DimensionError(
            f"fusion inputs disagree: {a_cross.shape}, {v_cross.shape}, {a_conf.shape}"
        )
    m_a = threshold_mask(a_conf, beta)
    inv_conf = N.sub(1.0, a_conf)
    m_v = threshold_mask(inv_conf, beta)
    av_out = N.add(
        N.mul(N.mul(a_conf, a_cross), m_a),
        N.mul(N.mul(inv_conf, v_cross), m_v),
    )
    return AdaAVATrace(
        h_hidden=h_hidden if h_hidden is not None else a_cross,
        a_cross=a_cross, v_cross=v_cross, a_conf=a_conf,
        m_a=m_a, m_v=m_v, av_out=av_out,
    )


# ---------------------------------------------------------------------------
# encoder / decoder stacks
# ---------------------------------------------------------------------------


def _pos_slice(table: Tensor, length: int, what: str) -> Tensor:
    if length > table.shape[0]:
        raise DomainError(
            f"{what} length {length} exceeds positional table of {table.shape[0]}"
        )
    return N.slice_axis(table, 0, 0, length)


def _mlp_forward(x: Tensor, p: MlpParams, dropout: float, rng) -> Tensor:
    h = N.gelu(N.linear(x, p.fc1.weight, p.fc1.bias))
    if dropout > 0.0 and rng is not None:
        keep = (rng.random(h.shape) >= dropout).astype(h.data.dtype)
        h = N.mul(h, keep / (1.0 - dropout))
    return N.linear(h, p.fc2.weight, p.fc2.bias)


def audio_encode(patches, params: ModelParams, config: ModelConfig, rng=None) -> Tensor:
    """Patch projection + learned positions, then pre-norm attention/MLP blocks."""
    x = N._as_tensor(patches)
    if x.shape[-1] != config.audio_in_dim:
        raise DimensionError(
            f"audio patches have width {x.shape[-1]}, config expects {config.audio_in_dim}"
        )
    t_a = x.shape[-2]
    x = N.add(
        N.linear(x, params.patch_proj.weight, params.patch_proj.bias),
        _pos_slice(params.encoder_pos, t_a, "audio patch sequence"),
    )
    for blk in params.encoder:
        attn_in = N.layer_norm(x, blk.norm_attn.gain, blk.norm_attn.bias, config.ln_eps)
        x = N.add(x, N.multi_head_attention(
            attn_in, attn_in, blk.attn, config.heads,
            attn_dropout=config.dropout if rng is not None else 0.0, dropout_rng=rng,
        ))
        mlp_in = N.layer_norm(x, blk.norm_mlp.gain, blk.norm_mlp.bias, config.ln_eps)
        x = N.add(x, _mlp_forward(mlp_in, blk.mlp, config.dropout if rng is not None else 0.0, rng))
    return x


def visual_project(raw, params: ModelParams, config: ModelConfig) -> Tensor:
    """Single linear map of externally supplied visual features to width d."""
    x = N._as_tensor(raw)
    if x.shape[-1] != config.visual_in_dim:
        raise DimensionError(
            f"visual features have width {x.shape[-1]}, config expects {config.visual_in_dim}"
        )
    return N.linear(x, params.visual_proj.weight, params.visual_proj.bias)


def encode_modalities(params, config, audio=None, visual=None,
                      audio_mask=None, visual_mask=None, rng=None) -> EncodedModalities:
    mode = config.fusion_mode
    enc = EncodedModalities(audio_mask=audio_mask, visual_mask=visual_mask)
    if mode_uses_audio(mode):
        if audio is None:
            raise ConfigError(f"fusion mode {mode!r} requires audio input")
        enc.audio = audio_encode(audio, params, config, rng=rng)
    if mode_uses_visual(mode):
        if visual is None:
            raise ConfigError(f"fusion mode {mode!r} requires visual features")
        enc.visual = visual_project(visual, params, config)
    return enc


def decoder_self_attend(x: Tensor, blk: DecoderBlockParams, config: ModelConfig,
                        rng=None) -> Tensor:
    """Causal self-attention with residual over the token stream."""
    if x.shape[-2] < 1:
        raise DomainError("decoder prefix is empty")
    attn_in = N.layer_norm(x, blk.norm_self.gain, blk.norm_self.bias, config.ln_eps)
    return N.add(x, N.multi_head_attention(
        attn_in, attn_in, blk.self_attn, config.heads, causal=True,
        attn_dropout=config.dropout if rng is not None else 0.0, dropout_rng=rng,
    ))


def cross_attend(h_hidden: Tensor, features: Tensor, attn: AttentionParams,
                 config: ModelConfig, kv_mask=None, rng=None) -> Tensor:
    """Multi-head cross attention: hidden states query the modality features."""
    if features.shape[-1] != h_hidden.shape[-1]:
        raise DimensionError(
            f"modality width {features.shape[-1]} != hidden width {h_hidden.shape[-1]}"
        )
    return N.multi_head_attention(
        h_hidden, features, attn, config.heads, kv_padding_mask=kv_mask,
        attn_dropout=config.dropout if rng is not None else 0.0, dropout_rng=rng,
    )


def _concat_time(a: Tensor | None, b: Tensor | None) -> Tensor:
    if a is None:
        return b
    if b is None or b.shape[-2] == 0:
        return a
    if a.shape[-2] == 0:
        return b
    return N.concat([a, b], axis=-2)


def _concat_masks(a_mask, a_len, v_mask, v_len, batchish):
    if a_mask is None and v_mask is None:
        return None
    def full(mask, length):
        if mask is not None:
            return np.asarray(mask, dtype=bool)
        shape = batchish + (length,)
        return np.ones(shape, dtype=bool)
    return np.concatenate([full(a_mask, a_len), full(v_mask, v_len)], axis=-1)


def decoder_block(x: Tensor, enc: EncodedModalities, blk: DecoderBlockParams,
                  config: ModelConfig, rng=None, collect_trace: bool = False):
    """One decoder block: self-attention, fusion sublayer, MLP.

    Returns (output, trace); the trace is None outside the adaava modes.
    """
    mode = config.fusion_mode
    h = decoder_self_attend(x, blk, config, rng=rng)
    hn = N.layer_norm(h, blk.norm_fuse.gain, blk.norm_fuse.bias, config.ln_eps)
    trace = None

    if mode == "audio_only":
        fused = N.add(h, cross_attend(hn, enc.audio, blk.cross_audio, config,
                                      kv_mask=enc.audio_mask, rng=rng))
    elif mode == "video_only":
        fused = N.add(h, cross_attend(hn, enc.visual, blk.cross_video, config,
                                      kv_mask=enc.visual_mask, rng=rng))
    elif mode == "concatenate":
        kv = _concat_time(enc.audio, enc.visual)
        t_v = enc.visual.shape[-2] if enc.visual is not None else 0
        if t_v == 0:
            kv_mask = enc.audio_mask
        else:
            batchish = kv.shape[:-2]
            kv_mask = _concat_masks(enc.audio_mask, enc.audio.shape[-2],
                                    enc.visual_mask, t_v, batchish)
        fused = N.add(h, cross_attend(hn, kv, blk.cross_audio, config,
                                      kv_mask=kv_mask, rng=rng))
    else:  # adaava_audio / adaava_video
        a_cross = cross_attend(hn, enc.audio, blk.cross_audio, config,
                               kv_mask=enc.audio_mask, rng=rng)
        v_cross = cross_attend(hn, enc.visual, blk.cross_video, config,
                               kv_mask=enc.visual_mask, rng=rng)
        primary = a_cross if mode == "adaava_audio" else v_cross
        a_conf = confidence(primary, hn, blk.conf_fc)
        trace = adaava_fuse(a_cross, v_cross, a_conf, config.beta, h_hidden=hn)
        fused = trace.av_out  # no residual into the fusion output

    mlp_in = N.layer_norm(fused, blk.norm_mlp.gain, blk.norm_mlp.bias, config.ln_eps)
    out = N.add(fused, _mlp_forward(mlp_in, blk.mlp, config.dropout if rng is not None else 0.0, rng))
    return out, (trace if collect_trace else None)


def decode_logits(params: ModelParams, config: ModelConfig, enc: EncodedModalities,
                  tokens, rng=None, collect_traces: bool = False):
    """Logits over the vocabulary for every position of ``tokens``.

    ``tokens`` is (L,) for a single prefix or (B, L) for a batch; the result
    has one trailing vocab axis and one trace per decoder block when
    requested.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    L = ids.shape[-1]
    if L < 1:
        raise DomainError("empty token prefix")
    x = N.add(
        N.embedding(params.word_embedding, ids),
        _pos_slice(params.decoder_pos, L, "caption prefix"),
    )
    traces = []
    for blk in params.decoder:
        x, trace = decoder_block(x, enc, blk, config, rng=rng, collect_trace=collect_traces)
        if collect_traces:
            traces.append(trace)
    x = N.layer_norm(x, params.final_norm.gain, params.final_norm.bias, config.ln_eps)
    logits = N.linear(x, params.out_proj.weight, params.out_proj.bias)
    if collect_traces:
        return logits, traces
    return logits


@dataclass
class Batch:
    """Teacher-forcing inputs: right-padded prefixes plus modality features."""

    tokens_in: np.ndarray
    audio: np.ndarray | None = None
    visual: np.ndarray | None = None
    audio_mask: np.ndarray | None = None
    visual_mask: np.ndarray | None = None


def forward(params: ModelParams, config: ModelConfig, batch: Batch, rng=None,
            collect_traces: bool = False):
    """Teacher-forced forward pass producing (B, L, vocab) logits."""
    enc = encode_modalities(
        params, config, audio=batch.audio, visual=batch.visual,
        audio_mask=batch.audio_mask, visual_mask=batch.visual_mask, rng=rng,
    )
    result = decode_logits(params, config, enc, batch.tokens_in, rng=rng,
                           collect_traces=collect_traces)
    logits = result[0] if collect_traces else result
    finite = np.isfinite(logits.data)
    if not finite.all():  # pragma: no cover - op-level checks fire first
        bad = np.argwhere(~finite)[0]
        raise DomainError(f"non-finite logit for batch element {int(bad[0])}")
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AVCK"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary
    state: dict | None = None
    state_tensors: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, params: ModelParams, config: ModelConfig, vocab: Vocabulary,
                    state: dict | None = None,
                    state_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write a versioned container: JSON header + contiguous float64 payload."""
    named = named_parameters(params)
    entries = []
    blobs = []
    offset = 0
    for name, tensor in named:
        blob = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        entries.append({
            "name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    extra_entries = []
    for name in sorted(state_tensors or {}):
        blob = np.ascontiguousarray(state_tensors[name], dtype="<f8").tobytes()
        extra_entries.append({
            "name": name, "shape": list(np.asarray(state_tensors[name]).shape),
            "offset": offset, "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_json(),
        "vocab": vocab.to_json(),
        "tensors": entries,
        "state_tensors": extra_entries,
        "state": state,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, validating every tensor name and shape against its config."""
    with open(path, "rb") as fh:
        head = fh.read(_CKPT_HEAD.size)
        if len(head) < _CKPT_HEAD.size:
            raise DataFormatError(f"{path}: truncated checkpoint header")
        magic, version, hlen = _CKPT_HEAD.unpack(head)
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()

    config = ModelConfig.from_json(header["config"])
    config.validate()
    vocab = Vocabulary.from_json(header["vocab"])
    stored = {e["name"]: e for e in header["tensors"]}

    def pull(entry) -> np.ndarray:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise DataFormatError(f"{path}: payload truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f8")
        return arr.reshape(entry["shape"]).copy()

    params = _build_params(config, seed=None)
    expected = named_parameters(params)
    for name, tensor in expected:
        entry = stored.pop(name, None)
        if entry is None:
            raise DataFormatError(f"{path}: checkpoint is missing parameter {name!r}")
        if tuple(entry["shape"]) != tensor.shape:
            raise DataFormatError(
                f"{path}: shape mismatch for {name!r}: "
                f"checkpoint {tuple(entry['shape'])} vs config {tensor.shape}"
            )
        tensor.data = pull(entry)
    if stored:
        name = sorted(stored)[0]
        raise DataFormatError(f"{path}: unexpected parameter {name!r} for this config")

    state_tensors = {e["name"]: pull(e) for e in header.get("state_tensors", [])}
    return Checkpoint(params=params, config=config, vocab=vocab,
                      state=header.get("state"), state_tensors=state_tensors)
