"""Recurrent cell for online action detection with future anticipation.

Per chunk the cell runs four stages:

  1. fuse        - combine the available feature streams into one vector
                   (two-stream variants pass through a ReLU linear layer)
  2. embed       - project the fused vector to the hidden width, ReLU
  3. rollout     - an autoregressive LSTM decoder, seeded from the current
                   encoder state, emits `decoder_steps` future predictions:
                   per step a hidden state, class logits, and a predicted
                   feature in embedding space that feeds the next step
  4. encode      - the decoder hiddens are averaged into a future-context
                   vector; an encoder LSTM consumes concat(embedded input,
                   future context) and a classifier head emits the
                   present-chunk logits

All tensors flow through the `numeric` autograd kernel, so the same code
path serves gradient-checked training, batched evaluation (columns of a
matrix are independent sequences), and single-vector streaming inference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .numeric import DimensionError, Tensor, ValidationError


class FusionVariant(enum.Enum):
    ONE_STREAM = "one_stream"
    TWO_STREAM = "two_stream"
    FUSED_TWO_STREAM = "fused_two_stream"


@dataclass(frozen=True)
class TrnConfig:
    """Architecture hyperparameters. Immutable; validated on construction."""

    fusion_variant: FusionVariant = FusionVariant.TWO_STREAM
    appearance_dim: int | None = None
    motion_dim: int | None = None
    pose_dim: int | None = 134
    hidden_size: int = 512
    decoder_steps: int = 8
    num_actions: int = 20
    seq_len: int = 64
    chunk_size: int = 6
    fps: int = 30

    def __post_init__(self):
        if self.hidden_size < 1:
            raise ValidationError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.decoder_steps < 1:
            raise ValidationError(f"decoder_steps must be >= 1, got {self.decoder_steps}")
        if self.num_actions < 1:
            raise ValidationError(f"num_actions must be >= 1, got {self.num_actions}")
        if self.chunk_size < 1:
            raise ValidationError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.seq_len < 1:
            raise ValidationError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.fps <= 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        for name in self._required_streams():
            dim = getattr(self, f"{name}_dim")
            if dim is None or dim < 1:
                raise ValidationError(
                    f"{self.fusion_variant.value} requires a positive {name}_dim, got {dim}"
                )
        if self.fusion_variant is FusionVariant.ONE_STREAM:
            present = [
                n
                for n in ("appearance", "motion", "pose")
                if getattr(self, f"{n}_dim") is not None
            ]
            if len(present) != 1:
                raise ValidationError(
                    f"one_stream requires exactly one stream dim, got {present or 'none'}"
                )

    def _required_streams(self) -> tuple[str, ...]:
        if self.fusion_variant is FusionVariant.ONE_STREAM:
            # exactly-one constraint is checked separately above
            return ()
        if self.fusion_variant is FusionVariant.TWO_STREAM:
            return ("appearance", "motion")
        return ("appearance", "pose", "motion")

    @property
    def classes(self) -> int:
        """Label count: the action classes plus background at index 0."""
        return self.num_actions + 1

    @property
    def one_stream_name(self) -> str:
        if self.fusion_variant is not FusionVariant.ONE_STREAM:
            raise ValidationError("one_stream_name is only defined for ONE_STREAM")
        for n in ("appearance", "motion", "pose"):
            if getattr(self, f"{n}_dim") is not None:
                return n
        raise AssertionError("unreachable: validated in __post_init__")

    def concat_dim(self) -> int:
        """Width of the stream concatenation entering the fusion layer."""
        if self.fusion_variant is FusionVariant.ONE_STREAM:
            return getattr(self, f"{self.one_stream_name}_dim")
        if self.fusion_variant is FusionVariant.TWO_STREAM:
            return self.appearance_dim + self.motion_dim
        return self.appearance_dim + self.pose_dim + self.motion_dim

    def embed_input_dim(self) -> int:
        # one-stream skips the fusion layer and embeds the raw features
        if self.fusion_variant is FusionVariant.ONE_STREAM:
            return self.concat_dim()
        return self.hidden_size


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    @staticmethod
    def init(in_dim: int, out_dim: int, rng: np.random.Generator) -> "Linear":
        bound = 1.0 / np.sqrt(in_dim)
        return Linear(
            nm.parameter(rng.uniform(-bound, bound, size=(out_dim, in_dim))),
            nm.parameter(np.zeros(out_dim)),
        )

    @staticmethod
    def zeros(in_dim: int, out_dim: int) -> "Linear":
        return Linear(nm.parameter(np.zeros((out_dim, in_dim))), nm.parameter(np.zeros(out_dim)))


@dataclass
class TrnParams:
    """All learnable tensors, addressable by stable dotted names."""

    config: TrnConfig
    fusion: Linear | None
    embed: Linear
    decoder_lstm: nm.LstmParams
    decoder_cls: Linear
    decoder_feat: Linear
    encoder_lstm: nm.LstmParams
    encoder_cls: Linear

    @staticmethod
    def init(config: TrnConfig, rng: np.random.Generator) -> "TrnParams":
        h = config.hidden_size
        fusion = None
        if config.fusion_variant is not FusionVariant.ONE_STREAM:
            fusion = Linear.init(config.concat_dim(), h, rng)
        return TrnParams(
            config=config,
            fusion=fusion,
            embed=Linear.init(config.embed_input_dim(), h, rng),
            decoder_lstm=nm.LstmParams.init(h, h, rng),
            decoder_cls=Linear.init(h, config.classes, rng),
            decoder_feat=Linear.init(h, h, rng),
            encoder_lstm=nm.LstmParams.init(2 * h, h, rng),
            encoder_cls=Linear.init(h, config.classes, rng),
        )

    @staticmethod
    def zeros(config: TrnConfig) -> "TrnParams":
        h = config.hidden_size
        fusion = None
        if config.fusion_variant is not FusionVariant.ONE_STREAM:
            fusion = Linear.zeros(config.concat_dim(), h)
        return TrnParams(
            config=config,
            fusion=fusion,
            embed=Linear.zeros(config.embed_input_dim(), h),
            decoder_lstm=nm.LstmParams.zeros(h, h),
            decoder_cls=Linear.zeros(h, config.classes),
            decoder_feat=Linear.zeros(h, h),
            encoder_lstm=nm.LstmParams.zeros(2 * h, h),
            encoder_cls=Linear.zeros(h, config.classes),
        )

    def named(self) -> dict[str, Tensor]:
        """Parameter registry in a fixed order (checkpoints, optimizer)."""
        out: dict[str, Tensor] = {}
        if self.fusion is not None:
            out["fusion.w"] = self.fusion.w
            out["fusion.b"] = self.fusion.b
        out["embed.w"] = self.embed.w
        out["embed.b"] = self.embed.b
        out["decoder.lstm.w"] = self.decoder_lstm.w
        out["decoder.lstm.b"] = self.decoder_lstm.b
        out["decoder.cls.w"] = self.decoder_cls.w
        out["decoder.cls.b"] = self.decoder_cls.b
        out["decoder.feat.w"] = self.decoder_feat.w
        out["decoder.feat.b"] = self.decoder_feat.b
        out["encoder.lstm.w"] = self.encoder_lstm.w
        out["encoder.lstm.b"] = self.encoder_lstm.b
        out["encoder.cls.w"] = self.encoder_cls.w
        out["encoder.cls.b"] = self.encoder_cls.b
        return out

    def count(self) -> int:
        return sum(t.data.size for t in self.named().values())


@dataclass
class TrnState:
    """Carried encoder state; zero at every sequence start."""

    h: np.ndarray
    c: np.ndarray

    @staticmethod
    def zero(hidden_size: int) -> "TrnState":
        return TrnState(np.zeros(hidden_size), np.zeros(hidden_size))

    def copy(self) -> "TrnState":
        return TrnState(self.h.copy(), self.c.copy())


@dataclass(frozen=True)
class ChunkStreams:
    """Feature vectors for one chunk; absent streams stay None.

    Arrays may be (D,) for a single sequence or (D, B) column batches.
    """

    appearance: np.ndarray | None = None
    motion: np.ndarray | None = None
    pose: np.ndarray | None = None


@dataclass(frozen=True)
class DetectionOutput:
    present: np.ndarray  # probability distribution over classes
    anticipated: list[np.ndarray] = field(default_factory=list)  # one per decoder step
    predicted_features: list[np.ndarray] = field(default_factory=list)


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else nm.tensor(np.asarray(v, dtype=np.float64))


def _check_stream(name: str, v: Tensor, dim: int) -> None:
    if v.data.shape[0] != dim:
        raise DimensionError(
            f"{name} stream has dim {v.data.shape[0]}, config requires {dim}"
        )


def fuse(params: TrnParams, streams: ChunkStreams) -> Tensor:
    """Combine the chunk's streams into the model input vector.

    ONE_STREAM passes the raw features through unchanged; the other
    variants concatenate (pose rides between appearance and motion for
    FUSED_TWO_STREAM) and apply ReLU(W_f x + b_f).
    """
    cfg = params.config
    variant = cfg.fusion_variant
    if variant is FusionVariant.ONE_STREAM:
        name = cfg.one_stream_name
        v = getattr(streams, name)
        if v is None:
            raise ValidationError(f"one_stream config expects the {name} stream")
        t = _as_tensor(v)
        _check_stream(name, t, getattr(cfg, f"{name}_dim"))
        return t

    wanted = cfg._required_streams()
    parts = []
    for name in wanted:
        v = getattr(streams, name)
        if v is None:
            raise ValidationError(f"{variant.value} requires the {name} stream")
        t = _as_tensor(v)
        _check_stream(name, t, getattr(cfg, f"{name}_dim"))
        parts.append(t)
    joined = nm.concat(parts)
    return nm.relu(nm.linear(params.fusion.w, params.fusion.b, joined))


def embed(params: TrnParams, fused: Tensor) -> Tensor:
    return nm.relu(nm.linear(params.embed.w, params.embed.b, fused))


def decoder_rollout(
    params: TrnParams, h: Tensor, c: Tensor, x_embed: Tensor, steps: int
) -> tuple[list[Tensor], list[Tensor], list[Tensor]]:
    """Autoregressive future rollout seeded from the encoder state.

    Step 1 consumes the embedded present input; step i > 1 consumes the
    feature predicted at step i - 1. Returns (hiddens, logits, feats),
    each of length `steps`.
    """
    if steps < 1:
        raise ValidationError(f"decoder rollout needs steps >= 1, got {steps}")
    hiddens: list[Tensor] = []
    logits: list[Tensor] = []
    feats: list[Tensor] = []
    x = x_embed
    for _ in range(steps):
        h, c = nm.lstm_step(params.decoder_lstm, x, h, c)
        hiddens.append(h)
        logits.append(nm.linear(params.decoder_cls.w, params.decoder_cls.b, h))
        x = nm.relu(nm.linear(params.decoder_feat.w, params.decoder_feat.b, h))
        feats.append(x)
    return hiddens, logits, feats


def future_gate(hiddens: list[Tensor]) -> Tensor:
    """Order-insensitive aggregation: elementwise mean of decoder hiddens."""
    if not hiddens:
        raise ValidationError("future_gate requires at least one hidden state")
    return nm.mean_stack(hiddens)


def encoder_step(
    params: TrnParams, x_embed: Tensor, future_ctx: Tensor, h: Tensor, c: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """One encoder LSTM step on concat(input, future context).

    Returns (new h, new c, present logits).
    """
    joined = nm.concat([x_embed, future_ctx])
    h, c = nm.lstm_step(params.encoder_lstm, joined, h, c)
    logits = nm.linear(params.encoder_cls.w, params.encoder_cls.b, h)
    return h, c, logits


def chunk_step(
    params: TrnParams, streams: ChunkStreams, h: Tensor, c: Tensor
) -> tuple[Tensor, list[Tensor], list[Tensor], Tensor, Tensor]:
    """The full cell for one chunk; the single code path shared by batch
    forward, streaming inference, and the training loss.

    Returns (present logits, per-step decoder logits, per-step predicted
    features, new h, new c).
    """
    x = embed(params, fuse(params, streams))
    dec_h, dec_logits, dec_feats = decoder_rollout(
        params, h, c, x, params.config.decoder_steps
    )
    ctx = future_gate(dec_h)
    h, c, logits = encoder_step(params, x, ctx, h, c)
    return logits, dec_logits, dec_feats, h, c


def forward_sequence_logits(
    params: TrnParams,
    sequence: list[ChunkStreams],
    h0: Tensor | None = None,
    c0: Tensor | None = None,
) -> tuple[list[Tensor], list[list[Tensor]], Tensor, Tensor]:
    """Run the cell over a chunk sequence, keeping logits as graph tensors.

    Inputs may be vectors or column batches. Returns (encoder logits per
    chunk, decoder logits per chunk per step, final h, final c).
    """
    if not sequence:
        raise ValidationError("empty sequence")
    hs = params.config.hidden_size
    first = next(
        v for v in (sequence[0].appearance, sequence[0].motion, sequence[0].pose) if v is not None
    )
    arr = np.asarray(first)
    if arr.ndim == 2:
        shape = (hs, arr.shape[1])
    else:
        shape = (hs,)
    h = h0 if h0 is not None else nm.tensor(np.zeros(shape))
    c = c0 if c0 is not None else nm.tensor(np.zeros(shape))
    enc_logits: list[Tensor] = []
    dec_logits: list[list[Tensor]] = []
    for streams in sequence:
        logits, dlogits, _, h, c = chunk_step(params, streams, h, c)
        enc_logits.append(logits)
        dec_logits.append(dlogits)
    return enc_logits, dec_logits, h, c


def _detection_output(
    logits: Tensor, dec_logits: list[Tensor], dec_feats: list[Tensor]
) -> DetectionOutput:
    return DetectionOutput(
        present=nm.softmax(logits).data,
        anticipated=[nm.softmax(z).data for z in dec_logits],
        predicted_features=[f.data for f in dec_feats],
    )


def trn_forward(
    params: TrnParams,
    sequence: list[ChunkStreams],
    state0: TrnState | None = None,
) -> tuple[list[DetectionOutput], TrnState]:
    """Batch inference over a whole sequence of single-chunk vectors."""
    if not sequence:
        raise ValidationError("empty sequence")
    hs = params.config.hidden_size
    state = state0.copy() if state0 is not None else TrnState.zero(hs)
    with nm.no_grad():
        h, c = nm.tensor(state.h), nm.tensor(state.c)
        outputs = []
        for streams in sequence:
            logits, dlogits, dfeats, h, c = chunk_step(params, streams, h, c)
            outputs.append(_detection_output(logits, dlogits, dfeats))
    return outputs, TrnState(h.data.copy(), c.data.copy())
