"""RSCNet: edge encoder, cloud LSTM, decoder and activity classifier.

Parameters live in a flat ``name -> Tensor`` dict so checkpoints, the optimizer
and the FLOP/parameter accounting can all walk the same registry. Batch-norm
running statistics are plain numpy buffers.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import numerics as nx
from .numerics import ConvSpec, LstmParams, Tensor

ENCODER_DILATIONS = (1, 2, 3)
CLASSIFIER_HIDDEN = (512, 128)


@dataclass
class ModelConfig:
    n_antennas: int = 3
    n_subcarriers: int = 30
    n_timesteps: int = 250
    window_frames: int = 50
    compression_ratio: float = 1 / 90
    expansion_rate: int = 1
    lstm_hidden: int | None = None
    n_classes: int = 7
    loss_weight: float = 50.0
    encoder_width: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_antennas", "n_subcarriers", "n_timesteps", "window_frames",
                     "expansion_rate", "n_classes", "encoder_width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive int, got {value!r}")
        if self.n_timesteps % self.window_frames:
            raise ValueError(
                f"ModelConfig.window_frames={self.window_frames} does not divide "
                f"n_timesteps={self.n_timesteps}")
        lo = 1.0 / self.window_size
        if not lo - 1e-12 <= self.compression_ratio <= 1.0:
            raise ValueError(
                f"ModelConfig.compression_ratio={self.compression_ratio} outside [{lo:.3g}, 1]")
        if self.lstm_hidden is not None and self.lstm_hidden < 1:
            raise ValueError(f"ModelConfig.lstm_hidden must be >= 1, got {self.lstm_hidden}")
        if self.loss_weight < 0:
            raise ValueError(f"ModelConfig.loss_weight must be >= 0, got {self.loss_weight}")

    @property
    def window_size(self):
        return self.n_antennas * self.n_subcarriers * self.window_frames

    @property
    def compressed_dim(self):
        return max(1, round(self.window_size * self.compression_ratio))

    @property
    def n_windows(self):
        return self.n_timesteps // self.window_frames

    @property
    def hidden_dim(self):
        return self.compressed_dim if self.lstm_hidden is None else self.lstm_hidden

    @property
    def decoder_width(self):
        return 3 * self.expansion_rate

    @property
    def sample_shape(self):
        return (self.n_antennas, self.n_subcarriers, self.n_timesteps)

    @property
    def window_shape(self):
        return (self.n_antennas, self.n_subcarriers, self.window_frames)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self):
        """Stable short hash identifying the architecture (used by stream sessions)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:4], "big")


# -- layer plan ---------------------------------------------------------------
# Each conv unit is (name, ConvSpec, kind) with kind "bn" (conv -> BN -> PReLU,
# no conv bias) or "linear" (conv + bias, no normalisation).

def _encoder_plan(cfg):
    W, Na = cfg.encoder_width, cfg.n_antennas
    plan = [("enc.head", ConvSpec(Na, W, 5, 5), "bn")]
    for k, d in enumerate(ENCODER_DILATIONS):
        plan.append((f"enc.block.dilated{k}", ConvSpec(W, W, 3, 3, d), "bn"))
    plan.append(("enc.block.plain", ConvSpec(W, W, 3, 3), "bn"))
    plan.append(("enc.block.fuse", ConvSpec(2 * W, W, 1, 1), "linear"))
    return plan


def _decoder_block_plan(prefix, cfg):
    Na, c = cfg.n_antennas, cfg.decoder_width
    return [
        (f"{prefix}.a0", ConvSpec(Na, c, 3, 3, 2), "bn"),
        (f"{prefix}.a1", ConvSpec(c, c, 3, 1, 3), "bn"),
        (f"{prefix}.a2", ConvSpec(c, c, 1, 3, 3), "bn"),
        (f"{prefix}.a3", ConvSpec(c, Na, 3, 3), "bn"),
        (f"{prefix}.b0", ConvSpec(Na, c, 1, 3), "bn"),
        (f"{prefix}.b1", ConvSpec(c, c, 5, 1), "bn"),
        (f"{prefix}.b2", ConvSpec(c, c, 1, 5), "bn"),
        (f"{prefix}.b3", ConvSpec(c, Na, 3, 1), "bn"),
        (f"{prefix}.fuse", ConvSpec(2 * Na, Na, 1, 1), "linear"),
    ]


def _decoder_plan(cfg):
    plan = [("dec.head", ConvSpec(cfg.n_antennas, cfg.n_antennas, 5, 5), "bn")]
    plan += _decoder_block_plan("dec.block0", cfg)
    plan += _decoder_block_plan("dec.block1", cfg)
    return plan


def pin_hidden(cfg):
    """Freeze the default ``lstm_hidden = M`` so it survives changes to N_f or eta.

    Sweeps over N_f compare models with one recurrent width; otherwise the
    classifier input ``S * M`` stays at ``N_a N_s N_t eta`` for every N_f.
    """
    return cfg if cfg.lstm_hidden is not None else replace(cfg, lstm_hidden=cfg.hidden_dim)


def conv_plan(cfg):
    return _encoder_plan(cfg) + _decoder_plan(cfg)


def linear_plan(cfg):
    """(name, in_dim, out_dim) for every dense layer."""
    S, H = cfg.n_windows, cfg.hidden_dim
    feat = cfg.encoder_width * cfg.n_subcarriers * cfg.window_frames
    dims = [S * H, *CLASSIFIER_HIDDEN, cfg.n_classes]
    plan = [("enc.compress", feat, cfg.compressed_dim),
            ("dec.restore", H, cfg.window_size)]
    plan += [(f"cls.fc{k}", a, b) for k, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
    return plan


class RscnetModel:
    """Parameter bundle plus config. Forward functions live at module level."""

    def __init__(self, config, params, buffers):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.specs = {name: spec for name, spec, _ in conv_plan(config)}
        self.lstm = LstmParams(params["rnn.weight"], params["rnn.bias"])

    @classmethod
    def initialize(cls, config, seed=0, dtype=None):
        """Fan-in uniform init (He-uniform before ReLUs), ``+-1/sqrt(N_h)`` for the LSTM."""
        dtype = dtype or nx.default_dtype()
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}

        def uniform(shape, bound):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)

        def const(shape, value):
            return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)

        for name, spec, kind in conv_plan(config):
            fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
            bound = np.sqrt(1.0 / fan_in)
            params[f"{name}.weight"] = uniform(spec.weight_shape, bound)
            if kind == "linear":
                params[f"{name}.bias"] = uniform((spec.out_channels,), bound)
            else:
                params[f"{name}.bn.gamma"] = const((spec.out_channels,), 1.0)
                params[f"{name}.bn.beta"] = const((spec.out_channels,), 0.0)
                params[f"{name}.prelu"] = const((spec.out_channels,), 0.25)
                buffers[f"{name}.bn.mean"] = np.zeros(spec.out_channels, dtype=dtype)
                buffers[f"{name}.bn.var"] = np.ones(spec.out_channels, dtype=dtype)
        n_h, n_in = config.hidden_dim, config.compressed_dim
        bound = 1.0 / np.sqrt(n_h)
        params["rnn.weight"] = uniform((4 * n_h, n_in + n_h), bound)
        params["rnn.bias"] = uniform((4 * n_h,), bound)
        relu_fed = {f"cls.fc{k}" for k in range(len(CLASSIFIER_HIDDEN))}
        for name, d_in, d_out in linear_plan(config):
            # He-uniform ahead of a ReLU keeps activation scale through the classifier
            bound = np.sqrt((6.0 if name in relu_fed else 1.0) / d_in)
            params[f"{name}.weight"] = uniform((d_out, d_in), bound)
            params[f"{name}.bias"] = uniform((d_out,), bound)
        return cls(config, params, buffers)

    @property
    def dtype(self):
        return self.params["rnn.weight"].dtype

    def named_parameters(self):
        return self.params.items()

    def component_parameters(self, component):
        prefix = {"encoder": "enc.", "recurrent": "rnn.", "decoder": "dec.",
                  "classifier": "cls."}[component]
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def astype(self, dtype):
        """Independent copy of parameters and buffers at ``dtype``."""
        params = {k: Tensor(np.array(v.data, dtype=dtype), requires_grad=True, dtype=dtype)
                  for k, v in self.params.items()}
        buffers = {k: np.array(v, dtype=dtype) for k, v in self.buffers.items()}
        return RscnetModel(self.config, params, buffers)

    def copy(self):
        return self.astype(self.dtype)


# -- building blocks ----------------------------------------------------------

def _conv_unit(model, name, x, training):
    p = model.params
    spec = model.specs[name]
    if f"{name}.bias" in p:
        return nx.conv2d(x, spec, p[f"{name}.weight"], p[f"{name}.bias"])
    y = nx.conv2d(x, spec, p[f"{name}.weight"])
    y = nx.batch_norm(y, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                      model.buffers[f"{name}.bn.mean"], model.buffers[f"{name}.bn.var"],
                      training)
    return nx.prelu(y, p[f"{name}.prelu"])


def _linear(model, name, x):
    return nx.linear(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"])


def _batched(x, trailing_ndim):
    """Add a leading batch axis if ``x`` is unbatched; report whether we did."""
    x = nx.as_tensor(x)
    if x.ndim == trailing_ndim:
        return nx.reshape(x, (1,) + x.shape), True
    return x, False


def dconv_block_forward(x, model, training=False):
    """Encoder residual block: three dilated 3x3 convs beside one plain 3x3 conv."""
    x, squeeze = _batched(x, 3)
    a = x
    for k in range(len(ENCODER_DILATIONS)):
        a = _conv_unit(model, f"enc.block.dilated{k}", a, training)
    b = _conv_unit(model, "enc.block.plain", x, training)
    y = x + _conv_unit(model, "enc.block.fuse", nx.concat([a, b], axis=1), training)
    return nx.reshape(y, y.shape[1:]) if squeeze else y


def decoder_block_forward(x, model, prefix, training=False):
    a = x
    for k in range(4):
        a = _conv_unit(model, f"{prefix}.a{k}", a, training)
    b = x
    for k in range(4):
        b = _conv_unit(model, f"{prefix}.b{k}", b, training)
    return x + _conv_unit(model, f"{prefix}.fuse", nx.concat([a, b], axis=1), training)


def encoder_forward(window, model, training=False):
    """``(N_a, N_s, N_f)`` window (or a batch of them) -> ``M`` compressed values."""
    cfg = model.config
    x, squeeze = _batched(window, 3)
    if x.shape[1:] != cfg.window_shape:
        raise ValueError(f"encoder: window shape {x.shape[1:]} != {cfg.window_shape}")
    x = _conv_unit(model, "enc.head", x, training)
    x = dconv_block_forward(x, model, training)
    z = _linear(model, "enc.compress", nx.reshape(x, (x.shape[0], -1)))
    return nx.reshape(z, (cfg.compressed_dim,)) if squeeze else z


def recurrent_forward(compressed_seq, model, initial_state=None):
    """Run the LSTM over windows in order.

    ``compressed_seq`` is ``(S, M)`` or batched ``(B, S, M)``. Returns the hidden
    sequence with matching batching and the final ``(h, c)`` for continuation.
    """
    seq, squeeze = _batched(compressed_seq, 2)
    B, S, M = seq.shape
    n_h = model.config.hidden_dim
    if S < 1:
        raise ValueError("recurrent_forward needs at least one window")
    if M != model.lstm.input_size:
        raise ValueError(f"recurrent: compressed dim {M} != {model.lstm.input_size}")
    if initial_state is None:
        h = Tensor(np.zeros((B, n_h)), dtype=seq.dtype)
        c = Tensor(np.zeros((B, n_h)), dtype=seq.dtype)
    else:
        h, c = (nx.as_tensor(t) for t in initial_state)
        if squeeze and h.shape == (n_h,) and c.shape == (n_h,):
            h, c = nx.reshape(h, (1, n_h)), nx.reshape(c, (1, n_h))
        if h.shape != (B, n_h) or c.shape != (B, n_h):
            raise ValueError(f"recurrent: state shape {h.shape}/{c.shape} != {(B, n_h)}")
    hidden = []
    for s in range(S):
        h, c = nx.lstm_cell(seq[:, s, :], h, c, model.lstm)
        hidden.append(h)
    out = nx.stack(hidden, axis=1)
    if squeeze:
        return nx.reshape(out, (S, n_h)), (nx.reshape(h, (n_h,)), nx.reshape(c, (n_h,)))
    return out, (h, c)


def decoder_forward(h, model, training=False):
    """Hidden state ``(N_h,)`` (or ``(B, N_h)``) -> reconstructed window."""
    cfg = model.config
    x, squeeze = _batched(h, 1)
    if x.shape[1] != cfg.hidden_dim:
        raise ValueError(f"decoder: hidden dim {x.shape[1]} != {cfg.hidden_dim}")
    x = _linear(model, "dec.restore", x)
    x = nx.reshape(x, (x.shape[0],) + cfg.window_shape)
    x = x + _conv_unit(model, "dec.head", x, training)
    x = decoder_block_forward(x, model, "dec.block0", training)
    x = decoder_block_forward(x, model, "dec.block1", training)
    return nx.reshape(x, cfg.window_shape) if squeeze else x


def classifier_forward(stacked, model, return_penultimate=False):
    """Flattened hidden sequence ``(S*N_h,)`` (or batched) -> class logits."""
    x, squeeze = _batched(stacked, 1)
    expected = model.config.n_windows * model.config.hidden_dim
    if x.shape[1] != expected:
        raise ValueError(f"classifier: input dim {x.shape[1]} != {expected}")
    n_layers = len(CLASSIFIER_HIDDEN) + 1
    penultimate = None
    for k in range(n_layers):
        x = _linear(model, f"cls.fc{k}", x)
        if k < n_layers - 1:
            x = nx.relu(x)
            penultimate = x
    if squeeze:
        x = nx.reshape(x, (x.shape[1],))
        penultimate = nx.reshape(penultimate, (penultimate.shape[1],))
    return (x, penultimate) if return_penultimate else x


def segment_batch(x, n_frames):
    """``(B, N_a, N_s, N_t)`` -> ``(B*S, N_a, N_s, N_f)`` windows in (sample, window) order."""
    B, Na, Ns, Nt = x.shape
    S = Nt // n_frames
    y = nx.reshape(x, (B, Na, Ns, S, n_frames))
    idx = [slice(None)] * 5
    windows = []
    for s in range(S):
        idx[3] = s
        windows.append(y[tuple(idx)])
    return nx.reshape(nx.stack(windows, axis=1), (B * S, Na, Ns, n_frames))


def merge_batch(windows, batch):
    """Inverse of :func:`segment_batch`."""
    BS, Na, Ns, Nf = windows.shape
    S = BS // batch
    w = nx.reshape(windows, (batch, S, Na, Ns, Nf))
    return nx.concat([w[:, s] for s in range(S)], axis=3)


@dataclass
class Embeddings:
    compressed: Tensor   # (B, S, M)
    recurrent: Tensor    # (B, S, N_h)
    classifier: Tensor   # (B, 128) penultimate activations


def model_forward(sample, model, training=False):
    """Full pass: segment, encode, LSTM, decode + merge, classify.

    Accepts ``(N_a, N_s, N_t)`` or a batch ``(B, N_a, N_s, N_t)``; returns
    ``(reconstruction, logits, embeddings)`` with matching batching.
    """
    cfg = model.config
    x, squeeze = _batched(sample, 3)
    if x.shape[1:] != cfg.sample_shape:
        raise ValueError(f"model: sample shape {x.shape[1:]} != {cfg.sample_shape}")
    B, S = x.shape[0], cfg.n_windows
    windows = segment_batch(x, cfg.window_frames)
    z = encoder_forward(windows, model, training)
    z = nx.reshape(z, (B, S, cfg.compressed_dim))
    hidden, _ = recurrent_forward(z, model)
    recon = decoder_forward(nx.reshape(hidden, (B * S, cfg.hidden_dim)), model, training)
    recon = merge_batch(recon, B)
    logits, penult = classifier_forward(nx.reshape(hidden, (B, S * cfg.hidden_dim)), model,
                                        return_penultimate=True)
    emb = Embeddings(z, hidden, penult)
    if squeeze:
        recon = nx.reshape(recon, cfg.sample_shape)
        logits = nx.reshape(logits, (cfg.n_classes,))
    return recon, logits, emb


# -- accounting ---------------------------------------------------------------

def conv_flops(spec, height, width):
    return 2 * spec.kernel_h * spec.kernel_w * spec.in_channels * spec.out_channels * height * width


def linear_flops(d_in, d_out):
    return 2 * d_in * d_out


# per step: 4*N_h bias adds, 3 sigmoid + 2 tanh evaluations, 3 products, 1 sum
LSTM_ELEMENTWISE_PER_UNIT = 4 + 5 + 3 + 1


def lstm_flops(d_in, n_h):
    return 8 * n_h * (d_in + n_h) + LSTM_ELEMENTWISE_PER_UNIT * n_h


def flops_count(config):
    """Multiply-add FLOPs (1 MAC = 2 FLOPs) per activity sample, by component.

    Encoder, recurrent and decoder costs are per window times ``S`` windows;
    the classifier runs once per sample. Bias, normalisation and activation
    costs of conv/dense layers are not counted.
    """
    cfg = config
    Ns, Nf, S = cfg.n_subcarriers, cfg.window_frames, cfg.n_windows
    per_window = {"encoder": 0, "decoder": 0}
    component = {"enc": "encoder", "dec": "decoder"}
    for name, spec, _ in conv_plan(cfg):
        per_window[component[name.split(".")[0]]] += conv_flops(spec, Ns, Nf)
    dense = {name: linear_flops(a, b) for name, a, b in linear_plan(cfg)}
    per_window["encoder"] += dense["enc.compress"]
    per_window["decoder"] += dense["dec.restore"]
    return {
        "encoder": S * per_window["encoder"],
        "recurrent": S * lstm_flops(cfg.compressed_dim, cfg.hidden_dim),
        "decoder": S * per_window["decoder"],
        "classifier": sum(v for k, v in dense.items() if k.startswith("cls.")),
    }


def flops_per_window(config):
    """Encoder/recurrent/decoder FLOPs for a single window."""
    counts = flops_count(config)
    S = config.n_windows
    return {k: (v // S if k != "classifier" else v) for k, v in counts.items()}


def param_count(model):
    """Exact number of trainable scalars."""
    return int(sum(p.size for p in model.params.values()))
