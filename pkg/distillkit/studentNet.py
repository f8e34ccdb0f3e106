"""
Light-weight student embedding extractor.

A miniature x-vector: dilated 1-D convolutions over feature frames, ReLU, statistics pooling and a
dense projection to the embedding. Parameters live in one flat vector with per-layer views so the
optimizer works on plain arrays. Backward is written out by hand per layer; a forward call records a
ForwardTape that a single backward call consumes.
"""
import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from distillkit.Constants import CHECKPOINT_MAGIC, DEFAULT_FRAME_SHIFT_S, EMBEDDING_DIM, N_MELS, STD_FLOOR
from distillkit.config import PoolingMode
from distillkit.featuresModule import PRECISIONS, FeatureMatrix
from utils.binary_io import BinaryReader, atomic_write_bytes
from utils.exceptions import ConfigError, FormatError, TooShortError, UsageError
from utils.logger_config import logger


@dataclass(frozen=True)
class StudentConfig:
    """
    conv_layers holds (kernel, dilation, out_channels) per convolution. A ReLU follows every
    convolution except the last one, which feeds the pooling layer directly.
    """
    conv_layers: tuple = ((5, 1, 256), (3, 2, 256), (3, 3, 256), (1, 1, 512))
    input_dim: int = N_MELS
    embedding_dim: int = EMBEDDING_DIM
    pooling: str = PoolingMode.STATS.value
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        layers = tuple(tuple(int(v) for v in layer) for layer in self.conv_layers)
        object.__setattr__(self, 'conv_layers', layers)
        if not layers:
            raise ConfigError("Student needs at least one convolution")
        for kernel, dilation, channels in layers:
            if kernel < 1 or dilation < 1 or channels < 1:
                raise ConfigError(f"Bad convolution (kernel={kernel}, dilation={dilation}, channels={channels})")
        if self.input_dim < 1 or self.embedding_dim < 1:
            raise ConfigError("input_dim and embedding_dim must be positive")
        try:
            PoolingMode(self.pooling)
        except ValueError:
            raise ConfigError(f"Unknown pooling {self.pooling!r}; expected stats or gap")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")

    def to_dict(self):
        data = asdict(self)
        data['conv_layers'] = [list(layer) for layer in self.conv_layers]
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**{**data, 'conv_layers': tuple(tuple(layer) for layer in data['conv_layers'])})

    def digest(self):
        """
        sha256 of the architecture; seed and precision do not change the parameter layout.
        """
        data = self.to_dict()
        data.pop('seed')
        data.pop('precision')
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode('utf-8')).digest()


STUDENT_PRESETS = {
    "tdnn-small": StudentConfig(),
    "tdnn-tiny": StudentConfig(conv_layers=((5, 1, 64), (3, 2, 64), (3, 3, 64), (1, 1, 128))),
}


def student_preset(name, **overrides):
    if name not in STUDENT_PRESETS:
        raise ConfigError(f"Unknown student {name!r}; expected one of {', '.join(STUDENT_PRESETS)}")
    data = STUDENT_PRESETS[name].to_dict()
    data.update({k: v for k, v in overrides.items() if v is not None})
    return StudentConfig.from_dict(data)


class Conv1d:
    """
    Dilated convolution over time. Input (in_ch, T), output (out_ch, T - dilation * (kernel - 1)).
    """

    def __init__(self, in_ch, out_ch, kernel, dilation):
        self.in_ch, self.out_ch, self.kernel, self.dilation = in_ch, out_ch, kernel, dilation
        self.weight = None
        self.bias = None

    def param_shapes(self):
        return [(self.out_ch, self.in_ch, self.kernel), (self.out_ch,)]

    def fan_in(self):
        return self.in_ch * self.kernel

    def bind(self, views):
        self.weight, self.bias = views

    def context(self):
        return self.dilation * (self.kernel - 1)

    def _matrix(self):
        # tap-major columns to match the stacked input below
        return self.weight.transpose(0, 2, 1).reshape(self.out_ch, self.kernel * self.in_ch)

    def forward(self, x):
        length = x.shape[1] - self.context()
        cols = np.concatenate([x[:, j * self.dilation:j * self.dilation + length] for j in range(self.kernel)], axis=0)
        return self._matrix() @ cols + self.bias[:, None], (cols, x.shape[1])

    def backward(self, grad_y, cache):
        cols, in_length = cache
        length = grad_y.shape[1]
        grad_weight = (grad_y @ cols.T).reshape(self.out_ch, self.kernel, self.in_ch).transpose(0, 2, 1)
        grad_bias = grad_y.sum(axis=1)
        grad_cols = self._matrix().T @ grad_y
        grad_x = np.zeros((self.in_ch, in_length), dtype=grad_y.dtype)
        for j in range(self.kernel):
            start = j * self.dilation
            grad_x[:, start:start + length] += grad_cols[j * self.in_ch:(j + 1) * self.in_ch]
        return grad_x, [grad_weight, grad_bias]


class ReLU:

    def param_shapes(self):
        return []

    def bind(self, views):
        pass

    def context(self):
        return 0

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad_y, mask):
        return grad_y * mask, []


class StatsPooling:
    """
    Per-channel mean and standard deviation over time, concatenated: (C, T) -> (2C,).
    The standard deviation is floored at 1e-8.
    """

    def param_shapes(self):
        return []

    def bind(self, views):
        pass

    def context(self):
        return 0

    def forward(self, x):
        length = x.shape[1]
        mean = x.mean(axis=1)
        centered = x - mean[:, None]
        var = np.mean(centered * centered, axis=1)
        std = np.sqrt(np.maximum(var, STD_FLOOR ** 2))
        return np.concatenate([mean, std]), (centered, std, var > STD_FLOOR ** 2, length)

    def backward(self, grad_y, cache):
        centered, std, active, length = cache
        channels = centered.shape[0]
        grad_mean, grad_std = grad_y[:channels], grad_y[channels:]
        grad_var = np.where(active, grad_std / (2.0 * std), 0.0)
        grad_x = grad_mean[:, None] / length + grad_var[:, None] * 2.0 * centered / length
        return grad_x.astype(grad_y.dtype), []


class GlobalAveragePooling:
    """
    Channel-wise mean over time: (C, T) -> (C,).
    """

    def param_shapes(self):
        return []

    def bind(self, views):
        pass

    def context(self):
        return 0

    def forward(self, x):
        return x.mean(axis=1), x.shape[1]

    def backward(self, grad_y, length):
        return np.repeat(grad_y[:, None] / length, length, axis=1), []


class Dense:

    def __init__(self, in_dim, out_dim):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = None
        self.bias = None

    def param_shapes(self):
        return [(self.out_dim, self.in_dim), (self.out_dim,)]

    def fan_in(self):
        return self.in_dim

    def bind(self, views):
        self.weight, self.bias = views

    def context(self):
        return 0

    def forward(self, x):
        return self.weight @ x + self.bias, x

    def backward(self, grad_y, x):
        return self.weight.T @ grad_y, [np.outer(grad_y, x), grad_y.copy()]


class ForwardTape:
    """
    Activations recorded by one forward call, consumed by exactly one backward call.
    """

    def __init__(self, net, caches):
        self.net = net
        self.caches = caches
        self.consumed = False


class StudentNet:
    """
    The student extractor.

    Attributes:
        config (StudentConfig): architecture, seed and precision.
        layers (list): Conv1d/ReLU blocks, one pooling layer, one Dense layer.
        params (np.ndarray): flat parameter vector; layer weights are views into it.
        receptive_field (int): minimum number of input frames.
    """

    def __init__(self, config: StudentConfig = StudentConfig(), params=None):
        self.config = config
        self.dtype = PRECISIONS[config.precision]
        self.layers = []
        channels = config.input_dim
        for index, (kernel, dilation, out_ch) in enumerate(config.conv_layers):
            self.layers.append(Conv1d(channels, out_ch, kernel, dilation))
            if index < len(config.conv_layers) - 1:
                self.layers.append(ReLU())
            channels = out_ch
        if config.pooling == PoolingMode.STATS.value:
            self.layers.append(StatsPooling())
            channels *= 2
        else:
            self.layers.append(GlobalAveragePooling())
        self.layers.append(Dense(channels, config.embedding_dim))

        self._slices = []
        offset = 0
        for layer in self.layers:
            layer_slices = []
            for shape in layer.param_shapes():
                size = int(np.prod(shape))
                layer_slices.append((offset, offset + size, shape))
                offset += size
            self._slices.append(layer_slices)
        self.param_count = offset
        self.receptive_field = 1 + sum(layer.context() for layer in self.layers)

        if params is None:
            self.params = np.zeros(self.param_count, dtype=self.dtype)
            self._bind()
            self._initialize()
        else:
            params = np.asarray(params)
            if params.shape != (self.param_count,):
                raise ConfigError(f"Expected {self.param_count} parameters, got {params.shape}")
            self.params = params.astype(self.dtype, copy=True)
            self._bind()

    def _bind(self):
        for layer, layer_slices in zip(self.layers, self._slices):
            layer.bind([self.params[start:end].reshape(shape) for start, end, shape in layer_slices])

    def _initialize(self):
        """
        He-style uniform weights scaled by fan-in, zero biases, drawn from the config seed.
        """
        rng = np.random.default_rng(self.config.seed)
        for layer in self.layers:
            if isinstance(layer, (Conv1d, Dense)):
                bound = np.sqrt(6.0 / layer.fan_in())
                layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)

    def layer_param_counts(self):
        return [sum(end - start for start, end, _ in layer_slices)
                for layer_slices in self._slices if layer_slices]

    def set_params(self, params):
        self.params[...] = params

    def copy(self):
        return StudentNet(self.config, self.params)

    def as_float64(self):
        """
        64-bit shadow copy with the same parameters, for gradient checks.
        """
        config = StudentConfig.from_dict({**self.config.to_dict(), 'precision': 'float64'})
        return StudentNet(config, self.params.astype(np.float64))

    def _input(self, feats):
        frames = feats.frames if isinstance(feats, FeatureMatrix) else np.asarray(feats)
        if frames.ndim != 2 or frames.shape[1] != self.config.input_dim:
            raise ConfigError(f"Student expects (T, {self.config.input_dim}) input, got {frames.shape}")
        if frames.shape[0] < self.receptive_field:
            raise TooShortError(f"Input of {frames.shape[0]} frames is shorter than the receptive field "
                                f"of {self.receptive_field}")
        return np.ascontiguousarray(frames.T, dtype=self.dtype)

    def forward(self, feats):
        """
        Embeds one utterance.

        Args:
            feats (FeatureMatrix | np.ndarray): (T, input_dim) frames.

        Returns:
            tuple: (embedding of length embedding_dim, ForwardTape)

        Raises:
            TooShortError: if T is below the receptive field.
        """
        x = self._input(feats)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, ForwardTape(self, caches)

    def embed(self, feats):
        return self.forward(feats)[0]

    def backward(self, tape: ForwardTape, grad_embedding):
        """
        Gradient of <embedding, grad_embedding> w.r.t. every parameter, as a flat vector.

        Raises:
            UsageError: if the tape was already consumed or belongs to another net.
        """
        if tape.net is not self:
            raise UsageError("Tape was recorded by a different network")
        if tape.consumed:
            raise UsageError("Tape already consumed by a previous backward call")
        tape.consumed = True
        grad = np.asarray(grad_embedding, dtype=self.dtype)
        if grad.shape != (self.config.embedding_dim,):
            raise UsageError(f"Expected gradient of shape ({self.config.embedding_dim},), got {grad.shape}")
        flat = np.zeros(self.param_count, dtype=self.dtype)
        for layer, layer_slices, cache in reversed(list(zip(self.layers, self._slices, tape.caches))):
            grad, param_grads = layer.backward(grad, cache)
            for (start, end, _), param_grad in zip(layer_slices, param_grads):
                flat[start:end] = param_grad.reshape(-1)
        tape.caches = None
        return flat


def save_checkpoint(net: StudentNet, path):
    """
    Writes NET1: magic, 32-byte config digest, u64 parameter count, float32 parameters.
    The config itself goes to a JSON sidecar next to the checkpoint.
    """
    path = Path(path)
    payload = b"".join([
        CHECKPOINT_MAGIC,
        net.config.digest(),
        struct.pack('<Q', net.param_count),
        net.params.astype('<f4').tobytes(),
    ])
    atomic_write_bytes(path, payload)
    atomic_write_bytes(sidecar_path(path), json.dumps(net.config.to_dict(), indent=2).encode('utf-8'))
    logger.info("Saved checkpoint %s (%d parameters)", path, net.param_count)


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path, config: StudentConfig = None) -> StudentNet:
    """
    Reads a NET1 checkpoint. Without an explicit config, the JSON sidecar is used.

    Raises:
        FormatError: bad magic, digest mismatch, wrong count or truncation.
    """
    path = Path(path)
    if config is None:
        try:
            config = StudentConfig.from_dict(json.loads(sidecar_path(path).read_text(encoding='utf-8')))
        except (OSError, ValueError, TypeError, KeyError) as e:
            raise FormatError(f"Cannot read checkpoint config {sidecar_path(path)}: {e}")
    reader = BinaryReader(path.read_bytes())
    reader.magic(CHECKPOINT_MAGIC)
    digest_offset = reader.offset
    if reader.take(32, "config digest") != config.digest():
        reader.fail("Checkpoint was written for a different architecture", offset=digest_offset)
    count_offset = reader.offset
    count = reader.u64("parameter count")
    expected = _param_count(config)
    if count != expected:
        reader.fail(f"Parameter count {count} != {expected} for this architecture", offset=count_offset)
    params = reader.float32_array(count, "parameters")
    reader.expect_end()
    return StudentNet(config, params)


def _param_count(config: StudentConfig):
    count = 0
    channels = config.input_dim
    for kernel, _, out_ch in config.conv_layers:
        count += out_ch * channels * kernel + out_ch
        channels = out_ch
    pooled = 2 * channels if config.pooling == PoolingMode.STATS.value else channels
    return count + config.embedding_dim * pooled + config.embedding_dim


def measure_params_and_rtf(net: StudentNet, seconds=10.0, runs=5, warmups=2, seed=0):
    """
    Parameter count and real-time factor: median wall-clock time of one embedding extraction
    from a `seconds`-long input, divided by `seconds`.

    Returns:
        dict: {'param_count': int, 'rtf': float, 'seconds': float, 'runs': int}
    """
    if runs < 5 or warmups < 2:
        raise UsageError("RTF needs at least 5 timed runs after 2 warmups")
    if seconds <= 0:
        raise UsageError("Benchmark input duration must be positive")
    n_frames = max(net.receptive_field, int(round(seconds / DEFAULT_FRAME_SHIFT_S)))
    feats = np.random.default_rng(seed).standard_normal((n_frames, net.config.input_dim)).astype(net.dtype)
    for _ in range(warmups):
        net.embed(feats)
    timings = []
    for _ in range(runs):
        start = time.perf_counter()
        net.embed(feats)
        timings.append(time.perf_counter() - start)
    rtf = float(np.median(timings)) / seconds
    logger.info("Benchmark: %d parameters, RTF %.5f over %d runs", net.param_count, rtf, runs)
    return {'param_count': net.param_count, 'rtf': rtf, 'seconds': float(seconds), 'runs': runs}
