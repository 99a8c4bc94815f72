"""
Fourier Neural Operator
Lifting layer, spectral convolution blocks with a pointwise bypass, projection
head, per-channel input normalization and a hand-written reverse pass.

Hidden states are kept channel-first as (batch, width, ny, nx). Spectral weights
cover the two low-frequency corners of the real-to-complex half spectrum:
rows [:modes] ("lo") and [-modes:] ("hi"), columns [:modes].
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, LayoutError, ShapeError, TapeReusedError
from pde_systems import SystemTag
from spectral_grid import GridSpec

logger = logging.getLogger(__name__)

NORM_STD_FLOOR = 1e-8
ACTIVATIONS = ('gelu', 'identity')
DTYPES = {'float32': (np.float32, np.complex64), 'float64': (np.float64, np.complex128)}

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


@dataclass(frozen=True)
class FnoConfig:
    """Architecture of one network. activation, pointwise and dtype are ablation switches."""

    grid: GridSpec
    in_channels: int = 8
    width: int = 16
    modes: int = 8
    n_blocks: int = 4
    activation: str = 'gelu'
    pointwise: bool = True
    dtype: str = 'float32'

    def __post_init__(self):
        if self.modes < 1 or self.modes > self.grid.nx // 2 or self.modes > self.grid.ny // 2:
            raise ConfigError(f"modes={self.modes} must lie in [1, min(nx, ny)/2]")
        if self.width < 4:
            raise ConfigError(f"width={self.width} must be >= 4")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if self.dtype not in DTYPES:
            raise ConfigError(f"unknown dtype '{self.dtype}'")

    @property
    def real_dtype(self):
        return DTYPES[self.dtype][0]

    @property
    def complex_dtype(self):
        return DTYPES[self.dtype][1]

    def to_dict(self) -> dict:
        return {
            'grid': self.grid.to_dict(),
            'in_channels': self.in_channels,
            'width': self.width,
            'modes': self.modes,
            'n_blocks': self.n_blocks,
            'activation': self.activation,
            'pointwise': self.pointwise,
            'dtype': self.dtype,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'FnoConfig':
        values = dict(data)
        values['grid'] = GridSpec.from_dict(values['grid'])
        return cls(**values)


# Input channels in the shared layout.
CHANNEL_NAMES = ('source', 'D11', 'D12', 'D22', 'vx', 'vy', 'omega', 'r')

LIVE_CHANNELS: Dict[SystemTag, Tuple[str, ...]] = {
    SystemTag.POISSON: ('source', 'D11', 'D12', 'D22'),
    SystemTag.ADVECTION_DIFFUSION: ('source', 'D11', 'D12', 'D22', 'vx', 'vy'),
    SystemTag.HELMHOLTZ: ('source', 'omega'),
    SystemTag.REACTION_DIFFUSION: ('source', 'D11', 'D12', 'D22', 'r'),
    SystemTag.REACTION_ADVECTION_DIFFUSION: ('source', 'D11', 'D12', 'D22', 'vx', 'vy', 'r'),
    SystemTag.DARCY: ('source', 'K'),
}


def _channel_values(name: str, sample) -> Optional[np.ndarray]:
    """Field or scalar feeding a named channel, None when the sample lacks it."""
    coeffs = sample.coeffs
    if name == 'source':
        return sample.source
    if name == 'K':
        return coeffs.K
    if name in ('D11', 'D12', 'D22'):
        if coeffs.D is None:
            return None
        return {'D11': coeffs.D[0, 0], 'D12': coeffs.D[0, 1], 'D22': coeffs.D[1, 1]}[name]
    if name in ('vx', 'vy'):
        if coeffs.v is None:
            return None
        return coeffs.v[0] if name == 'vx' else coeffs.v[1]
    return getattr(coeffs, name)


@dataclass(frozen=True)
class ChannelLayout:
    """Name of the quantity fed to each input channel; scalars are broadcast as constant fields."""

    channels: Tuple[str, ...] = CHANNEL_NAMES

    @classmethod
    def full(cls) -> 'ChannelLayout':
        return cls(CHANNEL_NAMES)

    @classmethod
    def reduced(cls, system: SystemTag) -> 'ChannelLayout':
        """Smallest layout carrying every live input of one task."""
        return cls(LIVE_CHANNELS[system])

    def __len__(self) -> int:
        return len(self.channels)

    def with_coefficient(self, name: str, index: int) -> 'ChannelLayout':
        """Route a coefficient absent from the layout into an existing channel."""
        if not 1 <= index < len(self.channels):
            raise LayoutError(f"channel {index} cannot carry '{name}'")
        channels = list(self.channels)
        channels[index] = name
        return ChannelLayout(tuple(channels))

    def check(self, system: SystemTag):
        """
        Raises:
            LayoutError: A live input of the system has no channel
        """
        missing = [name for name in LIVE_CHANNELS[system] if name not in self.channels]
        if missing:
            raise LayoutError(f"{system.value} inputs {missing} have no channel in layout {list(self.channels)}")

    def build(self, samples: Sequence, grid: GridSpec) -> np.ndarray:
        """
        Stack the input channels of samples.

        Returns:
            float64 array of shape (batch, channels, ny, nx); unused channels are zero
        """
        out = np.zeros((len(samples), len(self.channels)) + grid.shape)
        for b, sample in enumerate(samples):
            self.check(sample.system)
            live = LIVE_CHANNELS[sample.system]
            for c, name in enumerate(self.channels):
                if name not in live:
                    continue
                value = _channel_values(name, sample)
                if value is not None:
                    out[b, c] = value
        return out

    def to_list(self) -> List[str]:
        return list(self.channels)


@dataclass
class FnoParams:
    """Trainable tensors in declaration order plus the input normalization statistics."""

    config: FnoConfig
    tensors: Dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def copy(self) -> 'FnoParams':
        return FnoParams(
            config=self.config,
            tensors={name: value.copy() for name, value in self.tensors.items()},
            norm_mean=self.norm_mean.copy(),
            norm_std=self.norm_std.copy(),
        )

    def count(self) -> int:
        """Number of real scalars; complex entries count twice."""
        return sum(v.size * (2 if np.iscomplexobj(v) else 1) for v in self.tensors.values())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def tensor_shapes(config: FnoConfig) -> Dict[str, Tuple[Tuple[int, ...], bool]]:
    """Declaration order of every trainable tensor: name -> (shape, is_complex)."""
    w, m = config.width, config.modes
    shapes = {
        'lift.weight': ((config.in_channels, w), False),
        'lift.bias': ((w,), False),
    }
    for block in range(config.n_blocks):
        shapes[f'blocks.{block}.spectral_lo'] = ((w, w, m, m), True)
        shapes[f'blocks.{block}.spectral_hi'] = ((w, w, m, m), True)
        if config.pointwise:
            shapes[f'blocks.{block}.pointwise.weight'] = ((w, w), False)
            shapes[f'blocks.{block}.pointwise.bias'] = ((w,), False)
    shapes['proj1.weight'] = ((w, w), False)
    shapes['proj1.bias'] = ((w,), False)
    shapes['proj2.weight'] = ((w, 1), False)
    shapes['proj2.bias'] = ((1,), False)
    return shapes


def count_parameters(config: FnoConfig) -> int:
    """Closed-form real-scalar parameter count."""
    c, w, m, L = config.in_channels, config.width, config.modes, config.n_blocks
    pointwise = (w * w + w) if config.pointwise else 0
    return (c * w + w) + L * (2 * 2 * w * w * m * m + pointwise) + (w * w + w) + (w + 1)


def init_params(config: FnoConfig, rng: np.random.Generator) -> FnoParams:
    """
    Fresh parameters.

    Real weights are Glorot-uniform, spectral weights have real and imaginary
    parts drawn from N(0, 1/width^2), biases are zero and the normalization is
    the identity until fitted.
    """
    real, cplx = config.real_dtype, config.complex_dtype
    tensors = {}
    for name, (shape, is_complex) in tensor_shapes(config).items():
        if is_complex:
            scale = 1.0 / config.width
            values = rng.normal(0.0, scale, shape) + 1j * rng.normal(0.0, scale, shape)
            tensors[name] = values.astype(cplx)
        elif name.endswith('.bias'):
            tensors[name] = np.zeros(shape, dtype=real)
        else:
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, shape).astype(real)
    return FnoParams(
        config=config,
        tensors=tensors,
        norm_mean=np.zeros(config.in_channels),
        norm_std=np.ones(config.in_channels),
    )


def channel_statistics(inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and floored std over batch and grid, in float64."""
    x = np.asarray(inputs, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = np.maximum(x.std(axis=(0, 2, 3)), NORM_STD_FLOOR)
    return mean, std


def fit_normalization(params: FnoParams, train_inputs: np.ndarray) -> FnoParams:
    """
    Fit channel-wise standardization on the training inputs.

    Args:
        params: Parameters to copy
        train_inputs: (batch, channels, ny, nx), batch >= 1

    Returns:
        New parameters carrying the fitted statistics
    """
    if train_inputs.shape[0] == 0:
        raise ConfigError("normalization needs at least one training input")
    _check_inputs(params.config, train_inputs)
    mean, std = channel_statistics(train_inputs)
    fitted = params.copy()
    fitted.norm_mean, fitted.norm_std = mean, std
    return fitted


def refit_degenerate_channels(params: FnoParams, inputs: np.ndarray) -> FnoParams:
    """Refit the channels whose std sits at the floor, e.g. channels never live during pre-training."""
    degenerate = params.norm_std <= NORM_STD_FLOOR
    if not degenerate.any():
        return params
    mean, std = channel_statistics(inputs)
    refit = params.copy()
    refit.norm_mean = np.where(degenerate, mean, params.norm_mean)
    refit.norm_std = np.where(degenerate, std, params.norm_std)
    logger.info("refit normalization of channels %s", np.flatnonzero(degenerate).tolist())
    return refit


def normalize_inputs(params: FnoParams, inputs: np.ndarray) -> np.ndarray:
    return (inputs - params.norm_mean[None, :, None, None]) / params.norm_std[None, :, None, None]


def denormalize_inputs(params: FnoParams, normalized: np.ndarray) -> np.ndarray:
    return normalized * params.norm_std[None, :, None, None] + params.norm_mean[None, :, None, None]


def gelu(z: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + _GELU_A * z ** 3)))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (z + _GELU_A * z ** 3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_A * z ** 2)


def _activate(config: FnoConfig, z: np.ndarray) -> np.ndarray:
    return gelu(z) if config.activation == 'gelu' else z


def _activate_grad(config: FnoConfig, z: np.ndarray) -> np.ndarray:
    return gelu_grad(z) if config.activation == 'gelu' else np.ones_like(z)


@dataclass
class Tape:
    """Intermediates recorded by one forward pass; consumed once by backward."""

    params: FnoParams
    normalized: np.ndarray
    block_inputs: List[np.ndarray] = field(default_factory=list)
    block_spectra: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    block_preactivations: List[np.ndarray] = field(default_factory=list)
    head_input: Optional[np.ndarray] = None
    head_preactivation: Optional[np.ndarray] = None
    head_hidden: Optional[np.ndarray] = None
    used: bool = False

    def consume(self):
        if self.used:
            raise TapeReusedError("tape already consumed by a backward pass")
        self.used = True


def _check_inputs(config: FnoConfig, inputs: np.ndarray):
    expected = (config.in_channels,) + config.grid.shape
    if inputs.ndim != 4 or inputs.shape[1:] != expected:
        raise ShapeError(f"inputs of shape {inputs.shape} do not match (batch,) + {expected}")


def _spectral_conv(config: FnoConfig, h: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Truncated Fourier-space channel mixing. Returns output and the retained input corners."""
    ny, nx = config.grid.shape
    m = config.modes
    spectrum = np.fft.rfft2(h, axes=(-2, -1))
    x_lo = spectrum[:, :, :m, :m].astype(config.complex_dtype)
    x_hi = spectrum[:, :, -m:, :m].astype(config.complex_dtype)
    out = np.zeros(spectrum.shape, dtype=config.complex_dtype)
    out[:, :, :m, :m] = np.einsum('biyx,ioyx->boyx', x_lo, lo)
    out[:, :, -m:, :m] = np.einsum('biyx,ioyx->boyx', x_hi, hi)
    s = np.fft.irfft2(out, s=(ny, nx), axes=(-2, -1)).astype(config.real_dtype)
    return s, (x_lo, x_hi)


def forward(params: FnoParams, inputs: np.ndarray, record: bool = True) -> Tuple[np.ndarray, Optional[Tape]]:
    """
    Evaluate the network on a batch.

    Args:
        params: Network parameters
        inputs: (batch, in_channels, ny, nx) raw input channels
        record: Keep the intermediates needed by backward

    Returns:
        Tuple of (predictions of shape (batch, ny, nx), tape or None)

    Raises:
        ShapeError: Inputs do not match the configuration
    """
    config = params.config
    _check_inputs(config, inputs)
    t = params.tensors
    real = config.real_dtype

    xn = normalize_inputs(params, np.asarray(inputs, dtype=np.float64)).astype(real)
    tape = Tape(params=params, normalized=xn) if record else None

    h = np.einsum('bcyx,cw->bwyx', xn, t['lift.weight']) + t['lift.bias'][None, :, None, None]
    for block in range(config.n_blocks):
        prefix = f'blocks.{block}'
        s, corners = _spectral_conv(config, h, t[f'{prefix}.spectral_lo'], t[f'{prefix}.spectral_hi'])
        z = s
        if config.pointwise:
            z = z + np.einsum('biyx,io->boyx', h, t[f'{prefix}.pointwise.weight'])
            z = z + t[f'{prefix}.pointwise.bias'][None, :, None, None]
        if record:
            tape.block_inputs.append(h)
            tape.block_spectra.append(corners)
            tape.block_preactivations.append(z)
        last = block == config.n_blocks - 1
        h = z if last else _activate(config, z)

    q = np.einsum('bwyx,wv->bvyx', h, t['proj1.weight']) + t['proj1.bias'][None, :, None, None]
    r = _activate(config, q)
    out = np.einsum('bvyx,vk->bkyx', r, t['proj2.weight']) + t['proj2.bias'][None, :, None, None]
    if record:
        tape.head_input, tape.head_preactivation, tape.head_hidden = h, q, r
    return out[:, 0], tape


def _spectral_adjoint(config: FnoConfig, g: np.ndarray, corners, lo: np.ndarray, hi: np.ndarray):
    """
    Reverse pass of the truncated spectral convolution.

    The irfft2 adjoint weights interior half-spectrum columns twice, since each
    stands for itself and its conjugate mirror; column 0 counts once.

    Returns:
        Tuple of (grad lo, grad hi, grad wrt block input)
    """
    ny, nx = config.grid.shape
    n = ny * nx
    m = config.modes
    x_lo, x_hi = corners

    weight = np.full(m, 2.0)
    weight[0] = 1.0
    spectrum = np.fft.rfft2(g, axes=(-2, -1)) / n
    gy_lo = spectrum[:, :, :m, :m] * weight
    gy_hi = spectrum[:, :, -m:, :m] * weight

    grad_lo = np.einsum('biyx,boyx->ioyx', np.conj(x_lo), gy_lo)
    grad_hi = np.einsum('biyx,boyx->ioyx', np.conj(x_hi), gy_hi)

    padded = np.zeros(g.shape, dtype=np.complex128)
    padded[:, :, :m, :m] = np.einsum('boyx,ioyx->biyx', gy_lo, np.conj(lo))
    padded[:, :, -m:, :m] = np.einsum('boyx,ioyx->biyx', gy_hi, np.conj(hi))
    grad_h = n * np.fft.ifft2(padded, axes=(-2, -1)).real
    return grad_lo, grad_hi, grad_h


def backward(tape: Tape, upstream: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Reverse-mode gradients of a scalar objective with respect to every tensor.

    Complex gradients g satisfy dL = Re(sum(conj(g) * dW)).

    Args:
        tape: Tape from forward, single use
        upstream: dL/dprediction, shape (batch, ny, nx)

    Returns:
        Gradients keyed and shaped like params.tensors

    Raises:
        TapeReusedError: Tape already consumed
    """
    tape.consume()
    params = tape.params
    config = params.config
    t = params.tensors
    g = np.asarray(upstream, dtype=np.float64)[:, None]
    if g.shape[2:] != config.grid.shape or g.shape[0] != tape.normalized.shape[0]:
        raise ShapeError(f"upstream gradient of shape {upstream.shape} does not match the forward batch")
    grads: Dict[str, np.ndarray] = {}

    r, q, h = tape.head_hidden, tape.head_preactivation, tape.head_input
    grads['proj2.weight'] = np.einsum('bvyx,bkyx->vk', r, g)
    grads['proj2.bias'] = g.sum(axis=(0, 2, 3))
    g_q = np.einsum('bkyx,vk->bvyx', g, t['proj2.weight']) * _activate_grad(config, q)
    grads['proj1.weight'] = np.einsum('bwyx,bvyx->wv', h, g_q)
    grads['proj1.bias'] = g_q.sum(axis=(0, 2, 3))
    g_h = np.einsum('bvyx,wv->bwyx', g_q, t['proj1.weight'])

    for block in reversed(range(config.n_blocks)):
        prefix = f'blocks.{block}'
        z = tape.block_preactivations[block]
        h_in = tape.block_inputs[block]
        g_z = g_h if block == config.n_blocks - 1 else g_h * _activate_grad(config, z)

        lo, hi = t[f'{prefix}.spectral_lo'], t[f'{prefix}.spectral_hi']
        grad_lo, grad_hi, g_h = _spectral_adjoint(config, g_z, tape.block_spectra[block], lo, hi)
        grads[f'{prefix}.spectral_lo'] = grad_lo
        grads[f'{prefix}.spectral_hi'] = grad_hi
        if config.pointwise:
            grads[f'{prefix}.pointwise.weight'] = np.einsum('biyx,boyx->io', h_in, g_z)
            grads[f'{prefix}.pointwise.bias'] = g_z.sum(axis=(0, 2, 3))
            g_h = g_h + np.einsum('boyx,io->biyx', g_z, t[f'{prefix}.pointwise.weight'])

    grads['lift.weight'] = np.einsum('bcyx,bwyx->cw', tape.normalized, g_h)
    grads['lift.bias'] = g_h.sum(axis=(0, 2, 3))

    return {name: grads[name].astype(value.dtype) for name, value in t.items()}


def predict(params: FnoParams, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched inference without tapes, returned in float64."""
    outputs = []
    for start in range(0, inputs.shape[0], batch_size):
        prediction, _ = forward(params, inputs[start:start + batch_size], record=False)
        outputs.append(prediction.astype(np.float64))
    if not outputs:
        return np.zeros((0,) + params.config.grid.shape)
    return np.concatenate(outputs, axis=0)


def with_config(params: FnoParams, **changes) -> FnoParams:
    """Same tensors under an updated config (e.g. a different dtype)."""
    config = replace(params.config, **changes)
    real, cplx = config.real_dtype, config.complex_dtype
    tensors = {
        name: value.astype(cplx if np.iscomplexobj(value) else real) for name, value in params.tensors.items()
    }
    return FnoParams(config=config, tensors=tensors, norm_mean=params.norm_mean.copy(), norm_std=params.norm_std.copy())
