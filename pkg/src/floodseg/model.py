"""The gated dual-path encoder-decoder producing 2-channel score maps.

Each layer runs two 3x3 replicate-padded convolutions: one over the
spectral tensor and one over the elevation-derived tensor. The sigmoid
of the elevation conv acts as a per-cell gate on the spectral features
(gated linear unit), so local terrain shape regulates how much spectral
signal flows through. Encoder blocks downsample the spectral path by
max pooling and the elevation path by average pooling (a coarser
terrain approximation); decoder blocks upsample both with stride-2
transposed convolutions. Channel 0 of the output is the dry score,
channel 1 the flood score, everywhere in this codebase.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import ConvParams, Tensor

POOLING_MODES = ("max", "avg")


@dataclass
class ModelConfig:
    spectral_channels: int = 6
    use_elevation_path: bool = True
    blocks: int = 3
    base_channels: int = 8
    patch_size: int = 128
    fusion: str = "glu"
    pooling_spectral: str = "max"
    pooling_elevation: str = "avg"
    skip_connections: bool = True
    spectral_activation: str = "relu"
    dtype: str = "float32"

    def __post_init__(self):
        if self.patch_size % (2**self.blocks):
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by 2^{self.blocks}"
            )
        if self.fusion != "glu":
            raise NotImplementedError(
                f"fusion {self.fusion!r} is a plug-in point; only 'glu' is built in"
            )
        if self.pooling_spectral not in POOLING_MODES:
            raise ValueError(f"pooling_spectral must be one of {POOLING_MODES}")
        if self.pooling_elevation not in POOLING_MODES:
            raise ValueError(f"pooling_elevation must be one of {POOLING_MODES}")
        if self.spectral_activation not in ("relu", "none"):
            raise ValueError("spectral_activation must be 'relu' or 'none'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def block_width(self, b):
        return self.base_channels * 2**b

    _POOL_CODE = {"max": 0.0, "avg": 1.0}
    _POOL_NAME = {0.0: "max", 1.0: "avg"}

    def to_array(self):
        """Numeric encoding for embedding in checkpoints."""
        return np.array(
            [
                self.spectral_channels,
                1.0 if self.use_elevation_path else 0.0,
                self.blocks,
                self.base_channels,
                self.patch_size,
                self._POOL_CODE[self.pooling_spectral],
                self._POOL_CODE[self.pooling_elevation],
                1.0 if self.skip_connections else 0.0,
                1.0 if self.spectral_activation == "relu" else 0.0,
            ],
            dtype=np.float32,
        )

    @classmethod
    def from_array(cls, arr, dtype="float32"):
        a = [float(x) for x in arr]
        return cls(
            spectral_channels=int(a[0]),
            use_elevation_path=bool(a[1]),
            blocks=int(a[2]),
            base_channels=int(a[3]),
            patch_size=int(a[4]),
            pooling_spectral=cls._POOL_NAME[a[5]],
            pooling_elevation=cls._POOL_NAME[a[6]],
            skip_connections=bool(a[7]),
            spectral_activation="relu" if a[8] else "none",
            dtype=dtype,
        )


class GatedConv:
    """One dual-path layer: elevation-gated 3x3 convolution pair."""

    def __init__(self, spectral_conv, elevation_conv):
        if spectral_conv.out_ch != elevation_conv.out_ch:
            raise ValueError("spectral and elevation convs must share out_ch")
        self.spectral_conv = spectral_conv
        self.elevation_conv = elevation_conv

    def forward(self, x, x_e):
        """(x, x_e) -> (gated spectral y, gate tensor y_e in (0,1))."""
        if x.data.shape[1:] != x_e.data.shape[1:]:
            raise ValueError("spatial dims of spectral and elevation inputs differ")
        y_e = autodiff.sigmoid(autodiff.conv2d_replicate(x_e, self.elevation_conv))
        y = autodiff.mul(autodiff.conv2d_replicate(x, self.spectral_conv), y_e)
        return y, y_e

    def forward_ungated(self, x):
        """Spectral conv only, gate pinned at 1 (elevation path disabled)."""
        return autodiff.conv2d_replicate(x, self.spectral_conv)


class FloodNet:
    """Encoder-decoder over (spectral patch, elevation patch) -> (2,P,P) scores."""

    def __init__(self, config):
        self.config = config
        self._params = {}
        c = config
        widths = [c.block_width(b) for b in range(c.blocks)]

        self.enc = []
        spec_in, elev_in = c.spectral_channels, 1
        for b in range(c.blocks):
            layers = [
                self._gated(f"enc.{b}.0", spec_in, elev_in, widths[b]),
                self._gated(f"enc.{b}.1", widths[b], widths[b], widths[b]),
            ]
            self.enc.append(layers)
            spec_in = elev_in = widths[b]

        self.dec = []
        incoming = widths[-1]
        for b in reversed(range(c.blocks)):
            up_spec = self._conv(f"dec.{b}.up.spec", incoming, widths[b])
            up_elev = self._conv(f"dec.{b}.up.elev", incoming, widths[b])
            spec_in = 2 * widths[b] if c.skip_connections else widths[b]
            layers = [
                self._gated(f"dec.{b}.0", spec_in, widths[b], widths[b]),
                self._gated(f"dec.{b}.1", widths[b], widths[b], widths[b]),
            ]
            self.dec.append((up_spec, up_elev, layers))
            incoming = widths[b]

        dt = c.np_dtype
        self.head_w = self._register("head.w", np.zeros((2, widths[0]), dtype=dt))
        self.head_b = self._register("head.b", np.zeros(2, dtype=dt))

    def _register(self, name, arr):
        t = Tensor(arr)
        self._params[name] = t
        return t

    def _conv(self, name, in_ch, out_ch):
        dt = self.config.np_dtype
        k = self._register(f"{name}.w", np.zeros((out_ch, in_ch, 3, 3), dtype=dt))
        b = self._register(f"{name}.b", np.zeros(out_ch, dtype=dt))
        return ConvParams(k, b)

    def _gated(self, name, spec_in, elev_in, out_ch):
        return GatedConv(
            self._conv(f"{name}.spec", spec_in, out_ch),
            self._conv(f"{name}.elev", elev_in, out_ch),
        )

    def parameters(self):
        return dict(self._params)

    def init_params(self, seed):
        """Kaiming-uniform fan-in for kernels, zero biases, reproducible."""
        rng = np.random.default_rng(seed)
        for name, t in self._params.items():
            if name.endswith(".b"):
                t.data[...] = 0
            else:
                fan_in = int(np.prod(t.data.shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                t.data[...] = rng.uniform(-bound, bound, size=t.data.shape)

    def state(self):
        return {name: np.array(t.data, copy=True) for name, t in self._params.items()}

    def load_state(self, state):
        for name, t in self._params.items():
            if name not in state:
                raise ValueError(f"checkpoint missing parameter {name}")
            a = np.asarray(state[name])
            if a.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {a.shape} vs {t.data.shape}"
                )
            t.data[...] = a.astype(self.config.np_dtype)

    def _act(self, y):
        if self.config.spectral_activation == "relu":
            return autodiff.relu(y)
        return y

    def _pool(self, t, mode):
        return autodiff.max_pool_2(t) if mode == "max" else autodiff.avg_pool_2(t)

    def forward(self, spectral, elevation=None):
        """Run the network; returns a (2,P,P) score tensor (dry, flood)."""
        c = self.config
        x = spectral
        if x.data.ndim != 3 or x.data.shape[0] != c.spectral_channels:
            raise ValueError(
                f"spectral input must be ({c.spectral_channels},P,P), got {x.data.shape}"
            )
        p = x.data.shape[1]
        if x.data.shape[1] != c.patch_size or x.data.shape[2] != c.patch_size:
            raise ValueError(f"expected {c.patch_size}x{c.patch_size} patch, got {x.data.shape[1:]}")
        use_elev = c.use_elevation_path
        xe = None
        if use_elev:
            if elevation is None:
                raise ValueError("model config enables the elevation path; pass elevation")
            xe = elevation
            if xe.data.shape != (1, p, p):
                raise ValueError(f"elevation input must be (1,{p},{p}), got {xe.data.shape}")

        skips = []
        for b in range(c.blocks):
            for layer in self.enc[b]:
                if use_elev:
                    x, xe = layer.forward(x, xe)
                else:
                    x = layer.forward_ungated(x)
                x = self._act(x)
            skips.append(x)
            x = self._pool(x, c.pooling_spectral)
            if use_elev:
                xe = self._pool(xe, c.pooling_elevation)

        for (up_spec, up_elev, layers), b in zip(self.dec, reversed(range(c.blocks))):
            x = autodiff.conv2d_transpose(x, up_spec)
            if use_elev:
                xe = autodiff.conv2d_transpose(xe, up_elev)
            if c.skip_connections:
                x = autodiff.concat_channel(x, skips[b])
            for layer in layers:
                if use_elev:
                    x, xe = layer.forward(x, xe)
                else:
                    x = layer.forward_ungated(x)
                x = self._act(x)

        return autodiff.conv1x1(x, self.head_w, self.head_b)

    def save(self, path):
        autodiff.save_params(path, self._params)

    def load(self, path):
        self.load_state(autodiff.load_params(path))
