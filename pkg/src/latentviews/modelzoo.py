"""Toy differentiable maps: encoder, blob generator, inverter, discriminator,
perceptual net, predictor, and style mapper.

Conventions used across the package:

* Images are float tensors of shape ``(C, H, W)`` (or batched ``(B, C, H, W)``)
  with values in ``[0, 1]``.
* Embeddings live on the unit hypersphere after :func:`encode`.
* Latent codes are flat float vectors ``(M,)`` or ``(B, M)``.

All maps run in double precision by default so that finite-difference
gradient checks resolve cleanly; pass ``dtype=torch.float32`` to the builders
for faster training runs.
"""

from __future__ import annotations

import io
import json
import logging
import struct

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = torch.float64

CHECKPOINT_MAGIC = b"LVCKPT01"

# Norms below this are treated as degenerate in normalize_embedding.
_ZERO_NORM_EPS = 1e-9


class ConfigurationError(ValueError):
    """Raised when inputs are incompatible with a map's declared shapes."""


class GradientCheckError(RuntimeError):
    """Raised when a gradient check encounters a non-finite gradient."""


class DifferentiableMap(nn.Module):
    """Base class for every network in the zoo.

    Subclasses set ``input_shape`` / ``output_shape`` (tuples, no batch dim)
    and implement ``forward`` on batched input. Evaluation is deterministic
    given (input, parameters), and every op used is smooth so autograd
    gradients agree with central finite differences.
    """

    input_shape: tuple[int, ...] = ()
    output_shape: tuple[int, ...] = ()

    @property
    def architecture_id(self) -> str:
        return f"{type(self).__name__}(in={list(self.input_shape)},out={list(self.output_shape)})"

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return getattr(self, "_dtype", DEFAULT_DTYPE)

    def parameter_vector(self) -> np.ndarray:
        """Flat copy of all parameters as a float64 numpy vector."""
        if sum(p.numel() for p in self.parameters()) == 0:
            return np.zeros(0)
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).double().numpy().copy()

    def load_parameter_vector(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        total = sum(p.numel() for p in self.parameters())
        if vec.size != total:
            raise ConfigurationError(f"parameter vector has {vec.size} entries, expected {total}")
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                chunk = torch.from_numpy(vec[offset:offset + n]).to(p.dtype).reshape(p.shape)
                p.copy_(chunk)
                offset += n

    def parameter_shapes(self) -> list[list[int]]:
        return [list(p.shape) for p in self.parameters()]


def _ensure_batch(x: torch.Tensor, shape: tuple[int, ...]):
    """Add a batch dim when ``x`` matches the unbatched shape; return (x, was_single)."""
    if x.dim() == len(shape):
        return x.unsqueeze(0), True
    return x, False


def _check_input(m: DifferentiableMap, x: torch.Tensor, name: str) -> None:
    if tuple(x.shape[-len(m.input_shape):]) != tuple(m.input_shape):
        raise ConfigurationError(
            f"{name}: input shape {tuple(x.shape)} incompatible with map input {m.input_shape}"
        )
    if not torch.isfinite(x).all():
        raise ConfigurationError(f"{name}: input contains non-finite values")


class ConvEncoder(DifferentiableMap):
    """Small convolutional encoder f: image -> R^K.

    Three stride-2 conv blocks with tanh activations (smooth everywhere, so
    finite-difference checks are clean) followed by a linear projection head.
    """

    def __init__(self, image_shape=(3, 32, 32), embed_dim: int = 32,
                 channels=(8, 16, 32), dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        c, h, w = image_shape
        self.input_shape = tuple(image_shape)
        self.output_shape = (embed_dim,)
        layers: list[nn.Module] = []
        prev = c
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.Tanh()]
            prev = ch
            h, w = (h + 1) // 2, (w + 1) // 2
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Linear(prev * h * w, embed_dim)
        self.channels = tuple(channels)
        self.to(dtype)

    @property
    def architecture_id(self) -> str:
        return (f"conv_encoder(in={list(self.input_shape)},k={self.output_shape[0]},"
                f"ch={list(self.channels)})")

    def forward(self, x):
        h = self.backbone(x)
        return self.head(h.flatten(1))


class BlobGenerator(DifferentiableMap):
    """Fixed analytic generator g: latent -> image, a sum of Gaussian blobs.

    Each blob consumes 6 latent coordinates: (cx, cy, size, r, g, b). Centers
    are squashed into the image interior via tanh, sizes and colors via
    sigmoid, and the per-channel blob intensities are combined with
    ``1 - exp(-sum)`` which keeps values in [0, 1) while staying smooth.
    There are no learnable parameters; the map is the same in every process.
    """

    PARAMS_PER_BLOB = 6

    def __init__(self, latent_dim: int = 12, image_shape=(3, 32, 32),
                 dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        if latent_dim % self.PARAMS_PER_BLOB != 0:
            raise ConfigurationError(
                f"latent_dim must be a multiple of {self.PARAMS_PER_BLOB}, got {latent_dim}")
        self.input_shape = (latent_dim,)
        self.output_shape = tuple(image_shape)
        self.n_blobs = latent_dim // self.PARAMS_PER_BLOB
        c, h, w = image_shape
        ys = (torch.arange(h, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        self.register_buffer("grid_y", gy)
        self.register_buffer("grid_x", gx)
        self._dtype = dtype

    @property
    def architecture_id(self) -> str:
        return f"blob_generator(m={self.input_shape[0]},out={list(self.output_shape)})"

    def forward(self, w):
        b = w.shape[0]
        c, h, _ = self.output_shape
        blobs = w.reshape(b, self.n_blobs, self.PARAMS_PER_BLOB)
        cx = 0.5 + 0.35 * torch.tanh(blobs[..., 0])          # (B, n_blobs)
        cy = 0.5 + 0.35 * torch.tanh(blobs[..., 1])
        # blobs large enough that random-resized crops rarely miss them; an
        # all-background crop carries no signal and invites encoder collapse
        sigma = 0.06 + 0.18 * torch.sigmoid(blobs[..., 2])
        color = torch.sigmoid(blobs[..., 3:3 + c])           # (B, n_blobs, C)
        dx = self.grid_x - cx[..., None, None]               # (B, n_blobs, H, W)
        dy = self.grid_y - cy[..., None, None]
        intensity = torch.exp(-(dx ** 2 + dy ** 2) / (2.0 * sigma[..., None, None] ** 2))
        accum = (color[..., None, None] * intensity[:, :, None]).sum(dim=1)  # (B, C, H, W)
        return 1.0 - torch.exp(-accum)


class ConvInverter(DifferentiableMap):
    """Inverter e: image -> latent, trained to approximately undo the generator."""

    def __init__(self, image_shape=(3, 32, 32), latent_dim: int = 12,
                 channels=(8, 16, 32), dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        c, h, w = image_shape
        self.input_shape = tuple(image_shape)
        self.output_shape = (latent_dim,)
        layers: list[nn.Module] = []
        prev = c
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.Tanh()]
            prev = ch
            h, w = (h + 1) // 2, (w + 1) // 2
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Linear(prev * h * w, 64), nn.Tanh(), nn.Linear(64, latent_dim))
        self.channels = tuple(channels)
        self.to(dtype)

    @property
    def architecture_id(self) -> str:
        return (f"conv_inverter(in={list(self.input_shape)},m={self.output_shape[0]},"
                f"ch={list(self.channels)})")

    def forward(self, x):
        h = self.backbone(x)
        return self.head(h.flatten(1))


class ConvDiscriminator(DifferentiableMap):
    """Discriminator d: image -> pre-activation logit (scalar per sample)."""

    def __init__(self, image_shape=(3, 32, 32), channels=(8, 16),
                 dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        c, h, w = image_shape
        self.input_shape = tuple(image_shape)
        self.output_shape = (1,)
        layers: list[nn.Module] = []
        prev = c
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.Tanh()]
            prev = ch
            h, w = (h + 1) // 2, (w + 1) // 2
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Linear(prev * h * w, 1)
        self.channels = tuple(channels)
        self.to(dtype)

    @property
    def architecture_id(self) -> str:
        return f"conv_discriminator(in={list(self.input_shape)},ch={list(self.channels)})"

    def forward(self, x):
        h = self.backbone(x)
        return self.head(h.flatten(1))


class RandomPerceptualNet(DifferentiableMap):
    """Frozen randomly-initialized conv feature extractor h.

    Stands in for a pretrained perceptual network as a smooth distance
    surrogate: features of nearby images are nearby. Parameters are frozen at
    construction and never trained.
    """

    def __init__(self, image_shape=(3, 32, 32), channels=(8, 16), feature_dim: int = 64,
                 dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        c, h, w = image_shape
        self.input_shape = tuple(image_shape)
        layers: list[nn.Module] = []
        prev = c
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.Tanh()]
            prev = ch
            h, w = (h + 1) // 2, (w + 1) // 2
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Linear(prev * h * w, feature_dim)
        self.output_shape = (feature_dim,)
        self.channels = tuple(channels)
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def architecture_id(self) -> str:
        return (f"random_perceptual(in={list(self.input_shape)},f={self.output_shape[0]},"
                f"ch={list(self.channels)})")

    def forward(self, x):
        h = self.backbone(x)
        return self.head(h.flatten(1))


class MlpPredictor(DifferentiableMap):
    """Two-layer perceptron used as the SimSiam predictor (K -> K)."""

    def __init__(self, embed_dim: int = 32, hidden_dim: int = 16,
                 dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.input_shape = (embed_dim,)
        self.output_shape = (embed_dim,)
        self.net = nn.Sequential(nn.Linear(embed_dim, hidden_dim), nn.Tanh(),
                                 nn.Linear(hidden_dim, embed_dim))
        self.hidden_dim = hidden_dim
        self.to(dtype)

    @property
    def architecture_id(self) -> str:
        return f"mlp_predictor(k={self.input_shape[0]},h={self.hidden_dim})"

    def forward(self, z):
        return self.net(z)


class StyleMapper(DifferentiableMap):
    """Frozen affine style mapping g1: S -> W used to sample generator latents."""

    def __init__(self, style_dim: int = 8, latent_dim: int = 12,
                 dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.input_shape = (style_dim,)
        self.output_shape = (latent_dim,)
        self.linear = nn.Linear(style_dim, latent_dim)
        self.to(dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def architecture_id(self) -> str:
        return f"style_mapper(s={self.input_shape[0]},m={self.output_shape[0]})"

    def forward(self, s):
        return self.linear(s)


class LinearMap(DifferentiableMap):
    """Plain linear map x -> A x (+ b). Used by tests and analytic oracles."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = False,
                 dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.input_shape = (in_dim,)
        self.output_shape = (out_dim,)
        self.linear = nn.Linear(in_dim, out_dim, bias=bias)
        self.to(dtype)

    @property
    def architecture_id(self) -> str:
        return f"linear_map(in={self.input_shape[0]},out={self.output_shape[0]})"

    def forward(self, x):
        return self.linear(x)


class IdentityMap(DifferentiableMap):
    """Identity on R^n; the degenerate corner for analytic oracles."""

    def __init__(self, dim: int, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.input_shape = (dim,)
        self.output_shape = (dim,)
        self._dtype = dtype

    @property
    def architecture_id(self) -> str:
        return f"identity_map(n={self.input_shape[0]})"

    def forward(self, x):
        return x


def normalize_embedding(z: torch.Tensor) -> torch.Tensor:
    """Project rows of ``z`` onto the unit sphere.

    Zero rows (norm below 1e-9) fall back to the first basis vector and log a
    warning; with random initialization this is a probability-zero event.
    Gradient flows through the normalization of all non-degenerate rows.
    """
    single = z.dim() == 1
    if single:
        z = z.unsqueeze(0)
    norms = z.norm(dim=-1, keepdim=True)
    degenerate = norms.squeeze(-1) < _ZERO_NORM_EPS
    out = z / norms.clamp_min(_ZERO_NORM_EPS)
    if bool(degenerate.any()):
        logger.warning("normalize_embedding: %d zero-norm row(s), using basis fallback",
                       int(degenerate.sum()))
        basis = torch.zeros_like(z)
        basis[..., 0] = 1.0
        out = torch.where(degenerate.unsqueeze(-1), basis, out)
    return out.squeeze(0) if single else out


def encode(f: DifferentiableMap, x: torch.Tensor) -> torch.Tensor:
    """f(x) followed by L2 normalization onto the unit hypersphere."""
    _check_input(f, x, "encode")
    x, single = _ensure_batch(x, f.input_shape)
    z = normalize_embedding(f(x))
    return z.squeeze(0) if single else z


def generate(g: DifferentiableMap, w: torch.Tensor) -> torch.Tensor:
    """Decode latent code(s) through the generator."""
    _check_input(g, w, "generate")
    w, single = _ensure_batch(w, g.input_shape)
    x = g(w)
    return x.squeeze(0) if single else x


def evaluate(m: DifferentiableMap, x: torch.Tensor) -> torch.Tensor:
    """Raw forward pass (no normalization), batch-agnostic like encode/generate."""
    _check_input(m, x, "evaluate")
    x, single = _ensure_batch(x, m.input_shape)
    y = m(x)
    return y.squeeze(0) if single else y


def grad_check(fn, x: torch.Tensor, step: float = 1e-5, coords=None, rng=None) -> float:
    """Compare autograd gradients of a scalar function against central differences.

    ``fn`` maps a tensor to a scalar tensor. Returns the maximum over checked
    coordinates of ``|analytic - numeric| / (|numeric| + 1e-8)``. By default
    every coordinate is checked; pass ``coords`` (flat indices) or an ``rng``
    plus integer ``coords`` count to subsample large inputs.

    Raises :class:`GradientCheckError` (naming the coordinate) if the
    analytic gradient is non-finite.
    """
    x = x.detach().clone().contiguous().requires_grad_(True)
    value = fn(x)
    if value.numel() != 1:
        raise ValueError("grad_check probe must return a scalar")
    (analytic,) = torch.autograd.grad(value, x)
    analytic = analytic.detach().reshape(-1)
    bad = torch.nonzero(~torch.isfinite(analytic), as_tuple=False)
    if bad.numel():
        raise GradientCheckError(f"non-finite analytic gradient at coordinate {int(bad[0])}")

    n = x.numel()
    if coords is None:
        indices = range(n)
    elif isinstance(coords, int):
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(n, size=min(coords, n), replace=False)
    else:
        indices = coords

    flat = x.detach().reshape(-1)
    max_err = 0.0
    for i in indices:
        i = int(i)
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(fn(x.detach()).detach())
        flat[i] = orig - step
        dn = float(fn(x.detach()).detach())
        flat[i] = orig
        numeric = (up - dn) / (2.0 * step)
        if not np.isfinite(numeric):
            raise GradientCheckError(f"non-finite numeric gradient at coordinate {i}")
        err = abs(analytic[i].item() - numeric) / (abs(numeric) + 1e-8)
        max_err = max(max_err, err)
    return max_err


def grad_check_params(m: DifferentiableMap, probe, x: torch.Tensor,
                      step: float = 1e-5, coords=None, rng=None) -> float:
    """grad_check over a map's flat parameter vector at fixed input ``x``."""
    base = m.parameter_vector()
    params = [p for p in m.parameters()]
    value = probe(m(x))
    grads = torch.autograd.grad(value, params, allow_unused=True)
    analytic = np.concatenate([
        (g if g is not None else torch.zeros_like(p)).detach().double().reshape(-1).numpy()
        for g, p in zip(grads, params)
    ])
    if not np.isfinite(analytic).all():
        idx = int(np.flatnonzero(~np.isfinite(analytic))[0])
        raise GradientCheckError(f"non-finite analytic gradient at parameter coordinate {idx}")

    n = base.size
    if coords is None:
        indices = range(n)
    elif isinstance(coords, int):
        if rng is None:
            rng = np.random.default_rng(0)
        indices = rng.choice(n, size=min(coords, n), replace=False)
    else:
        indices = coords

    max_err = 0.0
    try:
        for i in indices:
            i = int(i)
            vec = base.copy()
            vec[i] += step
            m.load_parameter_vector(vec)
            up = float(probe(m(x)).detach())
            vec[i] -= 2.0 * step
            m.load_parameter_vector(vec)
            dn = float(probe(m(x)).detach())
            numeric = (up - dn) / (2.0 * step)
            err = abs(analytic[i] - numeric) / (abs(numeric) + 1e-8)
            max_err = max(max_err, err)
    finally:
        m.load_parameter_vector(base)
    return max_err


def save_checkpoint(m: DifferentiableMap, path, seed: int | None = None) -> None:
    """Write parameters as little-endian float32 prefixed by a JSON header."""
    header = {
        "magic": "latentviews-checkpoint",
        "version": 1,
        "architecture": m.architecture_id,
        "shapes": m.parameter_shapes(),
        "seed": seed,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    params = m.parameter_vector().astype("<f4")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    buf.write(params.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(m: DifferentiableMap, path) -> dict:
    """Load a checkpoint into ``m``; returns the header. Architecture must match."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"not a checkpoint file: {path}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        raw = fh.read()
    if header["architecture"] != m.architecture_id:
        raise ConfigurationError(
            f"checkpoint architecture {header['architecture']!r} "
            f"does not match {m.architecture_id!r}")
    if header["shapes"] != m.parameter_shapes():
        raise ConfigurationError("checkpoint parameter shapes do not match the map")
    params = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    m.load_parameter_vector(params)
    return header


def build_toy_zoo(image_shape=(3, 32, 32), embed_dim: int = 32, latent_dim: int = 12,
                  style_dim: int = 8, seed: int = 0,
                  dtype: torch.dtype = DEFAULT_DTYPE) -> dict:
    """Construct the full set of toy maps with deterministic initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        zoo = {
            "encoder": ConvEncoder(image_shape, embed_dim, dtype=dtype),
            "generator": BlobGenerator(latent_dim, image_shape, dtype=dtype),
            "inverter": ConvInverter(image_shape, latent_dim, dtype=dtype),
            "discriminator": ConvDiscriminator(image_shape, dtype=dtype),
            "perceptual": RandomPerceptualNet(image_shape, dtype=dtype),
            "predictor": MlpPredictor(embed_dim, dtype=dtype),
            "style_mapper": StyleMapper(style_dim, latent_dim, dtype=dtype),
        }
    return zoo
