"""Classifier and autoencoder networks plus checkpoint persistence.

Classifier::

    conv3x3(32) -> relu -> pool2 -> conv3x3(64) -> relu -> pool2
    -> flatten -> dense(128) -> relu -> dense(K)

Autoencoder::

    encoder: conv3x3(16) -> relu -> pool2 -> conv3x3(32) -> relu -> pool2
             -> flatten -> dense(latent)            (no activation)
    decoder: dense(32*20*16) -> relu -> reshape(32, 20, 16)
             -> up2 -> conv3x3(16) -> relu -> up2 -> conv3x3(8) -> relu
             -> conv3x3(1) -> sigmoid -> (80, 64)

All convolutions use 'same' padding.  Both the classifier and the encoder
start with a fixed, non-trainable standardization ``(x - shift) * scale``
whose constants come from the training split (identity until trained).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Graph, Tensor
from .errors import ContractError, CorruptionError, DimensionError, FormatError
from .features import N_FRAMES, N_MELS

MAGIC = b"AMXC"
CHECKPOINT_VERSION = 1
CLASSIFIER_ARCH = "cnn-classifier-v1"
AUTOENCODER_ARCH = "conv-autoencoder-v1"
DEFAULT_LATENT_DIM = 128
# starting the output sigmoid near the typical (mostly silent) grid level keeps
# the first updates from saturating it
DECODER_OUT_BIAS = -2.0

_DEC_SHAPE = (32, N_MELS // 4, N_FRAMES // 4)


def _classifier_shapes(num_classes: int) -> list[tuple[str, tuple[int, ...]]]:
    flat = 64 * (N_MELS // 4) * (N_FRAMES // 4)
    return [
        ("conv1.k", (32, 1, 3, 3)), ("conv1.b", (32,)),
        ("conv2.k", (64, 32, 3, 3)), ("conv2.b", (64,)),
        ("fc1.w", (128, flat)), ("fc1.b", (128,)),
        ("fc2.w", (num_classes, 128)), ("fc2.b", (num_classes,)),
    ]


def _autoencoder_shapes(latent_dim: int) -> list[tuple[str, tuple[int, ...]]]:
    flat = 32 * (N_MELS // 4) * (N_FRAMES // 4)
    return [
        ("enc.conv1.k", (16, 1, 3, 3)), ("enc.conv1.b", (16,)),
        ("enc.conv2.k", (32, 16, 3, 3)), ("enc.conv2.b", (32,)),
        ("enc.fc.w", (latent_dim, flat)), ("enc.fc.b", (latent_dim,)),
        ("dec.fc.w", (int(np.prod(_DEC_SHAPE)), latent_dim)), ("dec.fc.b", (int(np.prod(_DEC_SHAPE)),)),
        ("dec.conv1.k", (16, 32, 3, 3)), ("dec.conv1.b", (16,)),
        ("dec.conv2.k", (8, 16, 3, 3)), ("dec.conv2.b", (8,)),
        ("dec.out.k", (1, 8, 3, 3)), ("dec.out.b", (1,)),
    ]


def _he_uniform(shapes, seed: int, dtype) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes:
        if len(shape) == 1:
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            values = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(values.astype(dtype), requires_grad=True, name=name)
    return params


@dataclass
class ClassifierModel:
    params: dict[str, Tensor]
    num_classes: int
    seed: int
    arch: str = CLASSIFIER_ARCH
    class_names: list[str] = field(default_factory=list)
    input_norm: tuple[float, float] = (0.0, 1.0)  # (shift, scale)

    @property
    def dtype(self):
        return self.params["conv1.k"].data.dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "ClassifierModel":
        params = {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.params.items()}
        return ClassifierModel(params, self.num_classes, self.seed, self.arch, list(self.class_names),
                               self.input_norm)

    def logits(self, g: Graph, x: Tensor) -> Tensor:
        """Logits for a grid ``(80, 64)`` -> ``(K,)`` or a batch ``(B, 80, 64)`` -> ``(B, K)``."""
        batched = _check_grid(x, "classifier")
        p = self.params
        n = x.shape[0] if batched else 1
        h = g.reshape(_standardize(g, x, self.input_norm), (n, 1, N_MELS, N_FRAMES))
        h = g.max_pool2d(g.relu(g.conv2d(h, p["conv1.k"], p["conv1.b"], padding="same")), 2)
        h = g.max_pool2d(g.relu(g.conv2d(h, p["conv2.k"], p["conv2.b"], padding="same")), 2)
        h = g.reshape(h, (n, -1))
        h = g.relu(g.dense(h, p["fc1.w"], p["fc1.b"]))
        out = g.dense(h, p["fc2.w"], p["fc2.b"])
        return out if batched else g.reshape(out, (self.num_classes,))


@dataclass
class AutoencoderModel:
    params: dict[str, Tensor]
    latent_dim: int
    seed: int
    arch: str = AUTOENCODER_ARCH
    input_norm: tuple[float, float] = (0.0, 1.0)

    @property
    def dtype(self):
        return self.params["enc.fc.w"].data.dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "AutoencoderModel":
        params = {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.params.items()}
        return AutoencoderModel(params, self.latent_dim, self.seed, self.arch, self.input_norm)

    def encode(self, g: Graph, x: Tensor) -> Tensor:
        batched = _check_grid(x, "encoder")
        p = self.params
        n = x.shape[0] if batched else 1
        h = g.reshape(_standardize(g, x, self.input_norm), (n, 1, N_MELS, N_FRAMES))
        h = g.max_pool2d(g.relu(g.conv2d(h, p["enc.conv1.k"], p["enc.conv1.b"], padding="same")), 2)
        h = g.max_pool2d(g.relu(g.conv2d(h, p["enc.conv2.k"], p["enc.conv2.b"], padding="same")), 2)
        h = g.reshape(h, (n, -1))
        z = g.dense(h, p["enc.fc.w"], p["enc.fc.b"])  # bottleneck stays linear
        return z if batched else g.reshape(z, (self.latent_dim,))

    def decode(self, g: Graph, z: Tensor) -> Tensor:
        if z.data.ndim not in (1, 2) or z.shape[-1] != self.latent_dim:
            raise DimensionError(f"decoder: expected latent shape ({self.latent_dim},) or (B, {self.latent_dim}), "
                                 f"got {z.shape}")
        batched = z.data.ndim == 2
        p = self.params
        n = z.shape[0] if batched else 1
        h = g.reshape(z, (n, self.latent_dim))
        h = g.relu(g.dense(h, p["dec.fc.w"], p["dec.fc.b"]))
        h = g.reshape(h, (n, *_DEC_SHAPE))
        h = g.relu(g.conv2d(g.upsample2d(h, 2), p["dec.conv1.k"], p["dec.conv1.b"], padding="same"))
        h = g.relu(g.conv2d(g.upsample2d(h, 2), p["dec.conv2.k"], p["dec.conv2.b"], padding="same"))
        h = g.sigmoid(g.conv2d(h, p["dec.out.k"], p["dec.out.b"], padding="same"))
        return g.reshape(h, (n, N_MELS, N_FRAMES) if batched else (N_MELS, N_FRAMES))


def _standardize(g: Graph, x: Tensor, norm: tuple[float, float]) -> Tensor:
    shift, scale = norm
    if shift == 0.0 and scale == 1.0:
        return x
    return g.affine(x, scale, -shift * scale)


def input_normalization(x: np.ndarray) -> tuple[float, float]:
    """``(mean, 1/std)`` of a grid stack, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    std = float(x.std())
    return float(x.mean()), (1.0 / std if std > 0 else 1.0)


def _check_grid(x: Tensor, who: str) -> bool:
    if x.shape[-2:] != (N_MELS, N_FRAMES) or x.data.ndim not in (2, 3):
        raise DimensionError(f"{who}: expected grid shape ({N_MELS}, {N_FRAMES}) or (B, {N_MELS}, {N_FRAMES}), "
                             f"got {x.shape}")
    return x.data.ndim == 3


def init_classifier(seed: int, num_classes: int, dtype=np.float32,
                    class_names: list[str] | None = None) -> ClassifierModel:
    if num_classes < 2:
        raise ContractError(f"classifier needs at least 2 classes, got {num_classes}")
    params = _he_uniform(_classifier_shapes(num_classes), seed, dtype)
    return ClassifierModel(params, num_classes, seed, class_names=list(class_names or []))


def init_autoencoder(seed: int, latent_dim: int = DEFAULT_LATENT_DIM, dtype=np.float32) -> AutoencoderModel:
    if latent_dim < 1:
        raise ContractError(f"latent_dim must be positive, got {latent_dim}")
    params = _he_uniform(_autoencoder_shapes(latent_dim), seed, dtype)
    params["dec.out.b"].data[:] = DECODER_OUT_BIAS
    return AutoencoderModel(params, latent_dim, seed)


def _as_input(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class ForwardOutput:
    logits: np.ndarray
    probs: np.ndarray


def classifier_forward(m: ClassifierModel, x) -> ForwardOutput:
    g = Graph(grad=False)
    logits = m.logits(g, _as_input(x, m.dtype))
    # probabilities in float64 so they sum to 1 within 1e-9 for any precision
    probs = g.softmax(Tensor(logits.data.astype(np.float64)))
    return ForwardOutput(logits.data, probs.data)


def predict(m: ClassifierModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per grid of a ``(N, 80, 64)`` stack; ties go to the lowest index."""
    x = np.asarray(x)
    out = [classifier_forward(m, x[i:i + batch_size]).probs.argmax(axis=-1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def encoder_forward(m: AutoencoderModel, x) -> np.ndarray:
    return m.encode(Graph(grad=False), _as_input(x, m.dtype)).data


def decoder_forward(m: AutoencoderModel, z) -> np.ndarray:
    return m.decode(Graph(grad=False), _as_input(z, m.dtype)).data


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model, path) -> None:
    """Write ``AMXC`` | u32 version | u32 meta length | JSON meta | float32 LE tensors."""
    if isinstance(model, ClassifierModel):
        meta = {"arch": model.arch, "K": model.num_classes, "latent_dim": None, "seed": model.seed,
                "class_names": list(model.class_names), "input_norm": list(model.input_norm)}
    elif isinstance(model, AutoencoderModel):
        meta = {"arch": model.arch, "K": None, "latent_dim": model.latent_dim, "seed": model.seed,
                "input_norm": list(model.input_norm)}
    else:
        raise ContractError(f"cannot checkpoint object of type {type(model).__name__}")
    meta["tensors"] = [[name, list(t.shape)] for name, t in model.params.items()]
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} != supported version {CHECKPOINT_VERSION}")
    if 12 + meta_len > len(blob):
        raise CorruptionError(f"{path}: metadata length {meta_len} exceeds file size {len(blob)}")
    try:
        meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
        manifest = [(str(name), tuple(int(d) for d in shape)) for name, shape in meta["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata ({exc})") from exc
    payload = blob[12 + meta_len:]
    declared = sum(int(np.prod(shape)) for _, shape in manifest)
    if len(payload) != 4 * declared:
        raise CorruptionError(f"{path}: header declares {len(manifest)} tensors ({declared} values) "
                              f"but payload holds {len(payload) / 4:g} values")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    params, offset = {}, 0
    for name, shape in manifest:
        n = int(np.prod(shape))
        params[name] = Tensor(flat[offset:offset + n].reshape(shape).copy(), requires_grad=True, name=name)
        offset += n

    arch = meta.get("arch")
    try:
        norm = tuple(float(v) for v in meta.get("input_norm", (0.0, 1.0)))
        if len(norm) != 2:
            raise ValueError(norm)
    except (TypeError, ValueError) as exc:
        raise CorruptionError(f"{path}: malformed input_norm {meta.get('input_norm')!r}") from exc
    if arch == CLASSIFIER_ARCH:
        expected = _classifier_shapes(int(meta["K"]))
        model = ClassifierModel(params, int(meta["K"]), int(meta["seed"]), arch, list(meta.get("class_names", [])),
                                norm)
    elif arch == AUTOENCODER_ARCH:
        expected = _autoencoder_shapes(int(meta["latent_dim"]))
        model = AutoencoderModel(params, int(meta["latent_dim"]), int(meta["seed"]), arch, norm)
    else:
        raise FormatError(f"{path}: unknown architecture {arch!r}")
    if manifest != expected:
        raise CorruptionError(f"{path}: tensor manifest does not match architecture {arch}")
    return model
