"""The six ablation architectures: unimodal baselines, concatenation, attention and FiLM-gated fusion."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .lattice import ConfigError

PAPER_CHANNELS = (32, 64, 128, 256)
DESK_CHANNELS = (2, 4, 8, 16)
NUM_FEATURES = 6
NUM_HIDDEN = 64
NUM_DIM = 32
FLAT_DIM = 128
ATTN_HEADS = 8
MIN_SIDE = 16  # four 2x poolings


class ArchKind(str, Enum):
    NUMERIC_ONLY = "numeric_only"
    IMAGE_ONLY = "image_only"
    CONCAT_FUSION = "concat_fusion"
    ATTENTION_FUSION = "attention_fusion"
    LATE_FILM = "late_film"
    HIER_FILM = "hier_film"

    @classmethod
    def parse(cls, value: "str | ArchKind") -> "ArchKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if key in (member.value, member.name.lower(), member.value.replace("_", "")):
                return member
        raise ConfigError(f"unknown architecture {value!r}; choose from {[m.value for m in cls]}")

    @property
    def uses_images(self) -> bool:
        return self is not ArchKind.NUMERIC_ONLY

    @property
    def uses_numeric(self) -> bool:
        return self is not ArchKind.IMAGE_ONLY

    @property
    def is_film(self) -> bool:
        return self in (ArchKind.LATE_FILM, ArchKind.HIER_FILM)


@dataclass(frozen=True)
class ModelSpec:
    arch: ArchKind
    channels: tuple[int, ...] = PAPER_CHANNELS
    input_shape: tuple[int, int, int] = (32, 32, 32)  # (depth, height, width)
    head_channels: int = 64
    dropout: float = 0.4
    gate: bool = True  # LateFilm only; False gives the ungated dual-CNN baseline

    def __post_init__(self):
        object.__setattr__(self, "arch", ArchKind.parse(self.arch))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError("channels must list four positive widths")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (depth, height, width)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        check_spatial(self.input_shape)

    def to_json(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.value
        d["channels"] = list(self.channels)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def check_spatial(shape) -> None:
    for name, n in zip(("depth", "height", "width"), shape):
        if n < MIN_SIDE:
            raise ConfigError(f"stack {name}={n} is too small for four 2x poolings (need >= {MIN_SIDE})")


def encoded_shape(input_shape) -> tuple[int, int, int]:
    return tuple(int(n) // 16 for n in input_shape)


class NumericEncoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(NUM_FEATURES, NUM_HIDDEN)
        self.fc2 = nn.Linear(NUM_HIDDEN, NUM_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


class ConvBlock(nn.Module):
    """conv3 -> instance norm -> ReLU; pooling lives in the encoder so FiLM can sit before it."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, kernel_size=3, stride=1, padding=1)
        self.norm = nn.InstanceNorm3d(c_out, eps=1e-5, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.norm(self.conv(x)))


class CNNEncoder(nn.Module):
    def __init__(self, channels=PAPER_CHANNELS):
        super().__init__()
        widths = (1, *channels)
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.pool = nn.MaxPool3d(2)

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].conv.out_channels

    def forward(self, x: torch.Tensor, films=None) -> torch.Tensor:
        x = as_volume(x)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if films is not None:
                gamma, beta = films[i]
                x = film_modulate(x, gamma, beta)
            x = self.pool(x)
        return x


class FlatEncoder(nn.Module):
    """Spatial CNN followed by flatten and one affine layer to 128."""

    def __init__(self, channels, input_shape):
        super().__init__()
        self.cnn = CNNEncoder(channels)
        d, h, w = encoded_shape(input_shape)
        self.fc = nn.Linear(channels[-1] * d * h * w, FLAT_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.cnn(x), 1))


def as_volume(x: torch.Tensor) -> torch.Tensor:
    """(B, D, H, W) or (B, 1, D, H, W) -> (B, 1, D, H, W), checking the spatial size."""
    if x.dim() == 4:
        x = x.unsqueeze(1)
    if x.dim() != 5 or x.shape[1] != 1:
        raise ConfigError(f"expected a (batch, [1,] depth, height, width) stack, got {tuple(x.shape)}")
    check_spatial(x.shape[2:])
    return x


def film_modulate(f_visual: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """gamma[c] * f[c, x] + beta[c]; gamma/beta are (C,) or (B, C), f is (B, C, ...) or (C, ...)."""
    c_axis = 1 if gamma.dim() == 2 else 0
    if f_visual.shape[c_axis] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise ConfigError(f"FiLM widths {tuple(gamma.shape)}/{tuple(beta.shape)} do not match "
                          f"map channels {f_visual.shape[c_axis]}")
    view = list(gamma.shape) + [1] * (f_visual.dim() - gamma.dim())
    return gamma.reshape(view) * f_visual + beta.reshape(view)


class FiLMProjector(nn.Module):
    """Two separate affine maps from the physics vector to (gamma, beta)."""

    def __init__(self, width: int):
        super().__init__()
        self.gamma = nn.Linear(NUM_DIM, width)
        self.beta = nn.Linear(NUM_DIM, width)

    def reset_identity_bias(self) -> None:
        with torch.no_grad():
            self.gamma.bias.fill_(1.0)
            self.beta.bias.zero_()

    def forward(self, f_num: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.gamma(f_num), self.beta(f_num)


def mlp_head(n_in: int, hidden: int = 128) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), nn.ReLU(), nn.Linear(hidden, 1))


class SpatialHead(nn.Module):
    """1x1 conv -> flatten -> dropout -> FC(128) -> FC(1)."""

    def __init__(self, c_in: int, spatial, head_channels: int = 64, dropout: float = 0.4):
        super().__init__()
        d, h, w = spatial
        self.conv = nn.Conv3d(c_in, head_channels, kernel_size=1)
        self.dropout = nn.Dropout(dropout)
        self.fc1 = nn.Linear(head_channels * d * h * w, FLAT_DIM)
        self.fc2 = nn.Linear(FLAT_DIM, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.flatten(torch.relu(self.conv(x)), 1)
        return self.fc2(torch.relu(self.fc1(self.dropout(x))))


class CPGAModel(nn.Module):
    """One module for every ArchKind; ``forward`` returns predictions of shape (B,)."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        a = spec.arch
        ch, shape = spec.channels, spec.input_shape
        if a.uses_numeric:
            self.num = NumericEncoder()
        if a is ArchKind.NUMERIC_ONLY:
            self.head = nn.Sequential(nn.Linear(NUM_DIM, 16), nn.ReLU(), nn.Linear(16, 1))
        elif a in (ArchKind.IMAGE_ONLY, ArchKind.CONCAT_FUSION, ArchKind.ATTENTION_FUSION):
            self.enc_orig = FlatEncoder(ch, shape)
            self.enc_conv = FlatEncoder(ch, shape)
            visual = 2 * FLAT_DIM
            if a is ArchKind.ATTENTION_FUSION:
                self.query = nn.Linear(NUM_DIM, visual)
                self.attn = nn.MultiheadAttention(visual, ATTN_HEADS, batch_first=True)
            self.head = mlp_head(visual + (NUM_DIM if a.uses_numeric else 0))
        else:
            self.enc_orig = CNNEncoder(ch)
            self.enc_conv = CNNEncoder(ch)
            if a is ArchKind.LATE_FILM:
                if spec.gate:
                    self.film = FiLMProjector(2 * ch[-1])
            else:
                self.films_orig = nn.ModuleList(FiLMProjector(c) for c in ch)
                self.films_conv = nn.ModuleList(FiLMProjector(c) for c in ch)
            self.head = SpatialHead(2 * ch[-1], encoded_shape(shape), spec.head_channels, spec.dropout)
        # prediction = out_shift + out_scale * head output; training sets these from the train targets
        self.register_buffer("out_shift", torch.tensor(0.0))
        self.register_buffer("out_scale", torch.tensor(1.0))

    def set_output_affine(self, shift: float, scale: float) -> None:
        if not scale > 0:
            raise ConfigError("output scale must be positive")
        self.out_shift.fill_(float(shift))
        self.out_scale.fill_(float(scale))

    # ------------------------------------------------------------------
    def projectors(self) -> list[FiLMProjector]:
        out = []
        for m in self.modules():
            if isinstance(m, FiLMProjector):
                out.append(m)
        return out

    def _check_inputs(self, numeric, orig, conv) -> None:
        a = self.spec.arch
        missing = []
        if a.uses_numeric and numeric is None:
            missing.append("numeric features")
        if a.uses_images and (orig is None or conv is None):
            missing.append("original and transformed stacks")
        if missing:
            raise ConfigError(f"{a.value} requires {' and '.join(missing)}")

    def forward(self, numeric=None, orig=None, conv=None, internals: dict | None = None) -> torch.Tensor:
        """Predict DoC. If ``internals`` is a dict it is filled with intermediate tensors."""
        self._check_inputs(numeric, orig, conv)
        return self.out_shift + self.out_scale * self._raw(numeric, orig, conv, internals)

    def _raw(self, numeric, orig, conv, internals: dict | None) -> torch.Tensor:
        a = self.spec.arch
        keep = internals if internals is not None else {}
        f_num = self.num(numeric) if a.uses_numeric else None
        keep["f_num"] = f_num

        if a is ArchKind.NUMERIC_ONLY:
            return self.head(f_num).squeeze(-1)

        if a in (ArchKind.IMAGE_ONLY, ArchKind.CONCAT_FUSION, ArchKind.ATTENTION_FUSION):
            f_visual = torch.cat([self.enc_orig(orig), self.enc_conv(conv)], dim=1)
            keep["f_visual"] = f_visual
            if a is ArchKind.IMAGE_ONLY:
                return self.head(f_visual).squeeze(-1)
            if a is ArchKind.ATTENTION_FUSION:
                q = self.query(f_num).unsqueeze(1)
                kv = f_visual.unsqueeze(1)
                f_att, _ = self.attn(q, kv, kv, need_weights=False)
                f_visual = f_visual + f_att.squeeze(1)
                keep["f_att"] = f_att.squeeze(1)
                keep["f_refined"] = f_visual
            return self.head(torch.cat([f_visual, f_num], dim=1)).squeeze(-1)

        if a is ArchKind.LATE_FILM:
            f_visual = self._dual(orig, conv)
            keep["f_visual"] = f_visual
            if self.spec.gate:
                gamma, beta = self.film(f_num)
                keep["gamma"], keep["beta"] = gamma, beta
                f_visual = film_modulate(f_visual, gamma, beta)
            return self.head(f_visual).squeeze(-1)

        films_o = [p(f_num) for p in self.films_orig]
        films_c = [p(f_num) for p in self.films_conv]
        keep["gamma_blocks"] = [torch.cat([go, gc], dim=1) for (go, _), (gc, _) in zip(films_o, films_c)]
        f_visual = self._dual(orig, conv, films_o, films_c)
        keep["f_visual"] = f_visual
        return self.head(f_visual).squeeze(-1)

    def _dual(self, orig, conv, films_o=None, films_c=None) -> torch.Tensor:
        return torch.cat([self.enc_orig(orig, films_o), self.enc_conv(conv, films_c)], dim=1)


def build_model(spec: ModelSpec, seed: int = 0) -> CPGAModel:
    """Seeded construction: PyTorch's fan-in-scaled uniform init, FiLM gates start at identity."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CPGAModel(spec)
    for p in model.projectors():
        p.reset_identity_bias()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_counts(channels=PAPER_CHANNELS, input_shape=(32, 32, 32)) -> dict[str, int]:
    return {a.value: parameter_count(CPGAModel(ModelSpec(a, channels, input_shape))) for a in ArchKind}


def describe(spec: ModelSpec) -> str:
    """Layer-by-layer output shapes for one forward pass at batch size 1."""
    model = build_model(spec)
    model.eval()
    rows: list[tuple[str, str, str, int]] = []
    hooks = []
    for name, m in model.named_modules():
        if name and (not list(m.children()) or isinstance(m, nn.MultiheadAttention)):
            def hook(mod, _inp, out, name=name):
                shape = tuple(out[0].shape if isinstance(out, tuple) else out.shape)
                rows.append((name, type(mod).__name__, str(shape), sum(p.numel() for p in mod.parameters())))
            hooks.append(m.register_forward_hook(hook))
    x_num = torch.zeros(1, NUM_FEATURES)
    x_img = torch.zeros(1, 1, *spec.input_shape)
    with torch.no_grad():
        model(x_num, x_img, x_img)
    for h in hooks:
        h.remove()
    w = max(len(r[0]) for r in rows)
    lines = [f"{spec.arch.value}: channels={list(spec.channels)} input={list(spec.input_shape)}",
             f"{'layer':<{w}}  {'type':<20} {'output':<24} params"]
    lines += [f"{n:<{w}}  {t:<20} {s:<24} {p}" for n, t, s, p in rows]
    lines.append(f"total parameters: {parameter_count(model)}")
    return "\n".join(lines)


# ----------------------------------------------------------------------
# checkpoint container: magic, u32 version, u64 header length, JSON header, float32 LE blobs

MAGIC = b"CPGACKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    state: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: CPGAModel, **metadata) -> "Checkpoint":
        state = {k: v.detach().cpu().contiguous().numpy().astype(np.float32).copy()
                 for k, v in model.state_dict().items()}
        return cls(model.spec, state, metadata)

    def to_model(self) -> CPGAModel:
        model = CPGAModel(self.spec)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        model.eval()
        return model

    def to_bytes(self) -> bytes:
        names = sorted(self.state)
        table, offset = [], 0
        for n in names:
            nbytes = self.state[n].size * 4
            table.append({"name": n, "shape": list(self.state[n].shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes
        header = json.dumps({"spec": self.spec.to_json(), "metadata": self.metadata, "params": table},
                            sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        buf.write(header)
        for n in names:
            buf.write(np.ascontiguousarray(self.state[n], dtype="<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", data, pos)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos += struct.calcsize("<IQ")
        header = json.loads(data[pos:pos + hlen])
        base = pos + hlen
        state = {}
        for entry in header["params"]:
            start = base + entry["offset"]
            arr = np.frombuffer(data[start:start + entry["nbytes"]], dtype="<f4")
            state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        return cls(ModelSpec.from_json(header["spec"]), state, header["metadata"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
