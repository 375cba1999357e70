"""
Автоэнкодер ViT/MAE для предсказания приоров движения по семантическим кропам.

Порядок параметров (он же порядок в файле весов):
  patch_embed.weight [p²·C, E], patch_embed.bias [E]
  encoder.{i}.*  для i < depth (см. _block_shapes)
  decoder_embed.weight [E, E_dec], decoder_embed.bias [E_dec]
  mask_token [E_dec]
  decoder.{i}.*  для i < decoder_depth
  decoder.norm.weight [E_dec], decoder.norm.bias [E_dec]
  head.{target}.weight [E_dec, p²], head.{target}.bias [p²]  в порядке heads_out
Позиционные таблицы фиксированные (2D sin-cos) и в параметры не входят.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from motionprior_hub.core import tensor as T
from motionprior_hub.core.exceptions import ConfigurationError, ContractError
from motionprior_hub.core.mapgrid import NUM_CLASSES, TARGETS
from motionprior_hub.core.tensor import Tensor

BACKBONES: dict[str, dict[str, int]] = {
    "desk": {
        "embed_dim": 64,
        "depth": 4,
        "num_heads": 4,
        "decoder_embed_dim": 64,
        "decoder_num_heads": 4,
    },
    "base": {
        "embed_dim": 768,
        "depth": 12,
        "num_heads": 12,
        "decoder_embed_dim": 512,
        "decoder_num_heads": 16,
    },
    "large": {
        "embed_dim": 1024,
        "depth": 24,
        "num_heads": 16,
        "decoder_embed_dim": 512,
        "decoder_num_heads": 16,
    },
    "huge": {
        "embed_dim": 1280,
        "depth": 32,
        "num_heads": 16,
        "decoder_embed_dim": 512,
        "decoder_num_heads": 16,
    },
}

LOSS_POLICIES = ("auto", "all", "masked")


@dataclass(frozen=True)
class ArchConfig:
    crop_size: int = 64
    patch_size: int = 8
    in_channels: int = NUM_CLASSES
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    decoder_embed_dim: int = 64
    decoder_depth: int = 1
    decoder_num_heads: int = 4
    mlp_ratio: int = 4
    mask_ratio: float = 0.0
    heads_out: tuple[str, ...] = ("occupancy",)
    layer_norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        object.__setattr__(self, "heads_out", tuple(self.heads_out))
        self.validate()

    @classmethod
    def from_backbone(cls, backbone: str, **overrides: object) -> ArchConfig:
        if backbone not in BACKBONES:
            raise ConfigurationError(
                f"Неизвестный backbone '{backbone}', допустимые: {', '.join(BACKBONES)}"
            )
        params: dict[str, object] = dict(BACKBONES[backbone])
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**params)

    def validate(self) -> None:
        if self.crop_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("crop_size и patch_size должны быть > 0")
        if self.crop_size % self.patch_size:
            raise ConfigurationError(
                f"crop_size {self.crop_size} не делится на patch_size {self.patch_size}"
            )
        for dim, heads, label in (
            (self.embed_dim, self.num_heads, "encoder"),
            (self.decoder_embed_dim, self.decoder_num_heads, "decoder"),
        ):
            if heads <= 0 or dim % heads:
                raise ConfigurationError(
                    f"{label}: размерность {dim} не делится на число голов {heads}"
                )
            if dim % 4:
                raise ConfigurationError(
                    f"{label}: размерность {dim} должна делиться на 4 (sin-cos таблица)"
                )
        if self.depth < 0 or self.decoder_depth < 0:
            raise ConfigurationError("Глубина не может быть отрицательной")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio {self.mask_ratio} вне [0, 1)")
        if not self.heads_out or any(h not in TARGETS for h in self.heads_out):
            raise ConfigurationError(
                f"heads_out {self.heads_out} должны быть из {', '.join(TARGETS)}"
            )
        if len(set(self.heads_out)) != len(self.heads_out):
            raise ConfigurationError(f"Повтор в heads_out {self.heads_out}")

    @property
    def grid_size(self) -> int:
        return self.crop_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_channels

    @property
    def pixels_per_patch(self) -> int:
        return self.patch_size**2

    def expected_param_count(self) -> int:
        """Число обучаемых параметров в замкнутой форме."""
        e, d = self.embed_dim, self.decoder_embed_dim
        p2 = self.pixels_per_patch

        def block(dim: int) -> int:
            hidden = dim * self.mlp_ratio
            attn = 4 * (dim * dim + dim)
            mlp = dim * hidden + hidden + hidden * dim + dim
            return attn + mlp + 4 * dim

        return (
            self.patch_dim * e
            + e
            + self.depth * block(e)
            + e * d
            + d
            + d
            + self.decoder_depth * block(d)
            + 2 * d
            + len(self.heads_out) * (d * p2 + p2)
        )

    def to_dict(self) -> dict[str, object]:
        return {
            "crop_size": self.crop_size,
            "patch_size": self.patch_size,
            "in_channels": self.in_channels,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "num_heads": self.num_heads,
            "decoder_embed_dim": self.decoder_embed_dim,
            "decoder_depth": self.decoder_depth,
            "decoder_num_heads": self.decoder_num_heads,
            "mlp_ratio": self.mlp_ratio,
            "mask_ratio": self.mask_ratio,
            "heads_out": ",".join(self.heads_out),
            "layer_norm_eps": self.layer_norm_eps,
        }

    @classmethod
    def from_dict(cls, data: dict[str, str]) -> ArchConfig:
        ints = (
            "crop_size",
            "patch_size",
            "in_channels",
            "embed_dim",
            "depth",
            "num_heads",
            "decoder_embed_dim",
            "decoder_depth",
            "decoder_num_heads",
            "mlp_ratio",
        )
        try:
            kwargs: dict[str, object] = {k: int(data[k]) for k in ints}
            kwargs["mask_ratio"] = float(data["mask_ratio"])
            kwargs["layer_norm_eps"] = float(data["layer_norm_eps"])
            heads = str(data["heads_out"]).split(",")
            kwargs["heads_out"] = tuple(h for h in heads if h)
        except (KeyError, ValueError) as e:
            raise ConfigurationError(f"Некорректное описание архитектуры: {e}") from e
        return cls(**kwargs)


# --- позиционные таблицы ----------------------------------------------------


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000**omega
    out = np.outer(positions.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid_size: int) -> np.ndarray:
    """Фиксированная 2D sin-cos таблица [grid², dim], порядок патчей построчный."""
    rows, cols = np.meshgrid(
        np.arange(grid_size, dtype=np.float64),
        np.arange(grid_size, dtype=np.float64),
        indexing="ij",
    )
    emb_h = _sincos_1d(dim // 2, rows)
    emb_w = _sincos_1d(dim // 2, cols)
    return np.concatenate([emb_h, emb_w], axis=1)


# --- веса -------------------------------------------------------------------


def _block_shapes(
    prefix: str, dim: int, mlp_ratio: int
) -> list[tuple[str, tuple[int, ...]]]:
    hidden = dim * mlp_ratio
    shapes: list[tuple[str, tuple[int, ...]]] = [
        (f"{prefix}.norm1.weight", (dim,)),
        (f"{prefix}.norm1.bias", (dim,)),
    ]
    for proj in ("q", "k", "v", "proj"):
        shapes.append((f"{prefix}.attn.{proj}.weight", (dim, dim)))
        shapes.append((f"{prefix}.attn.{proj}.bias", (dim,)))
    shapes += [
        (f"{prefix}.norm2.weight", (dim,)),
        (f"{prefix}.norm2.bias", (dim,)),
        (f"{prefix}.mlp.fc1.weight", (dim, hidden)),
        (f"{prefix}.mlp.fc1.bias", (hidden,)),
        (f"{prefix}.mlp.fc2.weight", (hidden, dim)),
        (f"{prefix}.mlp.fc2.bias", (dim,)),
    ]
    return shapes


def parameter_shapes(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    e, d = arch.embed_dim, arch.decoder_embed_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("patch_embed.weight", (arch.patch_dim, e)),
        ("patch_embed.bias", (e,)),
    ]
    for i in range(arch.depth):
        shapes += _block_shapes(f"encoder.{i}", e, arch.mlp_ratio)
    shapes += [
        ("decoder_embed.weight", (e, d)),
        ("decoder_embed.bias", (d,)),
        ("mask_token", (d,)),
    ]
    for i in range(arch.decoder_depth):
        shapes += _block_shapes(f"decoder.{i}", d, arch.mlp_ratio)
    shapes += [("decoder.norm.weight", (d,)), ("decoder.norm.bias", (d,))]
    for head in arch.heads_out:
        shapes += [
            (f"head.{head}.weight", (d, arch.pixels_per_patch)),
            (f"head.{head}.bias", (arch.pixels_per_patch,)),
        ]
    return shapes


@dataclass
class ModelWeights:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    target_scales: dict[str, float] = field(default_factory=dict)

    @classmethod
    def initialize(
        cls,
        arch: ArchConfig,
        rng: np.random.Generator,
        dtype: type | None = None,
    ) -> ModelWeights:
        """Xavier-uniform для матриц, нули для смещений, единицы для LayerNorm."""
        dtype = dtype or T.default_dtype()
        params: dict[str, np.ndarray] = {}
        for name, shape in parameter_shapes(arch):
            if name == "mask_token":
                value = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith("norm1.weight") or name.endswith("norm2.weight") or (
                name == "decoder.norm.weight"
            ):
                value = np.ones(shape)
            elif len(shape) == 2:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, size=shape)
            else:
                value = np.zeros(shape)
            params[name] = value.astype(dtype)
        return cls(arch, params, {h: 1.0 for h in arch.heads_out})

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> ModelWeights:
        return ModelWeights(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            dict(self.target_scales),
        )

    def astype(self, dtype: type) -> ModelWeights:
        return ModelWeights(
            self.arch,
            {k: v.astype(dtype) for k, v in self.params.items()},
            dict(self.target_scales),
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, value in self.params.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return h.hexdigest()

    def bind(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {
            name: Tensor(value, requires_grad=requires_grad, name=name)
            for name, value in self.params.items()
        }

    @cached_property
    def encoder_pos(self) -> np.ndarray:
        return sincos_2d(self.arch.embed_dim, self.arch.grid_size)

    @cached_property
    def decoder_pos(self) -> np.ndarray:
        return sincos_2d(self.arch.decoder_embed_dim, self.arch.grid_size)


# --- патчи и маскирование ---------------------------------------------------


def patchify(channels: np.ndarray, patch_size: int) -> np.ndarray:
    """
    [..., C, S, S] -> [..., N, p²·C], патчи построчно, внутри патча (p, p, C).
    """
    channels = np.asarray(channels)
    *lead, c, h, w = channels.shape
    if h != w or h % patch_size:
        raise ConfigurationError(
            f"Размер кропа {h}x{w} не делится на патч {patch_size}"
        )
    g = h // patch_size
    x = channels.reshape(*lead, c, g, patch_size, g, patch_size)
    n = len(lead)
    x = np.transpose(x, (*range(n), n + 1, n + 3, n + 2, n + 4, n))
    return x.reshape(*lead, g * g, patch_size * patch_size * c)


def unpatchify(tokens: np.ndarray, patch_size: int, channels: int = 1) -> np.ndarray:
    """Обратное к patchify: [..., N, p²·C] -> [..., C, S, S] (C=1 схлопывается)."""
    tokens = np.asarray(tokens)
    *lead, num, dim = tokens.shape
    g = int(round(math.sqrt(num)))
    if g * g != num or dim != patch_size * patch_size * channels:
        raise ContractError(
            f"unpatchify: {num} токенов длины {dim} "
            f"не образуют кроп с патчем {patch_size}"
        )
    n = len(lead)
    x = tokens.reshape(*lead, g, g, patch_size, patch_size, channels)
    x = np.transpose(x, (*range(n), n + 4, n, n + 2, n + 1, n + 3))
    out = x.reshape(*lead, channels, g * patch_size, g * patch_size)
    return out[..., 0, :, :] if channels == 1 else out


@dataclass(frozen=True)
class MaskSpec:
    """
    keep: отсортированные индексы видимых патчей [..., K];
    restore: перестановка из порядка (keep, masked) в исходный [..., N];
    mask: 1 для скрытых патчей [..., N].
    """

    ratio: float
    keep: np.ndarray
    restore: np.ndarray
    mask: np.ndarray

    @property
    def num_patches(self) -> int:
        return int(self.mask.shape[-1])

    @property
    def num_visible(self) -> int:
        return int(self.keep.shape[-1])

    @property
    def num_masked(self) -> int:
        return self.num_patches - self.num_visible


def visible_count(num_patches: int, ratio: float) -> int:
    return num_patches - math.floor(ratio * num_patches)


def random_mask(
    tokens: np.ndarray | Tensor,
    ratio: float,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, MaskSpec]:
    """
    Случайное равномерное подмножество видимых патчей.

    tokens [..., N, D]; |keep| = N - floor(ratio·N). При ratio=0 порядок
    сохраняется и маска нулевая.
    """
    if not 0.0 <= ratio < 1.0:
        raise ContractError(f"random_mask: ratio {ratio} вне [0, 1)")
    x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    *lead, n, _ = x.shape
    lead = tuple(lead)
    k = visible_count(n, ratio)
    if k == n:
        keep = np.broadcast_to(np.arange(n), lead + (n,)).copy()
        spec = MaskSpec(ratio, keep, keep.copy(), np.zeros(lead + (n,)))
        return x, spec
    rng = rng if rng is not None else np.random.default_rng(0)
    noise = rng.random(lead + (n,))
    order = np.argsort(noise, axis=-1, kind="stable")
    keep = np.sort(order[..., :k], axis=-1)
    mask = np.ones(lead + (n,))
    np.put_along_axis(mask, keep, 0.0, axis=-1)
    masked = np.sort(order[..., k:], axis=-1)
    order_back = np.concatenate([keep, masked], axis=-1)
    restore = np.argsort(order_back, axis=-1, kind="stable")
    spec = MaskSpec(ratio, keep, restore, mask)
    return T.gather(x, keep), spec


def full_visibility(lead: tuple[int, ...], num_patches: int) -> MaskSpec:
    keep = np.broadcast_to(np.arange(num_patches), lead + (num_patches,)).copy()
    return MaskSpec(0.0, keep, keep.copy(), np.zeros(lead + (num_patches,)))


# --- трансформер ---------------------------------------------------------------


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    *lead, tokens, dim = x.shape
    head_dim = dim // heads

    def split(name: str) -> Tensor:
        y = _linear(x, params, f"{prefix}.{name}")
        y = T.reshape(y, (*lead, tokens, heads, head_dim))
        n = len(lead)
        return T.transpose(y, (*range(n), n + 1, n, n + 2))

    q, k, v = split("q"), split("k"), split("v")
    n = len(lead)
    k_t = T.transpose(k, (*range(n + 1), n + 2, n + 1))
    scores = T.scale(T.matmul(q, k_t), 1.0 / math.sqrt(head_dim))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    out = T.transpose(out, (*range(n), n + 1, n, n + 2))
    out = T.reshape(out, (*lead, tokens, dim))
    return _linear(out, params, f"{prefix}.proj")


def _norm(x: Tensor, params: dict[str, Tensor], prefix: str, eps: float) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], eps)


def _block(
    x: Tensor, params: dict[str, Tensor], prefix: str, heads: int, eps: float
) -> Tensor:
    h = _norm(x, params, f"{prefix}.norm1", eps)
    x = x + _attention(h, params, f"{prefix}.attn", heads)
    h = _norm(x, params, f"{prefix}.norm2", eps)
    h = T.gelu(_linear(h, params, f"{prefix}.mlp.fc1"))
    return x + _linear(h, params, f"{prefix}.mlp.fc2")


def _as_params(weights: ModelWeights | dict[str, Tensor]) -> dict[str, Tensor]:
    return weights.bind() if isinstance(weights, ModelWeights) else weights


def _const_like(values: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.broadcast_to(values.astype(like.dtype), like.shape))


def encode(
    visible: Tensor,
    mask_spec: MaskSpec,
    weights: ModelWeights,
    params: dict[str, Tensor] | None = None,
) -> Tensor:
    """Проекция видимых патчей + позиции (по keep) + блоки энкодера."""
    arch = weights.arch
    params = params if params is not None else weights.bind()
    if visible.shape[-1] != arch.patch_dim:
        raise ConfigurationError(
            f"Длина токена {visible.shape[-1]} "
            f"не совпадает с проекцией {arch.patch_dim}"
        )
    if visible.shape[-2] != mask_spec.num_visible:
        raise ContractError(
            f"Видимых токенов {visible.shape[-2]}, "
            f"а MaskSpec ожидает {mask_spec.num_visible}"
        )
    x = _linear(visible, params, "patch_embed")
    x = x + _const_like(weights.encoder_pos[mask_spec.keep], x)
    for i in range(arch.depth):
        x = _block(x, params, f"encoder.{i}", arch.num_heads, arch.layer_norm_eps)
    return x


def decode(
    latents: Tensor,
    mask_spec: MaskSpec,
    weights: ModelWeights,
    params: dict[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    """
    Латенты + маск-токены -> [..., N, p²] для каждой головы.

    Маск-токены вставляются в скрытые позиции, restore возвращает
    исходный порядок, позиции декодера добавляются ко всем N токенам.
    """
    arch = weights.arch
    params = params if params is not None else weights.bind()
    if (
        latents.shape[-2] != mask_spec.num_visible
        or mask_spec.num_patches != arch.num_patches
    ):
        raise ContractError(
            f"MaskSpec ({mask_spec.num_visible}/{mask_spec.num_patches}) не согласован "
            f"с латентами {latents.shape} и {arch.num_patches} патчами"
        )
    x = _linear(latents, params, "decoder_embed")
    if mask_spec.num_masked:
        *lead, _, dim = x.shape
        tokens = T.expand(params["mask_token"], (*lead, mask_spec.num_masked, dim))
        x = T.concat([x, tokens], axis=-2)
        x = T.gather(x, mask_spec.restore)
    x = x + _const_like(weights.decoder_pos, x)
    return _decoder_trunk(x, weights, params)


def _decoder_trunk(
    x: Tensor, weights: ModelWeights, params: dict[str, Tensor]
) -> dict[str, Tensor]:
    arch = weights.arch
    eps = arch.layer_norm_eps
    for i in range(arch.decoder_depth):
        x = _block(x, params, f"decoder.{i}", arch.decoder_num_heads, eps)
    x = _norm(x, params, "decoder.norm", eps)
    return {head: _linear(x, params, f"head.{head}") for head in arch.heads_out}


def resolve_loss_policy(policy: str, ratio: float) -> str:
    if policy not in LOSS_POLICIES:
        raise ConfigurationError(f"Неизвестная политика потерь '{policy}'")
    if policy == "auto":
        return "masked" if ratio > 0 else "all"
    return policy


def loss_per_patch(
    pred: Tensor,
    target: np.ndarray,
    mask_policy: str = "all",
    mask: np.ndarray | None = None,
) -> Tensor:
    """
    Среднее по патчам от поатчевой MSE.

    mask_policy="masked" учитывает только патчи с mask=1.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ContractError(
            f"loss_per_patch: форма предсказания {pred.shape} и цели {target.shape}"
        )
    diff = pred - Tensor(target.astype(pred.dtype))
    per_patch = T.mean(T.square(diff), axis=-1)
    if mask_policy == "all":
        return T.mean(per_patch)
    if mask_policy != "masked":
        raise ContractError(f"Неизвестная политика патчей '{mask_policy}'")
    if mask is None or np.shape(mask) != per_patch.shape:
        raise ContractError("loss_per_patch: для masked нужна маска формы [..., N]")
    weight = np.asarray(mask, dtype=pred.dtype)
    count = float(weight.sum())
    if count <= 0:
        raise ContractError("loss_per_patch: нет скрытых патчей для masked-политики")
    return T.scale(T.tsum(per_patch * Tensor(weight)), 1.0 / count)


def forward(
    channels: np.ndarray,
    weights: ModelWeights,
    ratio: float | None = None,
    rng: np.random.Generator | None = None,
    params: dict[str, Tensor] | None = None,
) -> tuple[dict[str, Tensor], MaskSpec]:
    """patchify -> random_mask -> encode -> decode; [C,S,S] или [B,C,S,S]."""
    arch = weights.arch
    ratio = arch.mask_ratio if ratio is None else ratio
    channels = np.asarray(channels)
    if channels.shape[-3:] != (arch.in_channels, arch.crop_size, arch.crop_size):
        raise ContractError(
            f"Кроп формы {channels.shape[-3:]} не соответствует архитектуре "
            f"({arch.in_channels}, {arch.crop_size}, {arch.crop_size})"
        )
    params = params if params is not None else weights.bind()
    dtype = params["patch_embed.weight"].dtype
    tokens = Tensor(patchify(channels, arch.patch_size).astype(dtype))
    visible, spec = random_mask(tokens, ratio, rng)
    latents = encode(visible, spec, weights, params)
    return decode(latents, spec, weights, params), spec


def forward_reference(
    channels: np.ndarray,
    weights: ModelWeights,
    params: dict[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    """Прямой путь ViT без механизма маскирования (эталон для ratio=0)."""
    arch = weights.arch
    params = params if params is not None else weights.bind()
    dtype = params["patch_embed.weight"].dtype
    tokens = Tensor(patchify(np.asarray(channels), arch.patch_size).astype(dtype))
    x = _linear(tokens, params, "patch_embed")
    x = x + _const_like(weights.encoder_pos, x)
    for i in range(arch.depth):
        x = _block(x, params, f"encoder.{i}", arch.num_heads, arch.layer_norm_eps)
    x = _linear(x, params, "decoder_embed")
    x = x + _const_like(weights.decoder_pos, x)
    return _decoder_trunk(x, weights, params)


def with_mask_ratio(arch: ArchConfig, ratio: float) -> ArchConfig:
    return replace(arch, mask_ratio=ratio)
