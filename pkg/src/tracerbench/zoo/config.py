"""Architecture configuration and size presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..exceptions import InvalidArgumentError, OutOfScopeError

ARCHS = ("unet", "swin", "sfno")
OUT_OF_SCOPE = ("graphcast",)
NORMS = ("batch", "layer", "none")
FINAL_INITS = ("zero", "default")


@dataclass(frozen=True)
class ArchConfig:
    """Hyperparameters of one emulator network.

    ``depth`` counts encoder stages (unet), transformer layers (swin) or
    spectral blocks (sfno). ``lmax=None`` picks the largest degree the grid
    supports.
    """

    id: str = "swin"
    width: int = 64
    depth: int = 4
    window: tuple = (4, 8)
    patch_size: int = 1
    lmax: int | None = None
    heads: int = 4
    norm: str = "layer"
    final_init: str = "zero"
    mlp_ratio: float = 2.0
    shift: bool = True

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        if self.id in OUT_OF_SCOPE:
            raise OutOfScopeError(f"architecture {self.id!r} is out of scope for this package")
        if self.id not in ARCHS:
            raise InvalidArgumentError(f"unknown architecture {self.id!r}; expected one of {ARCHS}")
        if self.width < 1 or self.depth < 1:
            raise InvalidArgumentError("width and depth must be positive")
        if self.patch_size < 1:
            raise InvalidArgumentError("patch size must be >= 1")
        if self.norm not in NORMS:
            raise InvalidArgumentError(f"unknown norm {self.norm!r}")
        if self.final_init not in FINAL_INITS:
            raise InvalidArgumentError(f"unknown final_init {self.final_init!r}")
        if self.id == "swin":
            if len(self.window) != 2 or min(self.window) < 1:
                raise InvalidArgumentError("swin window must be two positive extents")
            if self.width % self.heads:
                raise InvalidArgumentError(f"width {self.width} not divisible by {self.heads} heads")
        if self.id == "sfno" and self.lmax is not None and self.lmax < 0:
            raise InvalidArgumentError("lmax must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["window"] = list(self.window)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidArgumentError(f"unknown arch keys: {', '.join(unknown)}")
        return cls(**d)


# Size tiers are free presets; they are not tied to any published channel counts.
PRESETS = {
    ("unet", "S"): dict(width=16, depth=4, norm="batch"),
    ("unet", "M"): dict(width=32, depth=4, norm="batch"),
    ("unet", "L"): dict(width=64, depth=4, norm="batch"),
    ("swin", "tiny"): dict(width=64, depth=4, heads=4, window=(4, 8)),
    ("swin", "S"): dict(width=64, depth=12, heads=4, window=(4, 8)),
    ("swin", "M"): dict(width=128, depth=12, heads=8, window=(4, 8)),
    ("swin", "L"): dict(width=192, depth=12, heads=8, window=(4, 8)),
    ("sfno", "S"): dict(width=32, depth=4, norm="none"),
    ("sfno", "M"): dict(width=64, depth=6, norm="none"),
    ("sfno", "L"): dict(width=128, depth=8, norm="none"),
}


def preset(arch, size="S", **overrides):
    """Config for a named ``(arch, size)`` tier, with field overrides."""
    if arch in OUT_OF_SCOPE:
        raise OutOfScopeError(f"architecture {arch!r} is out of scope for this package")
    key = (arch, size)
    if key not in PRESETS:
        raise InvalidArgumentError(f"no preset {size!r} for {arch!r}")
    return ArchConfig(id=arch, **{**PRESETS[key], **overrides})
