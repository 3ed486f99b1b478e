"""Channel selection for red-channel input policies.

Images are always held in R,G,B plane order internally; anything read from
disk in another order is converted at load time (see ``laanet.data``).
"""
from dataclasses import dataclass

import torch

CHANNEL_INDEX = {"R": 0, "G": 1, "B": 2}

# Nominal wavelengths (nm) used by the synthetic scattering model.
WAVELENGTH_NM = {"R": 700.0, "G": 550.0, "B": 450.0}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    selection: tuple

    def __post_init__(self):
        sel = tuple(self.selection)
        if not sel:
            raise ValueError("channel spec must select at least one channel")
        bad = [c for c in sel if c not in CHANNEL_INDEX]
        if bad:
            raise ValueError(f"unknown channel(s) {bad!r}; expected letters from 'RGB'")
        if len(set(sel)) != len(sel):
            raise ValueError(f"duplicate channel in spec {''.join(sel)!r}")
        object.__setattr__(self, "selection", sel)

    @classmethod
    def parse(cls, text: str) -> "ChannelSpec":
        return cls(tuple(text.strip().upper()))

    def __str__(self):
        return "".join(self.selection)

    def __len__(self):
        return len(self.selection)

    @property
    def indices(self):
        return [CHANNEL_INDEX[c] for c in self.selection]


def as_spec(spec) -> ChannelSpec:
    return spec if isinstance(spec, ChannelSpec) else ChannelSpec.parse(spec)


def extract_channels(img: torch.Tensor, spec, replicate_to: int = None) -> torch.Tensor:
    """Select colour planes from an ``(B, 3, H, W)`` or ``(3, H, W)`` RGB tensor.

    With ``replicate_to`` set (e.g. 3), a single selected plane is tiled to that
    many channels so a 3-channel encoder can consume it.
    """
    spec = as_spec(spec)
    cdim = img.dim() - 3
    if img.dim() not in (3, 4) or img.shape[cdim] != 3:
        raise ShapeError(f"expected an RGB image with 3 channels, got shape {tuple(img.shape)}")
    out = img.index_select(cdim, torch.tensor(spec.indices, device=img.device))
    if replicate_to is not None and len(spec) == 1 and replicate_to > 1:
        reps = [1] * img.dim()
        reps[cdim] = replicate_to
        out = out.repeat(*reps)
    return out


def rayleigh_scattering_ratio(wavelength_a: float, wavelength_b: float) -> float:
    """Scattered intensity at ``wavelength_a`` relative to ``wavelength_b`` (I_s ~ 1/lambda^4)."""
    if wavelength_a <= 0 or wavelength_b <= 0:
        raise ValueError(f"wavelengths must be positive, got {wavelength_a}, {wavelength_b}")
    return (wavelength_b / wavelength_a) ** 4
