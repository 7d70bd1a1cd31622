"""Diffusion-transformer super-resolution on a small numpy autodiff engine.

Modules, bottom-up: ``tensor`` (autodiff), ``fourier``, ``blocks``,
``architecture``, ``diffusion``, then the harness ``data``, ``train`` and
``cli``.
"""

from .architecture import DenoiserConfig, PRESETS, build_denoiser, preset
from .diffusion import ShiftSchedule, build_schedule, sample
from .tensor import Tensor

__all__ = ["DenoiserConfig", "PRESETS", "ShiftSchedule", "Tensor", "build_denoiser", "build_schedule",
           "preset", "sample"]
__version__ = "0.1.0"
