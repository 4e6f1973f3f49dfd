"""CPU Gaussian splatting with Metropolis-Hastings birth/relocation densification.

Submodules are imported lazily so that the command-line front end can size the
numba thread pool before the compositing kernels are loaded.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = ("scene", "render", "objective", "importance", "sampler", "trainer", "synth",
               "metrics", "baseline", "probe", "io", "plotting", "cli")

_EXPORTS = {
    "GaussianCloud": "scene", "GaussianSplat": "scene", "Camera": "scene", "ImageBuffer": "scene",
    "ContractError": "scene", "render": "render", "render_backward": "render", "loss": "objective",
    "TrainConfig": "trainer", "train": "trainer", "evaluate": "metrics", "Dataset": "synth",
    "default_dataset": "synth", "surrogate_correlation": "probe",
}

__all__ = list(_SUBMODULES) + list(_EXPORTS)


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
