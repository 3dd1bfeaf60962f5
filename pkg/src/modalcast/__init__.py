"""Dual-branch frozen-transformer forecasting with cross-modal alignment.

Submodules are imported lazily so the CLI can pin BLAS threads before
numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = ("backbone", "cli", "config", "container", "data", "errors",
               "losses", "match", "metrics", "model", "optim", "tensor",
               "trainer")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
