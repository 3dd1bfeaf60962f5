from .export_gpt2 import export_checkpoint, verify

__all__ = ["export_checkpoint", "verify"]
__version__ = "0.1.0"
