"""StableMask laboratory: a small decoder-only transformer with the
StableMask causal-mask replacement, its blocked forward pass, cached
inference, synthetic position tasks and attention probes."""

__version__ = "0.1.0"
