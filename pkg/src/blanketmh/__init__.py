"""Single-site MCMC on open-universe graphical models with learned blanket proposals."""

from .graph import Address, Model, World, addr, ancestral_sample, markov_blanket, random_variable

__all__ = ["Address", "Model", "World", "addr", "ancestral_sample", "markov_blanket", "random_variable"]
__version__ = "0.1.0"
