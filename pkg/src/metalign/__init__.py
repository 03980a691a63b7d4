"""Cross-organism metabolic graph alignment, knowledge transfer and
gene-metabolite association prediction."""

__version__ = "0.1.0"
