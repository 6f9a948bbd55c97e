"""Multi-timescale LSTM rainfall-runoff models on NumPy.

Modules: ``timeseries`` (regular series, aggregation, sequence layouts),
``dataset`` and ``synth`` (data layout and synthetic basins), ``core`` (LSTM
cell and exact gradients), ``model`` (branched architectures), ``loss``,
``metrics``, ``train`` and ``cli``.
"""
__version__ = "0.1.0"
