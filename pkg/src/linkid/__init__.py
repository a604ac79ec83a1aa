"""Link-error identification and adaptive Monte Carlo uncertainty for five-axis machine tools."""

__version__ = "0.1.0"
