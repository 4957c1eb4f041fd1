"""Deep switching state space model: generative net, structured inference, training and forecasting."""

__version__ = "0.1.0"
