"""Direct-transcription parameter estimation for ODE models."""

__version__ = "0.1.0"
