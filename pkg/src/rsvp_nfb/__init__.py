"""Neurofeedback-augmented RSVP BCI engine."""
__version__ = "0.1.0"
