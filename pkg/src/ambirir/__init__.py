"""Early-reflection analysis of Ambisonic recordings via generalized
time-domain velocity vectors and reduced room impulse responses."""

__version__ = "0.1.0"
