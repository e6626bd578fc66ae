"""seadet: probabilistic two-stage detection with domain-generalization
training on procedurally generated multi-domain underwater scenes."""

__version__ = "0.1.0"
